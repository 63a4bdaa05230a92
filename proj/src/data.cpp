#include "modal_emu/data.hpp"
#include "modal_emu/seed.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <numbers>
#include <random>
#include <sstream>

#include <json.hpp>

#include "modal_emu/tensor.hpp"

namespace modal_emu {

namespace fs = std::filesystem;

ParseError::ParseError(const fs::path& path, std::size_t offset, const std::string& what)
    : std::runtime_error(path.string() + " (byte " + std::to_string(offset) + "): " + what), path_(path), offset_(offset) {}

void ModalSample::validate() const {
    if (rgb.channels != 3 || aux.channels != 1) throw DimensionError("sample " + id + ": expected 3-channel RGB and 1-channel aux");
    if (rgb.height != aux.height || rgb.width != aux.width)
        throw DimensionError("sample " + id + ": RGB and aux extents differ");
    if (rgb.height % 8 != 0 || rgb.width % 8 != 0)
        throw DimensionError("sample " + id + ": extents " + std::to_string(rgb.height) + "x" + std::to_string(rgb.width) +
                             " are not multiples of 8");
    for (const auto& p : points) {
        if (!(p.x >= 0.0 && p.y >= 0.0 && p.x < static_cast<double>(rgb.width) && p.y < static_cast<double>(rgb.height)))
            throw ContractError("sample " + id + ": annotation outside the image");
    }
}

void SceneSpec::validate() const {
    if (height == 0 || width == 0 || height % 8 != 0 || width % 8 != 0)
        throw DimensionError("scene extents must be positive multiples of 8");
    if (min_people > max_people) throw ContractError("person count range is empty");
    if (min_distractors > max_distractors) throw ContractError("distractor count range is empty");
    if (!(min_radius > 0.0) || min_radius > max_radius) throw ContractError("blob radius range is invalid");
    if (illumination < 0.0 || illumination > 1.0) throw ContractError("illumination must lie in [0, 1]");
    if (occlusion_prob < 0.0 || occlusion_prob > 1.0) throw ContractError("occlusion probability must lie in [0, 1]");
    if (rgb_noise < 0.0 || aux_noise < 0.0) throw ContractError("noise levels must be non-negative");
}

namespace {

double quantise(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 65535.0) / 65535.0; }

// Smooth background texture: a few random plane waves.
struct Texture {
    struct Wave {
        double fx, fy, phase, amp;
    };
    std::vector<Wave> waves;

    Texture(std::mt19937_64& rng, double amplitude) {
        std::uniform_real_distribution<double> freq(0.02, 0.12), phase(0.0, 2.0 * std::numbers::pi), amp(0.3, 1.0);
        for (int i = 0; i < 3; ++i) waves.push_back({freq(rng), freq(rng), phase(rng), amplitude * amp(rng) / 3.0});
    }
    double operator()(double x, double y) const {
        double v = 0.0;
        for (const auto& w : waves) v += w.amp * std::sin(2.0 * std::numbers::pi * (w.fx * x + w.fy * y) + w.phase);
        return v;
    }
};

struct Blob {
    double x, y, r;
};

double gaussian_profile(const Blob& b, double px, double py) {
    const double dx = px - b.x, dy = py - b.y;
    return std::exp(-(dx * dx + dy * dy) / (2.0 * b.r * b.r));
}

}  // namespace

ModalSample generate(const SceneSpec& spec, const std::string& id) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const auto H = spec.height, W = spec.width;

    const std::size_t people = std::uniform_int_distribution<std::size_t>(spec.min_people, spec.max_people)(rng);
    const std::size_t distractors =
        std::uniform_int_distribution<std::size_t>(spec.min_distractors, spec.max_distractors)(rng);
    std::uniform_real_distribution<double> radius(spec.min_radius, spec.max_radius);
    const double margin = 1.0;
    std::uniform_real_distribution<double> px(margin, static_cast<double>(W) - margin);
    std::uniform_real_distribution<double> py(margin, static_cast<double>(H) - margin);

    std::vector<Blob> persons, warm;
    std::vector<bool> occluded;
    std::vector<std::array<double, 3>> colours;
    for (std::size_t i = 0; i < people; ++i) {
        persons.push_back({px(rng), py(rng), radius(rng)});
        occluded.push_back(unit(rng) < spec.occlusion_prob);
        colours.push_back({unit(rng), unit(rng), unit(rng)});
    }
    for (std::size_t i = 0; i < distractors; ++i) warm.push_back({px(rng), py(rng), radius(rng)});

    std::array<double, 3> base{};
    for (auto& b : base) b = 0.3 + 0.3 * unit(rng);
    const Texture rgb_texture(rng, 0.08), aux_texture(rng, 0.05);
    const double light = 0.15 + 0.85 * spec.illumination;
    const double contrast = spec.illumination;

    ModalSample s;
    s.id = id;
    s.rgb = Image{3, H, W, std::vector<double>(3 * H * W)};
    s.aux = Image{1, H, W, std::vector<double>(H * W)};

    for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
            const double cx = static_cast<double>(x) + 0.5, cy = static_cast<double>(y) + 0.5;
            std::array<double, 3> pix{};
            for (int c = 0; c < 3; ++c) pix[c] = base[c] + rgb_texture(cx, cy);
            double heat = 0.2 + aux_texture(cx, cy);

            for (const auto& d : warm) {
                heat += 0.7 * gaussian_profile(d, cx, cy);
                // Boxy and dark in RGB, unlike the round coloured people.
                if (std::fabs(cx - d.x) <= d.r && std::fabs(cy - d.y) <= d.r)
                    for (int c = 0; c < 3; ++c) pix[c] = (1.0 - contrast) * pix[c] + contrast * 0.1;
            }
            for (std::size_t i = 0; i < persons.size(); ++i) {
                const double prof = gaussian_profile(persons[i], cx, cy);
                heat += 0.7 * prof;
                if (occluded[i]) continue;
                const double a = contrast * prof;
                for (int c = 0; c < 3; ++c) pix[c] = (1.0 - a) * pix[c] + a * colours[i][c];
            }
            for (int c = 0; c < 3; ++c) s.rgb.at(c, y, x) = light * pix[c];
            s.aux.at(0, y, x) = heat;
        }
    }

    std::normal_distribution<double> rgb_noise(0.0, spec.rgb_noise), aux_noise(0.0, spec.aux_noise);
    for (auto& v : s.rgb.values) v = quantise(v + (spec.rgb_noise > 0.0 ? rgb_noise(rng) : 0.0));
    for (auto& v : s.aux.values) v = quantise(v + (spec.aux_noise > 0.0 ? aux_noise(rng) : 0.0));
    for (const auto& p : persons) s.points.push_back({p.x, p.y});
    return s;
}

// ---------------------------------------------------------------------------
// PNM

namespace {

void write_pnm(const fs::path& path, const Image& image, const char* magic) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << magic << '\n' << image.width << ' ' << image.height << "\n65535\n";
    std::vector<unsigned char> bytes;
    bytes.reserve(image.values.size() * 2);
    // Interleave channels per pixel.
    for (std::size_t y = 0; y < image.height; ++y)
        for (std::size_t x = 0; x < image.width; ++x)
            for (std::size_t c = 0; c < image.channels; ++c) {
                const auto q = static_cast<unsigned>(std::lround(std::clamp(image.at(c, y, x), 0.0, 1.0) * 65535.0));
                bytes.push_back(static_cast<unsigned char>(q >> 8));
                bytes.push_back(static_cast<unsigned char>(q & 0xFF));
            }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

class HeaderReader {
   public:
    HeaderReader(const fs::path& path, const std::string& bytes, std::size_t start)
        : path_(path), bytes_(bytes), pos_(start) {}

    std::size_t pos() const { return pos_; }

    void skip_space_and_comments() {
        while (pos_ < bytes_.size()) {
            const char c = bytes_[pos_];
            if (c == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
            } else if (std::isspace(static_cast<unsigned char>(c))) {
                ++pos_;
            } else {
                break;
            }
        }
    }

    std::size_t number(const char* what) {
        skip_space_and_comments();
        const std::size_t start = pos_;
        std::size_t v = 0;
        while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
            v = v * 10 + static_cast<std::size_t>(bytes_[pos_] - '0');
            if (v > 1'000'000) throw ParseError(path_, start, std::string(what) + " is implausibly large");
            ++pos_;
        }
        if (pos_ == start) throw ParseError(path_, start, std::string("expected ") + what);
        return v;
    }

    void single_whitespace() {
        if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_])))
            throw ParseError(path_, pos_, "expected whitespace after header");
        ++pos_;
    }

   private:
    const fs::path& path_;
    const std::string& bytes_;
    std::size_t pos_;
};

}  // namespace

void write_ppm16(const fs::path& path, const Image& image) {
    if (image.channels != 3) throw DimensionError("PPM needs a 3-channel image");
    write_pnm(path, image, "P6");
}

void write_pgm16(const fs::path& path, const Image& image) {
    if (image.channels != 1) throw DimensionError("PGM needs a 1-channel image");
    write_pnm(path, image, "P5");
}

Image read_pnm(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError(path, 0, "cannot open file");
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
        throw ParseError(path, 0, "missing P5/P6 magic");
    const std::size_t channels = bytes[1] == '6' ? 3 : 1;
    HeaderReader r(path, bytes, 2);
    const std::size_t width = r.number("width");
    const std::size_t height = r.number("height");
    const std::size_t maxval_at = r.pos();
    const std::size_t maxval = r.number("maxval");
    if (width == 0 || height == 0) throw ParseError(path, maxval_at, "zero image extent");
    if (maxval == 0 || maxval > 65535) throw ParseError(path, maxval_at, "maxval must lie in [1, 65535]");
    r.single_whitespace();

    const std::size_t sample_bytes = maxval > 255 ? 2 : 1;
    const std::size_t data_at = r.pos();
    const std::size_t needed = width * height * channels * sample_bytes;
    if (bytes.size() - data_at < needed)
        throw ParseError(path, bytes.size(), "truncated pixel data: need " + std::to_string(needed) + " bytes after offset " +
                                                  std::to_string(data_at));

    Image img{channels, height, width, std::vector<double>(channels * height * width)};
    std::size_t at = data_at;
    const double denom = static_cast<double>(maxval);
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x)
            for (std::size_t c = 0; c < channels; ++c) {
                unsigned v = static_cast<unsigned char>(bytes[at]);
                if (sample_bytes == 2) v = (v << 8) | static_cast<unsigned char>(bytes[at + 1]);
                if (v > maxval) throw ParseError(path, at, "sample exceeds maxval");
                img.at(c, y, x) = static_cast<double>(v) / denom;
                at += sample_bytes;
            }
    return img;
}

void save_sample(const fs::path& dir, const ModalSample& sample) {
    sample.validate();
    const fs::path target = dir / sample.id;
    fs::create_directories(target);
    write_ppm16(target / "rgb.ppm", sample.rgb);
    write_pgm16(target / "aux.pgm", sample.aux);
    nlohmann::json doc;
    doc["points"] = nlohmann::json::array();
    for (const auto& p : sample.points) doc["points"].push_back({p.x, p.y});
    std::ofstream out(target / "points.json");
    out << doc.dump() << '\n';
    if (!out) throw std::runtime_error("failed writing " + (target / "points.json").string());
}

namespace {

AnnotationSet read_points(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError(path, 0, "cannot open file");
    const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError(path, e.byte, e.what());
    }
    if (!doc.is_object() || !doc.contains("points") || !doc["points"].is_array())
        throw ParseError(path, 0, "expected an object with a \"points\" array");
    AnnotationSet pts;
    for (const auto& p : doc["points"]) {
        if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number())
            throw ParseError(path, 0, "each point must be a [x, y] pair of numbers");
        pts.push_back({p[0].get<double>(), p[1].get<double>()});
    }
    return pts;
}

}  // namespace

ModalSample load_sample(const fs::path& sample_dir) {
    ModalSample s;
    s.id = sample_dir.filename().string();
    for (const char* name : {"rgb.ppm", "aux.pgm", "points.json"})
        if (!fs::exists(sample_dir / name)) throw ParseError(sample_dir / name, 0, "missing sample file");
    s.rgb = read_pnm(sample_dir / "rgb.ppm");
    s.aux = read_pnm(sample_dir / "aux.pgm");
    if (s.rgb.channels != 3) throw ParseError(sample_dir / "rgb.ppm", 0, "expected a P6 (RGB) image");
    if (s.aux.channels != 1) throw ParseError(sample_dir / "aux.pgm", 0, "expected a P5 (grey) image");
    s.points = read_points(sample_dir / "points.json");
    s.validate();
    return s;
}

std::vector<ModalSample> load_split(const fs::path& root, const std::string& split) {
    const fs::path dir = root / split;
    if (!fs::is_directory(dir)) throw ContractError("dataset split directory not found: " + dir.string());
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    std::vector<ModalSample> out;
    out.reserve(dirs.size());
    for (const auto& d : dirs) out.push_back(load_sample(d));
    return out;
}

// ---------------------------------------------------------------------------
// Augmentation

namespace {

Image flip_image(const Image& img) {
    Image out = img;
    for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t y = 0; y < img.height; ++y)
            for (std::size_t x = 0; x < img.width; ++x) out.at(c, y, img.width - 1 - x) = img.at(c, y, x);
    return out;
}

Image crop_image(const Image& img, std::size_t x0, std::size_t y0, std::size_t size) {
    Image out{img.channels, size, size, std::vector<double>(img.channels * size * size)};
    for (std::size_t c = 0; c < img.channels; ++c)
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x) out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
    return out;
}

}  // namespace

ModalSample flip_horizontal(const ModalSample& sample) {
    ModalSample out;
    out.id = sample.id;
    out.rgb = flip_image(sample.rgb);
    out.aux = flip_image(sample.aux);
    const double w = static_cast<double>(sample.rgb.width);
    for (const auto& p : sample.points) {
        const double x = w - p.x;
        if (x < w) out.points.push_back({x, p.y});  // a point on x == 0 maps onto the border and leaves
    }
    return out;
}

ModalSample crop(const ModalSample& sample, std::size_t x0, std::size_t y0, std::size_t size) {
    if (size == 0 || x0 + size > sample.rgb.width || y0 + size > sample.rgb.height)
        throw ContractError("crop window exceeds the image");
    ModalSample out;
    out.id = sample.id;
    out.rgb = crop_image(sample.rgb, x0, y0, size);
    out.aux = crop_image(sample.aux, x0, y0, size);
    const double lim = static_cast<double>(size);
    for (const auto& p : sample.points) {
        const Point q{p.x - static_cast<double>(x0), p.y - static_cast<double>(y0)};
        if (q.x >= 0.0 && q.y >= 0.0 && q.x < lim && q.y < lim) out.points.push_back(q);
    }
    return out;
}

ModalSample augment(const ModalSample& sample, std::size_t crop_size, double flip_prob, std::uint64_t seed) {
    if (crop_size == 0 || crop_size % 8 != 0) throw ContractError("crop size must be a positive multiple of 8");
    if (crop_size > sample.rgb.width || crop_size > sample.rgb.height)
        throw ContractError("crop size " + std::to_string(crop_size) + " exceeds image " + std::to_string(sample.rgb.height) +
                            "x" + std::to_string(sample.rgb.width));
    std::mt19937_64 rng(seed);
    const std::size_t x0 = std::uniform_int_distribution<std::size_t>(0, sample.rgb.width - crop_size)(rng);
    const std::size_t y0 = std::uniform_int_distribution<std::size_t>(0, sample.rgb.height - crop_size)(rng);
    const bool flip = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < flip_prob;
    ModalSample out = crop(sample, x0, y0, crop_size);
    return flip ? flip_horizontal(out) : out;
}

// ---------------------------------------------------------------------------
// Benchmark generation

void DatasetSpec::validate() const {
    if (height == 0 || width == 0 || height % 8 != 0 || width % 8 != 0)
        throw DimensionError("image size " + std::to_string(height) + "x" + std::to_string(width) +
                             " is not a positive multiple of 8");
    if (illumination_lo < 0.0 || illumination_hi > 1.0 || illumination_lo > illumination_hi)
        throw ContractError("illumination range must satisfy 0 <= lo <= hi <= 1");
}

std::size_t DatasetSpec::count(const std::string& split) const {
    if (split == "train") return train;
    if (split == "val") return val;
    if (split == "test") return test;
    throw ContractError("unknown split " + split);
}

std::vector<ModalSample> generate_split(const DatasetSpec& spec, const std::string& split) {
    spec.validate();
    const std::uint64_t stream = split == "train" ? 0 : split == "val" ? 1 : 2;
    const std::size_t n = spec.count(split);
    std::vector<ModalSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        SceneSpec scene;
        scene.height = spec.height;
        scene.width = spec.width;
        scene.seed = derive_seed(spec.seed, stream, i);
        std::mt19937_64 rng(derive_seed(spec.seed, stream, i, 1));
        scene.illumination = std::uniform_real_distribution<double>(spec.illumination_lo, spec.illumination_hi)(rng);
        std::ostringstream id;
        id << std::setw(6) << std::setfill('0') << i;
        out.push_back(generate(scene, id.str()));
    }
    return out;
}

}  // namespace modal_emu
