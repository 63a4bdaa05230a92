#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "modal_emu/losses.hpp"

namespace modal_emu {

/// Malformed dataset file. The message carries the path and byte offset.
class ParseError : public std::runtime_error {
   public:
    ParseError(const std::filesystem::path& path, std::size_t offset, const std::string& what);
    const std::filesystem::path& path() const { return path_; }
    std::size_t offset() const { return offset_; }

   private:
    std::filesystem::path path_;
    std::size_t offset_;
};

/// Planar image, values in [0, 1], row-major per channel.
struct Image {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<double> values;

    double at(std::size_t c, std::size_t y, std::size_t x) const { return values[(c * height + y) * width + x]; }
    double& at(std::size_t c, std::size_t y, std::size_t x) { return values[(c * height + y) * width + x]; }
    bool operator==(const Image&) const = default;
};

struct ModalSample {
    std::string id;
    Image rgb;  // 3 x H x W
    Image aux;  // 1 x H x W, thermal/depth-like
    AnnotationSet points;

    void validate() const;
};

/// Knobs for one synthetic bimodal scene.
struct SceneSpec {
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t min_people = 1;
    std::size_t max_people = 20;
    double min_radius = 2.0;
    double max_radius = 3.5;
    double illumination = 1.0;    // 0 = dark RGB, 1 = fully lit
    double occlusion_prob = 0.1;  // person hidden in RGB only
    double rgb_noise = 0.03;
    double aux_noise = 0.03;
    std::size_t min_distractors = 0;  // warm non-person objects (aux only looks like a person)
    std::size_t max_distractors = 2;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Soft-blob crowd scene. RGB blob contrast scales with illumination; the
/// auxiliary modality always shows people as bright blobs. Annotations are
/// the exact blob centres. Values are quantised to 16-bit levels so the
/// on-disk format round-trips exactly.
ModalSample generate(const SceneSpec& spec, const std::string& id = "scene");

/// 16-bit binary PPM (P6) / PGM (P5).
void write_ppm16(const std::filesystem::path& path, const Image& image);
void write_pgm16(const std::filesystem::path& path, const Image& image);
Image read_pnm(const std::filesystem::path& path);

/// Writes <dir>/<id>/{rgb.ppm, aux.pgm, points.json}.
void save_sample(const std::filesystem::path& dir, const ModalSample& sample);
/// Reads one sample directory; the id is the directory name.
ModalSample load_sample(const std::filesystem::path& sample_dir);
/// All samples of <root>/<split>, ordered by id.
std::vector<ModalSample> load_split(const std::filesystem::path& root, const std::string& split);

/// Horizontal mirror of images and points.
ModalSample flip_horizontal(const ModalSample& sample);
/// Crops the square window [x0, x0+size) x [y0, y0+size), keeping points inside it.
ModalSample crop(const ModalSample& sample, std::size_t x0, std::size_t y0, std::size_t size);
/// Random crop + flip, applied identically to both modalities and the points.
ModalSample augment(const ModalSample& sample, std::size_t crop_size, double flip_prob, std::uint64_t seed);

/// A generated benchmark: three splits of independent scenes whose
/// illumination is drawn uniformly from [illumination_lo, illumination_hi].
struct DatasetSpec {
    std::size_t train = 64;
    std::size_t val = 16;
    std::size_t test = 16;
    std::size_t height = 64;
    std::size_t width = 64;
    double illumination_lo = 0.1;
    double illumination_hi = 1.0;
    std::uint64_t seed = 2024;

    void validate() const;
    std::size_t count(const std::string& split) const;
};

/// Scenes of one split ("train", "val" or "test"), ids zero-padded indices.
std::vector<ModalSample> generate_split(const DatasetSpec& spec, const std::string& split);

}  // namespace modal_emu
