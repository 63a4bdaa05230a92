#include "modal_emu/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

namespace modal_emu {

namespace {

constexpr char kMagic[8] = {'M', 'E', 'M', 'U', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

class Reader {
   public:
    Reader(std::istream& is, const std::filesystem::path& path) : is_(is), path_(path) {}

    template <typename T>
    T get() {
        T v{};
        bytes(reinterpret_cast<char*>(&v), sizeof(T));
        return v;
    }

    void bytes(char* dst, std::size_t n) {
        is_.read(dst, static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is_.gcount()) != n)
            throw CheckpointError(path_.string() + ": truncated checkpoint");
    }

    std::string string(std::size_t n, std::size_t limit) {
        if (n > limit) throw CheckpointError(path_.string() + ": corrupt length field");
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }

   private:
    std::istream& is_;
    const std::filesystem::path& path_;
};

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t.tensor;
    return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw CheckpointError("cannot write " + tmp.string());
        os.write(kMagic, sizeof kMagic);
        put<std::uint32_t>(os, kCheckpointVersion);
        put<std::uint64_t>(os, ckpt.config_hash);
        put<std::uint64_t>(os, ckpt.epoch);
        put<std::uint64_t>(os, ckpt.step);
        put<double>(os, ckpt.best_metric);
        const std::string cfg = to_json(ckpt.config).dump();
        put<std::uint64_t>(os, cfg.size());
        os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
        put<std::uint64_t>(os, ckpt.tensors.size());
        for (const auto& [name, t] : ckpt.tensors) {
            put<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            put<std::uint32_t>(os, static_cast<std::uint32_t>(t.dim()));
            for (auto e : t.shape()) put<std::uint64_t>(os, e);
            os.write(reinterpret_cast<const char*>(t.values().data()),
                     static_cast<std::streamsize>(t.numel() * sizeof(double)));
        }
        if (!os) throw CheckpointError("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("cannot open checkpoint " + path.string());
    Reader r(is, path);
    char magic[8];
    r.bytes(magic, sizeof magic);
    if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw CheckpointError(path.string() + ": not a checkpoint");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw CheckpointError(path.string() + ": unsupported checkpoint version " + std::to_string(version));

    Checkpoint ckpt;
    ckpt.config_hash = r.get<std::uint64_t>();
    ckpt.epoch = r.get<std::uint64_t>();
    ckpt.step = r.get<std::uint64_t>();
    ckpt.best_metric = r.get<double>();
    const std::string cfg = r.string(r.get<std::uint64_t>(), 1u << 20);
    try {
        ckpt.config = train_config_from_json(nlohmann::json::parse(cfg));
    } catch (const std::exception& e) {
        throw CheckpointError(path.string() + ": bad embedded config: " + e.what());
    }
    if (config_hash(ckpt.config) != ckpt.config_hash) throw CheckpointError(path.string() + ": config hash mismatch");

    const auto count = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name = r.string(r.get<std::uint32_t>(), 4096);
        const auto rank = r.get<std::uint32_t>();
        if (rank == 0 || rank > 8) throw CheckpointError(path.string() + ": bad rank for " + name);
        Shape shape(rank);
        std::size_t n = 1;
        for (auto& e : shape) {
            e = r.get<std::uint64_t>();
            if (e == 0 || e > (1u << 28)) throw CheckpointError(path.string() + ": bad extent for " + name);
            n *= e;
        }
        if (n > (1u << 28)) throw CheckpointError(path.string() + ": tensor too large: " + name);
        std::vector<double> values(n);
        r.bytes(reinterpret_cast<char*>(values.data()), n * sizeof(double));
        ckpt.tensors.push_back({std::move(name), Tensor::from(std::move(shape), std::move(values))});
    }
    return ckpt;
}

void restore_parameters(const Checkpoint& ckpt, ParameterList& params) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& t : ckpt.tensors) by_name[t.name] = &t.tensor;
    for (auto& p : params) {
        const auto it = by_name.find(p.name);
        if (it == by_name.end()) throw CheckpointError("checkpoint lacks parameter " + p.name);
        if (it->second->shape() != p.tensor.shape())
            throw CheckpointError("shape mismatch for " + p.name + ": " + shape_str(it->second->shape()) + " vs " +
                                  shape_str(p.tensor.shape()));
        copy_values(p.tensor, *it->second);
    }
}

}  // namespace modal_emu
