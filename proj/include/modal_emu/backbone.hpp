#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "modal_emu/nn.hpp"
#include "modal_emu/tensor.hpp"

namespace modal_emu {

/// One modality's VGG-like feature stream: three blocks of 3x3 convs + ReLU,
/// each block ending in a 2x max pool, so features come out at 1/8 resolution.
struct StreamConfig {
    std::size_t in_channels = 3;
    std::vector<std::size_t> channels{8, 16, 32};
    std::size_t convs_per_block = 2;

    void validate() const;
    std::size_t out_channels() const { return channels.back(); }
};

struct PatchEmbedConfig {
    std::vector<std::size_t> patch_sizes{2, 1, 1};
    std::vector<std::size_t> dims{64, 64, 64};

    void validate() const;
    std::size_t stages() const { return patch_sizes.size(); }
};

class ConvStream {
   public:
    static ConvStream create(const StreamConfig& cfg, std::mt19937_64& rng);

    /// [C_in x H x W] -> [C x H/8 x W/8]. H and W must be multiples of 8.
    Tensor extract(const Tensor& image) const;

    const std::vector<std::vector<Conv2d>>& blocks() const { return blocks_; }
    std::vector<std::vector<Conv2d>>& blocks() { return blocks_; }
    void collect(const std::string& prefix, ParameterList& out) const;

   private:
    std::vector<std::vector<Conv2d>> blocks_;
};

/// Pure re-layout of [C x H x W] into row-major patch tokens [N x C*ps*ps];
/// within a token values are ordered (channel, dy, dx).
Tensor patchify(const Tensor& features, std::size_t patch_size);

/// Exact inverse of patchify.
Tensor unpatchify(const Tensor& tokens, std::size_t channels, std::size_t height, std::size_t width,
                  std::size_t patch_size);

/// Learned linear projection of each patch to a D-dimensional token.
struct PatchEmbed {
    std::size_t patch_size = 1;
    Linear proj;

    static PatchEmbed create(std::size_t channels, std::size_t patch_size, std::size_t dim,
                             std::mt19937_64& rng);
    Tensor forward(const Tensor& features) const;
    void collect(const std::string& prefix, ParameterList& out) const { proj.collect(prefix + ".proj", out); }
};

/// Tokens [N x D] back to a [C' x H x W] map. Projects D -> C'*ps*ps when the
/// sizes differ, otherwise re-lays the token values out directly.
struct Unpatch {
    std::size_t patch_size = 1;
    std::size_t channels = 1;
    std::optional<Linear> proj;

    static Unpatch create(std::size_t dim, std::size_t channels, std::size_t patch_size, std::mt19937_64& rng);
    Tensor forward(const Tensor& tokens, std::size_t height, std::size_t width) const;
    void collect(const std::string& prefix, ParameterList& out) const;
};

}  // namespace modal_emu
