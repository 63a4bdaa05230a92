#include "modal_emu/backbone.hpp"

#include <memory>

namespace modal_emu {

void StreamConfig::validate() const {
    if (channels.size() != 3) throw ContractError("stream must have exactly 3 blocks, got " + std::to_string(channels.size()));
    if (in_channels == 0 || convs_per_block == 0) throw ContractError("stream needs positive input channels and convs per block");
    for (auto c : channels)
        if (c == 0) throw ContractError("stream channel counts must be positive");
}

void PatchEmbedConfig::validate() const {
    if (patch_sizes.empty() || patch_sizes.size() != dims.size())
        throw ContractError("patch sizes and embedding dims must be non-empty and of equal length");
    for (std::size_t i = 0; i < patch_sizes.size(); ++i)
        if (patch_sizes[i] == 0 || dims[i] == 0) throw ContractError("patch sizes and dims must be positive");
}

ConvStream ConvStream::create(const StreamConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    ConvStream s;
    std::size_t in = cfg.in_channels;
    for (auto out : cfg.channels) {
        std::vector<Conv2d> block;
        for (std::size_t k = 0; k < cfg.convs_per_block; ++k) {
            block.push_back(Conv2d::create(in, out, 3, 1, rng));
            in = out;
        }
        s.blocks_.push_back(std::move(block));
    }
    return s;
}

Tensor ConvStream::extract(const Tensor& image) const {
    if (image.dim() != 3) throw DimensionError("stream input must be C x H x W, got " + shape_str(image.shape()));
    if (image.shape()[1] % 8 != 0 || image.shape()[2] % 8 != 0)
        throw DimensionError("stream input extents must be multiples of 8, got " + shape_str(image.shape()));
    Tensor x = image;
    for (const auto& block : blocks_) {
        for (const auto& conv : block) x = relu(conv.forward(x));
        x = maxpool2d(x, 2);
    }
    return x;
}

void ConvStream::collect(const std::string& prefix, ParameterList& out) const {
    for (std::size_t b = 0; b < blocks_.size(); ++b)
        for (std::size_t k = 0; k < blocks_[b].size(); ++k)
            blocks_[b][k].collect(prefix + ".block" + std::to_string(b) + ".conv" + std::to_string(k), out);
}

namespace {

// index[token * C*ps*ps + (c*ps + dy)*ps + dx] = flat position in [C x H x W]
std::shared_ptr<std::vector<std::size_t>> patch_index(std::size_t c, std::size_t h, std::size_t w, std::size_t ps) {
    const std::size_t gh = h / ps, gw = w / ps, per = c * ps * ps;
    auto idx = std::make_shared<std::vector<std::size_t>>(gh * gw * per);
    for (std::size_t py = 0; py < gh; ++py)
        for (std::size_t px = 0; px < gw; ++px)
            for (std::size_t ci = 0; ci < c; ++ci)
                for (std::size_t dy = 0; dy < ps; ++dy)
                    for (std::size_t dx = 0; dx < ps; ++dx)
                        (*idx)[(py * gw + px) * per + (ci * ps + dy) * ps + dx] =
                            (ci * h + py * ps + dy) * w + px * ps + dx;
    return idx;
}

}  // namespace

Tensor patchify(const Tensor& features, std::size_t patch_size) {
    if (features.dim() != 3 || patch_size == 0)
        throw DimensionError("patchify needs C x H x W input, got " + shape_str(features.shape()));
    const std::size_t c = features.shape()[0], h = features.shape()[1], w = features.shape()[2];
    if (h % patch_size != 0 || w % patch_size != 0)
        throw DimensionError("patch size " + std::to_string(patch_size) + " does not divide " + shape_str(features.shape()));
    const std::size_t n = (h / patch_size) * (w / patch_size);
    return gather(features, {n, c * patch_size * patch_size}, patch_index(c, h, w, patch_size));
}

Tensor unpatchify(const Tensor& tokens, std::size_t channels, std::size_t height, std::size_t width,
                  std::size_t patch_size) {
    if (patch_size == 0 || height % patch_size != 0 || width % patch_size != 0)
        throw DimensionError("patch size " + std::to_string(patch_size) + " does not divide " +
                             std::to_string(height) + "x" + std::to_string(width));
    const std::size_t n = (height / patch_size) * (width / patch_size);
    const std::size_t per = channels * patch_size * patch_size;
    if (tokens.dim() != 2 || tokens.shape()[0] != n || tokens.shape()[1] != per)
        throw DimensionError("cannot unpatch " + shape_str(tokens.shape()) + " into " + std::to_string(channels) + "x" +
                             std::to_string(height) + "x" + std::to_string(width) + " with patch size " +
                             std::to_string(patch_size));
    const auto forward = patch_index(channels, height, width, patch_size);
    auto inverse = std::make_shared<std::vector<std::size_t>>(forward->size());
    for (std::size_t i = 0; i < forward->size(); ++i) (*inverse)[(*forward)[i]] = i;
    return gather(tokens, {channels, height, width}, inverse);
}

PatchEmbed PatchEmbed::create(std::size_t channels, std::size_t patch_size, std::size_t dim, std::mt19937_64& rng) {
    PatchEmbed p;
    p.patch_size = patch_size;
    p.proj = Linear::create(channels * patch_size * patch_size, dim, true, rng);
    return p;
}

Tensor PatchEmbed::forward(const Tensor& features) const {
    Tensor tokens = patchify(features, patch_size);
    if (tokens.shape()[1] != proj.in_features())
        throw DimensionError("patch embedding expects " + std::to_string(proj.in_features()) + " values per patch, got " +
                             shape_str(tokens.shape()));
    return proj.forward(tokens);
}

Unpatch Unpatch::create(std::size_t dim, std::size_t channels, std::size_t patch_size, std::mt19937_64& rng) {
    Unpatch u;
    u.patch_size = patch_size;
    u.channels = channels;
    if (dim != channels * patch_size * patch_size) u.proj = Linear::create(dim, channels * patch_size * patch_size, true, rng);
    return u;
}

Tensor Unpatch::forward(const Tensor& tokens, std::size_t height, std::size_t width) const {
    if (tokens.dim() != 2) throw DimensionError("unpatch needs N x D tokens, got " + shape_str(tokens.shape()));
    const Tensor values = proj ? proj->forward(tokens) : tokens;
    return unpatchify(values, channels, height, width, patch_size);
}

void Unpatch::collect(const std::string& prefix, ParameterList& out) const {
    if (proj) proj->collect(prefix + ".proj", out);
}

}  // namespace modal_emu
