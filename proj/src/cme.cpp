#include "modal_emu/cme.hpp"

namespace modal_emu {

namespace {

constexpr double kPromptInitHalfWidth = 0.1;

}  // namespace

PromptSet PromptSet::create(std::size_t length, std::size_t head_dim, std::mt19937_64& rng) {
    PromptSet p;
    if (length == 0) return p;
    const double h = kPromptInitHalfWidth;
    p.rgb.key = Tensor::uniform({length, head_dim}, -h, h, rng, true);
    p.rgb.value = Tensor::uniform({length, head_dim}, -h, h, rng, true);
    p.aux.key = Tensor::uniform({length, head_dim}, -h, h, rng, true);
    p.aux.value = Tensor::uniform({length, head_dim}, -h, h, rng, true);
    return p;
}

void PromptSet::collect(const std::string& prefix, ParameterList& out) const {
    if (length() == 0) return;
    out.push_back({prefix + ".rgb.key", rgb.key});
    out.push_back({prefix + ".rgb.value", rgb.value});
    out.push_back({prefix + ".aux.key", aux.key});
    out.push_back({prefix + ".aux.value", aux.value});
}

Tensor self_attention(const Tensor& x, const Linear& query, const Linear& key, const Linear& value, std::size_t heads) {
    return multi_head_attention(query.forward(x), key.forward(x), value.forward(x), heads);
}

Tensor prompt_attend(const Tensor& x, const PromptSide& prompts, const Linear& query, const Linear& key,
                     const Linear& value, std::size_t heads) {
    if (prompts.length() == 0) return self_attention(x, query, key, value, heads);
    return multi_head_attention(query.forward(x), key.forward(x), value.forward(x), heads, prompts.key, prompts.value);
}

EmulatedFeatures emulate(const Tensor& prompted_rgb, const Tensor& prompted_aux, const HcmaStack& shared,
                         std::size_t height, std::size_t width, const ForwardContext& ctx, std::size_t prefix_tokens) {
    const FeaturePair out = shared.forward_tokens(prompted_aux, prompted_rgb, height, width, ctx, prefix_tokens);
    return {out.rgb, out.aux};
}

InputPrompts InputPrompts::create(std::size_t length, std::size_t dim, std::mt19937_64& rng) {
    InputPrompts p;
    if (length == 0) return p;
    p.rgb = Tensor::uniform({length, dim}, -kPromptInitHalfWidth, kPromptInitHalfWidth, rng, true);
    p.aux = Tensor::uniform({length, dim}, -kPromptInitHalfWidth, kPromptInitHalfWidth, rng, true);
    return p;
}

void InputPrompts::collect(const std::string& prefix, ParameterList& out) const {
    if (length() == 0) return;
    out.push_back({prefix + ".rgb", rgb});
    out.push_back({prefix + ".aux", aux});
}

Tensor input_prompting_variant(const Tensor& x, const Tensor& prompts) {
    if (!prompts.defined()) return x;
    if (x.dim() != 2 || prompts.dim() != 2 || prompts.shape()[1] != x.shape()[1])
        throw DimensionError("input prompts " + shape_str(prompts.shape()) + " do not match sequence " +
                             shape_str(x.shape()));
    return concat({prompts, x}, 0);
}

}  // namespace modal_emu
