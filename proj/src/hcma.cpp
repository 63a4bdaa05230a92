#include "modal_emu/hcma.hpp"

#include <algorithm>
#include <cmath>

namespace modal_emu {

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            const Tensor& key_prefix, const Tensor& value_prefix, std::vector<Tensor>* weights) {
    if (q.dim() != 2 || k.dim() != 2 || v.dim() != 2)
        throw DimensionError("attention needs 2-D q/k/v, got " + shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                             ", " + shape_str(v.shape()));
    const std::size_t dim = q.shape()[1];
    if (k.shape()[1] != dim || v.shape()[1] != dim || k.shape()[0] != v.shape()[0])
        throw DimensionError("attention q/k/v mismatch: " + shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                             shape_str(v.shape()));
    if (heads == 0 || dim % heads != 0)
        throw DimensionError("head count " + std::to_string(heads) + " does not divide dimension " + std::to_string(dim));
    if (key_prefix.defined() != value_prefix.defined())
        throw ContractError("key and value prompts must both be present or both absent");
    const std::size_t d = dim / heads;
    if (key_prefix.defined()) {
        if (key_prefix.dim() != 2 || key_prefix.shape()[1] != d || key_prefix.shape() != value_prefix.shape())
            throw DimensionError("prompts " + shape_str(key_prefix.shape()) + "/" + shape_str(value_prefix.shape()) +
                                 " do not match head dimension " + std::to_string(d));
    }
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

    std::vector<Tensor> outputs;
    outputs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor qh = heads == 1 ? q : slice(q, 1, h * d, d);
        Tensor kh = heads == 1 ? k : slice(k, 1, h * d, d);
        Tensor vh = heads == 1 ? v : slice(v, 1, h * d, d);
        if (key_prefix.defined()) {
            kh = concat({key_prefix, kh}, 0);
            vh = concat({value_prefix, vh}, 0);
        }
        Tensor w = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_d));
        if (weights) weights->push_back(w);
        outputs.push_back(matmul(w, vh));
    }
    return concat(outputs, 1);
}

AttentionParams AttentionParams::create(std::size_t dim, std::size_t heads, std::mt19937_64& rng) {
    if (heads == 0 || dim % heads != 0)
        throw ContractError("head count " + std::to_string(heads) + " must divide dimension " + std::to_string(dim));
    AttentionParams p;
    p.heads = heads;
    p.query_rgb = Linear::create(dim, dim, false, rng);
    p.key_rgb = Linear::create(dim, dim, false, rng);
    p.value_rgb = Linear::create(dim, dim, false, rng);
    p.query_aux = Linear::create(dim, dim, false, rng);
    p.key_aux = Linear::create(dim, dim, false, rng);
    p.value_aux = Linear::create(dim, dim, false, rng);
    p.out_rgb = Linear::create(dim, dim, true, rng);
    p.out_aux = Linear::create(dim, dim, true, rng);
    return p;
}

void AttentionParams::collect(const std::string& prefix, ParameterList& out) const {
    query_rgb.collect(prefix + ".q_rgb", out);
    key_rgb.collect(prefix + ".k_rgb", out);
    value_rgb.collect(prefix + ".v_rgb", out);
    query_aux.collect(prefix + ".q_aux", out);
    key_aux.collect(prefix + ".k_aux", out);
    value_aux.collect(prefix + ".v_aux", out);
    out_rgb.collect(prefix + ".out_rgb", out);
    out_aux.collect(prefix + ".out_aux", out);
}

SequencePair scma(const Tensor& x_rgb, const Tensor& x_aux, const AttentionParams& p, const ForwardContext& ctx,
                  std::vector<Tensor>* weights_rgb, std::vector<Tensor>* weights_aux) {
    if (x_rgb.dim() != 2 || x_rgb.shape() != x_aux.shape())
        throw DimensionError("scma needs equal N x D sequences, got " + shape_str(x_rgb.shape()) + " and " +
                             shape_str(x_aux.shape()));
    if (x_rgb.shape()[1] != p.dim())
        throw DimensionError("scma sequences have D=" + std::to_string(x_rgb.shape()[1]) + ", parameters expect " +
                             std::to_string(p.dim()));

    const Tensor q_rgb = p.query_rgb.forward(x_rgb), k_rgb = p.key_rgb.forward(x_rgb), v_rgb = p.value_rgb.forward(x_rgb);
    const Tensor q_aux = p.query_aux.forward(x_aux), k_aux = p.key_aux.forward(x_aux), v_aux = p.value_aux.forward(x_aux);

    const Tensor h_rgb = multi_head_attention(q_rgb, k_aux, v_aux, p.heads, {}, {}, weights_rgb);
    const Tensor h_aux = multi_head_attention(q_aux, k_rgb, v_rgb, p.heads, {}, {}, weights_aux);

    SequencePair out;
    out.rgb = add(dropout(p.out_rgb.forward(h_rgb), ctx.dropout, ctx.training, ctx.rng), x_rgb);
    out.aux = add(dropout(p.out_aux.forward(h_aux), ctx.dropout, ctx.training, ctx.rng), x_aux);
    return out;
}

ConvPair ConvPair::create(std::size_t channels, std::mt19937_64& rng) {
    return {Conv2d::create(channels, channels, 3, 1, rng), Conv2d::create(channels, channels, 3, 1, rng, 1.0)};
}

void ConvPair::collect(const std::string& prefix, ParameterList& out) const {
    first.collect(prefix + ".conv0", out);
    second.collect(prefix + ".conv1", out);
}

McmaParams McmaParams::create(std::size_t channels, std::mt19937_64& rng) {
    McmaParams p;
    p.phi_rgb = ConvPair::create(channels, rng);
    p.phi_aux = ConvPair::create(channels, rng);
    return p;
}

void McmaParams::collect(const std::string& prefix, ParameterList& out) const {
    phi_rgb.collect(prefix + ".phi_rgb", out);
    phi_aux.collect(prefix + ".phi_aux", out);
}

FeaturePair mcma(const Tensor& f_rgb, const Tensor& f_aux, const McmaParams& p) {
    if (f_rgb.shape() != f_aux.shape() || f_rgb.dim() != 3)
        throw DimensionError("mcma needs equal C x H x W maps, got " + shape_str(f_rgb.shape()) + " and " +
                             shape_str(f_aux.shape()));
    const Tensor phi_rgb = p.phi_rgb.forward(f_rgb);
    const Tensor phi_aux = p.phi_aux.forward(f_aux);
    return {add(hadamard(phi_rgb, sigmoid(phi_aux)), f_rgb), add(hadamard(phi_aux, sigmoid(phi_rgb)), f_aux)};
}

FeedForward FeedForward::create(std::size_t channels, std::size_t hidden, std::mt19937_64& rng) {
    return {Conv2d::create(channels, hidden, 1, 0, rng), Conv2d::create(hidden, channels, 1, 0, rng, 1.0)};
}

void FeedForward::collect(const std::string& prefix, ParameterList& out) const {
    expand.collect(prefix + ".expand", out);
    project.collect(prefix + ".project", out);
}

FusionParams FusionParams::create(std::size_t channels, std::size_t hidden, std::mt19937_64& rng) {
    return {Conv2d::create(2 * channels, channels, 1, 0, rng, 1.0), FeedForward::create(channels, hidden, rng)};
}

void FusionParams::collect(const std::string& prefix, ParameterList& out) const {
    reduce.collect(prefix + ".reduce", out);
    ffn.collect(prefix + ".ffn", out);
}

Tensor fuse(const Tensor& global, const Tensor& local, const FusionParams& p) {
    if (global.shape() != local.shape() || global.dim() != 3)
        throw DimensionError("fuse needs equal C x H x W maps, got " + shape_str(global.shape()) + " and " +
                             shape_str(local.shape()));
    return p.ffn.forward(p.reduce.forward(concat({global, local}, 0)));
}

HeadParams HeadParams::create(std::size_t channels, std::mt19937_64& rng) {
    const std::size_t half = std::max<std::size_t>(1, channels / 2);
    const std::size_t quarter = std::max<std::size_t>(1, channels / 4);
    HeadParams p;
    p.alpha_logit = Tensor::scalar(0.0, true);
    p.beta_logit = Tensor::scalar(0.0, true);
    p.conv1 = Conv2d::create(channels, half, 3, 1, rng);
    p.conv2 = Conv2d::create(half, quarter, 3, 1, rng);
    p.out = Conv2d::create(quarter, 1, 1, 0, rng, 1.0);
    return p;
}

double HeadParams::alpha() const {
    NoGradGuard guard;
    return sigmoid(alpha_logit).item();
}

double HeadParams::beta() const {
    NoGradGuard guard;
    return sigmoid(beta_logit).item();
}

Tensor HeadParams::gamma(const Tensor& x) const {
    Tensor y = relu(conv1.forward(x));
    y = relu(conv2.forward(y));
    y = abs(out.forward(y));
    return reshape(y, {y.shape()[1], y.shape()[2]});
}

void HeadParams::collect(const std::string& prefix, ParameterList& out_list) const {
    out_list.push_back({prefix + ".alpha_logit", alpha_logit});
    out_list.push_back({prefix + ".beta_logit", beta_logit});
    conv1.collect(prefix + ".gamma.conv0", out_list);
    conv2.collect(prefix + ".gamma.conv1", out_list);
    out.collect(prefix + ".gamma.out", out_list);
}

Tensor regress(const Tensor& f_rgb, const Tensor& f_aux, const HeadParams& p) {
    if (f_rgb.shape() != f_aux.shape() || f_rgb.dim() != 3)
        throw DimensionError("regress needs equal C x H x W maps, got " + shape_str(f_rgb.shape()) + " and " +
                             shape_str(f_aux.shape()));
    const Tensor mixed = add(scalar_mul(sigmoid(p.alpha_logit), f_rgb), scalar_mul(sigmoid(p.beta_logit), f_aux));
    return p.gamma(mixed);
}

// ---------------------------------------------------------------------------

void HcmaBlockConfig::validate() const {
    if (in_channels == 0 || fused_channels == 0 || patch_size == 0 || dim == 0 || ffn_hidden == 0)
        throw ContractError("HCMA block sizes must be positive");
    if (heads == 0 || dim % heads != 0)
        throw ContractError("head count " + std::to_string(heads) + " must divide D=" + std::to_string(dim));
    if (kind == BlockKind::Hybrid && !use_scma && !use_mcma)
        throw ContractError("an HCMA block needs SCMA or MCMA; disable the stack instead");
}

HcmaBlock HcmaBlock::create(const HcmaBlockConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    HcmaBlock b;
    b.cfg_ = cfg;
    b.embed_rgb_ = PatchEmbed::create(cfg.in_channels, cfg.patch_size, cfg.dim, rng);
    b.embed_aux_ = PatchEmbed::create(cfg.in_channels, cfg.patch_size, cfg.dim, rng);
    const bool attention = cfg.kind == BlockKind::VanillaCross || cfg.use_scma;
    if (attention) {
        b.attention_ = AttentionParams::create(cfg.dim, cfg.heads, rng);
        b.global_rgb_ = Unpatch::create(cfg.dim, cfg.fused_channels, cfg.patch_size, rng);
        b.global_aux_ = Unpatch::create(cfg.dim, cfg.fused_channels, cfg.patch_size, rng);
    }
    if (cfg.kind == BlockKind::Hybrid) {
        b.local_rgb_ = Unpatch::create(cfg.dim, cfg.fused_channels, cfg.patch_size, rng);
        b.local_aux_ = Unpatch::create(cfg.dim, cfg.fused_channels, cfg.patch_size, rng);
        if (cfg.use_mcma) b.mcma_ = McmaParams::create(cfg.fused_channels, rng);
        b.fusion_rgb_ = FusionParams::create(cfg.fused_channels, cfg.ffn_hidden, rng);
        b.fusion_aux_ = FusionParams::create(cfg.fused_channels, cfg.ffn_hidden, rng);
    } else {
        b.fusion_rgb_.ffn = FeedForward::create(cfg.fused_channels, cfg.ffn_hidden, rng);
        b.fusion_aux_.ffn = FeedForward::create(cfg.fused_channels, cfg.ffn_hidden, rng);
    }
    return b;
}

SequencePair HcmaBlock::embed(const Tensor& f_rgb, const Tensor& f_aux) const {
    if (f_rgb.shape() != f_aux.shape())
        throw DimensionError("stage inputs differ: " + shape_str(f_rgb.shape()) + " vs " + shape_str(f_aux.shape()));
    return {embed_rgb_.forward(f_rgb), embed_aux_.forward(f_aux)};
}

FeaturePair HcmaBlock::forward_tokens(const Tensor& x_rgb, const Tensor& x_aux, std::size_t height, std::size_t width,
                                      const ForwardContext& ctx, std::size_t prefix_tokens) const {
    if (x_rgb.dim() != 2 || x_rgb.shape() != x_aux.shape())
        throw DimensionError("HCMA block needs equal N x D sequences, got " + shape_str(x_rgb.shape()) + " and " +
                             shape_str(x_aux.shape()));
    const std::size_t ps = cfg_.patch_size;
    if (height % ps != 0 || width % ps != 0)
        throw DimensionError("patch size " + std::to_string(ps) + " does not divide " + std::to_string(height) + "x" +
                             std::to_string(width));
    const std::size_t tokens = (height / ps) * (width / ps);
    if (x_rgb.shape()[0] != tokens + prefix_tokens)
        throw DimensionError("sequence of " + std::to_string(x_rgb.shape()[0]) + " tokens does not match a " +
                             std::to_string(height) + "x" + std::to_string(width) + " grid with patch size " +
                             std::to_string(ps) + " and " + std::to_string(prefix_tokens) + " prompt tokens");

    auto real_tokens = [&](const Tensor& s) { return prefix_tokens == 0 ? s : slice(s, 0, prefix_tokens, tokens); };

    std::optional<SequencePair> attended;
    if (attention_) attended = scma(x_rgb, x_aux, *attention_, ctx);

    if (cfg_.kind == BlockKind::VanillaCross) {
        const Tensor g_rgb = global_rgb_->forward(real_tokens(attended->rgb), height, width);
        const Tensor g_aux = global_aux_->forward(real_tokens(attended->aux), height, width);
        return {fusion_rgb_.ffn.forward(g_rgb), fusion_aux_.ffn.forward(g_aux)};
    }

    const Tensor tilde_rgb = local_rgb_->forward(real_tokens(x_rgb), height, width);
    const Tensor tilde_aux = local_aux_->forward(real_tokens(x_aux), height, width);

    FeaturePair global{tilde_rgb, tilde_aux};
    if (attended) {
        global.rgb = global_rgb_->forward(real_tokens(attended->rgb), height, width);
        global.aux = global_aux_->forward(real_tokens(attended->aux), height, width);
    }
    FeaturePair local{tilde_rgb, tilde_aux};
    if (mcma_) local = mcma(tilde_rgb, tilde_aux, *mcma_);

    return {fuse(global.rgb, local.rgb, fusion_rgb_), fuse(global.aux, local.aux, fusion_aux_)};
}

void HcmaBlock::collect(const std::string& prefix, ParameterList& out) const {
    embed_rgb_.collect(prefix + ".embed_rgb", out);
    embed_aux_.collect(prefix + ".embed_aux", out);
    if (attention_) attention_->collect(prefix + ".scma", out);
    if (global_rgb_) global_rgb_->collect(prefix + ".unpatch_g_rgb", out);
    if (global_aux_) global_aux_->collect(prefix + ".unpatch_g_aux", out);
    if (local_rgb_) local_rgb_->collect(prefix + ".unpatch_l_rgb", out);
    if (local_aux_) local_aux_->collect(prefix + ".unpatch_l_aux", out);
    if (mcma_) mcma_->collect(prefix + ".mcma", out);
    if (cfg_.kind == BlockKind::Hybrid) {
        fusion_rgb_.collect(prefix + ".fuse_rgb", out);
        fusion_aux_.collect(prefix + ".fuse_aux", out);
    } else {
        fusion_rgb_.ffn.collect(prefix + ".ffn_rgb", out);
        fusion_aux_.ffn.collect(prefix + ".ffn_aux", out);
    }
}

HcmaStack HcmaStack::create(const StackConfig& cfg, std::mt19937_64& rng) {
    cfg.stream.validate();
    cfg.patches.validate();
    HcmaStack s;
    for (std::size_t i = 0; i < cfg.patches.stages(); ++i) {
        HcmaBlockConfig b;
        b.in_channels = i == 0 ? cfg.stream.out_channels() : cfg.fused_channels;
        b.fused_channels = cfg.fused_channels;
        b.patch_size = cfg.patches.patch_sizes[i];
        b.dim = cfg.patches.dims[i];
        b.heads = cfg.heads;
        b.ffn_hidden = cfg.ffn_hidden;
        b.use_scma = cfg.use_scma;
        b.use_mcma = cfg.use_mcma;
        b.kind = cfg.kind;
        s.blocks_.push_back(HcmaBlock::create(b, rng));
    }
    return s;
}

FeaturePair HcmaStack::forward(const Tensor& f_rgb, const Tensor& f_aux, const ForwardContext& ctx) const {
    const SequencePair x = embed_first(f_rgb, f_aux);
    return forward_tokens(x.rgb, x.aux, f_rgb.shape()[1], f_rgb.shape()[2], ctx);
}

FeaturePair HcmaStack::forward_tokens(const Tensor& x_rgb, const Tensor& x_aux, std::size_t height, std::size_t width,
                                      const ForwardContext& ctx, std::size_t prefix_tokens) const {
    FeaturePair f = blocks_.front().forward_tokens(x_rgb, x_aux, height, width, ctx, prefix_tokens);
    for (std::size_t i = 1; i < blocks_.size(); ++i) {
        const SequencePair x = blocks_[i].embed(f.rgb, f.aux);
        f = blocks_[i].forward_tokens(x.rgb, x.aux, height, width, ctx);
    }
    return f;
}

void HcmaStack::collect(const std::string& prefix, ParameterList& out) const {
    for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + ".block" + std::to_string(i), out);
}

}  // namespace modal_emu
