#include "modal_emu/model.hpp"

namespace modal_emu {

CrowdCounter CrowdCounter::create(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    CrowdCounter m;
    m.cfg_ = cfg;

    StreamConfig rgb_stream = cfg.stream;
    rgb_stream.in_channels = 3;
    StreamConfig aux_stream = cfg.stream;
    aux_stream.in_channels = cfg.replicate_aux ? 3 : 1;
    m.stream_rgb_ = ConvStream::create(rgb_stream, rng);
    m.stream_aux_ = ConvStream::create(aux_stream, rng);

    std::size_t head_channels = cfg.stream.out_channels();
    if (cfg.has_stack()) {
        StackConfig s;
        s.stream = cfg.stream;
        s.patches = cfg.patches;
        s.fused_channels = cfg.fused_channels;
        s.heads = cfg.heads;
        s.ffn_hidden = cfg.hidden();
        s.use_scma = cfg.use_scma;
        s.use_mcma = cfg.use_mcma;
        s.kind = cfg.block_kind;
        m.stack_ = HcmaStack::create(s, rng);
        head_channels = cfg.fused_channels;
    }
    m.head_ = HeadParams::create(head_channels, rng);

    if (cfg.prompting == PromptingMode::Attention)
        m.prompts_ = PromptSet::create(cfg.prompt_length, cfg.patches.dims.front() / cfg.heads, rng);
    if (cfg.prompting == PromptingMode::Input)
        m.input_prompts_ = InputPrompts::create(cfg.prompt_length, cfg.patches.dims.front(), rng);
    if (cfg.use_pseudo_in_head) {
        m.pseudo_reduce_rgb_ = Conv2d::create(2 * head_channels, head_channels, 1, 0, rng, 1.0);
        m.pseudo_reduce_aux_ = Conv2d::create(2 * head_channels, head_channels, 1, 0, rng, 1.0);
    }
    return m;
}

std::pair<Tensor, Tensor> CrowdCounter::inputs(const ModalSample& sample) const {
    sample.validate();
    const auto h = sample.rgb.height, w = sample.rgb.width;
    Tensor rgb = Tensor::from({3, h, w}, sample.rgb.values);
    std::vector<double> aux = sample.aux.values;
    std::size_t channels = 1;
    if (cfg_.replicate_aux) {
        aux.reserve(3 * h * w);
        for (int c = 1; c < 3; ++c) aux.insert(aux.end(), sample.aux.values.begin(), sample.aux.values.end());
        channels = 3;
    }
    return {rgb, Tensor::from({channels, h, w}, std::move(aux))};
}

Inference CrowdCounter::infer(const Tensor& rgb, const Tensor& aux, const ForwardContext& ctx) const {
    Inference out;
    const Tensor f_rgb = stream_rgb_.extract(rgb);
    const Tensor f_aux = stream_aux_.extract(aux);
    out.height = f_rgb.shape()[1];
    out.width = f_rgb.shape()[2];
    if (stack_) {
        out.tokens = stack_->embed_first(f_rgb, f_aux);
        out.fused = stack_->forward_tokens(out.tokens.rgb, out.tokens.aux, out.height, out.width, ctx);
    } else {
        out.fused = {f_rgb, f_aux};
    }
    out.density = regress(out.fused.rgb, out.fused.aux, head_);
    return out;
}

EmulatedFeatures CrowdCounter::emulate(const Inference& inference, const ForwardContext& ctx) const {
    if (!has_emulation() || !stack_) throw ContractError("emulation pass requested on a model without prompting");
    const SequencePair& x = inference.tokens;
    if (cfg_.prompting == PromptingMode::Attention) {
        const AttentionParams& attn = *stack_->block(0).attention();
        const Tensor p_rgb = prompt_attend(x.rgb, prompts_.rgb, attn.query_rgb, attn.key_rgb, attn.value_rgb, attn.heads);
        const Tensor p_aux = prompt_attend(x.aux, prompts_.aux, attn.query_aux, attn.key_aux, attn.value_aux, attn.heads);
        return modal_emu::emulate(p_rgb, p_aux, *stack_, inference.height, inference.width, ctx);
    }
    const Tensor p_rgb = input_prompting_variant(x.rgb, input_prompts_.rgb);
    const Tensor p_aux = input_prompting_variant(x.aux, input_prompts_.aux);
    return modal_emu::emulate(p_rgb, p_aux, *stack_, inference.height, inference.width, ctx, input_prompts_.length());
}

Tensor CrowdCounter::density_with_pseudo(const Inference& inference, const EmulatedFeatures& pseudo) const {
    if (!pseudo_reduce_rgb_) throw ContractError("model was built without the pseudo-feature head");
    const Tensor rgb = pseudo_reduce_rgb_->forward(concat({inference.fused.rgb, pseudo.pseudo_rgb}, 0));
    const Tensor aux = pseudo_reduce_aux_->forward(concat({inference.fused.aux, pseudo.pseudo_aux}, 0));
    return regress(rgb, aux, head_);
}

ParameterList CrowdCounter::inference_parameters() const {
    ParameterList out;
    stream_rgb_.collect("stream_rgb", out);
    stream_aux_.collect("stream_aux", out);
    if (stack_) stack_->collect("hcma", out);
    head_.collect("head", out);
    return out;
}

ParameterList CrowdCounter::parameters() const {
    ParameterList out = inference_parameters();
    prompts_.collect("cme.prompts", out);
    input_prompts_.collect("cme.input_prompts", out);
    if (pseudo_reduce_rgb_) pseudo_reduce_rgb_->collect("pseudo.reduce_rgb", out);
    if (pseudo_reduce_aux_) pseudo_reduce_aux_->collect("pseudo.reduce_aux", out);
    return out;
}

}  // namespace modal_emu
