#pragma once

#include <cstdint>
#include <optional>
#include <utility>

#include "modal_emu/backbone.hpp"
#include "modal_emu/cme.hpp"
#include "modal_emu/config.hpp"
#include "modal_emu/data.hpp"
#include "modal_emu/hcma.hpp"
#include "modal_emu/nn.hpp"

namespace modal_emu {

/// Output of the multi-modal inference pass for one image pair.
struct Inference {
    Tensor density;      // [H/8 x W/8]
    FeaturePair fused;   // F_hat_rgb, F_hat_aux
    SequencePair tokens; // first-stage token sequences (empty without a stack)
    std::size_t height = 0;  // feature grid
    std::size_t width = 0;
};

/// Two-stream counter: backbones, optional HCMA stack, weighted-sum head, and
/// (training only) the cross-modal emulation pass sharing the stack weights.
///
/// Parameters are created in a fixed order (streams, stack, head, prompts,
/// pseudo-feature reducers) so that models differing only in their emulation
/// settings share identical inference weights for the same seed.
class CrowdCounter {
   public:
    static CrowdCounter create(const ModelConfig& cfg, std::uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    bool has_emulation() const { return cfg_.prompting != PromptingMode::Off; }
    std::size_t density_stride() const { return 8; }

    /// Image tensors for a sample (aux replicated to 3 channels if configured).
    std::pair<Tensor, Tensor> inputs(const ModalSample& sample) const;

    Inference infer(const Tensor& rgb, const Tensor& aux, const ForwardContext& ctx) const;
    /// Emulation pass on the inference pass's first-stage tokens.
    EmulatedFeatures emulate(const Inference& inference, const ForwardContext& ctx) const;
    /// Density from real and pseudo features concatenated per modality.
    Tensor density_with_pseudo(const Inference& inference, const EmulatedFeatures& pseudo) const;

    ParameterList parameters() const;
    /// Only the inference-pass parameters (no prompts, no pseudo reducers).
    ParameterList inference_parameters() const;

    ConvStream& stream_rgb() { return stream_rgb_; }
    ConvStream& stream_aux() { return stream_aux_; }
    std::optional<HcmaStack>& stack() { return stack_; }
    const std::optional<HcmaStack>& stack() const { return stack_; }
    HeadParams& head() { return head_; }
    PromptSet& prompts() { return prompts_; }
    InputPrompts& input_prompts() { return input_prompts_; }

   private:
    ModelConfig cfg_;
    ConvStream stream_rgb_, stream_aux_;
    std::optional<HcmaStack> stack_;
    HeadParams head_;
    PromptSet prompts_;
    InputPrompts input_prompts_;
    std::optional<Conv2d> pseudo_reduce_rgb_, pseudo_reduce_aux_;
};

}  // namespace modal_emu
