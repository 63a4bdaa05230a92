#pragma once

#include <cstddef>
#include <random>
#include <string>

#include "modal_emu/hcma.hpp"
#include "modal_emu/nn.hpp"
#include "modal_emu/tensor.hpp"

namespace modal_emu {

/// Key and value sub-prompts for one modality, each [L x d]. Undefined
/// tensors encode L = 0.
struct PromptSide {
    Tensor key;
    Tensor value;

    std::size_t length() const { return key.defined() ? key.shape()[0] : 0; }
};

/// Learnable attention prompts for both modalities. The same [L x d] prompt
/// rows are prepended to every head.
struct PromptSet {
    PromptSide rgb;
    PromptSide aux;

    /// U(-0.1, 0.1) initialisation; length 0 yields empty sides.
    static PromptSet create(std::size_t length, std::size_t head_dim, std::mt19937_64& rng);
    std::size_t length() const { return rgb.length(); }
    void collect(const std::string& prefix, ParameterList& out) const;
};

/// Self-attention of x with its own projections: softmax(QK^T/sqrt(d)) V.
Tensor self_attention(const Tensor& x, const Linear& query, const Linear& key, const Linear& value, std::size_t heads);

/// Attention prompting: queries come from x only, the prompts are prepended to
/// the keys and values. Output has as many rows as x. With an empty prompt it
/// is exactly self_attention.
Tensor prompt_attend(const Tensor& x, const PromptSide& prompts, const Linear& query, const Linear& key,
                     const Linear& value, std::size_t heads);

/// Pseudo features produced by the emulation pass.
struct EmulatedFeatures {
    Tensor pseudo_rgb;  // emulated from the auxiliary stream
    Tensor pseudo_aux;  // emulated from the RGB stream
};

/// Runs the shared stack with swapped routing: the prompted RGB sequence
/// enters the auxiliary slot (yielding pseudo-aux features) and the prompted
/// auxiliary sequence enters the RGB slot (yielding pseudo-RGB features).
EmulatedFeatures emulate(const Tensor& prompted_rgb, const Tensor& prompted_aux, const HcmaStack& shared,
                         std::size_t height, std::size_t width, const ForwardContext& ctx,
                         std::size_t prefix_tokens = 0);

/// Full-dimension prompt tokens [L x D] for the input-prompting comparison.
struct InputPrompts {
    Tensor rgb;
    Tensor aux;

    static InputPrompts create(std::size_t length, std::size_t dim, std::mt19937_64& rng);
    std::size_t length() const { return rgb.defined() ? rgb.shape()[0] : 0; }
    void collect(const std::string& prefix, ParameterList& out) const;
};

/// Prepends prompt tokens to a sequence (identity for an empty prompt).
Tensor input_prompting_variant(const Tensor& x, const Tensor& prompts);

}  // namespace modal_emu
