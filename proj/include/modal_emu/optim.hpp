#pragma once

#include <cstddef>
#include <vector>

#include "modal_emu/nn.hpp"

namespace modal_emu {

struct AdamConfig {
    double learning_rate = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Bias-corrected Adam over a fixed parameter list.
class Adam {
   public:
    Adam() = default;
    Adam(ParameterList params, AdamConfig cfg);

    /// Applies one update from the parameters' accumulated gradients.
    void step();
    void zero_grad();

    std::size_t steps() const { return steps_; }
    const AdamConfig& config() const { return cfg_; }
    const ParameterList& parameters() const { return params_; }

    /// Moments as named tensors "adam.m/<param>" and "adam.v/<param>".
    ParameterList state() const;
    /// Restores moments exported by state(); every parameter must be present.
    void load_state(const ParameterList& state, std::size_t steps);

   private:
    ParameterList params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t steps_ = 0;
};

}  // namespace modal_emu
