#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "modal_emu/tensor.hpp"

namespace modal_emu {

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

/// Ordered (name, tensor) registry. Order is construction order and is what
/// checkpoints and optimizers iterate over.
using ParameterList = std::vector<NamedTensor>;

std::size_t parameter_count(const ParameterList& params);

/// Per-forward settings: dropout mode and the generator feeding dropout masks.
struct ForwardContext {
    bool training = false;
    double dropout = 0.1;
    std::mt19937_64* rng = nullptr;
};

/// U(-b, b) with b = sqrt(3 gain / fan_in): gain 2 ahead of a ReLU, 1 for a linear output.
Tensor kaiming_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng, double gain = 2.0);

/// Row-vector affine map: y = x W + b, x is [N x in], W is [in x out].
struct Linear {
    Tensor weight;
    Tensor bias;  // undefined when constructed without bias

    static Linear create(std::size_t in, std::size_t out, bool with_bias, std::mt19937_64& rng);
    static Linear identity(std::size_t dim);
    Tensor forward(const Tensor& x) const;
    std::size_t in_features() const { return weight.shape()[0]; }
    std::size_t out_features() const { return weight.shape()[1]; }
    void collect(const std::string& prefix, ParameterList& out) const;
};

struct Conv2d {
    Tensor weight;  // [out x in x k x k]
    Tensor bias;    // [out]
    std::size_t stride = 1;
    std::size_t padding = 0;

    static Conv2d create(std::size_t in, std::size_t out, std::size_t kernel, std::size_t padding,
                         std::mt19937_64& rng, double gain = 2.0);
    Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }
    void collect(const std::string& prefix, ParameterList& out) const;
};

/// Overwrites every value of dst with src (shapes must match).
void copy_values(Tensor& dst, const Tensor& src);

}  // namespace modal_emu
