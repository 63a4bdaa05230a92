#include "modal_emu/nn.hpp"

#include <algorithm>
#include <cmath>

namespace modal_emu {

std::size_t parameter_count(const ParameterList& params) {
    std::size_t n = 0;
    for (const auto& p : params) n += p.tensor.numel();
    return n;
}

Tensor kaiming_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng, double gain) {
    const double bound = std::sqrt(3.0 * gain / static_cast<double>(fan_in));
    return Tensor::uniform(std::move(shape), -bound, bound, rng, true);
}

Linear Linear::create(std::size_t in, std::size_t out, bool with_bias, std::mt19937_64& rng) {
    Linear l;
    l.weight = kaiming_uniform({in, out}, in, rng, 1.0);
    if (with_bias) l.bias = Tensor::zeros({out}, true);
    return l;
}

Linear Linear::identity(std::size_t dim) {
    std::vector<double> w(dim * dim, 0.0);
    for (std::size_t i = 0; i < dim; ++i) w[i * dim + i] = 1.0;
    Linear l;
    l.weight = Tensor::from({dim, dim}, std::move(w), true);
    return l;
}

Tensor Linear::forward(const Tensor& x) const {
    Tensor y = matmul(x, weight);
    return bias.defined() ? add_row_bias(y, bias) : y;
}

void Linear::collect(const std::string& prefix, ParameterList& out) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

Conv2d Conv2d::create(std::size_t in, std::size_t out, std::size_t kernel, std::size_t padding,
                      std::mt19937_64& rng, double gain) {
    Conv2d c;
    c.weight = kaiming_uniform({out, in, kernel, kernel}, in * kernel * kernel, rng, gain);
    c.bias = Tensor::zeros({out}, true);
    c.padding = padding;
    return c;
}

void Conv2d::collect(const std::string& prefix, ParameterList& out) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
}

void copy_values(Tensor& dst, const Tensor& src) {
    if (dst.shape() != src.shape())
        throw DimensionError("copy_values shape mismatch: " + shape_str(dst.shape()) + " vs " + shape_str(src.shape()));
    std::copy(src.data().begin(), src.data().end(), dst.data().begin());
}

}  // namespace modal_emu
