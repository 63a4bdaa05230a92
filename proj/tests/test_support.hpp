#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "modal_emu/losses.hpp"
#include "modal_emu/metrics.hpp"
#include "modal_emu/tensor.hpp"

namespace testing {

using modal_emu::Shape;
using modal_emu::Tensor;

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
    return Tensor::uniform(std::move(shape), lo, hi, rng, requires_grad);
}

struct GradCheck {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

/// Central finite differences of a scalar-valued f against reverse mode, for
/// every element of every tensor in `wrt`. Relative error uses
/// max(|analytic|, |numeric|, floor) as denominator.
inline GradCheck grad_check(const std::function<Tensor()>& f, std::vector<Tensor> wrt, double h = 1e-5,
                            double floor = 1e-4) {
    for (auto& t : wrt) t.zero_grad();
    modal_emu::backward(f());
    std::vector<std::vector<double>> analytic;
    for (auto& t : wrt) analytic.emplace_back(t.grad().begin(), t.grad().end());

    GradCheck out;
    modal_emu::NoGradGuard no_grad;
    for (std::size_t p = 0; p < wrt.size(); ++p) {
        auto data = wrt[p].data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double orig = data[i];
            data[i] = orig + h;
            const double up = f().item();
            data[i] = orig - h;
            const double down = f().item();
            data[i] = orig;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic[p][i];
            const double denom = std::max({std::fabs(a), std::fabs(numeric), floor});
            out.max_rel_error = std::max(out.max_rel_error, std::fabs(a - numeric) / denom);
            ++out.checked;
        }
    }
    return out;
}

/// Weighted sum with fixed random weights, so every output element gets a
/// distinct upstream gradient.
inline Tensor probe_loss(const Tensor& y, std::uint64_t seed = 99) {
    std::mt19937_64 rng(seed);
    const Tensor w = Tensor::uniform(y.shape(), -1.0, 1.0, rng);
    return modal_emu::sum(modal_emu::hadamard(y, w));
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

/// Bayesian loss from normalised 2-D Gaussian densities evaluated per cell.
inline double bayesian_loss_oracle(const std::vector<double>& density, std::size_t h, std::size_t w,
                                   const modal_emu::AnnotationSet& heads, double sigma, double stride) {
    if (heads.empty()) {
        double s = 0.0;
        for (double v : density) s += v;
        return std::fabs(s);
    }
    const double s = sigma / stride;
    const double pi = std::acos(-1.0);
    auto pdf = [&](double dx, double dy) {
        return std::exp(-(dx * dx + dy * dy) / (2.0 * s * s)) / (2.0 * pi * s * s);
    };
    double loss = 0.0;
    for (const auto& head : heads) {
        double mass = 0.0;
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double cx = x + 0.5, cy = y + 0.5;
                double z = 0.0;
                for (const auto& o : heads) z += pdf(cx - o.x / stride, cy - o.y / stride);
                mass += density[y * w + x] * pdf(cx - head.x / stride, cy - head.y / stride) / z;
            }
        loss += std::fabs(1.0 - mass);
    }
    return loss;
}

/// GAME by labelling every map cell and every head with its grid region.
inline double game_oracle(const std::vector<modal_emu::EvalRecord>& records, unsigned level) {
    const std::size_t k = std::size_t{1} << level;
    double total = 0.0;
    for (const auto& r : records) {
        auto band = [&](std::size_t i, std::size_t extent) {
            std::size_t g = 0;
            while (g + 1 < k && (g + 1) * extent / k <= i) ++g;
            return g;
        };
        auto region = [&](std::size_t i, std::size_t j) { return band(i, r.height) * k + band(j, r.width); };
        std::vector<double> diff(k * k, 0.0);
        for (std::size_t i = 0; i < r.height; ++i)
            for (std::size_t j = 0; j < r.width; ++j) diff[region(i, j)] += r.density[i * r.width + j];
        for (const auto& p : r.points) {
            const auto i = std::min<std::size_t>(static_cast<std::size_t>(std::max(0.0, p.y / r.stride)), r.height - 1);
            const auto j = std::min<std::size_t>(static_cast<std::size_t>(std::max(0.0, p.x / r.stride)), r.width - 1);
            diff[region(i, j)] -= 1.0;
        }
        for (double d : diff) total += std::fabs(d);
    }
    return total / static_cast<double>(records.size());
}

/// Random non-negative maps with random in-bounds heads.
inline std::vector<modal_emu::EvalRecord> random_records(std::mt19937_64& rng, std::size_t n) {
    std::uniform_int_distribution<std::size_t> extent(8, 12), heads(0, 15);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<modal_emu::EvalRecord> out(n);
    for (auto& r : out) {
        r.height = extent(rng);
        r.width = extent(rng);
        r.density.resize(r.height * r.width);
        for (double& v : r.density) v = 0.1 * u(rng);
        const std::size_t m = heads(rng);
        for (std::size_t i = 0; i < m; ++i)
            r.points.push_back({u(rng) * r.stride * r.width, u(rng) * r.stride * r.height});
    }
    return out;
}

}  // namespace testing
