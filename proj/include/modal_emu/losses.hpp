#pragma once

#include <cstddef>
#include <vector>

#include "modal_emu/tensor.hpp"

namespace modal_emu {

/// Head point in image-pixel coordinates (x right, y down).
struct Point {
    double x = 0.0;
    double y = 0.0;
    bool operator==(const Point&) const = default;
};

using AnnotationSet = std::vector<Point>;

struct BayesianLossConfig {
    double sigma = 8.0;   // pixels at image resolution
    double stride = 8.0;  // image pixels per density-map cell

    void validate() const;
};

/// Sum of the Euclidean distances ||F_rgb - pseudo_rgb|| + ||F_aux - pseudo_aux||.
Tensor consistency_loss(const Tensor& real_rgb, const Tensor& pseudo_rgb, const Tensor& real_aux,
                        const Tensor& pseudo_aux);

/// Per-head posterior over the cells of an H x W map, row-major [heads x H*W].
/// Cell (i, j) is centred at map coordinates (j + 0.5, i + 0.5); a head at
/// pixel (x, y) sits at (x / stride, y / stride). Columns sum to 1.
std::vector<double> posterior_weights(std::size_t height, std::size_t width, const AnnotationSet& heads,
                                      const BayesianLossConfig& cfg);

/// sum_i |1 - <D, posterior_i>|; with no heads, |0 - sum(D)|.
Tensor bayesian_loss(const Tensor& density, const AnnotationSet& heads, const BayesianLossConfig& cfg);

/// L_BL + L_CL, both required finite.
Tensor total_loss(const Tensor& counting, const Tensor& consistency);

}  // namespace modal_emu
