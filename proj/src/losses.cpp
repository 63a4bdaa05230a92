#include "modal_emu/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace modal_emu {

void BayesianLossConfig::validate() const {
    if (!(sigma > 0.0)) throw ContractError("Bayesian loss sigma must be positive");
    if (!(stride >= 1.0)) throw ContractError("density stride must be >= 1");
}

Tensor consistency_loss(const Tensor& real_rgb, const Tensor& pseudo_rgb, const Tensor& real_aux,
                        const Tensor& pseudo_aux) {
    if (real_rgb.shape() != pseudo_rgb.shape() || real_aux.shape() != pseudo_aux.shape())
        throw DimensionError("consistency loss pairs differ in shape: " + shape_str(real_rgb.shape()) + "/" +
                             shape_str(pseudo_rgb.shape()) + ", " + shape_str(real_aux.shape()) + "/" +
                             shape_str(pseudo_aux.shape()));
    return add(l2_norm(sub(real_rgb, pseudo_rgb)), l2_norm(sub(real_aux, pseudo_aux)));
}

std::vector<double> posterior_weights(std::size_t height, std::size_t width, const AnnotationSet& heads,
                                      const BayesianLossConfig& cfg) {
    cfg.validate();
    const std::size_t cells = height * width;
    const std::size_t n = heads.size();
    std::vector<double> post(n * cells, 0.0);
    if (n == 0) return post;
    const double sigma = cfg.sigma / cfg.stride;
    const double inv_two_var = 1.0 / (2.0 * sigma * sigma);
    std::vector<double> logits(n);
    for (std::size_t i = 0; i < height; ++i) {
        for (std::size_t j = 0; j < width; ++j) {
            const double cx = static_cast<double>(j) + 0.5;
            const double cy = static_cast<double>(i) + 0.5;
            double best = -std::numeric_limits<double>::infinity();
            for (std::size_t h = 0; h < n; ++h) {
                const double dx = cx - heads[h].x / cfg.stride;
                const double dy = cy - heads[h].y / cfg.stride;
                logits[h] = -(dx * dx + dy * dy) * inv_two_var;
                best = std::max(best, logits[h]);
            }
            double z = 0.0;
            for (std::size_t h = 0; h < n; ++h) {
                logits[h] = std::exp(logits[h] - best);
                z += logits[h];
            }
            const std::size_t cell = i * width + j;
            for (std::size_t h = 0; h < n; ++h) post[h * cells + cell] = logits[h] / z;
        }
    }
    return post;
}

Tensor bayesian_loss(const Tensor& density, const AnnotationSet& heads, const BayesianLossConfig& cfg) {
    if (density.dim() != 2) throw DimensionError("density map must be H x W, got " + shape_str(density.shape()));
    for (double v : density.data()) {
        if (std::isnan(v)) throw NumericError("NaN in density map passed to the Bayesian loss");
        if (v < 0.0) throw ContractError("density map passed to the Bayesian loss has negative values");
    }
    if (heads.empty()) return abs(sum(density));

    const std::size_t h = density.shape()[0], w = density.shape()[1];
    const Tensor post = Tensor::from({heads.size(), h * w}, posterior_weights(h, w, heads, cfg));
    const Tensor expected = matmul(post, reshape(density, {h * w, 1}));
    return sum(abs(add_scalar(scale(expected, -1.0), 1.0)));
}

Tensor total_loss(const Tensor& counting, const Tensor& consistency) {
    if (!std::isfinite(counting.item()) || !std::isfinite(consistency.item()))
        throw NumericError("non-finite loss term: L_BL=" + std::to_string(counting.item()) +
                           ", L_CL=" + std::to_string(consistency.item()));
    return add(counting, consistency);
}

}  // namespace modal_emu
