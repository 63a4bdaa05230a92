#pragma once

#include <array>
#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

#include "modal_emu/losses.hpp"

namespace modal_emu {

/// One evaluated image: predicted density map and its ground-truth heads.
struct EvalRecord {
    std::vector<double> density;  // row-major H x W
    std::size_t height = 0;
    std::size_t width = 0;
    AnnotationSet points;         // image-pixel coordinates
    double stride = 8.0;          // image pixels per map cell

    double predicted_count() const;
    double true_count() const { return static_cast<double>(points.size()); }
};

/// Grid Average Mean Absolute Error over a 2^l x 2^l partition of each map.
/// Region g along an extent E spans [floor(g*E/2^l), floor((g+1)*E/2^l)), so
/// the grids of successive levels nest.
double game(const std::vector<EvalRecord>& records, unsigned level);
double mean_absolute_error(const std::vector<EvalRecord>& records);
double rmse(const std::vector<EvalRecord>& records);
/// True when game(records, 0) == mean_absolute_error(records) bit for bit.
bool game_equals_mae_check(const std::vector<EvalRecord>& records);

struct MetricsTable {
    std::array<double, 4> game{};  // levels 0..3
    double rmse = 0.0;
};

MetricsTable compute_metrics(const std::vector<EvalRecord>& records);
void write_metrics_text(std::ostream& os, const MetricsTable& m);
/// CSV with header "metric,level,value"; RMSE rows use an empty level.
void write_metrics_csv(std::ostream& os, const MetricsTable& m);

/// Distribution of per-sample relative L1 distances between real and pseudo
/// features: |real_i - pseudo_i|_1 / mean_j |real_j|_1.
struct Histogram {
    double bin_width = 0.04;
    std::vector<double> ratios;    // per sample, input order
    std::vector<double> percent;   // bucket k covers [k*w, (k+1)*w)

    double median() const;
    /// Percentage of samples with ratio strictly below `threshold`.
    double fraction_below(double threshold) const;
};

Histogram relative_l1_histogram(const std::vector<std::vector<double>>& real,
                                const std::vector<std::vector<double>>& pseudo, double bin_width);
void write_histogram_csv(std::ostream& os, const std::string& label, const Histogram& h);
void write_histogram_bars(std::ostream& os, const std::string& label, const Histogram& h);

}  // namespace modal_emu
