#include "modal_emu/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>

#include "modal_emu/tensor.hpp"

namespace modal_emu {

namespace {

void validate_record(const EvalRecord& r) {
    if (r.height == 0 || r.width == 0 || r.density.size() != r.height * r.width)
        throw DimensionError("evaluation record density does not match " + std::to_string(r.height) + "x" +
                             std::to_string(r.width));
}

// Sum over rows [r0, r1) and columns [c0, c1), row-major.
double region_sum(const EvalRecord& r, std::size_t r0, std::size_t r1, std::size_t c0, std::size_t c1) {
    double acc = 0.0;
    for (std::size_t i = r0; i < r1; ++i)
        for (std::size_t j = c0; j < c1; ++j) acc += r.density[i * r.width + j];
    return acc;
}

std::vector<std::size_t> region_index(std::size_t extent, std::size_t k) {
    std::vector<std::size_t> out(extent);
    for (std::size_t g = 0; g < k; ++g)
        for (std::size_t i = g * extent / k; i < (g + 1) * extent / k; ++i) out[i] = g;
    return out;
}

std::size_t cell_of(double coord, double stride, std::size_t extent) {
    const double c = std::floor(coord / stride);
    if (c < 0.0) return 0;
    return std::min(static_cast<std::size_t>(c), extent - 1);
}

}  // namespace

double EvalRecord::predicted_count() const {
    validate_record(*this);
    return region_sum(*this, 0, height, 0, width);
}

double game(const std::vector<EvalRecord>& records, unsigned level) {
    if (records.empty()) throw ContractError("GAME needs at least one record");
    if (level > 16) throw ContractError("GAME level too large");
    const std::size_t k = std::size_t{1} << level;
    double total = 0.0;
    for (const auto& r : records) {
        validate_record(r);
        if (r.height < k || r.width < k)
            throw DimensionError("map " + std::to_string(r.height) + "x" + std::to_string(r.width) +
                                 " is smaller than the GAME(" + std::to_string(level) + ") grid");
        // Boundaries floor(g * extent / k) nest from one level to the next.
        const auto row_of = region_index(r.height, k);
        const auto col_of = region_index(r.width, k);
        std::vector<double> predicted(k * k, 0.0), truth(k * k, 0.0);
        for (std::size_t i = 0; i < r.height; ++i)
            for (std::size_t j = 0; j < r.width; ++j) predicted[row_of[i] * k + col_of[j]] += r.density[i * r.width + j];
        for (const auto& p : r.points)
            truth[row_of[cell_of(p.y, r.stride, r.height)] * k + col_of[cell_of(p.x, r.stride, r.width)]] += 1.0;
        double err = 0.0;
        for (std::size_t g = 0; g < k * k; ++g) err += std::fabs(predicted[g] - truth[g]);
        total += err;
    }
    return total / static_cast<double>(records.size());
}

double mean_absolute_error(const std::vector<EvalRecord>& records) {
    if (records.empty()) throw ContractError("MAE needs at least one record");
    double total = 0.0;
    for (const auto& r : records) total += std::fabs(r.predicted_count() - r.true_count());
    return total / static_cast<double>(records.size());
}

double rmse(const std::vector<EvalRecord>& records) {
    if (records.empty()) throw ContractError("RMSE needs at least one record");
    double total = 0.0;
    for (const auto& r : records) {
        const double e = r.predicted_count() - r.true_count();
        total += e * e;
    }
    return std::sqrt(total / static_cast<double>(records.size()));
}

bool game_equals_mae_check(const std::vector<EvalRecord>& records) {
    return game(records, 0) == mean_absolute_error(records);
}

MetricsTable compute_metrics(const std::vector<EvalRecord>& records) {
    MetricsTable m;
    for (unsigned l = 0; l < 4; ++l) m.game[l] = game(records, l);
    m.rmse = rmse(records);
    return m;
}

void write_metrics_text(std::ostream& os, const MetricsTable& m) {
    os << std::fixed << std::setprecision(4);
    os << "GAME(0)    GAME(1)    GAME(2)    GAME(3)    RMSE\n";
    for (double g : m.game) os << std::setw(10) << std::left << g << ' ';
    os << m.rmse << '\n';
    os.unsetf(std::ios::floatfield);
}

void write_metrics_csv(std::ostream& os, const MetricsTable& m) {
    os << "metric,level,value\n" << std::setprecision(17);
    for (unsigned l = 0; l < 4; ++l) os << "GAME," << l << ',' << m.game[l] << '\n';
    os << "RMSE,," << m.rmse << '\n';
}

double Histogram::median() const {
    if (ratios.empty()) throw ContractError("median of an empty histogram");
    std::vector<double> s = ratios;
    std::sort(s.begin(), s.end());
    const std::size_t n = s.size();
    return n % 2 == 1 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]);
}

double Histogram::fraction_below(double threshold) const {
    if (ratios.empty()) return 0.0;
    const auto below = std::count_if(ratios.begin(), ratios.end(), [&](double r) { return r < threshold; });
    return 100.0 * static_cast<double>(below) / static_cast<double>(ratios.size());
}

Histogram relative_l1_histogram(const std::vector<std::vector<double>>& real,
                                const std::vector<std::vector<double>>& pseudo, double bin_width) {
    if (real.empty() || real.size() != pseudo.size())
        throw ContractError("relative L1 histogram needs equally many (>0) real and pseudo samples");
    if (!(bin_width > 0.0)) throw ContractError("histogram bin width must be positive");
    double norm_total = 0.0;
    std::vector<double> dist(real.size());
    for (std::size_t i = 0; i < real.size(); ++i) {
        if (real[i].size() != pseudo[i].size())
            throw DimensionError("sample " + std::to_string(i) + ": real and pseudo features differ in size");
        double n = 0.0, d = 0.0;
        for (std::size_t k = 0; k < real[i].size(); ++k) {
            n += std::fabs(real[i][k]);
            d += std::fabs(real[i][k] - pseudo[i][k]);
        }
        norm_total += n;
        dist[i] = d;
    }
    const double avg = norm_total / static_cast<double>(real.size());
    if (!(avg > 0.0) || !std::isfinite(avg)) throw NumericError("average L1 norm of real features is zero");

    Histogram h;
    h.bin_width = bin_width;
    h.ratios.resize(real.size());
    std::size_t bins = 1;
    for (std::size_t i = 0; i < real.size(); ++i) {
        h.ratios[i] = dist[i] / avg;
        bins = std::max(bins, static_cast<std::size_t>(std::floor(h.ratios[i] / bin_width)) + 1);
    }
    h.percent.assign(bins, 0.0);
    const double unit = 100.0 / static_cast<double>(real.size());
    for (double r : h.ratios) h.percent[static_cast<std::size_t>(std::floor(r / bin_width))] += unit;
    return h;
}

void write_histogram_csv(std::ostream& os, const std::string& label, const Histogram& h) {
    os << std::setprecision(10);
    for (std::size_t k = 0; k < h.percent.size(); ++k)
        os << label << ',' << static_cast<double>(k) * h.bin_width << ',' << static_cast<double>(k + 1) * h.bin_width
           << ',' << h.percent[k] << '\n';
}

void write_histogram_bars(std::ostream& os, const std::string& label, const Histogram& h) {
    os << label << " (median ratio " << std::setprecision(4) << h.median() << ")\n";
    for (std::size_t k = 0; k < h.percent.size(); ++k) {
        if (h.percent[k] == 0.0) continue;
        os << "  [" << std::fixed << std::setprecision(2) << static_cast<double>(k) * h.bin_width << ", "
           << static_cast<double>(k + 1) * h.bin_width << ") " << std::setw(6) << h.percent[k] << "% "
           << std::string(static_cast<std::size_t>(std::lround(h.percent[k] / 2.0)), '#') << '\n';
        os.unsetf(std::ios::floatfield);
    }
}

}  // namespace modal_emu
