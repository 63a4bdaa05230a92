#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "modal_emu/checkpoint.hpp"
#include "modal_emu/config.hpp"
#include "modal_emu/data.hpp"
#include "modal_emu/metrics.hpp"
#include "modal_emu/model.hpp"
#include "modal_emu/optim.hpp"
#include "modal_emu/seed.hpp"

namespace modal_emu {

/// Loss terms summed over the batch, and the global gradient norm.
struct StepReport {
    double bayesian = 0.0;
    double consistency = 0.0;
    double total = 0.0;
    double grad_norm = 0.0;
};

struct EpochLog {
    std::size_t epoch = 0;
    double bayesian = 0.0;     // per-sample mean over the epoch
    double consistency = 0.0;  // per-sample mean over the epoch
    double val_game0 = 0.0;    // NaN without a validation split
    double val_rmse = 0.0;
};

/// Worker count for evaluation and data generation: hardware concurrency,
/// capped by MODAL_EMU_THREADS when set.
std::size_t worker_threads();

BayesianLossConfig loss_config(const TrainConfig& cfg);

class Trainer {
   public:
    explicit Trainer(const TrainConfig& cfg);
    /// Model, optimizer moments and counters from a snapshot.
    static Trainer from_checkpoint(const Checkpoint& ckpt);

    /// One optimizer step on L_BL + L_CL summed over the (already augmented)
    /// batch. CME runs only when prompting is enabled.
    StepReport train_step(const std::vector<ModalSample>& batch);

    /// Shuffled, augmented pass over the split; increments the epoch counter.
    EpochLog train_epoch(const std::vector<ModalSample>& train);

    Checkpoint checkpoint() const;

    const TrainConfig& config() const { return cfg_; }
    CrowdCounter& model() { return model_; }
    const CrowdCounter& model() const { return model_; }
    std::size_t epoch() const { return epoch_; }
    std::size_t step() const { return adam_.steps(); }
    double best_metric() const { return best_metric_; }
    void set_best_metric(double v) { best_metric_ = v; }

   private:
    [[noreturn]] void abort_non_finite(const std::string& term, const std::string& sample_id) const;

    TrainConfig cfg_;
    CrowdCounter model_;
    Adam adam_;
    std::size_t epoch_ = 0;
    double best_metric_;
};

struct Evaluation {
    MetricsTable metrics;
    std::vector<EvalRecord> records;
};

/// MMI-only forward on full images, dropout off. Empty split is a contract error.
Evaluation evaluate(const CrowdCounter& model, const std::vector<ModalSample>& split);

/// Both passes; the head sees real and pseudo features concatenated per
/// modality. Needs a model built with use_pseudo_in_head.
Evaluation pseudo_head_variant(const CrowdCounter& model, const std::vector<ModalSample>& split);

struct AlignmentReport {
    Histogram rgb;  // F_hat_rgb vs pseudo RGB
    Histogram aux;  // F_hat_aux vs pseudo aux
};

AlignmentReport alignment_probe(const CrowdCounter& model, const std::vector<ModalSample>& split,
                                double bin_width = 0.04);

CrowdCounter model_from_checkpoint(const Checkpoint& ckpt);

struct FitOptions {
    std::filesystem::path out_dir;
    std::optional<std::filesystem::path> resume;
    std::function<void(const EpochLog&)> on_epoch;
};

struct FitResult {
    std::vector<EpochLog> log;
    std::filesystem::path best;
    std::filesystem::path last;
};

/// Trains for cfg.epochs, writing train_log.csv, last.ckpt every epoch and
/// best.ckpt whenever validation GAME(0) improves (every epoch without a
/// validation split or with select_on_val off).
FitResult fit(const TrainConfig& cfg, const std::vector<ModalSample>& train, const std::vector<ModalSample>& val,
              const FitOptions& options);

void write_log_header(std::ostream& os);
void write_log_row(std::ostream& os, const EpochLog& row);

struct AblationRow {
    std::string name;
    nlohmann::json overrides;
};

struct AblationGrid {
    nlohmann::json base = nlohmann::json::object();
    std::vector<AblationRow> rows;
};

/// {"base": {...}, "rows": [{"name": ..., "config": {...}}, ...]}; every
/// merged row must parse as a TrainConfig. Violations throw ConfigError.
AblationGrid parse_ablation_grid(const nlohmann::json& doc);
AblationGrid load_ablation_grid(const std::filesystem::path& path);
/// baseline, +SCMA, +SCMA+MCMA, +IP, +AP, VCA.
AblationGrid standard_ablation_grid();
TrainConfig row_config(const AblationGrid& grid, const AblationRow& row);

struct AblationResult {
    std::string name;
    MetricsTable test;
};

/// Trains each row (shared seed) into out_dir/<row>, evaluates its best
/// checkpoint on the test split, and writes ablation.txt / ablation.csv.
std::vector<AblationResult> run_ablation(const AblationGrid& grid, const std::vector<ModalSample>& train,
                                         const std::vector<ModalSample>& val, const std::vector<ModalSample>& test,
                                         const std::filesystem::path& out_dir,
                                         const std::function<void(const std::string&, const EpochLog&)>& progress = {});

void write_ablation_table(std::ostream& os, const std::vector<AblationResult>& rows);
void write_ablation_csv(std::ostream& os, const std::vector<AblationResult>& rows);

}  // namespace modal_emu
