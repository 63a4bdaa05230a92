#include "modal_emu/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <thread>

namespace modal_emu {

namespace {

constexpr std::uint64_t kDropoutStream = 0xD809;
constexpr std::uint64_t kShuffleStream = 0x5F1E;
constexpr std::uint64_t kAugmentStream = 0xA6;

bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

/// Runs fn(i) for i in [0, n) on up to worker_threads() threads.
template <typename Fn>
void parallel_for(std::size_t n, Fn fn) {
    const std::size_t workers = std::min(worker_threads(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::atomic<bool> failed{false};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n && !failed; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    if (!failed.exchange(true)) error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

EvalRecord make_record(const Tensor& density, const ModalSample& s) {
    EvalRecord r;
    r.density = density.values();
    r.height = density.shape()[0];
    r.width = density.shape()[1];
    r.points = s.points;
    r.stride = 8.0;
    return r;
}

void require_split(const std::vector<ModalSample>& split) {
    if (split.empty()) throw ContractError("evaluation split is empty");
}

}  // namespace

std::size_t worker_threads() {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("MODAL_EMU_THREADS")) {
        char* end = nullptr;
        const long cap = std::strtol(env, &end, 10);
        if (end != env && cap >= 1) n = std::min(n, static_cast<std::size_t>(cap));
    }
    return n;
}

BayesianLossConfig loss_config(const TrainConfig& cfg) {
    BayesianLossConfig b;
    b.sigma = cfg.sigma;
    b.stride = 8.0;
    return b;
}

Trainer::Trainer(const TrainConfig& cfg)
    : cfg_(cfg),
      model_(CrowdCounter::create(cfg.model, cfg.seed)),
      best_metric_(std::numeric_limits<double>::infinity()) {
    cfg_.validate();
    adam_ = Adam(model_.parameters(), {cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon});
}

Trainer Trainer::from_checkpoint(const Checkpoint& ckpt) {
    Trainer t(ckpt.config);
    ParameterList params = t.model_.parameters();
    restore_parameters(ckpt, params);
    t.adam_.load_state(ckpt.tensors, ckpt.step);
    t.epoch_ = ckpt.epoch;
    t.best_metric_ = ckpt.best_metric;
    return t;
}

Checkpoint Trainer::checkpoint() const {
    Checkpoint c;
    c.config = cfg_;
    c.config_hash = config_hash(cfg_);
    c.epoch = epoch_;
    c.step = adam_.steps();
    c.best_metric = best_metric_;
    for (const auto& p : model_.parameters()) c.tensors.push_back({p.name, p.tensor.clone()});
    for (auto& m : adam_.state()) c.tensors.push_back(std::move(m));
    return c;
}

void Trainer::abort_non_finite(const std::string& term, const std::string& sample_id) const {
    std::ostringstream msg;
    msg << "non-finite " << term << " at step " << adam_.steps() << " (sample " << sample_id << ")";
    for (const auto& p : model_.parameters()) {
        if (!all_finite(p.tensor.data())) {
            msg << "; offending tensor: " << p.name << " (values)";
            throw NumericError(msg.str());
        }
        if (p.tensor.has_grad() && !all_finite(p.tensor.grad())) {
            msg << "; offending tensor: " << p.name << " (gradient)";
            throw NumericError(msg.str());
        }
    }
    msg << "; offending tensor: " << term << " (all parameters finite)";
    throw NumericError(msg.str());
}

StepReport Trainer::train_step(const std::vector<ModalSample>& batch) {
    if (batch.empty()) throw ContractError("training batch is empty");
    for (const auto& p : model_.parameters())
        if (!all_finite(p.tensor.data())) abort_non_finite("parameter", "-");

    const BayesianLossConfig bl = loss_config(cfg_);
    adam_.zero_grad();
    StepReport report;
    for (std::size_t k = 0; k < batch.size(); ++k) {
        const ModalSample& s = batch[k];
        std::mt19937_64 rng(derive_seed(cfg_.seed, kDropoutStream, adam_.steps(), k));
        const ForwardContext ctx{true, cfg_.model.dropout, &rng};
        const auto [rgb, aux] = model_.inputs(s);

        Tensor l_bl, l_cl, loss;
        try {
            const Inference inf = model_.infer(rgb, aux, ctx);
            Tensor density = inf.density;
            if (model_.has_emulation()) {
                const EmulatedFeatures em = model_.emulate(inf, ctx);
                l_cl = consistency_loss(inf.fused.rgb, em.pseudo_rgb, inf.fused.aux, em.pseudo_aux);
                if (cfg_.model.use_pseudo_in_head) density = model_.density_with_pseudo(inf, em);
            }
            l_bl = bayesian_loss(density, s.points, bl);
        } catch (const NumericError&) {
            abort_non_finite("forward activation", s.id);
        }
        if (!std::isfinite(l_bl.item())) abort_non_finite("L_BL", s.id);
        if (l_cl.defined() && !std::isfinite(l_cl.item())) abort_non_finite("L_CL", s.id);
        loss = l_cl.defined() ? total_loss(l_bl, l_cl) : l_bl;
        backward(loss);

        report.bayesian += l_bl.item();
        if (l_cl.defined()) report.consistency += l_cl.item();
        report.total += loss.item();
    }

    double sq = 0.0;
    for (const auto& p : adam_.parameters()) {
        if (!p.tensor.has_grad()) continue;
        for (double g : p.tensor.grad()) sq += g * g;
    }
    report.grad_norm = std::sqrt(sq);
    if (!std::isfinite(report.grad_norm)) abort_non_finite("gradient norm", batch.front().id);
    adam_.step();
    return report;
}

EpochLog Trainer::train_epoch(const std::vector<ModalSample>& train) {
    if (train.empty()) throw ContractError("training split is empty");
    ++epoch_;
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(derive_seed(cfg_.seed, kShuffleStream, epoch_));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    EpochLog log;
    log.epoch = epoch_;
    std::vector<ModalSample> batch;
    for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
        batch.clear();
        const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
        for (std::size_t i = start; i < end; ++i) {
            const ModalSample& s = train[order[i]];
            const std::size_t crop = std::min({cfg_.crop_size, s.rgb.height, s.rgb.width});
            batch.push_back(augment(s, crop, cfg_.flip_prob, derive_seed(cfg_.seed, kAugmentStream, epoch_, i)));
        }
        const StepReport r = train_step(batch);
        log.bayesian += r.bayesian;
        log.consistency += r.consistency;
    }
    log.bayesian /= static_cast<double>(train.size());
    log.consistency /= static_cast<double>(train.size());
    log.val_game0 = log.val_rmse = std::numeric_limits<double>::quiet_NaN();
    return log;
}

Evaluation evaluate(const CrowdCounter& model, const std::vector<ModalSample>& split) {
    require_split(split);
    Evaluation ev;
    ev.records.resize(split.size());
    parallel_for(split.size(), [&](std::size_t i) {
        NoGradGuard no_grad;
        const auto [rgb, aux] = model.inputs(split[i]);
        const Inference inf = model.infer(rgb, aux, ForwardContext{});
        ev.records[i] = make_record(inf.density, split[i]);
    });
    ev.metrics = compute_metrics(ev.records);
    return ev;
}

Evaluation pseudo_head_variant(const CrowdCounter& model, const std::vector<ModalSample>& split) {
    if (!model.has_emulation()) throw ContractError("pseudo-feature head needs prompting enabled");
    if (!model.config().use_pseudo_in_head) throw ContractError("model was trained without the pseudo-feature head");
    require_split(split);
    Evaluation ev;
    ev.records.resize(split.size());
    parallel_for(split.size(), [&](std::size_t i) {
        NoGradGuard no_grad;
        const auto [rgb, aux] = model.inputs(split[i]);
        const Inference inf = model.infer(rgb, aux, ForwardContext{});
        const EmulatedFeatures em = model.emulate(inf, ForwardContext{});
        ev.records[i] = make_record(model.density_with_pseudo(inf, em), split[i]);
    });
    ev.metrics = compute_metrics(ev.records);
    return ev;
}

AlignmentReport alignment_probe(const CrowdCounter& model, const std::vector<ModalSample>& split, double bin_width) {
    if (!model.has_emulation()) throw ContractError("alignment probe needs prompting enabled");
    require_split(split);
    std::vector<std::vector<double>> real_rgb(split.size()), pseudo_rgb(split.size());
    std::vector<std::vector<double>> real_aux(split.size()), pseudo_aux(split.size());
    parallel_for(split.size(), [&](std::size_t i) {
        NoGradGuard no_grad;
        const auto [rgb, aux] = model.inputs(split[i]);
        const Inference inf = model.infer(rgb, aux, ForwardContext{});
        const EmulatedFeatures em = model.emulate(inf, ForwardContext{});
        real_rgb[i] = inf.fused.rgb.values();
        real_aux[i] = inf.fused.aux.values();
        pseudo_rgb[i] = em.pseudo_rgb.values();
        pseudo_aux[i] = em.pseudo_aux.values();
    });
    return {relative_l1_histogram(real_rgb, pseudo_rgb, bin_width),
            relative_l1_histogram(real_aux, pseudo_aux, bin_width)};
}

CrowdCounter model_from_checkpoint(const Checkpoint& ckpt) {
    CrowdCounter model = CrowdCounter::create(ckpt.config.model, ckpt.config.seed);
    ParameterList params = model.parameters();
    restore_parameters(ckpt, params);
    return model;
}

void write_log_header(std::ostream& os) { os << "epoch,L_BL,L_CL,val_GAME0,val_RMSE\n"; }

void write_log_row(std::ostream& os, const EpochLog& row) {
    const auto flags = os.flags();
    const auto prec = os.precision();
    os << std::setprecision(17) << row.epoch << ',' << row.bayesian << ',' << row.consistency << ',';
    if (std::isfinite(row.val_game0)) os << row.val_game0;
    os << ',';
    if (std::isfinite(row.val_rmse)) os << row.val_rmse;
    os << '\n';
    os.flags(flags);
    os.precision(prec);
}

FitResult fit(const TrainConfig& cfg, const std::vector<ModalSample>& train, const std::vector<ModalSample>& val,
              const FitOptions& options) {
    namespace fs = std::filesystem;
    fs::create_directories(options.out_dir);
    FitResult result;
    result.best = options.out_dir / "best.ckpt";
    result.last = options.out_dir / "last.ckpt";
    const fs::path log_path = options.out_dir / "train_log.csv";

    std::optional<Trainer> trainer;
    std::vector<std::string> kept_rows;
    if (options.resume) {
        const Checkpoint ckpt = load_checkpoint(*options.resume);
        if (ckpt.config_hash != config_hash(cfg)) {
            TrainConfig extended = ckpt.config;
            extended.epochs = cfg.epochs;
            if (config_hash(extended) != config_hash(cfg))
                throw ContractError("resume checkpoint was trained with a different configuration");
        }
        trainer.emplace(Trainer::from_checkpoint(ckpt));
        std::ifstream old(log_path);
        std::string line;
        std::getline(old, line);
        while (std::getline(old, line)) {
            if (line.empty()) continue;
            if (std::stoul(line.substr(0, line.find(','))) <= ckpt.epoch) kept_rows.push_back(line);
        }
    } else {
        trainer.emplace(cfg);
    }

    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw std::runtime_error("cannot write " + log_path.string());
    write_log_header(log);
    for (const auto& line : kept_rows) log << line << '\n';
    log.flush();

    const bool use_val = cfg.select_on_val && !val.empty();
    while (trainer->epoch() < cfg.epochs) {
        EpochLog row = trainer->train_epoch(train);
        if (!val.empty()) {
            const Evaluation ev = evaluate(trainer->model(), val);
            row.val_game0 = ev.metrics.game[0];
            row.val_rmse = ev.metrics.rmse;
        }
        write_log_row(log, row);
        log.flush();
        result.log.push_back(row);

        const bool improved = !use_val || row.val_game0 < trainer->best_metric();
        if (improved && use_val) trainer->set_best_metric(row.val_game0);
        const Checkpoint ckpt = trainer->checkpoint();
        if (improved) save_checkpoint(result.best, ckpt);
        save_checkpoint(result.last, ckpt);
        if (options.on_epoch) options.on_epoch(row);
    }
    if (!fs::exists(result.best)) save_checkpoint(result.best, trainer->checkpoint());
    if (!fs::exists(result.last)) save_checkpoint(result.last, trainer->checkpoint());
    return result;
}

AblationGrid parse_ablation_grid(const nlohmann::json& doc) {
    if (!doc.is_object()) throw ConfigError("<grid>", "grid must be a JSON object");
    for (const auto& [key, _] : doc.items())
        if (key != "base" && key != "rows") throw ConfigError(key, "unknown grid key");
    AblationGrid grid;
    if (doc.contains("base")) {
        if (!doc["base"].is_object()) throw ConfigError("base", "must be an object");
        grid.base = doc["base"];
    }
    if (!doc.contains("rows") || !doc["rows"].is_array() || doc["rows"].empty())
        throw ConfigError("rows", "must be a non-empty array");
    for (const auto& r : doc["rows"]) {
        if (!r.is_object() || !r.contains("name") || !r["name"].is_string())
            throw ConfigError("rows", "each row needs a string name");
        for (const auto& [key, _] : r.items())
            if (key != "name" && key != "config") throw ConfigError("rows." + key, "unknown row key");
        AblationRow row{r["name"].get<std::string>(), nlohmann::json::object()};
        if (row.name.empty() || row.name.find_first_of("/\\") != std::string::npos || row.name == "." ||
            row.name == "..")
            throw ConfigError("rows.name", "'" + row.name + "' is not a usable row name");
        if (r.contains("config")) {
            if (!r["config"].is_object()) throw ConfigError("rows.config", "must be an object");
            row.overrides = r["config"];
        }
        for (const auto& other : grid.rows)
            if (other.name == row.name) throw ConfigError("rows.name", "duplicate row " + row.name);
        grid.rows.push_back(std::move(row));
    }
    for (const auto& row : grid.rows) row_config(grid, row);
    return grid;
}

AblationGrid load_ablation_grid(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("<grid>", "cannot open " + path.string());
    try {
        return parse_ablation_grid(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("<grid>", std::string("invalid JSON: ") + e.what());
    }
}

AblationGrid standard_ablation_grid() {
    using nlohmann::json;
    AblationGrid g;
    g.rows = {
        {"baseline", json{{"scma", false}, {"mcma", false}, {"prompting_mode", "off"}}},
        {"+SCMA", json{{"scma", true}, {"mcma", false}, {"prompting_mode", "off"}}},
        {"+SCMA+MCMA", json{{"scma", true}, {"mcma", true}, {"prompting_mode", "off"}}},
        {"+IP", json{{"scma", true}, {"mcma", true}, {"prompting_mode", "ip"}}},
        {"+AP", json{{"scma", true}, {"mcma", true}, {"prompting_mode", "ap"}}},
        {"VCA", json{{"attention", "vca"}, {"scma", true}, {"mcma", false}, {"prompting_mode", "ap"}}},
    };
    return g;
}

TrainConfig row_config(const AblationGrid& grid, const AblationRow& row) {
    nlohmann::json merged = grid.base;
    for (const auto& [key, value] : row.overrides.items()) merged[key] = value;
    return train_config_from_json(merged);
}

std::vector<AblationResult> run_ablation(const AblationGrid& grid, const std::vector<ModalSample>& train,
                                         const std::vector<ModalSample>& val, const std::vector<ModalSample>& test,
                                         const std::filesystem::path& out_dir,
                                         const std::function<void(const std::string&, const EpochLog&)>& progress) {
    require_split(test);
    std::vector<AblationResult> results;
    for (const auto& row : grid.rows) {
        const TrainConfig cfg = row_config(grid, row);
        FitOptions opts;
        opts.out_dir = out_dir / row.name;
        if (progress) opts.on_epoch = [&](const EpochLog& e) { progress(row.name, e); };
        const FitResult fitted = fit(cfg, train, val, opts);
        const CrowdCounter model = model_from_checkpoint(load_checkpoint(fitted.best));
        const Evaluation ev = cfg.model.use_pseudo_in_head ? pseudo_head_variant(model, test) : evaluate(model, test);
        results.push_back({row.name, ev.metrics});
    }
    std::ofstream txt(out_dir / "ablation.txt");
    write_ablation_table(txt, results);
    std::ofstream csv(out_dir / "ablation.csv");
    write_ablation_csv(csv, results);
    return results;
}

void write_ablation_table(std::ostream& os, const std::vector<AblationResult>& rows) {
    std::size_t width = 6;
    for (const auto& r : rows) width = std::max(width, r.name.size());
    const auto flags = os.flags();
    os << std::left << std::setw(static_cast<int>(width + 2)) << "Method" << std::right;
    for (const char* h : {"GAME(0)", "GAME(1)", "GAME(2)", "GAME(3)", "RMSE"}) os << std::setw(10) << h;
    os << '\n';
    os << std::fixed << std::setprecision(2);
    for (const auto& r : rows) {
        os << std::left << std::setw(static_cast<int>(width + 2)) << r.name << std::right;
        for (double g : r.test.game) os << std::setw(10) << g;
        os << std::setw(10) << r.test.rmse << '\n';
    }
    os.flags(flags);
}

void write_ablation_csv(std::ostream& os, const std::vector<AblationResult>& rows) {
    const auto prec = os.precision();
    os << "method,GAME0,GAME1,GAME2,GAME3,RMSE\n" << std::setprecision(17);
    for (const auto& r : rows) {
        os << r.name;
        for (double g : r.test.game) os << ',' << g;
        os << ',' << r.test.rmse << '\n';
    }
    os.precision(prec);
}

}  // namespace modal_emu
