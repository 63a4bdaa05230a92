#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>

#include "modal_emu/trainer.hpp"

namespace fs = std::filesystem;
using namespace modal_emu;

namespace {

constexpr int kUsage = 2;
constexpr int kRuntime = 3;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::pair<std::size_t, std::size_t> parse_size(const std::string& text) {
    const auto x = text.find_first_of("xX");
    if (x == std::string::npos) throw UsageError("--size must look like HxW, got '" + text + "'");
    try {
        std::size_t used_h = 0, used_w = 0;
        const auto h = std::stoul(text.substr(0, x), &used_h);
        const auto w = std::stoul(text.substr(x + 1), &used_w);
        if (used_h != x || used_w != text.size() - x - 1) throw std::invalid_argument(text);
        return {h, w};
    } catch (const std::logic_error&) {
        throw UsageError("--size must look like HxW, got '" + text + "'");
    }
}

std::pair<double, double> parse_range(const std::string& text) {
    const auto comma = text.find(',');
    if (comma == std::string::npos) throw UsageError("--illumination-range must look like a,b");
    try {
        return {std::stod(text.substr(0, comma)), std::stod(text.substr(comma + 1))};
    } catch (const std::logic_error&) {
        throw UsageError("--illumination-range must look like a,b");
    }
}

void print_metrics(const std::string& label, const MetricsTable& m) {
    std::cout << label << '\n';
    write_metrics_text(std::cout, m);
}

int gen_data(const fs::path& out, const DatasetSpec& spec, bool force) {
    spec.validate();
    if (fs::exists(out) && !fs::is_empty(out)) {
        if (!force) throw UsageError(out.string() + " exists and is not empty (use --force)");
        fs::remove_all(out);
    }
    for (const char* split : {"train", "val", "test"}) {
        fs::create_directories(out / split);
        for (const auto& s : generate_split(spec, split)) save_sample(out / split, s);
        std::cout << split << ": " << spec.count(split) << " samples\n";
    }
    return 0;
}

std::vector<ModalSample> load_optional_split(const fs::path& root, const std::string& split) {
    if (!fs::is_directory(root / split)) return {};
    return load_split(root, split);
}

int train(const fs::path& data, const fs::path& config, const fs::path& out, const std::string& resume) {
    const TrainConfig cfg = load_train_config(config);
    const auto train_split = load_split(data, "train");
    const auto val_split = load_optional_split(data, "val");
    FitOptions opts;
    opts.out_dir = out;
    if (!resume.empty()) opts.resume = resume;
    opts.on_epoch = [](const EpochLog& e) {
        std::cout << "epoch " << e.epoch << "  L_BL " << e.bayesian << "  L_CL " << e.consistency;
        if (std::isfinite(e.val_game0)) std::cout << "  val GAME(0) " << e.val_game0 << "  RMSE " << e.val_rmse;
        std::cout << std::endl;
    };
    const FitResult r = fit(cfg, train_split, val_split, opts);
    std::cout << "best checkpoint: " << r.best.string() << '\n';
    return 0;
}

int eval(const fs::path& ckpt_path, const fs::path& data, const std::string& split, const std::string& csv) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const CrowdCounter model = model_from_checkpoint(ckpt);
    const auto samples = load_split(data, split);
    const Evaluation ev = evaluate(model, samples);
    print_metrics("standard path (" + split + ", " + std::to_string(samples.size()) + " images)", ev.metrics);
    if (model.config().use_pseudo_in_head) {
        const Evaluation pv = pseudo_head_variant(model, samples);
        print_metrics("real + pseudo features in head", pv.metrics);
    }
    if (!csv.empty()) {
        std::ofstream os(csv);
        write_metrics_csv(os, ev.metrics);
    }
    return 0;
}

int ablate(const fs::path& data, const fs::path& out, const std::string& grid_path) {
    const AblationGrid grid = grid_path.empty() ? standard_ablation_grid() : load_ablation_grid(grid_path);
    const auto train_split = load_split(data, "train");
    const auto val_split = load_optional_split(data, "val");
    const auto test_split = load_split(data, "test");
    fs::create_directories(out);
    const auto results = run_ablation(grid, train_split, val_split, test_split, out,
                                      [](const std::string& row, const EpochLog& e) {
                                          std::cout << row << " epoch " << e.epoch << "  L_BL " << e.bayesian
                                                    << std::endl;
                                      });
    write_ablation_table(std::cout, results);
    return 0;
}

int probe(const fs::path& ckpt_path, const fs::path& data, const std::string& split, const fs::path& out,
          double bin_width) {
    const CrowdCounter model = model_from_checkpoint(load_checkpoint(ckpt_path));
    const AlignmentReport rep = alignment_probe(model, load_split(data, split), bin_width);
    fs::create_directories(out);
    std::ofstream csv(out / "alignment.csv");
    write_histogram_csv(csv, "rgb", rep.rgb);
    write_histogram_csv(csv, "aux", rep.aux);
    std::ofstream bars(out / "alignment.txt");
    write_histogram_bars(bars, "rgb", rep.rgb);
    write_histogram_bars(bars, "aux", rep.aux);
    write_histogram_bars(std::cout, "rgb", rep.rgb);
    write_histogram_bars(std::cout, "aux", rep.aux);
    std::cout << "median ratio rgb " << rep.rgb.median() << "  aux " << rep.aux.median() << '\n';
    return 0;
}

int export_density(const fs::path& ckpt_path, const fs::path& sample_dir, const fs::path& out) {
    const CrowdCounter model = model_from_checkpoint(load_checkpoint(ckpt_path));
    const ModalSample sample = load_sample(sample_dir);
    const Evaluation ev = evaluate(model, {sample});
    const EvalRecord& r = ev.records.front();
    double peak = 0.0;
    for (double v : r.density) peak = std::max(peak, v);
    Image img{1, r.height, r.width, r.density};
    for (double& v : img.values) v = peak > 0.0 ? v / peak : 0.0;
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    write_pgm16(out, img);

    nlohmann::json side;
    side["count"] = r.predicted_count();
    side["height"] = r.height;
    side["width"] = r.width;
    side["max_density"] = peak;
    side["sample"] = sample.id;
    fs::path sidecar = out;
    sidecar += ".json";
    std::ofstream js(sidecar);
    js << std::setprecision(17) << side.dump(2) << '\n';
    std::cout << "count " << std::setprecision(10) << r.predicted_count() << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Cross-modal emulation crowd counter"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic bimodal crowd benchmark");
    std::string gen_out, size = "64x64", illum = "0.1,1.0";
    DatasetSpec spec;
    bool force = false;
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--train", spec.train, "Training scenes")->required();
    gen->add_option("--val", spec.val, "Validation scenes")->required();
    gen->add_option("--test", spec.test, "Test scenes")->required();
    gen->add_option("--size", size, "Image size HxW")->capture_default_str();
    gen->add_option("--seed", spec.seed, "Generator seed")->required();
    gen->add_option("--illumination-range", illum, "Illumination range a,b")->capture_default_str();
    gen->add_flag("--force", force, "Replace a non-empty output directory");

    auto* tr = app.add_subcommand("train", "Train a model");
    std::string data, config, out, resume;
    tr->add_option("--data", data, "Dataset root")->required();
    tr->add_option("--config", config, "JSON training config")->required();
    tr->add_option("--out", out, "Run directory")->required();
    tr->add_option("--resume", resume, "Checkpoint to resume from");

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
    std::string ckpt, split = "test", csv;
    ev->add_option("--ckpt", ckpt, "Checkpoint")->required();
    ev->add_option("--data", data, "Dataset root")->required();
    ev->add_option("--split", split, "Split name")->capture_default_str();
    ev->add_option("--csv", csv, "Write metrics CSV here");

    auto* ab = app.add_subcommand("ablate", "Run an ablation grid");
    std::string grid;
    ab->add_option("--data", data, "Dataset root")->required();
    ab->add_option("--out", out, "Output directory")->required();
    ab->add_option("--grid", grid, "Grid JSON (default: the standard six rows)");

    auto* pr = app.add_subcommand("probe", "Relative L1 distance between real and pseudo features");
    double bin_width = 0.04;
    pr->add_option("--ckpt", ckpt, "Checkpoint")->required();
    pr->add_option("--data", data, "Dataset root")->required();
    pr->add_option("--split", split, "Split name")->capture_default_str();
    pr->add_option("--out", out, "Output directory")->required();
    pr->add_option("--bin-width", bin_width, "Histogram bin width")->capture_default_str();

    auto* ex = app.add_subcommand("export-density", "Write a predicted density map as 16-bit PGM");
    std::string sample;
    ex->add_option("--ckpt", ckpt, "Checkpoint")->required();
    ex->add_option("--sample", sample, "Sample directory")->required();
    ex->add_option("--out", out, "Output PGM")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kUsage;
    }

    try {
        if (*gen) {
            std::tie(spec.height, spec.width) = parse_size(size);
            std::tie(spec.illumination_lo, spec.illumination_hi) = parse_range(illum);
            return gen_data(gen_out, spec, force);
        }
        if (*tr) return train(data, config, out, resume);
        if (*ev) return eval(ckpt, data, split, csv);
        if (*ab) return ablate(data, out, grid);
        if (*pr) return probe(ckpt, data, split, out, bin_width);
        if (*ex) return export_density(ckpt, sample, out);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const DimensionError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const ContractError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kRuntime;
    }
    return kUsage;
}
