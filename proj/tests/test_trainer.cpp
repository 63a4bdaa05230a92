#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "modal_emu/trainer.hpp"
#include "test_support.hpp"

using namespace modal_emu;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json tiny_json() {
    return json{{"backbone_channels", {2, 3, 4}},
                {"embed_dims", {8, 8, 8}},
                {"fused_channels", 4},
                {"heads", 2},
                {"crop_size", 16},
                {"batch_size", 2},
                {"prompt_length", 2},
                {"learning_rate", 1e-3},
                {"epochs", 2}};
}

TrainConfig tiny(json overrides = json::object()) {
    json j = tiny_json();
    j.update(overrides);
    return train_config_from_json(j);
}

std::vector<ModalSample> tiny_split(const std::string& split, std::size_t n) {
    DatasetSpec spec;
    spec.train = spec.val = spec.test = n;
    spec.height = spec.width = 64;
    spec.seed = 5;
    return generate_split(spec, split);
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) : path(fs::temp_directory_path() / ("modal_emu_trainer_" + tag)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::vector<std::vector<double>> snapshot(const CrowdCounter& m) {
    std::vector<std::vector<double>> out;
    for (const auto& p : m.parameters()) out.push_back(p.tensor.values());
    return out;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("zero learning rate leaves parameters unchanged") {
    Trainer t(tiny({{"learning_rate", 0.0}}));
    const auto before = snapshot(t.model());
    const StepReport r = t.train_step(tiny_split("train", 2));
    CHECK(snapshot(t.model()) == before);
    CHECK(r.bayesian > 0.0);
    CHECK(r.consistency > 0.0);
    CHECK(r.total == doctest::Approx(r.bayesian + r.consistency).epsilon(1e-12));
    CHECK(r.grad_norm > 0.0);
    CHECK(t.step() == 1);
}

TEST_CASE("prompting off skips emulation and has no prompt tensors") {
    Trainer t(tiny({{"prompting_mode", "off"}, {"dropout", 0.0}, {"learning_rate", 0.0}}));
    for (const auto& p : t.model().parameters()) CHECK(p.name.find("cme.") == std::string::npos);
    const auto batch = tiny_split("train", 1);
    const StepReport r = t.train_step(batch);
    CHECK(r.consistency == 0.0);
    CHECK(r.total == r.bayesian);

    // Gradients equal a plain counting-loss backward.
    std::vector<std::vector<double>> step_grads;
    for (const auto& p : t.model().parameters()) step_grads.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
    for (auto& p : t.model().parameters()) p.tensor.zero_grad();
    const auto [rgb, aux] = t.model().inputs(batch[0]);
    const Inference inf = t.model().infer(rgb, aux, ForwardContext{});
    backward(bayesian_loss(inf.density, batch[0].points, loss_config(t.config())));
    const auto params = t.model().parameters();
    for (std::size_t i = 0; i < params.size(); ++i)
        CHECK(std::vector<double>(params[i].tensor.grad().begin(), params[i].tensor.grad().end()) == step_grads[i]);
}

TEST_CASE("repeated steps on a fixed batch reduce the loss") {
    Trainer t(tiny({{"dropout", 0.0}, {"learning_rate", 1e-4}, {"batch_size", 4}}));
    const auto batch = tiny_split("train", 4);
    std::vector<double> totals;
    for (int i = 0; i < 51; ++i) totals.push_back(t.train_step(batch).total);
    int decreases = 0;
    for (std::size_t i = 1; i < totals.size(); ++i) decreases += totals[i] < totals[i - 1];
    CHECK(decreases >= 45);
    CHECK(totals.back() < totals.front());
}

TEST_CASE("training is deterministic") {
    const auto train = tiny_split("train", 4);
    Trainer a(tiny()), b(tiny());
    const EpochLog la = a.train_epoch(train), lb = b.train_epoch(train);
    CHECK(la.bayesian == lb.bayesian);
    CHECK(la.consistency == lb.consistency);
    CHECK(la.epoch == 1);
    CHECK(std::isnan(la.val_game0));
    CHECK(snapshot(a.model()) == snapshot(b.model()));
    Trainer c(tiny({{"seed", 43}}));
    CHECK(c.train_epoch(train).bayesian != la.bayesian);
}

TEST_CASE("non-finite values abort with the tensor name") {
    Trainer t(tiny());
    t.model().parameters()[0].tensor.data()[0] = std::numeric_limits<double>::quiet_NaN();
    const std::string name = t.model().parameters()[0].name;
    try {
        t.train_step(tiny_split("train", 1));
        FAIL("expected a numeric error");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find(name) != std::string::npos);
    }
    CHECK_THROWS_AS(t.train_step({}), ContractError);
}

TEST_CASE("checkpoint round trip gives an identical next step") {
    TempDir dir("ckpt");
    const auto batch = tiny_split("train", 2);
    Trainer a(tiny());
    a.train_step(batch);
    a.train_step(batch);
    save_checkpoint(dir.path / "a.ckpt", a.checkpoint());
    Trainer b = Trainer::from_checkpoint(load_checkpoint(dir.path / "a.ckpt"));
    CHECK(b.step() == 2);
    CHECK(snapshot(b.model()) == snapshot(a.model()));
    const StepReport ra = a.train_step(batch), rb = b.train_step(batch);
    CHECK(ra.total == rb.total);
    CHECK(ra.grad_norm == rb.grad_norm);
    CHECK(snapshot(b.model()) == snapshot(a.model()));

    // A different configuration is refused.
    Checkpoint c = load_checkpoint(dir.path / "a.ckpt");
    CHECK(c.find("adam.m/" + a.model().parameters()[0].name) != nullptr);
    std::ofstream(dir.path / "junk.ckpt") << "not a checkpoint";
    CHECK_THROWS_AS(load_checkpoint(dir.path / "junk.ckpt"), CheckpointError);
}

TEST_CASE("evaluation") {
    const CrowdCounter model = CrowdCounter::create(tiny().model, 1);
    CHECK_THROWS_AS(evaluate(model, {}), ContractError);
    const auto one = evaluate(model, tiny_split("test", 1));
    CHECK(std::isfinite(one.metrics.game[0]));
    CHECK(std::isfinite(one.metrics.rmse));
    CHECK(one.records.size() == 1);
    CHECK(one.records[0].height == 8);
    const auto split = tiny_split("test", 3);
    const auto e1 = evaluate(model, split), e2 = evaluate(model, split);
    CHECK(e1.metrics.game == e2.metrics.game);
    CHECK(e1.metrics.rmse == e2.metrics.rmse);
}

TEST_CASE("pseudo-feature head and alignment probe") {
    const auto split = tiny_split("test", 3);
    const CrowdCounter plain = CrowdCounter::create(tiny().model, 1);
    CHECK_THROWS_AS(pseudo_head_variant(plain, split), ContractError);
    const CrowdCounter off = CrowdCounter::create(tiny({{"prompting_mode", "off"}}).model, 1);
    CHECK_THROWS_AS(alignment_probe(off, split), ContractError);

    const CrowdCounter both = CrowdCounter::create(tiny({{"use_pseudo_in_head", true}, {"fused_channels", 8}}).model, 1);
    const auto variant = pseudo_head_variant(both, split);
    CHECK(std::isfinite(variant.metrics.game[0]));
    CHECK(variant.records[0].density != evaluate(both, split).records[0].density);

    const AlignmentReport a = alignment_probe(plain, split);
    CHECK(a.rgb.ratios.size() == 3);
    CHECK(a.aux.ratios.size() == 3);
    double total = 0.0;
    for (double v : a.rgb.percent) total += v;
    CHECK(total == doctest::Approx(100.0));
    CHECK(a.rgb.median() > 0.0);
}

TEST_CASE("fit writes logs and checkpoints; resume continues the trajectory") {
    const auto train = tiny_split("train", 4), val = tiny_split("val", 2);
    TempDir full("fit_full"), part("fit_part");
    const TrainConfig cfg3 = tiny({{"epochs", 3}});
    const FitResult r = fit(cfg3, train, val, {full.path, std::nullopt, {}});
    CHECK(r.log.size() == 3);
    CHECK(fs::exists(full.path / "best.ckpt"));
    CHECK(fs::exists(full.path / "last.ckpt"));
    const std::string log = read_file(full.path / "train_log.csv");
    CHECK(log.rfind("epoch,L_BL,L_CL,val_GAME0,val_RMSE\n", 0) == 0);
    CHECK(std::count(log.begin(), log.end(), '\n') == 4);
    CHECK(load_checkpoint(full.path / "last.ckpt").epoch == 3);

    fit(tiny({{"epochs", 2}}), train, val, {part.path, std::nullopt, {}});
    fit(cfg3, train, val, {part.path, part.path / "last.ckpt", {}});
    CHECK(read_file(part.path / "train_log.csv") == log);

    TempDir other("fit_other");
    fit(tiny({{"epochs", 1}}), train, val, {other.path, std::nullopt, {}});
    CHECK_THROWS_AS(fit(tiny({{"epochs", 2}, {"seed", 9}}), train, val, {other.path, other.path / "last.ckpt", {}}),
                    ContractError);
}

TEST_CASE("best checkpoint follows validation GAME(0)") {
    const auto train = tiny_split("train", 4), val = tiny_split("val", 2);
    TempDir dir("best");
    const FitResult r = fit(tiny({{"epochs", 3}}), train, val, {dir.path, std::nullopt, {}});
    std::size_t best_epoch = 0;
    double best = std::numeric_limits<double>::infinity();
    for (const auto& row : r.log)
        if (row.val_game0 < best) {
            best = row.val_game0;
            best_epoch = row.epoch;
        }
    const Checkpoint ckpt = load_checkpoint(dir.path / "best.ckpt");
    CHECK(ckpt.epoch == best_epoch);
    CHECK(ckpt.best_metric == best);
    CHECK(evaluate(model_from_checkpoint(ckpt), val).metrics.game[0] == best);
}

TEST_CASE("ablation grids") {
    const AblationGrid std_grid = standard_ablation_grid();
    REQUIRE(std_grid.rows.size() == 6);
    CHECK(std_grid.rows[0].name == "baseline");
    CHECK_FALSE(row_config(std_grid, std_grid.rows[0]).model.has_stack());
    CHECK(row_config(std_grid, std_grid.rows[4]).model.prompting == PromptingMode::Attention);
    CHECK(row_config(std_grid, std_grid.rows[5]).model.block_kind == BlockKind::VanillaCross);

    const AblationGrid g = parse_ablation_grid(
        json{{"base", {{"epochs", 7}}}, {"rows", {{{"name", "a"}}, {{"name", "b"}, {"config", {{"epochs", 3}}}}}}});
    CHECK(row_config(g, g.rows[0]).epochs == 7);
    CHECK(row_config(g, g.rows[1]).epochs == 3);

    auto key_of = [](const json& doc) -> std::string {
        try {
            parse_ablation_grid(doc);
        } catch (const ConfigError& e) {
            return e.key();
        }
        return "";
    };
    CHECK(key_of(json{{"rows", json::array()}}) == "rows");
    CHECK(key_of(json{{"rows", {{{"name", "a"}}}}, {"extra", 1}}) == "extra");
    CHECK(key_of(json{{"rows", {{{"name", "a"}}, {{"name", "a"}}}}}) == "rows.name");
    CHECK(key_of(json{{"rows", {{{"name", "../x"}}}}}) == "rows.name");
    CHECK(key_of(json{{"rows", {{{"name", "a"}, {"config", {{"epoch", 1}}}}}}}) == "epoch");
    CHECK(key_of(json{{"rows", {{{"title", "a"}}}}}) == "rows");
}

TEST_CASE("a one-row ablation equals a plain train and evaluate") {
    const auto train = tiny_split("train", 4), val = tiny_split("val", 2), test = tiny_split("test", 2);
    TempDir abl("abl"), plain("abl_plain");
    AblationGrid grid;
    grid.base = tiny_json();
    grid.base["epochs"] = 1;
    grid.rows = {{"only", json::object()}};
    const auto rows = run_ablation(grid, train, val, test, abl.path);
    REQUIRE(rows.size() == 1);
    fit(row_config(grid, grid.rows[0]), train, val, {plain.path, std::nullopt, {}});
    const auto direct = evaluate(model_from_checkpoint(load_checkpoint(plain.path / "best.ckpt")), test);
    CHECK(rows[0].test.game == direct.metrics.game);
    CHECK(rows[0].test.rmse == direct.metrics.rmse);

    const std::string csv = read_file(abl.path / "ablation.csv");
    CHECK(csv.rfind("method,GAME0,GAME1,GAME2,GAME3,RMSE\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
    CHECK(read_file(abl.path / "ablation.txt").find("only") != std::string::npos);
    CHECK(fs::exists(abl.path / "only" / "train_log.csv"));
}
