#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "modal_emu/config.hpp"

using namespace modal_emu;
using nlohmann::json;

namespace {

std::string error_key(const json& doc) {
    try {
        train_config_from_json(doc);
    } catch (const ConfigError& e) {
        return e.key();
    }
    return "";
}

}  // namespace

TEST_CASE("defaults") {
    const TrainConfig cfg = train_config_from_json(json::object());
    CHECK(cfg.learning_rate == 1e-5);
    CHECK(cfg.epochs == 200);
    CHECK(cfg.seed == 42);
    CHECK(cfg.model.heads == 4);
    CHECK(cfg.model.prompting == PromptingMode::Attention);
    CHECK(cfg.model.prompt_length == 5);
    CHECK(cfg.model.patches.patch_sizes == std::vector<std::size_t>{2, 1, 1});
    CHECK(cfg.model.stream.channels == std::vector<std::size_t>{8, 16, 32});
    CHECK(cfg.model.hidden() == 64);
}

TEST_CASE("fields are parsed") {
    const TrainConfig cfg = train_config_from_json(json{{"learning_rate", 0.001},
                                                        {"epochs", 3},
                                                        {"prompting_mode", "ip"},
                                                        {"mcma", false},
                                                        {"attention", "vca"},
                                                        {"backbone_channels", {4, 4, 8}},
                                                        {"seed", 7}});
    CHECK(cfg.learning_rate == 0.001);
    CHECK(cfg.epochs == 3);
    CHECK(cfg.seed == 7);
    CHECK(cfg.model.prompting == PromptingMode::Input);
    CHECK_FALSE(cfg.model.use_mcma);
    CHECK(cfg.model.block_kind == BlockKind::VanillaCross);
    CHECK(cfg.model.stream.channels == std::vector<std::size_t>{4, 4, 8});

    const TrainConfig base = train_config_from_json(json{{"scale", "base"}});
    CHECK(base.model.patches.dims == std::vector<std::size_t>{768, 768, 768});
}

TEST_CASE("schema violations name the key") {
    CHECK(error_key(json{{"learnig_rate", 0.1}}) == "learnig_rate");
    CHECK(error_key(json{{"epochs", "ten"}}) == "epochs");
    CHECK(error_key(json{{"epochs", -1}}) == "epochs");
    CHECK(error_key(json{{"epochs", 1.5}}) == "epochs");
    CHECK(error_key(json{{"scma", 1}}) == "scma");
    CHECK(error_key(json{{"prompting_mode", "on"}}) == "prompting_mode");
    CHECK(error_key(json{{"backbone_channels", {1, "a", 2}}}) == "backbone_channels");
    CHECK(error_key(json{{"scale", "huge"}}) == "scale");
    CHECK(error_key(json{{"heads", 3}}) == "heads");
    CHECK(error_key(json{{"dropout", 1.0}}) == "dropout");
    CHECK(error_key(json{{"crop_size", 20}}) == "crop_size");
    CHECK(error_key(json{{"scma", false}, {"mcma", false}}) == "prompting_mode");
    CHECK(error_key(json{{"scma", false}, {"prompting_mode", "ap"}}) == "prompting_mode");
    CHECK(error_key(json{{"prompting_mode", "off"}, {"use_pseudo_in_head", true}}) == "use_pseudo_in_head");
    CHECK(error_key(json::array()) == "<root>");
    CHECK_NOTHROW(train_config_from_json(json{{"scma", false}, {"mcma", false}, {"prompting_mode", "off"}}));
}

TEST_CASE("JSON round trip and hash") {
    TrainConfig cfg = train_config_from_json(json{{"learning_rate", 0.001}, {"prompting_mode", "off"}});
    const json j = to_json(cfg);
    const TrainConfig back = train_config_from_json(j);
    CHECK(to_json(back) == j);
    CHECK(config_hash(back) == config_hash(cfg));
    cfg.seed = 43;
    CHECK(config_hash(cfg) != config_hash(back));
    CHECK(config_hash(train_config_from_json(json::object())) == config_hash(TrainConfig{}));
}

TEST_CASE("config files") {
    const auto dir = std::filesystem::temp_directory_path() / "modal_emu_config_test";
    std::filesystem::create_directories(dir);
    {
        std::ofstream(dir / "good.json") << R"({"epochs": 2, "heads": 2})";
        std::ofstream(dir / "bad.json") << R"({"epochs": 2,)";
    }
    CHECK(load_train_config(dir / "good.json").epochs == 2);
    CHECK_THROWS_AS(load_train_config(dir / "bad.json"), ConfigError);
    CHECK_THROWS_AS(load_train_config(dir / "absent.json"), ConfigError);
    std::filesystem::remove_all(dir);
}
