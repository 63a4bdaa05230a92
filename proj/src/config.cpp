#include "modal_emu/config.hpp"

#include <fstream>
#include <functional>
#include <map>

namespace modal_emu {

using nlohmann::json;

std::string to_string(PromptingMode m) {
    switch (m) {
        case PromptingMode::Off: return "off";
        case PromptingMode::Attention: return "ap";
        case PromptingMode::Input: return "ip";
    }
    return "off";
}

std::string to_string(ModelScale s) {
    switch (s) {
        case ModelScale::Desk: return "desk";
        case ModelScale::Small: return "small";
        case ModelScale::Base: return "base";
    }
    return "desk";
}

void ModelConfig::apply_scale(ModelScale s) {
    scale = s;
    patches.patch_sizes = {2, 1, 1};
    switch (s) {
        case ModelScale::Desk:
            stream.channels = {8, 16, 32};
            patches.dims = {64, 64, 64};
            fused_channels = 32;
            break;
        case ModelScale::Small:
            stream.channels = {64, 128, 256};
            patches.dims = {256, 512, 512};
            fused_channels = 256;
            break;
        case ModelScale::Base:
            stream.channels = {64, 128, 256};
            patches.dims = {768, 768, 768};
            fused_channels = 256;
            break;
    }
    heads = 4;
}

void ModelConfig::validate() const {
    stream.validate();
    patches.validate();
    for (auto d : patches.dims)
        if (d % heads != 0) throw ConfigError("heads", "must divide every embedding dim");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout", "must lie in [0, 1)");
    if (prompting != PromptingMode::Off && !has_stack())
        throw ConfigError("prompting_mode", "emulation needs the HCMA stack (enable scma or mcma)");
    if (prompting == PromptingMode::Attention && block_kind == BlockKind::Hybrid && !use_scma)
        throw ConfigError("prompting_mode", "attention prompting reuses the SCMA projections; enable scma");
    if (use_pseudo_in_head && prompting == PromptingMode::Off)
        throw ConfigError("use_pseudo_in_head", "needs prompting enabled");
    if (block_kind == BlockKind::VanillaCross && !use_scma)
        throw ConfigError("attention", "vca is built on SCMA; scma must stay enabled");
}

void TrainConfig::validate() const {
    model.validate();
    if (!(learning_rate >= 0.0)) throw ConfigError("learning_rate", "must be non-negative");
    if (batch_size == 0) throw ConfigError("batch_size", "must be >= 1");
    if (!(sigma > 0.0)) throw ConfigError("sigma", "must be positive");
    if (crop_size == 0 || crop_size % 8 != 0) throw ConfigError("crop_size", "must be a positive multiple of 8");
    if (flip_prob < 0.0 || flip_prob > 1.0) throw ConfigError("flip_prob", "must lie in [0, 1]");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("beta1", "must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("beta2", "must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon", "must be positive");
}

namespace {

template <typename T>
T get_as(const json& v, const std::string& key) {
    try {
        return v.get<T>();
    } catch (const json::exception&) {
        throw ConfigError(key, "has the wrong type");
    }
}

std::size_t get_count(const json& v, const std::string& key) {
    if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError(key, "must be a non-negative integer");
    return v.get<std::size_t>();
}

std::vector<std::size_t> get_counts(const json& v, const std::string& key) {
    if (!v.is_array()) throw ConfigError(key, "must be an array of integers");
    std::vector<std::size_t> out;
    for (const auto& e : v) out.push_back(get_count(e, key));
    return out;
}

double get_number(const json& v, const std::string& key) {
    if (!v.is_number()) throw ConfigError(key, "must be a number");
    return v.get<double>();
}

bool get_bool(const json& v, const std::string& key) {
    if (!v.is_boolean()) throw ConfigError(key, "must be true or false");
    return v.get<bool>();
}

}  // namespace

TrainConfig train_config_from_json(const json& doc) {
    if (!doc.is_object()) throw ConfigError("<root>", "configuration must be a JSON object");
    TrainConfig cfg;
    ModelConfig& m = cfg.model;

    if (doc.contains("scale")) {
        const auto s = get_as<std::string>(doc["scale"], "scale");
        if (s == "desk") m.apply_scale(ModelScale::Desk);
        else if (s == "small") m.apply_scale(ModelScale::Small);
        else if (s == "base") m.apply_scale(ModelScale::Base);
        else throw ConfigError("scale", "must be desk, small or base");
    }

    using Setter = std::function<void(const json&, const std::string&)>;
    const std::map<std::string, Setter> setters = {
        {"scale", [](const json&, const std::string&) {}},
        {"learning_rate", [&](const json& v, const std::string& k) { cfg.learning_rate = get_number(v, k); }},
        {"batch_size", [&](const json& v, const std::string& k) { cfg.batch_size = get_count(v, k); }},
        {"epochs", [&](const json& v, const std::string& k) { cfg.epochs = get_count(v, k); }},
        {"beta1", [&](const json& v, const std::string& k) { cfg.beta1 = get_number(v, k); }},
        {"beta2", [&](const json& v, const std::string& k) { cfg.beta2 = get_number(v, k); }},
        {"epsilon", [&](const json& v, const std::string& k) { cfg.epsilon = get_number(v, k); }},
        {"seed", [&](const json& v, const std::string& k) { cfg.seed = get_count(v, k); }},
        {"sigma", [&](const json& v, const std::string& k) { cfg.sigma = get_number(v, k); }},
        {"crop_size", [&](const json& v, const std::string& k) { cfg.crop_size = get_count(v, k); }},
        {"flip_prob", [&](const json& v, const std::string& k) { cfg.flip_prob = get_number(v, k); }},
        {"select_on_val", [&](const json& v, const std::string& k) { cfg.select_on_val = get_bool(v, k); }},
        {"scma", [&](const json& v, const std::string& k) { m.use_scma = get_bool(v, k); }},
        {"mcma", [&](const json& v, const std::string& k) { m.use_mcma = get_bool(v, k); }},
        {"attention",
         [&](const json& v, const std::string& k) {
             const auto s = get_as<std::string>(v, k);
             if (s == "hcma") m.block_kind = BlockKind::Hybrid;
             else if (s == "vca") m.block_kind = BlockKind::VanillaCross;
             else throw ConfigError(k, "must be hcma or vca");
         }},
        {"prompting_mode",
         [&](const json& v, const std::string& k) {
             const auto s = get_as<std::string>(v, k);
             if (s == "ap") m.prompting = PromptingMode::Attention;
             else if (s == "ip") m.prompting = PromptingMode::Input;
             else if (s == "off") m.prompting = PromptingMode::Off;
             else throw ConfigError(k, "must be ap, ip or off");
         }},
        {"prompt_length", [&](const json& v, const std::string& k) { m.prompt_length = get_count(v, k); }},
        {"use_pseudo_in_head", [&](const json& v, const std::string& k) { m.use_pseudo_in_head = get_bool(v, k); }},
        {"dropout", [&](const json& v, const std::string& k) { m.dropout = get_number(v, k); }},
        {"backbone_channels", [&](const json& v, const std::string& k) { m.stream.channels = get_counts(v, k); }},
        {"convs_per_block", [&](const json& v, const std::string& k) { m.stream.convs_per_block = get_count(v, k); }},
        {"replicate_aux", [&](const json& v, const std::string& k) { m.replicate_aux = get_bool(v, k); }},
        {"patch_sizes", [&](const json& v, const std::string& k) { m.patches.patch_sizes = get_counts(v, k); }},
        {"embed_dims", [&](const json& v, const std::string& k) { m.patches.dims = get_counts(v, k); }},
        {"fused_channels", [&](const json& v, const std::string& k) { m.fused_channels = get_count(v, k); }},
        {"heads", [&](const json& v, const std::string& k) { m.heads = get_count(v, k); }},
        {"ffn_hidden", [&](const json& v, const std::string& k) { m.ffn_hidden = get_count(v, k); }},
    };

    for (const auto& [key, value] : doc.items()) {
        const auto it = setters.find(key);
        if (it == setters.end()) throw ConfigError(key, "unknown key");
        it->second(value, key);
    }
    try {
        cfg.validate();
    } catch (const ContractError& e) {
        throw ConfigError("model", e.what());
    }
    return cfg;
}

json to_json(const TrainConfig& cfg) {
    const ModelConfig& m = cfg.model;
    json j;
    j["scale"] = to_string(m.scale);
    j["learning_rate"] = cfg.learning_rate;
    j["batch_size"] = cfg.batch_size;
    j["epochs"] = cfg.epochs;
    j["beta1"] = cfg.beta1;
    j["beta2"] = cfg.beta2;
    j["epsilon"] = cfg.epsilon;
    j["seed"] = cfg.seed;
    j["sigma"] = cfg.sigma;
    j["crop_size"] = cfg.crop_size;
    j["flip_prob"] = cfg.flip_prob;
    j["select_on_val"] = cfg.select_on_val;
    j["scma"] = m.use_scma;
    j["mcma"] = m.use_mcma;
    j["attention"] = m.block_kind == BlockKind::Hybrid ? "hcma" : "vca";
    j["prompting_mode"] = to_string(m.prompting);
    j["prompt_length"] = m.prompt_length;
    j["use_pseudo_in_head"] = m.use_pseudo_in_head;
    j["dropout"] = m.dropout;
    j["backbone_channels"] = m.stream.channels;
    j["convs_per_block"] = m.stream.convs_per_block;
    j["replicate_aux"] = m.replicate_aux;
    j["patch_sizes"] = m.patches.patch_sizes;
    j["embed_dims"] = m.patches.dims;
    j["fused_channels"] = m.fused_channels;
    j["heads"] = m.heads;
    j["ffn_hidden"] = m.ffn_hidden;
    return j;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("<file>", "cannot open " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("<file>", std::string("invalid JSON: ") + e.what());
    }
    return train_config_from_json(doc);
}

std::uint64_t config_hash(const TrainConfig& cfg) {
    const std::string s = to_json(cfg).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace modal_emu
