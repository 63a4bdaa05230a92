#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "modal_emu/backbone.hpp"
#include "modal_emu/hcma.hpp"

namespace modal_emu {

/// Schema violation in a configuration document; names the offending key.
class ConfigError : public std::runtime_error {
   public:
    ConfigError(const std::string& key, const std::string& what)
        : std::runtime_error("config key '" + key + "': " + what), key_(key) {}
    const std::string& key() const { return key_; }

   private:
    std::string key_;
};

enum class PromptingMode { Off, Attention, Input };
enum class ModelScale { Desk, Small, Base };

std::string to_string(PromptingMode m);
std::string to_string(ModelScale s);

struct ModelConfig {
    ModelScale scale = ModelScale::Desk;
    StreamConfig stream;
    bool replicate_aux = true;  // 1-channel aux fed as 3 identical channels
    PatchEmbedConfig patches;
    std::size_t fused_channels = 32;
    std::size_t heads = 4;
    std::size_t ffn_hidden = 0;  // 0 -> 2 * fused_channels
    double dropout = 0.1;
    bool use_scma = true;
    bool use_mcma = true;
    BlockKind block_kind = BlockKind::Hybrid;
    PromptingMode prompting = PromptingMode::Attention;
    std::size_t prompt_length = 5;
    bool use_pseudo_in_head = false;

    /// Resets sizes to the named preset (desk, small, base).
    void apply_scale(ModelScale s);
    bool has_stack() const { return block_kind == BlockKind::VanillaCross || use_scma || use_mcma; }
    std::size_t hidden() const { return ffn_hidden ? ffn_hidden : 2 * fused_channels; }
    void validate() const;
};

struct TrainConfig {
    ModelConfig model;
    double learning_rate = 1e-5;
    std::size_t batch_size = 4;
    std::size_t epochs = 200;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::uint64_t seed = 42;
    double sigma = 8.0;
    std::size_t crop_size = 64;
    double flip_prob = 0.5;
    bool select_on_val = true;

    void validate() const;
};

/// Flat JSON with one key per field; unknown keys and type errors throw
/// ConfigError naming the key.
TrainConfig train_config_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig load_train_config(const std::filesystem::path& path);

/// Stable 64-bit FNV-1a hash of the canonical JSON dump.
std::uint64_t config_hash(const TrainConfig& cfg);

}  // namespace modal_emu
