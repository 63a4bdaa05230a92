#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <stdexcept>
#include <string>

#include "modal_emu/config.hpp"
#include "modal_emu/nn.hpp"

namespace modal_emu {

class CheckpointError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Self-describing training snapshot. Tensors hold model parameters under
/// their own names and optimizer moments under "adam.m/..", "adam.v/..".
struct Checkpoint {
    TrainConfig config;
    std::uint64_t config_hash = 0;
    std::size_t epoch = 0;  // completed epochs
    std::size_t step = 0;   // completed optimizer steps
    double best_metric = std::numeric_limits<double>::infinity();
    ParameterList tensors;

    const Tensor* find(const std::string& name) const;
};

/// Layout (little-endian): "MEMUCKPT", u32 version, u64 hash, u64 epoch,
/// u64 step, f64 best, u64 + bytes config JSON, u64 tensor count, then per
/// tensor u32 + bytes name, u32 rank, u64 extents, raw f64 values.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies checkpoint values into same-named parameters. Missing names or
/// shape mismatches throw CheckpointError.
void restore_parameters(const Checkpoint& ckpt, ParameterList& params);

}  // namespace modal_emu
