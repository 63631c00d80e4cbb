// SPDX-License-Identifier: Apache-2.0
//
// BTCK checkpoint files: model kind and config, named f32 parameter blocks,
// optimizer moments, the sampling RNG, and the curriculum position.
//
// Layout (little endian): "BTCK", u32 version, u32 kind, str config JSON,
// u64 block count, blocks {str name, u32 rank, u64 dims[rank], f32 data},
// u64 moment count, moments {u64 step, u64 n, f32 m[n], f32 v[n]},
// str rng, u32 stage, u64 iteration, u64 global iteration.
#pragma once

#include "bt/btimer.hpp"
#include "bt/nte.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace bt {

enum class ModelKind : std::uint32_t { btimer = 0, nte = 1 };
std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& s);

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ParamBlock {
    std::string name;
    ad::Shape shape;
    std::vector<float> data;
    bool operator==(const ParamBlock&) const = default;
};

// Adaptive-moment state, one entry per parameter block in visiting order.
struct Moments {
    std::uint64_t step = 0;
    std::vector<float> m;
    std::vector<float> v;
    bool operator==(const Moments&) const = default;
};

struct Checkpoint {
    ModelKind kind = ModelKind::btimer;
    std::string config; // JSON of BTimerConfig or NteConfig
    std::vector<ParamBlock> params;
    std::vector<Moments> moments; // empty or one per block
    std::string rng;              // textual std::mt19937_64 state
    std::uint32_t stage = 0;
    std::uint64_t iteration = 0; // within the stage
    std::uint64_t global_iteration = 0;
    bool operator==(const Checkpoint&) const = default;
};

// Errors: MissingFileError, FormatError (bad magic or truncation),
// VersionError.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint capture(BTimerWeights& w, const BTimerConfig& cfg);
Checkpoint capture(NteWeights& w, const NteConfig& cfg);

// Copies parameter blocks into w. Throws KindMismatchError for the other
// model kind, ConfigError when the stored config differs from cfg, and
// FormatError when names or shapes disagree.
void restore(const Checkpoint& ckpt, BTimerWeights& w, const BTimerConfig& cfg);
void restore(const Checkpoint& ckpt, NteWeights& w, const NteConfig& cfg);

BTimerConfig btimer_config_of(const Checkpoint& ckpt);
NteConfig nte_config_of(const Checkpoint& ckpt);
// Builds weights of the stored config and fills them from the checkpoint.
BTimerWeights load_btimer(const Checkpoint& ckpt);
NteWeights load_nte(const Checkpoint& ckpt);

} // namespace bt
