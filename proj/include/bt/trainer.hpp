// SPDX-License-Identifier: Apache-2.0
//
// Curriculum training for the reconstruction and synthesis models.
#pragma once

#include "bt/checkpoint.hpp"
#include "bt/scenegen.hpp"
#include "bt/supervision.hpp"

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace bt {

// Cosine decay from initial to 0 over total iterations, multiplied by a
// linear ramp iter / W over the first W = ceil(warmup_fraction * total).
double lr_at(long iter, long total, double initial, double warmup_fraction = 0.02);

struct OptimConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.05; // applied to weight matrices only (rank >= 2)
    double clip_norm = 1.0;     // global gradient norm; 0 disables
    double warmup_fraction = 0.02;
};

enum class StageName { stage1_static, stage2_dynamic_cotrain, stage3_long_context };
std::string to_string(StageName s);
StageName stage_name_from_string(const std::string& s);

struct CurriculumStage {
    StageName name = StageName::stage1_static;
    int resolution = 0; // training image width; 0 keeps the stored size
    int context_count = 4;
    int min_context_count = 0; // when set, each sample draws its count from [min, context_count]
    long iterations = 0;
    double initial_lr = 4e-4;
    double static_fraction = 0.5; // share of static clips when both kinds are used
    int batch = 8;                // samples averaged per update
    double p_interp = 0.3;

    void validate() const;
    bool uses_time() const { return name != StageName::stage1_static; }
    int smallest_context() const { return min_context_count ? min_context_count : context_count; }
};

// Stage 1 at 32 then 64 pixels, co-training, then longer context.
std::vector<CurriculumStage> default_plan();

struct TrainingData {
    std::vector<ClipRecord> static_clips;
    std::vector<ClipRecord> dynamic_clips;
};

// Clips at the stage's resolution, restricted to the kinds the stage uses.
struct StageData {
    std::vector<ClipRecord> static_clips;
    std::vector<ClipRecord> dynamic_clips;
};
// Box-filters images by the integer factor width / resolution and scales
// the intrinsics to match. Throws ConfigError for missing or incompatible
// data.
StageData prepare_stage_data(const CurriculumStage& stage, const TrainingData& data, int patch);
ClipRecord downsample_clip(const ClipRecord& clip, int factor);

struct TrainingSample {
    const ClipRecord* clip = nullptr;
    SupervisionSample supervision;

    ContextSet context() const;
    const Frame& target() const;
};

// The draw order is part of the reproducibility contract: the kind coin
// (only when both kinds are present), the clip index, then
// sample_supervision. NTE samples always request interpolation targets.
TrainingSample draw_sample(const CurriculumStage& stage, const StageData& data, ModelKind kind,
                           std::mt19937_64& rng);

struct TrainerConfig {
    OptimConfig optim;
    LossConfig loss;
    int log_every = 50;
    int checkpoint_every = 500;
    std::filesystem::path out_dir; // empty: no files are written
    std::uint64_t seed = 0;
};

struct LogRow {
    long iter = 0; // global, 1-based
    double lr = 0.0;
    double loss = 0.0; // mean over the rows' window
    double psnr = 0.0;
};

struct StageReport {
    StageName name = StageName::stage1_static;
    std::vector<double> loss; // per iteration, batch mean
    std::vector<double> psnr;
    std::vector<LogRow> rows;
};

std::string log_csv_header();
std::string log_csv_row(const LogRow& row);

class Trainer {
public:
    Trainer(BTimerWeights& w, const BTimerConfig& cfg, TrainerConfig tc);
    Trainer(NteWeights& w, const NteConfig& cfg, TrainerConfig tc);
    ~Trainer();
    Trainer(const Trainer&) = delete;
    Trainer& operator=(const Trainer&) = delete;

    ModelKind kind() const;

    // Runs the current stage from the saved position. max_iterations bounds
    // the iterations executed by this call (negative: no bound).
    StageReport train_stage(const CurriculumStage& stage, const TrainingData& data, long max_iterations = -1);
    // Runs plan from the current stage index; NTE models skip stage 3.
    std::vector<StageReport> run_curriculum(const std::vector<CurriculumStage>& plan, const TrainingData& data);
    // Moves to the start of the next stage, for callers driving stages one by one.
    void next_stage();

    // Loss of one sample with the current weights (no update).
    double sample_loss(const CurriculumStage& stage, const TrainingSample& sample) const;

    Checkpoint checkpoint() const;
    // Restores weights, moments, RNG, and the curriculum position.
    void resume(const Checkpoint& ckpt);
    void save(const std::filesystem::path& path) const;

    std::mt19937_64& rng();
    std::uint32_t stage_index() const;
    long stage_iteration() const;
    long global_iteration() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// Plans serialize as {"stages": [{name, resolution, context_count,
// iterations, initial_lr, static_fraction, batch, p_interp}]}.
std::vector<CurriculumStage> read_plan(const std::filesystem::path& path);
void write_plan(const std::filesystem::path& path, const std::vector<CurriculumStage>& plan);

} // namespace bt
