// SPDX-License-Identifier: Apache-2.0
//
// Bullet-time reconstruction: context frames plus a bullet timestamp in,
// one pixel-aligned Gaussian per context pixel out.
#pragma once

#include "bt/gaussians.hpp"
#include "bt/image.hpp"
#include "bt/nn.hpp"
#include "bt/transformer.hpp"

#include <random>
#include <vector>

namespace bt {

struct Frame {
    Image image; // values in [0,1]
    Pose pose;
    Intrinsics intr;
    double time = 0.0; // normalized to [0,1] per clip

    Camera camera() const { return {pose, intr}; }
};

struct ContextSet {
    std::vector<Frame> frames;
    double bullet_time = 0.0;

    void validate(int max_frames) const;
};

struct BTimerConfig {
    BackboneConfig backbone;
    int max_context = 8;
    // Normalized timestamps are multiplied by this before the sinusoidal encoding.
    double time_scale = 100.0;
    Cube cube;

    DecodeBounds bounds() const { return DecodeBounds::from_cube(cube); }
    void validate() const;
    bool operator==(const BTimerConfig& o) const;
};

// Sinusoidal encoding followed by Linear -> GELU -> Linear.
struct TimeEmbedder {
    nn::Mlp2 mlp;

    TimeEmbedder() = default;
    TimeEmbedder(int dim, std::mt19937_64& rng);
    // times: k scalars -> [k, dim]
    ad::Tensor operator()(const std::vector<double>& times, int dim, double time_scale) const;
    void visit(const nn::ParamVisitor& v, const std::string& prefix);
};

struct BTimerWeights {
    nn::Linear patch_embed; // p*p*3 -> dim
    nn::Linear pose_embed;  // p*p*6 -> dim
    TimeEmbedder ctx_time;
    TimeEmbedder bullet_time;
    BackboneWeights backbone;
    nn::Linear head; // dim -> 12*p*p

    BTimerWeights() = default;
    BTimerWeights(const BTimerConfig& cfg, std::mt19937_64& rng);
    // Fixed visiting order; names double as checkpoint keys.
    void visit(const nn::ParamVisitor& v);
    // Visits only the two time embedders.
    void visit_time(const nn::ParamVisitor& v);
};

struct TokenGrid {
    ad::Tensor tokens;      // [F * P, dim], frame-major, patches in raster order
    ad::Tensor ctx_time;    // [F, dim]
    ad::Tensor bullet_time; // [dim], shared by every frame
    int frames = 0;
    int patches_per_frame = 0;
};

// Patch layout of a per-pixel map: [H*W*C] values -> [(H/p)(W/p), p*p*C].
ad::Tensor patch_tensor(std::span<const double> values, int width, int height, int channels, int patch,
                        ad::Precision precision);

// Plucker map of a camera in the same patch layout.
ad::Tensor plucker_patches(const Pose& pose, const Intrinsics& intr, int patch, ad::Precision precision);

// With use_time false the time features are omitted and the time embedders
// receive no gradient.
TokenGrid build_tokens(const ContextSet& ctx, const BTimerWeights& w, const BTimerConfig& cfg,
                       bool use_time = true);

// Differentiable forward pass. packed rows are in token order; pixel_of_row
// maps each row to frame * H * W + y * W + x.
struct Prediction {
    ad::Tensor packed; // [F * H * W, 14]
    std::vector<std::size_t> pixel_of_row;
};

Prediction predict(const ContextSet& ctx, const BTimerWeights& w, const BTimerConfig& cfg,
                   bool use_time = true);

// Gaussians ordered frame-major in raster order, one per context pixel.
GaussianScene to_scene(const Prediction& pred, double bullet_time, std::vector<int> source_frames = {});

GaussianScene reconstruct(const ContextSet& ctx, const BTimerWeights& w, const BTimerConfig& cfg);

// Uniform grid over [0, N-1] with t_index swapped in for its nearest grid
// point; collisions move to the nearest unused index. Sorted ascending.
std::vector<int> select_context(const std::vector<double>& times, int t_index, int count);

// select_context for an arbitrary t in [t_0, t_N-1], anchored at the nearest
// frame. The result always brackets t; needs count >= 2 unless t is observed.
std::vector<int> select_context_at(const std::vector<double>& times, double t, int count);

// Index of the frame whose timestamp equals t within 1e-9, or -1.
int observed_index(const std::vector<double>& times, double t);

// Reconstruction at bullet time t from real frames only.
GaussianScene reconstruct_at(const std::vector<Frame>& video, double t, int count, const BTimerWeights& w,
                             const BTimerConfig& cfg);

// One reconstruction per input timestamp.
std::vector<GaussianScene> sweep(const std::vector<Frame>& video, int count, const BTimerWeights& w,
                                 const BTimerConfig& cfg);

} // namespace bt
