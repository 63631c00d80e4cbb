// SPDX-License-Identifier: Apache-2.0
//
// Novel-time frame synthesis: context frames plus a target pose and time in,
// an RGB frame out. Synthesized frames are fed back to the reconstructor.
#pragma once

#include "bt/btimer.hpp"

namespace bt {

struct TargetQuery {
    Pose pose;
    Intrinsics intr;
    double time = 0.0;
};

struct NteConfig {
    BackboneConfig backbone;
    int max_context = 8;
    double time_scale = 100.0;
    int k_nearest = 4;

    void validate() const;
    bool operator==(const NteConfig&) const = default;
};

struct NteWeights {
    nn::Linear patch_embed; // p*p*3 -> dim
    nn::Linear pose_embed;  // p*p*6 -> dim
    TimeEmbedder time;      // shared by context and target tokens
    BackboneWeights backbone;
    nn::Linear head; // dim -> 3*p*p

    NteWeights() = default;
    NteWeights(const NteConfig& cfg, std::mt19937_64& rng);
    void visit(const nn::ParamVisitor& v);
    void visit_time(const nn::ParamVisitor& v);
};

enum class NteMode {
    joint,  // one masked pass over context and target tokens
    cached, // context pass filling a KV cache, then a target pass
};

struct NteTokens {
    ad::Tensor context; // [F * P, dim]
    ad::Tensor target;  // [P, dim]
};

NteTokens nte_tokens(const std::vector<Frame>& context, const TargetQuery& query, const NteWeights& w,
                     const NteConfig& cfg, bool use_time = true);

// Backbone outputs for both token groups.
struct NteActivations {
    ad::Tensor context; // [F * P, dim]
    ad::Tensor target;  // [P, dim]
};

NteActivations nte_forward(const NteTokens& tokens, const NteWeights& w, const NteConfig& cfg, NteMode mode);

// Differentiable [H, W, 3] prediction with values in (0, 1).
ad::Tensor synthesize(const std::vector<Frame>& context, const TargetQuery& query, const NteWeights& w,
                      const NteConfig& cfg, NteMode mode = NteMode::joint, bool use_time = true);

Image synthesize_image(const std::vector<Frame>& context, const TargetQuery& query, const NteWeights& w,
                       const NteConfig& cfg);

// k frames nearest in time to t, always including the frames immediately
// before and after t. Sorted ascending.
std::vector<int> nearest_frames(const std::vector<double>& times, double t, int k);

// Synthesized frame at an unobserved time t strictly inside the pool's span.
Frame enhance_context(const std::vector<Frame>& pool, double t, const NteWeights& w, const NteConfig& cfg);

// Observed t: identical to reconstruct_at. Otherwise the synthesized frame
// replaces the real frame nearest to t in the selected context; its entry in
// source_frames is -1.
GaussianScene reconstruct_novel_time(const std::vector<Frame>& video, double t, int count, const NteWeights& nte,
                                     const NteConfig& nte_cfg, const BTimerWeights& bt, const BTimerConfig& bt_cfg);

} // namespace bt
