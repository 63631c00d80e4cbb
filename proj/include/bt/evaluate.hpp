// SPDX-License-Identifier: Apache-2.0
//
// Evaluation protocols over generated clips. Every row compares a render of
// a reconstruction against the stored frame or a ground-truth render.
#pragma once

#include "bt/nte.hpp"
#include "bt/scenegen.hpp"
#include "bt/supervision.hpp"

#include <optional>
#include <string>
#include <vector>

namespace bt {

enum class Protocol { in_context, novel_time, novel_view };
std::string to_string(Protocol p);
Protocol protocol_from_string(const std::string& s);

struct EvalModels {
    const BTimerWeights* btimer = nullptr;
    const BTimerConfig* btimer_cfg = nullptr;
    const NteWeights* nte = nullptr; // optional; used for unobserved times
    const NteConfig* nte_cfg = nullptr;
};

// Renders a scene with the clip's background at the frame resolution.
Image render_scene(const GaussianScene& scene, const Camera& cam, const Cube& cube,
                   const Vec3& background = Vec3::Zero());

// One row per observed timestamp and view; the context stream is view 0.
std::vector<MetricRow> eval_in_context(const ClipRecord& clip, const EvalModels& m, int count);
// Like eval_in_context but only for views other than 0 (held-out cameras).
std::vector<MetricRow> eval_novel_view(const ClipRecord& clip, const EvalModels& m, int count);
// Midpoints between consecutive timestamps (at most max_midpoints, evenly
// spread), scored against ground-truth renders at the interpolated camera
// of every view. Uses the NTE when m.nte is set.
std::vector<MetricRow> eval_novel_time(const ClipRecord& clip, const EvalModels& m, int count,
                                       int max_midpoints = 8);
std::vector<double> midpoint_times(const std::vector<double>& times, int max_midpoints);

// Ground-truth renders evaluated against themselves, one row per frame and
// view. PSNR is at the cap.
std::vector<MetricRow> eval_ground_truth(const ClipRecord& clip);

// PSNR of a reconstruction from `count` frames of a static clip, rendered at
// the given cameras and compared with ground-truth renders.
double mean_psnr_at_cameras(const ClipRecord& clip, const EvalModels& m, const std::vector<int>& context,
                            const std::vector<Camera>& cameras);

} // namespace bt
