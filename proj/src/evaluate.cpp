// SPDX-License-Identifier: Apache-2.0
#include "bt/evaluate.hpp"

#include "bt/error.hpp"
#include "bt/rasterizer.hpp"

#include <cmath>

namespace bt {

std::string to_string(Protocol p) {
    switch (p) {
    case Protocol::in_context: return "incontext";
    case Protocol::novel_time: return "noveltime";
    default: return "novelview";
    }
}

Protocol protocol_from_string(const std::string& s) {
    if (s == "incontext") return Protocol::in_context;
    if (s == "noveltime") return Protocol::novel_time;
    if (s == "novelview") return Protocol::novel_view;
    throw ConfigError("unknown protocol '" + s + "'");
}

Image render_scene(const GaussianScene& scene, const Camera& cam, const Cube& cube, const Vec3& background) {
    const auto settings = RenderSettings::for_camera(cam.intr, DecodeBounds::from_cube(cube), background);
    return rasterize(scene.gaussians, cam, settings).image;
}

namespace {

void require_btimer(const EvalModels& m) {
    if (!m.btimer || !m.btimer_cfg) throw ContractError("evaluation needs a reconstruction model");
}

Vec3 background_of(const ClipRecord& clip) {
    return clip.spec ? clip.spec->config.background : Vec3::Zero();
}

MetricRow score(const std::string& id, double t, int view, const Image& pred, const Image& gt) {
    return {id, t, view, psnr(pred, gt), ssim(pred, gt)};
}

std::vector<MetricRow> observed_rows(const ClipRecord& clip, const EvalModels& m, int count, int first_view) {
    require_btimer(m);
    if (clip.views.empty()) throw ContractError("clip " + clip.id + " has no frames");
    std::vector<MetricRow> rows;
    const auto& video = clip.views[0];
    const Vec3 bg = background_of(clip);
    for (std::size_t i = 0; i < video.size(); ++i) {
        const auto scene = reconstruct_at(video, video[i].time, count, *m.btimer, *m.btimer_cfg);
        for (std::size_t v = static_cast<std::size_t>(first_view); v < clip.views.size(); ++v) {
            const Frame& f = clip.views[v][i];
            rows.push_back(score(clip.id, f.time, static_cast<int>(v),
                                 render_scene(scene, f.camera(), m.btimer_cfg->cube, bg), f.image));
        }
    }
    return rows;
}

} // namespace

std::vector<MetricRow> eval_in_context(const ClipRecord& clip, const EvalModels& m, int count) {
    return observed_rows(clip, m, count, 0);
}

std::vector<MetricRow> eval_novel_view(const ClipRecord& clip, const EvalModels& m, int count) {
    if (clip.views.size() < 2) throw ContractError("clip " + clip.id + " has no held-out camera");
    return observed_rows(clip, m, count, 1);
}

std::vector<double> midpoint_times(const std::vector<double>& times, int max_midpoints) {
    if (max_midpoints < 1) throw ContractError("midpoint_times: need at least one midpoint");
    std::vector<double> all;
    for (std::size_t i = 0; i + 1 < times.size(); ++i) all.push_back(0.5 * (times[i] + times[i + 1]));
    if (static_cast<int>(all.size()) <= max_midpoints) return all;
    std::vector<double> out;
    if (max_midpoints == 1) return {all[all.size() / 2]};
    for (int k = 0; k < max_midpoints; ++k)
        out.push_back(all[static_cast<std::size_t>(std::lround(k * (all.size() - 1.0) / (max_midpoints - 1)))]);
    return out;
}

std::vector<MetricRow> eval_novel_time(const ClipRecord& clip, const EvalModels& m, int count, int max_midpoints) {
    require_btimer(m);
    if (!clip.spec) throw ContractError("clip " + clip.id + " has no ground truth for novel times");
    const auto& spec = *clip.spec;
    const auto& video = clip.views[0];
    const Vec3 bg = background_of(clip);
    std::vector<MetricRow> rows;
    for (double t : midpoint_times(clip.times(), max_midpoints)) {
        const auto scene = m.nte ? reconstruct_novel_time(video, t, count, *m.nte, *m.nte_cfg, *m.btimer, *m.btimer_cfg)
                                 : reconstruct_at(video, t, count, *m.btimer, *m.btimer_cfg);
        const auto truth = clip.gt_scene_at(t);
        for (int v = 0; v < spec.views(); ++v) {
            const auto cam = spec.camera_at(t, v);
            const Image gt = render_scene(truth, cam, spec.config.cube, bg).quantized();
            rows.push_back(score(clip.id, t, v, render_scene(scene, cam, m.btimer_cfg->cube, bg), gt));
        }
    }
    return rows;
}

std::vector<MetricRow> eval_ground_truth(const ClipRecord& clip) {
    if (!clip.spec) throw ContractError("clip " + clip.id + " has no ground truth");
    const auto& spec = *clip.spec;
    std::vector<MetricRow> rows;
    for (std::size_t v = 0; v < clip.views.size(); ++v)
        for (const auto& f : clip.views[v]) {
            const Image gt =
                render_scene(clip.gt_scene_at(f.time), spec.camera_at(f.time, static_cast<int>(v)), spec.config.cube,
                             spec.config.background)
                    .quantized();
            rows.push_back(score(clip.id, f.time, static_cast<int>(v), gt, f.image));
        }
    return rows;
}

double mean_psnr_at_cameras(const ClipRecord& clip, const EvalModels& m, const std::vector<int>& context,
                            const std::vector<Camera>& cameras) {
    require_btimer(m);
    if (cameras.empty()) throw ContractError("mean_psnr_at_cameras: no cameras");
    ContextSet ctx;
    for (int i : context) ctx.frames.push_back(clip.views[0].at(static_cast<std::size_t>(i)));
    ctx.bullet_time = ctx.frames.empty() ? 0.0 : ctx.frames.front().time;
    const auto scene = reconstruct(ctx, *m.btimer, *m.btimer_cfg);
    const auto truth = clip.gt_scene_at(ctx.bullet_time);
    const Vec3 bg = background_of(clip);
    double sum = 0.0;
    for (const auto& cam : cameras) {
        const Image gt = render_scene(truth, cam, clip.spec->config.cube, bg).quantized();
        sum += psnr(render_scene(scene, cam, m.btimer_cfg->cube, bg), gt);
    }
    return sum / static_cast<double>(cameras.size());
}

} // namespace bt
