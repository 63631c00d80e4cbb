// SPDX-License-Identifier: Apache-2.0
#include "bt/nte.hpp"

#include "bt/error.hpp"

#include <algorithm>
#include <cmath>

namespace bt {

void NteConfig::validate() const {
    backbone.validate();
    if (!backbone.qk_norm) throw ConfigError("nte: qk_norm must be enabled");
    if (max_context < 1) throw ConfigError("nte: max_context must be positive");
    if (k_nearest < 2) throw ConfigError("nte: k_nearest must be at least 2");
    if (!(time_scale > 0)) throw ConfigError("nte: time_scale must be positive");
}

NteWeights::NteWeights(const NteConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    const int d = cfg.backbone.dim, p = cfg.backbone.patch;
    patch_embed = nn::Linear(p * p * 3, d, 0.02, rng);
    pose_embed = nn::Linear(p * p * 6, d, 0.02, rng);
    time = TimeEmbedder(d, rng);
    backbone = BackboneWeights(cfg.backbone, rng);
    head = nn::Linear(d, 3 * p * p, 0.02, rng);
}

void NteWeights::visit(const nn::ParamVisitor& v) {
    patch_embed.visit(v, "patch_embed");
    pose_embed.visit(v, "pose_embed");
    time.visit(v, "time");
    backbone.visit(v, "backbone");
    head.visit(v, "head");
}

void NteWeights::visit_time(const nn::ParamVisitor& v) { time.visit(v, "time"); }

NteTokens nte_tokens(const std::vector<Frame>& context, const TargetQuery& query, const NteWeights& w,
                     const NteConfig& cfg, bool use_time) {
    if (context.empty()) throw ContractError("nte: no context frames");
    if (static_cast<int>(context.size()) > cfg.max_context)
        throw ContractError("nte: too many context frames");
    const int width = context[0].image.width, height = context[0].image.height;
    for (const auto& f : context)
        if (f.image.width != width || f.image.height != height || f.intr.width != width || f.intr.height != height)
            throw ShapeError("nte: context frames have different sizes");
    if (query.intr.width != width || query.intr.height != height)
        throw ShapeError("nte: target size differs from the context");
    const int p = cfg.backbone.patch, d = cfg.backbone.dim;
    const auto prec = ad::default_precision();
    const auto frames = static_cast<std::int64_t>(context.size());
    const std::int64_t patches = static_cast<std::int64_t>(width / p) * (height / p);

    std::vector<ad::Tensor> rgb, pose;
    std::vector<double> times;
    for (const auto& f : context) {
        rgb.push_back(patch_tensor(f.image.data, width, height, 3, p, prec));
        pose.push_back(plucker_patches(f.pose, f.intr, p, prec));
        times.push_back(f.time);
    }
    NteTokens out;
    out.context = ad::add(w.patch_embed(ad::concat(rgb, 0)), w.pose_embed(ad::concat(pose, 0)));
    out.target = w.pose_embed(plucker_patches(query.pose, query.intr, p, prec));
    if (use_time) {
        times.push_back(query.time);
        const auto f_time = w.time(times, d, cfg.time_scale); // [F + 1, dim]
        const auto ctx_time = ad::reshape(ad::slice(f_time, 0, 0, frames), {frames, 1, d});
        out.context = ad::reshape(ad::add(ad::reshape(out.context, {frames, patches, d}), ctx_time),
                                  {frames * patches, d});
        out.target = ad::add(out.target, ad::reshape(ad::slice(f_time, 0, frames, frames + 1), {d}));
    }
    return out;
}

NteActivations nte_forward(const NteTokens& tokens, const NteWeights& w, const NteConfig& cfg, NteMode mode) {
    const std::int64_t nc = tokens.context.size(0), nt = tokens.target.size(0);
    NteActivations out;
    if (mode == NteMode::joint) {
        std::vector<TokenRole> roles(static_cast<std::size_t>(nc), TokenRole::context);
        roles.insert(roles.end(), static_cast<std::size_t>(nt), TokenRole::target);
        const auto mask = role_mask(roles);
        const auto all = backbone_forward(w.backbone, cfg.backbone, ad::concat({tokens.context, tokens.target}, 0), &mask);
        out.context = ad::slice(all, 0, 0, nc);
        out.target = ad::slice(all, 0, nc, nc + nt);
    } else {
        KVCache cache;
        out.context = backbone_forward(w.backbone, cfg.backbone, tokens.context, nullptr, &cache);
        out.target = backbone_forward(w.backbone, cfg.backbone, tokens.target, nullptr, &cache);
    }
    return out;
}

ad::Tensor synthesize(const std::vector<Frame>& context, const TargetQuery& query, const NteWeights& w,
                      const NteConfig& cfg, NteMode mode, bool use_time) {
    cfg.validate();
    const auto act = nte_forward(nte_tokens(context, query, w, cfg, use_time), w, cfg, mode);
    const auto rgb = ad::sigmoid(w.head(act.target));
    return unpatchify(rgb, query.intr.height, query.intr.width, cfg.backbone.patch);
}

Image synthesize_image(const std::vector<Frame>& context, const TargetQuery& query, const NteWeights& w,
                       const NteConfig& cfg) {
    ad::NoGradScope no_grad;
    return Image::from_tensor(synthesize(context, query, w, cfg, NteMode::cached));
}

std::vector<int> nearest_frames(const std::vector<double>& times, double t, int k) {
    if (k < 2) throw ContractError("nearest_frames: k must be at least 2");
    if (times.size() < 2 || !(t > times.front() && t < times.back()))
        throw ContractError("nearest_frames: time not strictly inside the frame span");
    if (observed_index(times, t) >= 0)
        throw ContractError("nearest_frames: time is observed; use the real frame");
    const int hi = static_cast<int>(std::upper_bound(times.begin(), times.end(), t) - times.begin());
    std::vector<int> out{hi - 1, hi};
    std::vector<int> rest;
    for (int i = 0; i < static_cast<int>(times.size()); ++i)
        if (i != hi - 1 && i != hi) rest.push_back(i);
    std::stable_sort(rest.begin(), rest.end(),
                     [&](int a, int b) { return std::abs(times[a] - t) < std::abs(times[b] - t); });
    for (std::size_t i = 0; i < rest.size() && static_cast<int>(out.size()) < k; ++i) out.push_back(rest[i]);
    std::sort(out.begin(), out.end());
    return out;
}

Frame enhance_context(const std::vector<Frame>& pool, double t, const NteWeights& w, const NteConfig& cfg) {
    std::vector<double> times;
    for (const auto& f : pool) times.push_back(f.time);
    const auto idx = nearest_frames(times, t, std::min(cfg.k_nearest, cfg.max_context));
    const int hi = static_cast<int>(std::upper_bound(times.begin(), times.end(), t) - times.begin());
    const Frame& a = pool[hi - 1];
    const Frame& b = pool[hi];
    const double alpha = (t - a.time) / (b.time - a.time);

    TargetQuery q;
    q.pose = interpolate_pose(a.pose, b.pose, alpha);
    q.intr = a.intr;
    q.time = t;
    std::vector<Frame> ctx;
    for (int i : idx) ctx.push_back(pool[i]);
    Frame out;
    out.image = synthesize_image(ctx, q, w, cfg);
    out.pose = q.pose;
    out.intr = q.intr;
    out.time = t;
    return out;
}

GaussianScene reconstruct_novel_time(const std::vector<Frame>& video, double t, int count, const NteWeights& nte,
                                     const NteConfig& nte_cfg, const BTimerWeights& bt, const BTimerConfig& bt_cfg) {
    if (video.empty()) throw ContractError("reconstruct_novel_time: empty video");
    if (t < video.front().time - 1e-9 || t > video.back().time + 1e-9)
        throw ContractError("reconstruct_novel_time: time outside the video span");
    std::vector<double> times;
    for (const auto& f : video) times.push_back(f.time);
    if (observed_index(times, t) >= 0) return reconstruct_at(video, t, count, bt, bt_cfg);

    auto idx = select_context_at(times, t, count);
    std::size_t nearest = 0;
    for (std::size_t k = 1; k < idx.size(); ++k)
        if (std::abs(times[idx[k]] - t) < std::abs(times[idx[nearest]] - t)) nearest = k;
    ContextSet ctx;
    ctx.bullet_time = t;
    std::vector<int> sources;
    for (std::size_t k = 0; k < idx.size(); ++k) {
        if (k == nearest) {
            ctx.frames.push_back(enhance_context(video, t, nte, nte_cfg));
            sources.push_back(-1);
        } else {
            ctx.frames.push_back(video[idx[k]]);
            sources.push_back(idx[k]);
        }
    }
    auto scene = reconstruct(ctx, bt, bt_cfg);
    scene.source_frames = std::move(sources);
    return scene;
}

} // namespace bt
