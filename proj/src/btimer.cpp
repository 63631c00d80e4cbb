// SPDX-License-Identifier: Apache-2.0
#include "bt/btimer.hpp"

#include "bt/error.hpp"
#include "bt/parallel.hpp"

#include <algorithm>
#include <cmath>

namespace bt {

namespace {

// Raw head bias per pixel: colour 0.5, opacity 0.1, scale 0.1, identity
// rotation, tau logit placing the Gaussian near the middle of the depth range.
constexpr double kOpacityLogit = -2.1972245773362196; // logit(0.1)
constexpr double kScaleRaw = -2.2521684610440903;     // softplus^-1(0.1)

double tau_logit(const DecodeBounds& b, double depth) {
    const double s = std::clamp((depth - b.near) / (b.far - b.near), 1e-3, 1.0 - 1e-3);
    return std::log(s / (1.0 - s));
}

// Typical camera distance of the generated scenes; the head starts there.
constexpr double kInitialDepth = 10.0;

} // namespace

void ContextSet::validate(int max_frames) const {
    if (frames.empty()) throw ContractError("context: no frames");
    if (static_cast<int>(frames.size()) > max_frames)
        throw ContractError("context: " + std::to_string(frames.size()) + " frames exceeds the maximum of " +
                            std::to_string(max_frames));
    double lo = frames[0].time, hi = frames[0].time;
    for (const auto& f : frames) {
        if (f.image.width != frames[0].image.width || f.image.height != frames[0].image.height)
            throw ShapeError("context: frames have different image sizes");
        if (f.intr.width != f.image.width || f.intr.height != f.image.height)
            throw ShapeError("context: intrinsics do not match the image size");
        lo = std::min(lo, f.time);
        hi = std::max(hi, f.time);
    }
    if (bullet_time < lo - 1e-12 || bullet_time > hi + 1e-12)
        throw ContractError("context: bullet time outside the context time span");
}

void BTimerConfig::validate() const {
    backbone.validate();
    if (max_context < 1) throw ContractError("btimer: max_context must be positive");
    if (backbone.dim % 2 != 0) throw ContractError("btimer: dim must be even for the time encoding");
    if (!(time_scale > 0)) throw ContractError("btimer: time_scale must be positive");
}

bool BTimerConfig::operator==(const BTimerConfig& o) const {
    return backbone == o.backbone && max_context == o.max_context && time_scale == o.time_scale &&
           cube.lo == o.cube.lo && cube.hi == o.cube.hi;
}

TimeEmbedder::TimeEmbedder(int dim, std::mt19937_64& rng) : mlp(dim, dim, dim, 0.02, 0.02, rng) {}

ad::Tensor TimeEmbedder::operator()(const std::vector<double>& times, int dim, double time_scale) const {
    std::vector<double> pe;
    pe.reserve(times.size() * dim);
    for (double t : times) {
        const auto row = sinusoidal_pe(t * time_scale, dim);
        pe.insert(pe.end(), row.begin(), row.end());
    }
    const auto x = ad::Tensor::from_values({static_cast<std::int64_t>(times.size()), dim},
                                           std::span<const double>(pe));
    return mlp(x);
}

void TimeEmbedder::visit(const nn::ParamVisitor& v, const std::string& prefix) { mlp.visit(v, prefix); }

BTimerWeights::BTimerWeights(const BTimerConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    const int d = cfg.backbone.dim, p = cfg.backbone.patch;
    patch_embed = nn::Linear(p * p * 3, d, 0.02, rng);
    pose_embed = nn::Linear(p * p * 6, d, 0.02, rng);
    ctx_time = TimeEmbedder(d, rng);
    bullet_time = TimeEmbedder(d, rng);
    backbone = BackboneWeights(cfg.backbone, rng);
    head = nn::Linear(d, static_cast<std::int64_t>(kRawParams) * p * p, 0.02, rng);

    std::vector<double> bias(static_cast<std::size_t>(kRawParams) * p * p, 0.0);
    const double tau = tau_logit(cfg.bounds(), kInitialDepth);
    for (int i = 0; i < p * p; ++i) {
        double* b = &bias[static_cast<std::size_t>(i) * kRawParams];
        b[3] = kOpacityLogit;
        b[4] = b[5] = b[6] = kScaleRaw;
        b[11] = tau;
    }
    head.bias = ad::Tensor::parameter(
        ad::Tensor::from_values({static_cast<std::int64_t>(bias.size())}, std::span<const double>(bias)));
}

void BTimerWeights::visit(const nn::ParamVisitor& v) {
    patch_embed.visit(v, "patch_embed");
    pose_embed.visit(v, "pose_embed");
    ctx_time.visit(v, "ctx_time");
    bullet_time.visit(v, "bullet_time");
    backbone.visit(v, "backbone");
    head.visit(v, "head");
}

void BTimerWeights::visit_time(const nn::ParamVisitor& v) {
    ctx_time.visit(v, "ctx_time");
    bullet_time.visit(v, "bullet_time");
}

ad::Tensor patch_tensor(std::span<const double> values, int width, int height, int channels, int patch,
                        ad::Precision precision) {
    if (patch <= 0 || width % patch != 0 || height % patch != 0)
        throw ShapeError("patch_tensor: patch " + std::to_string(patch) + " does not divide " +
                         std::to_string(width) + "x" + std::to_string(height));
    if (values.size() != static_cast<std::size_t>(width) * height * channels)
        throw ShapeError("patch_tensor: value count does not match the map size");
    const int pw = width / patch, ph = height / patch;
    const std::size_t row = static_cast<std::size_t>(patch) * patch * channels;
    std::vector<double> out(values.size());
    for (int py = 0; py < ph; ++py)
        for (int px = 0; px < pw; ++px) {
            double* dst = &out[(static_cast<std::size_t>(py) * pw + px) * row];
            for (int iy = 0; iy < patch; ++iy) {
                const std::size_t src = (static_cast<std::size_t>(py * patch + iy) * width + px * patch) * channels;
                std::copy_n(&values[src], static_cast<std::size_t>(patch) * channels,
                            dst + static_cast<std::size_t>(iy) * patch * channels);
            }
        }
    return ad::Tensor::from_values({static_cast<std::int64_t>(pw) * ph, static_cast<std::int64_t>(row)},
                                   std::span<const double>(out), precision);
}

ad::Tensor plucker_patches(const Pose& pose, const Intrinsics& intr, int patch, ad::Precision precision) {
    const auto pl = plucker(pixel_rays(pose, intr));
    return patch_tensor(pl.values, intr.width, intr.height, 6, patch, precision);
}

TokenGrid build_tokens(const ContextSet& ctx, const BTimerWeights& w, const BTimerConfig& cfg, bool use_time) {
    ctx.validate(cfg.max_context);
    const int p = cfg.backbone.patch, d = cfg.backbone.dim;
    const int width = ctx.frames[0].image.width, height = ctx.frames[0].image.height;
    const auto prec = ad::default_precision();

    std::vector<ad::Tensor> rgb, pose;
    for (const auto& f : ctx.frames) {
        rgb.push_back(patch_tensor(f.image.data, width, height, 3, p, prec));
        pose.push_back(plucker_patches(f.pose, f.intr, p, prec));
    }
    TokenGrid grid;
    grid.frames = static_cast<int>(ctx.frames.size());
    grid.patches_per_frame = (width / p) * (height / p);
    ad::Tensor tokens = ad::add(w.patch_embed(ad::concat(rgb, 0)), w.pose_embed(ad::concat(pose, 0)));
    if (use_time) {
        std::vector<double> times;
        for (const auto& f : ctx.frames) times.push_back(f.time);
        grid.ctx_time = w.ctx_time(times, d, cfg.time_scale);
        grid.bullet_time = ad::reshape(w.bullet_time({ctx.bullet_time}, d, cfg.time_scale), {d});
        const auto f_time = ad::add(grid.ctx_time, grid.bullet_time);
        tokens = ad::add(ad::reshape(tokens, {grid.frames, grid.patches_per_frame, d}),
                         ad::reshape(f_time, {grid.frames, 1, d}));
        tokens = ad::reshape(tokens, {static_cast<std::int64_t>(grid.frames) * grid.patches_per_frame, d});
    }
    grid.tokens = tokens;
    return grid;
}

Prediction predict(const ContextSet& ctx, const BTimerWeights& w, const BTimerConfig& cfg, bool use_time) {
    const auto grid = build_tokens(ctx, w, cfg, use_time);
    const int p = cfg.backbone.patch;
    const int width = ctx.frames[0].image.width, height = ctx.frames[0].image.height;
    const auto x = backbone_forward(w.backbone, cfg.backbone, grid.tokens);
    const std::int64_t rows = x.size(0) * p * p;
    const auto raw = ad::reshape(w.head(x), {rows, kRawParams});

    Prediction pred;
    pred.pixel_of_row.reserve(static_cast<std::size_t>(rows));
    std::vector<double> origins, dirs;
    origins.reserve(static_cast<std::size_t>(rows) * 3);
    dirs.reserve(static_cast<std::size_t>(rows) * 3);
    const int pw = width / p, ph = height / p;
    const std::size_t frame_pixels = static_cast<std::size_t>(width) * height;
    for (std::size_t f = 0; f < ctx.frames.size(); ++f) {
        const auto rays = pixel_rays(ctx.frames[f].pose, ctx.frames[f].intr);
        for (int py = 0; py < ph; ++py)
            for (int px = 0; px < pw; ++px)
                for (int iy = 0; iy < p; ++iy)
                    for (int ix = 0; ix < p; ++ix) {
                        const std::size_t pix = static_cast<std::size_t>(py * p + iy) * width + px * p + ix;
                        pred.pixel_of_row.push_back(f * frame_pixels + pix);
                        origins.insert(origins.end(), &rays.origins[3 * pix], &rays.origins[3 * pix] + 3);
                        dirs.insert(dirs.end(), &rays.directions[3 * pix], &rays.directions[3 * pix] + 3);
                    }
    }
    pred.packed = decode_gaussians(raw, origins, dirs, cfg.bounds());
    return pred;
}

GaussianScene to_scene(const Prediction& pred, double bullet_time, std::vector<int> source_frames) {
    const auto v = pred.packed.values();
    std::vector<Gaussian> ordered(pred.pixel_of_row.size());
    for (std::size_t r = 0; r < pred.pixel_of_row.size(); ++r)
        ordered[pred.pixel_of_row[r]] =
            Gaussian::unpack(std::span<const double, kPackedParams>(&v[r * kPackedParams], kPackedParams));
    GaussianScene scene;
    scene.gaussians = std::move(ordered);
    scene.bullet_time = bullet_time;
    scene.source_frames = std::move(source_frames);
    return scene;
}

GaussianScene reconstruct(const ContextSet& ctx, const BTimerWeights& w, const BTimerConfig& cfg) {
    ad::NoGradScope no_grad;
    std::vector<int> sources(ctx.frames.size());
    for (std::size_t i = 0; i < sources.size(); ++i) sources[i] = static_cast<int>(i);
    return to_scene(predict(ctx, w, cfg), ctx.bullet_time, std::move(sources));
}

std::vector<int> select_context(const std::vector<double>& times, int t_index, int count) {
    const int n = static_cast<int>(times.size());
    if (count < 1) throw ContractError("select_context: count must be at least 1");
    if (t_index < 0 || t_index >= n) throw ContractError("select_context: t_index out of range");
    std::vector<int> out;
    if (count >= n) {
        for (int i = 0; i < n; ++i) out.push_back(i);
        return out;
    }
    if (count == 1) return {t_index};
    for (int k = 0; k < count; ++k)
        out.push_back(static_cast<int>(std::lround(static_cast<double>(k) * (n - 1) / (count - 1))));
    if (std::find(out.begin(), out.end(), t_index) == out.end()) {
        std::size_t nearest = 0;
        for (std::size_t k = 1; k < out.size(); ++k)
            if (std::abs(out[k] - t_index) < std::abs(out[nearest] - t_index)) nearest = k;
        out[nearest] = t_index;
    }
    // Collisions: move later duplicates to the closest index not yet taken.
    std::vector<char> used(static_cast<std::size_t>(n), 0);
    for (auto& i : out) {
        if (!used[i]) {
            used[i] = 1;
            continue;
        }
        for (int r = 1; r < n; ++r) {
            if (i - r >= 0 && !used[i - r]) { i -= r; break; }
            if (i + r < n && !used[i + r]) { i += r; break; }
        }
        used[i] = 1;
    }
    std::sort(out.begin(), out.end());
    return out;
}

int observed_index(const std::vector<double>& times, double t) {
    for (std::size_t i = 0; i < times.size(); ++i)
        if (std::abs(times[i] - t) <= 1e-9) return static_cast<int>(i);
    return -1;
}

std::vector<int> select_context_at(const std::vector<double>& times, double t, int count) {
    if (times.empty()) throw ContractError("select_context_at: no frames");
    if (t < times.front() - 1e-9 || t > times.back() + 1e-9)
        throw ContractError("select_context_at: time outside the video span");
    if (const int i = observed_index(times, t); i >= 0) return select_context(times, i, count);
    if (count < 2) throw ContractError("select_context_at: an unobserved time needs at least two frames");
    const int hi = static_cast<int>(std::upper_bound(times.begin(), times.end(), t) - times.begin());
    const int lo = hi - 1;
    const int anchor = t - times[lo] <= times[hi] - t ? lo : hi;
    const int other = anchor == lo ? hi : lo;
    auto idx = select_context(times, anchor, count);
    if (std::find(idx.begin(), idx.end(), other) == idx.end()) {
        // Swap the non-anchor element nearest to the missing neighbour for it.
        std::size_t best = idx.size();
        for (std::size_t k = 0; k < idx.size(); ++k) {
            if (idx[k] == anchor) continue;
            if (best == idx.size() || std::abs(idx[k] - other) < std::abs(idx[best] - other)) best = k;
        }
        idx[best] = other;
        std::sort(idx.begin(), idx.end());
    }
    return idx;
}

GaussianScene reconstruct_at(const std::vector<Frame>& video, double t, int count, const BTimerWeights& w,
                             const BTimerConfig& cfg) {
    std::vector<double> times;
    for (const auto& f : video) times.push_back(f.time);
    const auto idx = select_context_at(times, t, count);
    const int obs = observed_index(times, t);
    ContextSet ctx;
    for (int j : idx) ctx.frames.push_back(video[j]);
    ctx.bullet_time = obs >= 0 ? video[obs].time : t;
    auto scene = reconstruct(ctx, w, cfg);
    scene.source_frames = idx;
    return scene;
}

std::vector<GaussianScene> sweep(const std::vector<Frame>& video, int count, const BTimerWeights& w,
                                 const BTimerConfig& cfg) {
    std::vector<GaussianScene> scenes(video.size());
    parallel_for(video.size(), [&](std::size_t i) { scenes[i] = reconstruct_at(video, video[i].time, count, w, cfg); });
    return scenes;
}

} // namespace bt
