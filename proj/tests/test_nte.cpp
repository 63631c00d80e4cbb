// SPDX-License-Identifier: Apache-2.0
#include "bt/error.hpp"
#include "bt/nte.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace bt;

namespace {

Frame random_frame(int size, double angle, double time, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Frame f;
    f.image = Image(size, size);
    for (auto& v : f.image.data) v = u(rng);
    f.intr = Intrinsics::centered(size, size, 1.0);
    f.pose = Pose::look_at(Vec3(10 * std::sin(angle), -3.0, -10 * std::cos(angle)), Vec3::Zero(), Vec3(0, -1, 0));
    f.time = time;
    return f;
}

std::vector<Frame> random_video(int n, int size, std::uint64_t seed) {
    std::vector<Frame> v;
    for (int i = 0; i < n; ++i) v.push_back(random_frame(size, 0.15 * i, double(i) / (n - 1), seed + i));
    return v;
}

NteConfig tiny_nte(int dim = 16, int blocks = 1, int heads = 2, int patch = 4) {
    NteConfig cfg;
    cfg.backbone.dim = dim;
    cfg.backbone.blocks = blocks;
    cfg.backbone.heads = heads;
    cfg.backbone.patch = patch;
    cfg.backbone.mlp_ratio = 2;
    return cfg;
}

// Spreads LayerNorm gains and temperatures so attention is far from uniform.
void randomize(NteWeights& w, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(-0.3, 0.3);
    w.visit([&](const std::string&, ad::Tensor& p) {
        if (p.precision() == ad::Precision::f64)
            for (auto& x : p.mutable_data<double>()) x += dist(rng);
        else
            for (auto& x : p.mutable_data<float>()) x += static_cast<float>(dist(rng));
    });
}

TargetQuery query_for(const Frame& f) { return {f.pose, f.intr, f.time}; }

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    EXPECT_EQ(a.size(), b.size());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace

TEST(Synthesize, ShapeAndRange) {
    auto cfg = tiny_nte();
    std::mt19937_64 rng(1);
    NteWeights w(cfg, rng);
    randomize(w, 2);
    auto video = random_video(3, 16, 3);
    auto img = synthesize({video[0], video[2]}, query_for(video[1]), w, cfg);
    EXPECT_EQ(img.shape(), (ad::Shape{16, 16, 3}));
    for (double v : img.values()) {
        ASSERT_GT(v, 0.0);
        ASSERT_LT(v, 1.0);
    }
}

TEST(Synthesize, TargetPoseDoesNotLeakIntoContext) {
    ad::VerificationScope f64;
    auto cfg = tiny_nte(16, 2, 4);
    std::mt19937_64 rng(4);
    NteWeights w(cfg, rng);
    randomize(w, 5);
    auto video = random_video(4, 16, 6);
    std::vector<Frame> ctx{video[0], video[1], video[3]};
    auto q1 = query_for(video[2]);
    auto q2 = q1;
    q2.pose = Pose::look_at(Vec3(4, -8, 6), Vec3(0.5, 0, 0), Vec3(0, -1, 0));
    auto a = nte_forward(nte_tokens(ctx, q1, w, cfg), w, cfg, NteMode::joint);
    auto b = nte_forward(nte_tokens(ctx, q2, w, cfg), w, cfg, NteMode::joint);
    EXPECT_LT(max_abs_diff(a.context.values(), b.context.values()), 1e-7);
    EXPECT_GT(max_abs_diff(a.target.values(), b.target.values()), 1e-4);
    EXPECT_GT(max_abs_diff(synthesize(ctx, q1, w, cfg).values(), synthesize(ctx, q2, w, cfg).values()), 1e-4);
}

TEST(Synthesize, CachedMatchesJointAcrossConfigs) {
    std::mt19937_64 pick(7);
    for (int trial = 0; trial < 6; ++trial) {
        const int heads = (trial % 2) ? 4 : 2;
        const int blocks = 1 + trial % 3;
        auto cfg = tiny_nte(16, blocks, heads);
        std::mt19937_64 rng(100 + trial);
        NteWeights w(cfg, rng);
        randomize(w, 200 + trial);
        auto video = random_video(5, 16, 300 + 10 * trial);
        const int nctx = 1 + static_cast<int>(pick() % 4);
        std::vector<Frame> ctx(video.begin(), video.begin() + nctx);
        auto q = query_for(video[4]);
        auto joint = synthesize(ctx, q, w, cfg, NteMode::joint);
        auto cached = synthesize(ctx, q, w, cfg, NteMode::cached);
        EXPECT_LT(max_abs_diff(joint.values(), cached.values()), 1e-5) << "trial " << trial;
    }
}

TEST(Synthesize, GradientsMatchFiniteDifferences) {
    ad::VerificationScope f64;
    auto cfg = tiny_nte(8, 1, 2);
    std::mt19937_64 rng(8);
    NteWeights w(cfg, rng);
    randomize(w, 9);
    auto video = random_video(3, 8, 10);
    std::vector<Frame> ctx{video[0], video[2]};
    const auto gt = video[1].image.tensor();
    std::vector<ad::Tensor> params;
    w.visit([&](const std::string&, ad::Tensor& p) { params.push_back(p); });
    auto f = [&] {
        auto d = ad::sub(synthesize(ctx, query_for(video[1]), w, cfg), gt);
        return ad::mean(ad::mul(d, d));
    };
    auto report = ad::grad_check(f, params, {.samples = 200, .seed = 11, .order = 4});
    EXPECT_LT(report.max_rel_err, 1e-3) << "worst " << report.worst_param;
}

TEST(Synthesize, QkNormIsRequired) {
    auto cfg = tiny_nte();
    cfg.backbone.qk_norm = false;
    std::mt19937_64 rng(12);
    EXPECT_THROW(NteWeights(cfg, rng), ConfigError);
}

TEST(NearestFrames, TwoFramePoolSelectsBoth) {
    EXPECT_EQ(nearest_frames({0.0, 1.0}, 0.5, 2), (std::vector<int>{0, 1}));
    EXPECT_EQ(nearest_frames({0.0, 1.0}, 0.5, 4), (std::vector<int>{0, 1}));
}

TEST(NearestFrames, AlwaysBracketsTheQueryTime) {
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 500; ++trial) {
        const int n = 2 + static_cast<int>(rng() % 12);
        std::vector<double> t(n);
        for (auto& x : t) x = u(rng);
        std::sort(t.begin(), t.end());
        if (t.back() - t.front() < 1e-6) continue;
        const double q = t.front() + (t.back() - t.front()) * (0.001 + 0.998 * u(rng));
        if (observed_index(t, q) >= 0) continue;
        const int k = 2 + static_cast<int>(rng() % 5);
        const auto idx = nearest_frames(t, q, k);
        ASSERT_EQ(idx.size(), static_cast<std::size_t>(std::min(k, n)));
        bool below = false, above = false;
        for (int i : idx) below |= t[i] <= q, above |= t[i] >= q;
        ASSERT_TRUE(below && above);
    }
}

TEST(NearestFrames, ObservedOrOutsideTimeIsRejected) {
    EXPECT_THROW(nearest_frames({0.0, 0.5, 1.0}, 0.5, 2), ContractError);
    EXPECT_THROW(nearest_frames({0.0, 0.5, 1.0}, 1.2, 2), ContractError);
    EXPECT_THROW(nearest_frames({0.0, 0.5, 1.0}, 0.2, 1), ContractError);
}

TEST(EnhanceContext, MidpointUsesGeodesicMidpointPose) {
    auto cfg = tiny_nte();
    std::mt19937_64 rng(14);
    NteWeights w(cfg, rng);
    auto video = random_video(4, 16, 15);
    const double t = 0.5 * (video[1].time + video[2].time);
    auto f = enhance_context(video, t, w, cfg);
    const auto expected = interpolate_pose(video[1].pose, video[2].pose, 0.5);
    EXPECT_LT((f.pose.rotation - expected.rotation).norm(), 1e-12);
    EXPECT_LT((f.pose.translation - expected.translation).norm(), 1e-12);
    EXPECT_DOUBLE_EQ(f.time, t);
    EXPECT_EQ(f.image.width, 16);
    EXPECT_THROW(enhance_context(video, video[2].time, w, cfg), ContractError);
}

TEST(ReconstructNovelTime, ObservedTimeBypassesSynthesis) {
    BTimerConfig bcfg;
    bcfg.backbone = tiny_nte().backbone;
    std::mt19937_64 rng(16);
    BTimerWeights bw(bcfg, rng);
    auto ncfg = tiny_nte();
    NteWeights nw(ncfg, rng);
    auto video = random_video(7, 16, 17);
    auto scenes = sweep(video, 3, bw, bcfg);
    auto s = reconstruct_novel_time(video, video[5].time, 3, nw, ncfg, bw, bcfg);
    ASSERT_EQ(s.gaussians.size(), scenes[5].gaussians.size());
    EXPECT_EQ(s.source_frames, scenes[5].source_frames);
    for (std::size_t i = 0; i < s.gaussians.size(); ++i) {
        ASSERT_TRUE(s.gaussians[i].mu == scenes[5].gaussians[i].mu);
        ASSERT_TRUE(s.gaussians[i].color == scenes[5].gaussians[i].color);
        ASSERT_EQ(s.gaussians[i].opacity, scenes[5].gaussians[i].opacity);
    }
}

TEST(ReconstructNovelTime, MidpointInsertsOneSynthesizedFrame) {
    BTimerConfig bcfg;
    bcfg.backbone = tiny_nte().backbone;
    std::mt19937_64 rng(18);
    BTimerWeights bw(bcfg, rng);
    auto ncfg = tiny_nte();
    NteWeights nw(ncfg, rng);
    auto video = random_video(7, 16, 19);
    const double t = 0.5 * (video[2].time + video[3].time);
    auto s = reconstruct_novel_time(video, t, 4, nw, ncfg, bw, bcfg);
    EXPECT_EQ(s.gaussians.size(), 4u * 256u);
    EXPECT_EQ(std::count(s.source_frames.begin(), s.source_frames.end(), -1), 1);
    EXPECT_DOUBLE_EQ(s.bullet_time, t);
    EXPECT_THROW(reconstruct_novel_time(video, 1.5, 4, nw, ncfg, bw, bcfg), ContractError);
}

TEST(SelectContextAt, UnobservedTimeIsBracketed) {
    std::vector<double> t(10);
    for (int i = 0; i < 10; ++i) t[i] = i / 9.0;
    for (double q = 0.01; q < 1.0; q += 0.037) {
        if (observed_index(t, q) >= 0) continue;
        for (int count = 2; count <= 6; ++count) {
            const auto idx = select_context_at(t, q, count);
            ASSERT_EQ(idx.size(), static_cast<std::size_t>(count));
            ASSERT_LE(t[idx.front()], q);
            ASSERT_GE(t[idx.back()], q);
        }
    }
    EXPECT_THROW(select_context_at(t, 0.05, 1), ContractError);
}
