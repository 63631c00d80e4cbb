// SPDX-License-Identifier: Apache-2.0
#include "bt/error.hpp"
#include "bt/io.hpp"
#include "bt/rasterizer.hpp"
#include "bt/trainer.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>

using namespace bt;
namespace fs = std::filesystem;

namespace {

SceneGenConfig clip_config() {
    SceneGenConfig cfg;
    cfg.width = 16;
    cfg.height = 16;
    cfg.frames = 6;
    cfg.second_camera = true;
    return cfg;
}

const TrainingData& tiny_data() {
    static const TrainingData data = [] {
        TrainingData d;
        d.static_clips.push_back(generate_static(clip_seed(5, 0), clip_config(), "s0"));
        d.static_clips.push_back(generate_static(clip_seed(5, 1), clip_config(), "s1"));
        d.dynamic_clips.push_back(generate_dynamic(clip_seed(6, 0), clip_config(), "d0"));
        return d;
    }();
    return data;
}

BTimerConfig tiny_btimer() {
    BTimerConfig cfg;
    cfg.backbone.dim = 16;
    cfg.backbone.blocks = 1;
    cfg.backbone.heads = 2;
    cfg.backbone.patch = 4;
    cfg.backbone.mlp_ratio = 2;
    return cfg;
}

NteConfig tiny_nte() {
    NteConfig cfg;
    cfg.backbone = tiny_btimer().backbone;
    return cfg;
}

CurriculumStage stage(StageName name, long iterations, int batch = 1) {
    CurriculumStage s;
    s.name = name;
    s.iterations = iterations;
    s.batch = batch;
    s.context_count = 3;
    s.initial_lr = 1e-3;
    return s;
}

std::vector<std::vector<double>> snapshot(BTimerWeights& w) {
    std::vector<std::vector<double>> out;
    w.visit([&](const std::string&, ad::Tensor& p) { out.push_back(p.values()); });
    return out;
}

void poison(ad::Tensor& p) {
    if (p.precision() == ad::Precision::f32)
        p.mutable_data<float>()[0] = std::numeric_limits<float>::quiet_NaN();
    else
        p.mutable_data<double>()[0] = std::numeric_limits<double>::quiet_NaN();
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("bt_trainer_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

} // namespace

TEST(LearningRate, EndpointsAndMidpoint) {
    EXPECT_EQ(lr_at(0, 1000, 4e-4), 0.0);
    EXPECT_NEAR(lr_at(1000, 1000, 4e-4), 0.0, 1e-12);
    EXPECT_NEAR(lr_at(500, 1000, 4e-4, 0.0), 2e-4, 1e-15);
    EXPECT_NEAR(lr_at(0, 1000, 4e-4, 0.0), 4e-4, 1e-15);
    EXPECT_EQ(lr_at(0, 0, 1.0), 0.0);
    EXPECT_THROW(lr_at(11, 10, 1.0), ContractError);
}

TEST(LearningRate, ContinuousAndNonIncreasingAfterWarmup) {
    for (long total : {50L, 999L, 4000L}) {
        const long warmup = static_cast<long>(std::ceil(0.02 * total));
        double prev = lr_at(warmup, total, 1.0);
        // The ramp meets the cosine at the warmup boundary.
        EXPECT_NEAR(lr_at(warmup - 1, total, 1.0), prev * (warmup - 1.0) / warmup, 1e-3);
        for (long i = warmup + 1; i <= total; ++i) {
            const double lr = lr_at(i, total, 1.0);
            ASSERT_LE(lr, prev + 1e-15);
            ASSERT_LT(prev - lr, 4.0 / total);
            prev = lr;
        }
        for (long i = 1; i < warmup; ++i) ASSERT_GT(lr_at(i, total, 1.0), lr_at(i - 1, total, 1.0));
    }
}

TEST(Trainer, ZeroIterationsLeaveWeightsUnchanged) {
    auto cfg = tiny_btimer();
    std::mt19937_64 rng(1);
    BTimerWeights w(cfg, rng);
    const auto before = snapshot(w);
    Trainer t(w, cfg, {});
    auto report = t.train_stage(stage(StageName::stage1_static, 0), tiny_data());
    EXPECT_TRUE(report.loss.empty());
    EXPECT_EQ(snapshot(w), before);
    EXPECT_TRUE(t.run_curriculum({}, tiny_data()).empty());
    EXPECT_EQ(snapshot(w), before);
}

TEST(Trainer, FirstLossMatchesScriptedForwardPass) {
    auto cfg = tiny_btimer();
    std::mt19937_64 rng(2);
    BTimerWeights w(cfg, rng);
    TrainerConfig tc;
    tc.seed = 17;
    tc.loss.perceptual = Perceptual::off;
    Trainer t(w, cfg, tc);
    const auto s = stage(StageName::stage2_dynamic_cotrain, 3);

    // Replay the first draw and compute the squared error by hand.
    std::mt19937_64 replay(17);
    const auto sd = prepare_stage_data(s, tiny_data(), cfg.backbone.patch);
    const auto sample = draw_sample(s, sd, ModelKind::btimer, replay);
    double expected = 0.0;
    {
        ad::NoGradScope no_grad;
        const auto scene = to_scene(predict(sample.context(), w, cfg), sample.supervision.bullet_time);
        const Frame& tgt = sample.target();
        const auto img = rasterize(scene.gaussians, tgt.camera(), RenderSettings::for_camera(tgt.intr, cfg.bounds()));
        for (std::size_t k = 0; k < img.image.data.size(); ++k) {
            const double d = img.image.data[k] - tgt.image.data[k];
            expected += d * d;
        }
        expected /= static_cast<double>(img.image.data.size());
    }
    const auto report = t.train_stage(s, tiny_data());
    ASSERT_EQ(report.loss.size(), 3u);
    EXPECT_NEAR(report.loss[0], expected, 1e-5);
}

TEST(Trainer, StageOneFreezesTimeEmbedders) {
    auto cfg = tiny_btimer();
    std::mt19937_64 rng(3);
    BTimerWeights w(cfg, rng);
    std::vector<std::vector<double>> time_before;
    w.visit_time([&](const std::string&, ad::Tensor& p) { time_before.push_back(p.values()); });
    const auto all_before = snapshot(w);

    // No time-embedder parameter appears in the stage-1 gradient.
    {
        const auto s = stage(StageName::stage1_static, 1);
        const auto sd = prepare_stage_data(s, tiny_data(), cfg.backbone.patch);
        std::mt19937_64 r(4);
        const auto sample = draw_sample(s, sd, ModelKind::btimer, r);
        ad::Tape tape;
        const auto pred = predict(sample.context(), w, cfg, /*use_time=*/false);
        const auto g = tape.backward(ad::mean(pred.packed));
        w.visit_time([&](const std::string& name, ad::Tensor& p) {
            for (double v : g[p].values()) ASSERT_EQ(v, 0.0) << name;
        });
    }

    Trainer t(w, cfg, {});
    t.train_stage(stage(StageName::stage1_static, 5), tiny_data());
    std::size_t i = 0;
    w.visit_time([&](const std::string& name, ad::Tensor& p) { EXPECT_EQ(p.values(), time_before[i++]) << name; });
    EXPECT_NE(snapshot(w), all_before);
    t.next_stage();
    t.train_stage(stage(StageName::stage2_dynamic_cotrain, 3), tiny_data());
    i = 0;
    bool moved = false;
    w.visit_time([&](const std::string&, ad::Tensor& p) { moved |= p.values() != time_before[i++]; });
    EXPECT_TRUE(moved);
}

TEST(Trainer, ResumeMatchesUninterruptedRun) {
    auto cfg = tiny_btimer();
    const auto s = stage(StageName::stage2_dynamic_cotrain, 8, 2);
    TrainerConfig tc;
    tc.seed = 9;

    std::mt19937_64 r1(10);
    BTimerWeights a(cfg, r1);
    Trainer ta(a, cfg, tc);
    const auto full = ta.train_stage(s, tiny_data());

    std::mt19937_64 r2(10);
    BTimerWeights b(cfg, r2);
    Trainer tb(b, cfg, tc);
    tb.train_stage(s, tiny_data(), 5);
    const auto dir = scratch("resume");
    tb.save(dir / "mid.btck");

    std::mt19937_64 r3(99);
    BTimerWeights c(cfg, r3);
    Trainer tc2(c, cfg, tc);
    tc2.resume(load_checkpoint(dir / "mid.btck"));
    EXPECT_EQ(tc2.stage_iteration(), 5);
    const auto rest = tc2.train_stage(s, tiny_data());
    ASSERT_EQ(rest.loss.size(), 3u);
    EXPECT_NEAR(rest.loss[0], full.loss[5], 1e-6);
    EXPECT_EQ(snapshot(c), snapshot(a));
    fs::remove_all(dir);
}

TEST(Trainer, SameSeedReproducesLogBytes) {
    auto cfg = tiny_btimer();
    std::string logs[2];
    for (int run = 0; run < 2; ++run) {
        const auto dir = scratch("repro" + std::to_string(run));
        std::mt19937_64 rng(11);
        BTimerWeights w(cfg, rng);
        TrainerConfig tc;
        tc.seed = 12;
        tc.log_every = 2;
        tc.out_dir = dir;
        Trainer t(w, cfg, tc);
        t.run_curriculum({stage(StageName::stage1_static, 3), stage(StageName::stage2_dynamic_cotrain, 3)}, tiny_data());
        logs[run] = read_text_file(dir / "train_log.csv");
        EXPECT_TRUE(fs::exists(dir / "final.btck"));
        fs::remove_all(dir);
    }
    EXPECT_EQ(logs[0], logs[1]);
    EXPECT_EQ(std::count(logs[0].begin(), logs[0].end(), '\n'), 5); // header + 2 rows per stage
    EXPECT_EQ(logs[0].substr(0, logs[0].find('\n')), "iter,lr,loss,psnr");
}

TEST(Trainer, CurriculumValidatesPlanAndData) {
    auto cfg = tiny_btimer();
    std::mt19937_64 rng(13);
    BTimerWeights w(cfg, rng);
    Trainer t(w, cfg, {});
    TrainingData only_static;
    only_static.static_clips = tiny_data().static_clips;
    EXPECT_THROW(t.run_curriculum({stage(StageName::stage2_dynamic_cotrain, 1)}, only_static), ConfigError);
    EXPECT_THROW(t.run_curriculum({stage(StageName::stage1_static, 1)}, TrainingData{}), ConfigError);
    EXPECT_THROW(
        t.run_curriculum({stage(StageName::stage2_dynamic_cotrain, 1), stage(StageName::stage1_static, 1)}, tiny_data()),
        ConfigError);
    auto s3 = stage(StageName::stage3_long_context, 1);
    s3.context_count = 3;
    EXPECT_THROW(t.run_curriculum({stage(StageName::stage1_static, 1), s3}, tiny_data()), ConfigError);
    auto too_many = stage(StageName::stage1_static, 1);
    too_many.context_count = 7;
    EXPECT_THROW(t.run_curriculum({too_many}, tiny_data()), ConfigError);
    auto odd = stage(StageName::stage1_static, 1);
    odd.resolution = 6;
    EXPECT_THROW(t.run_curriculum({odd}, tiny_data()), ConfigError);
}

TEST(Trainer, NteSkipsLongContextStage) {
    auto cfg = tiny_nte();
    std::mt19937_64 rng(14);
    NteWeights w(cfg, rng);
    Trainer t(w, cfg, {});
    auto s3 = stage(StageName::stage3_long_context, 2);
    s3.context_count = 5;
    const auto reports =
        t.run_curriculum({stage(StageName::stage1_static, 2), stage(StageName::stage2_dynamic_cotrain, 2), s3}, tiny_data());
    ASSERT_EQ(reports.size(), 2u);
    EXPECT_EQ(reports[1].name, StageName::stage2_dynamic_cotrain);
    for (const auto& r : reports)
        for (double l : r.loss) EXPECT_TRUE(std::isfinite(l));
    EXPECT_EQ(t.stage_index(), 3u);
}

TEST(Trainer, NonFiniteLossHaltsWithDiagnosticCheckpoint) {
    auto cfg = tiny_btimer();
    std::mt19937_64 rng(15);
    BTimerWeights w(cfg, rng);
    poison(w.head.bias);
    const auto dir = scratch("nan");
    TrainerConfig tc;
    tc.out_dir = dir;
    Trainer t(w, cfg, tc);
    EXPECT_THROW(t.train_stage(stage(StageName::stage1_static, 3), tiny_data()), NumericalError);
    ASSERT_TRUE(fs::exists(dir / "diagnostic.btck"));
    EXPECT_EQ(load_checkpoint(dir / "diagnostic.btck").kind, ModelKind::btimer);
    fs::remove_all(dir);
}

TEST(Trainer, ShortOverfitImprovesPsnr) {
    auto cfg = tiny_btimer();
    std::mt19937_64 rng(16);
    BTimerWeights w(cfg, rng);
    TrainerConfig tc;
    tc.seed = 3;
    Trainer t(w, cfg, tc);
    TrainingData one;
    one.dynamic_clips.push_back(tiny_data().dynamic_clips[0]);
    auto s = stage(StageName::stage2_dynamic_cotrain, 150);
    s.initial_lr = 3e-3;
    s.static_fraction = 0.0;
    const auto r = t.train_stage(s, one);
    const std::vector<double> first(r.psnr.begin(), r.psnr.begin() + 25), last(r.psnr.end() - 25, r.psnr.end());
    EXPECT_GT(median(last), median(first) + 1.0);
}

TEST(Downsample, BoxFilterAndIntrinsicsAgree) {
    const auto& clip = tiny_data().static_clips[0];
    const auto half = downsample_clip(clip, 2);
    const Frame& f = clip.views[0][1];
    const Frame& h = half.views[0][1];
    EXPECT_EQ(h.image.width, 8);
    EXPECT_EQ(h.intr.width, 8);
    EXPECT_NEAR(h.image.at(3, 2, 1),
                0.25 * (f.image.at(6, 4, 1) + f.image.at(7, 4, 1) + f.image.at(6, 5, 1) + f.image.at(7, 5, 1)), 1e-15);
    const Vec3 p(0.3, -0.2, 0.5);
    const auto full_px = project_point(f.camera(), p);
    const auto half_px = project_point(h.camera(), p);
    ASSERT_TRUE(full_px && half_px);
    EXPECT_LT((*full_px * 0.5 - *half_px).norm(), 1e-12);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    auto cfg = tiny_btimer();
    std::mt19937_64 rng(17);
    BTimerWeights w(cfg, rng);
    Trainer t(w, cfg, {});
    t.train_stage(stage(StageName::stage2_dynamic_cotrain, 2), tiny_data());
    const auto dir = scratch("ckpt");
    const auto c = t.checkpoint();
    save_checkpoint(dir / "a.btck", c);
    const auto back = load_checkpoint(dir / "a.btck");
    EXPECT_EQ(back, c);
    save_checkpoint(dir / "b.btck", back);
    EXPECT_EQ(read_text_file(dir / "a.btck"), read_text_file(dir / "b.btck"));

    auto w2 = load_btimer(back);
    EXPECT_EQ(snapshot(w2), snapshot(w));
    fs::remove_all(dir);
}

TEST(Checkpoint, ErrorsAreDistinct) {
    const auto dir = scratch("ckpt_errors");
    EXPECT_THROW(load_checkpoint(dir / "none.btck"), MissingFileError);
    write_text_file(dir / "magic.btck", "NOPE0000");
    EXPECT_THROW(load_checkpoint(dir / "magic.btck"), FormatError);
    {
        BinaryWriter out(dir / "version.btck");
        out.bytes("BTCK", 4);
        out.u32(99);
        out.close();
    }
    EXPECT_THROW(load_checkpoint(dir / "version.btck"), VersionError);

    auto ncfg = tiny_nte();
    std::mt19937_64 rng(18);
    NteWeights nw(ncfg, rng);
    save_checkpoint(dir / "nte.btck", capture(nw, ncfg));
    auto bcfg = tiny_btimer();
    BTimerWeights bw(bcfg, rng);
    const auto nte_ckpt = load_checkpoint(dir / "nte.btck");
    EXPECT_THROW(restore(nte_ckpt, bw, bcfg), KindMismatchError);
    EXPECT_THROW(load_btimer(nte_ckpt), KindMismatchError);

    auto other = bcfg;
    other.backbone.dim = 32;
    EXPECT_THROW(restore(capture(bw, bcfg), bw, other), ConfigError);

    // Truncation is a format error.
    save_checkpoint(dir / "full.btck", capture(bw, bcfg));
    const auto bytes = read_text_file(dir / "full.btck");
    write_text_file(dir / "cut.btck", bytes.substr(0, bytes.size() / 2));
    EXPECT_THROW(load_checkpoint(dir / "cut.btck"), FormatError);
    fs::remove_all(dir);
}

TEST(Trainer, ContextCountRangeCoversEveryCount) {
    auto s = stage(StageName::stage2_dynamic_cotrain, 1);
    s.context_count = 5;
    s.min_context_count = 2;
    const auto sd = prepare_stage_data(s, tiny_data(), tiny_btimer().backbone.patch);
    std::mt19937_64 rng(4);
    std::set<std::size_t> seen;
    for (int i = 0; i < 200; ++i) seen.insert(draw_sample(s, sd, ModelKind::btimer, rng).supervision.context_indices.size());
    EXPECT_EQ(seen, (std::set<std::size_t>{2, 3, 4, 5}));
    s.min_context_count = 6;
    EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Plan, JsonRoundTripAndUnknownKeys) {
    const auto dir = scratch("plan");
    auto plan = default_plan();
    plan.back().min_context_count = 4;
    write_plan(dir / "plan.json", plan);
    const auto back = read_plan(dir / "plan.json");
    ASSERT_EQ(back.size(), plan.size());
    for (std::size_t i = 0; i < plan.size(); ++i) {
        EXPECT_EQ(back[i].name, plan[i].name);
        EXPECT_EQ(back[i].resolution, plan[i].resolution);
        EXPECT_EQ(back[i].context_count, plan[i].context_count);
        EXPECT_EQ(back[i].min_context_count, plan[i].min_context_count);
        EXPECT_EQ(back[i].iterations, plan[i].iterations);
        EXPECT_EQ(back[i].initial_lr, plan[i].initial_lr);
        EXPECT_EQ(back[i].static_fraction, plan[i].static_fraction);
    }
    EXPECT_GT(plan.back().context_count, plan.front().context_count);
    write_text_file(dir / "bad.json", R"({"stages": [{"name": "stage1_static", "iters": 3}]})");
    EXPECT_THROW(read_plan(dir / "bad.json"), ConfigError);
    write_text_file(dir / "bad2.json", R"({"stages": [{"name": "stage9"}]})");
    EXPECT_THROW(read_plan(dir / "bad2.json"), ConfigError);
    fs::remove_all(dir);
}
