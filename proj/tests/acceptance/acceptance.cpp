// SPDX-License-Identifier: Apache-2.0
//
// Runs the ten acceptance criteria and prints one PASS/FAIL line for each.
// Exit status is nonzero when any selected criterion fails.
//
//   acceptance [--only 4,5] [--cache DIR] [--work DIR]
//
// --cache keeps trained checkpoints between runs (development only; the
// registered test always trains from scratch).
#include "bt/checkpoint.hpp"
#include "bt/error.hpp"
#include "bt/evaluate.hpp"
#include "bt/io.hpp"
#include "bt/rasterizer.hpp"
#include "bt/trainer.hpp"
#include "bt/verify.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>

using namespace bt;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool passed = false;
    std::string detail;
};

struct Options {
    std::set<int> only;
    fs::path cache;
    fs::path work;
    bool wants(int c) const { return only.empty() || only.count(c) != 0; }
};

double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

double mean_psnr(const std::vector<MetricRow>& rows) { return summarize(rows).mean_psnr; }

// --- toy setup -----------------------------------------------------------------

constexpr int kContext = 4;

SceneGenConfig toy_scene() {
    SceneGenConfig sc;
    sc.frames = 16;
    sc.second_camera = true;
    return sc;
}

SceneGenConfig fast_scene() {
    SceneGenConfig sc = toy_scene();
    sc.frames = 9;
    sc.motion = MotionMix::sinusoidal;
    sc.min_amplitude = 3.0;
    sc.max_amplitude = 3.5;
    sc.min_frequency = 1.0;
    sc.max_frequency = 1.25;
    return sc;
}

BackboneConfig toy_backbone() {
    return {.dim = 128, .blocks = 4, .heads = 4, .patch = 8, .qk_norm = true, .mlp_ratio = 4};
}

BTimerConfig toy_btimer() {
    BTimerConfig cfg;
    cfg.backbone = toy_backbone();
    cfg.cube = toy_scene().cube;
    return cfg;
}

NteConfig toy_nte() {
    NteConfig cfg;
    cfg.backbone = toy_backbone();
    return cfg;
}

CurriculumStage stage(StageName name, int resolution, int context, long iters, double lr, double static_fraction,
                      double p_interp = 0.3) {
    CurriculumStage s;
    s.name = name;
    s.resolution = resolution;
    s.context_count = context;
    s.iterations = iters;
    s.initial_lr = lr;
    s.static_fraction = static_fraction;
    s.batch = 1;
    s.p_interp = p_interp;
    return s;
}

struct ToyData {
    TrainingData train;           // 6 static clips and 1 dynamic clip
    std::vector<ClipRecord> held; // 3 static clips never trained on
    TrainingData fast;            // 3 fast-motion clips plus the static clips
};

ToyData make_data() {
    ToyData d;
    const auto sc = toy_scene();
    for (std::size_t i = 0; i < 6; ++i)
        d.train.static_clips.push_back(generate_static(clip_seed(10, i), sc, fmt::format("static{}", i)));
    d.train.dynamic_clips.push_back(generate_dynamic(clip_seed(20, 0), sc, "dynamic0"));
    for (std::size_t i = 0; i < 3; ++i)
        d.held.push_back(generate_static(clip_seed(30, i), sc, fmt::format("held{}", i)));
    d.fast.static_clips = d.train.static_clips;
    for (std::size_t i = 0; i < 3; ++i)
        d.fast.dynamic_clips.push_back(generate_dynamic(clip_seed(40, i), fast_scene(), fmt::format("fast{}", i)));
    return d;
}

TrainerConfig trainer_config() {
    TrainerConfig tc;
    tc.seed = 3;
    tc.log_every = 100;
    return tc;
}

// Trains (or loads from the cache) one checkpoint. The checkpoint sits at the
// start of the stage after the ones it ran.
class ModelStore {
public:
    explicit ModelStore(fs::path cache) : cache_(std::move(cache)) {
        if (!cache_.empty()) fs::create_directories(cache_);
    }

    const Checkpoint& get(const std::string& name, const std::function<Checkpoint()>& train) {
        if (auto it = memo_.find(name); it != memo_.end()) return it->second;
        const fs::path file = cache_.empty() ? fs::path() : cache_ / (name + ".btck");
        if (!file.empty() && fs::exists(file)) {
            spdlog::info("loaded {} from cache", name);
            return memo_.emplace(name, load_checkpoint(file)).first->second;
        }
        const double t0 = now_seconds();
        auto ckpt = train();
        spdlog::info("trained {} in {:.0f} s", name, now_seconds() - t0);
        if (!file.empty()) save_checkpoint(file, ckpt);
        return memo_.emplace(name, std::move(ckpt)).first->second;
    }

private:
    fs::path cache_;
    std::map<std::string, Checkpoint> memo_;
};

// Continues a BTimer checkpoint through the given stages.
Checkpoint continue_btimer(const Checkpoint& from, const std::vector<CurriculumStage>& stages, const TrainingData& data) {
    auto w = load_btimer(from);
    const auto cfg = btimer_config_of(from);
    Trainer t(w, cfg, trainer_config());
    t.resume(from);
    for (const auto& s : stages) {
        t.train_stage(s, data);
        t.next_stage();
    }
    return t.checkpoint();
}

struct Pipeline {
    const ToyData& data;
    ModelStore& store;

    const Checkpoint& m1() {
        return store.get("m1", [&] {
            const auto cfg = toy_btimer();
            std::mt19937_64 init(1);
            BTimerWeights w(cfg, init);
            Trainer t(w, cfg, trainer_config());
            for (const auto& s : {stage(StageName::stage1_static, 32, kContext, 600, 2e-3, 0.0),
                                  stage(StageName::stage1_static, 64, kContext, 1200, 2e-3, 0.0)}) {
                t.train_stage(s, data.train);
                t.next_stage();
            }
            return t.checkpoint();
        });
    }
    const Checkpoint& m2(bool interp) {
        return store.get(interp ? "m2_interp" : "m2_no_interp", [&] {
            return continue_btimer(
                m1(), {stage(StageName::stage2_dynamic_cotrain, 64, kContext, 2000, 1e-3, 0.25, interp ? 0.3 : 0.0)},
                data.train);
        });
    }
    const Checkpoint& m3(bool interp) {
        return store.get(interp ? "m3_interp" : "m3_no_interp", [&] {
            auto longer = stage(StageName::stage3_long_context, 64, 6, 300, 2e-5, 0.25, interp ? 0.3 : 0.0);
            longer.min_context_count = kContext;
            return continue_btimer(m2(interp), {longer}, data.train);
        });
    }
    const Checkpoint& fast_btimer() {
        return store.get("fast_btimer", [&] {
            return continue_btimer(m1(), {stage(StageName::stage2_dynamic_cotrain, 64, kContext, 1500, 1e-3, 0.25)},
                                   data.fast);
        });
    }
    const Checkpoint& fast_nte() {
        return store.get("fast_nte", [&] {
            const auto cfg = toy_nte();
            std::mt19937_64 init(2);
            NteWeights w(cfg, init);
            Trainer t(w, cfg, trainer_config());
            for (const auto& s : {stage(StageName::stage1_static, 64, kContext, 600, 2e-3, 0.0),
                                  stage(StageName::stage2_dynamic_cotrain, 64, kContext, 4400, 1e-3, 0.25)}) {
                t.train_stage(s, data.fast);
                t.next_stage();
            }
            return t.checkpoint();
        });
    }
};

struct LoadedBTimer {
    BTimerConfig cfg;
    BTimerWeights w;
    explicit LoadedBTimer(const Checkpoint& c) : cfg(btimer_config_of(c)), w(load_btimer(c)) {}
    EvalModels models() const { return {&w, &cfg}; }
};

double held_static_psnr(const std::vector<ClipRecord>& held, const EvalModels& m) {
    double s = 0.0;
    for (const auto& c : held) s += mean_psnr(eval_novel_view(c, m, kContext));
    return s / static_cast<double>(held.size());
}

// Distances from the source camera centers to the predicted Gaussians and to
// the ground-truth Gaussians, pooled over the clip's midpoint reconstructions.
struct DepthStats {
    double median_pred = 0.0;
    double gt_min = 0.0;
    double gt_max = 0.0;
};

DepthStats depth_stats(const ClipRecord& clip, const LoadedBTimer& m) {
    std::vector<double> pred;
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    const auto& video = clip.views[0];
    for (double t : midpoint_times(clip.times(), 8)) {
        const auto scene = reconstruct_at(video, t, kContext, m.w, m.cfg);
        const auto truth = clip.gt_scene_at(t);
        const std::size_t per_frame = scene.size() / scene.source_frames.size();
        for (std::size_t k = 0; k < scene.size(); ++k) {
            const int f = scene.source_frames[k / per_frame];
            pred.push_back((scene.gaussians[k].mu - video[static_cast<std::size_t>(f)].pose.center()).norm());
        }
        for (int f : scene.source_frames)
            for (const auto& g : truth.gaussians) {
                const double d = (g.mu - video[static_cast<std::size_t>(f)].pose.center()).norm();
                lo = std::min(lo, d);
                hi = std::max(hi, d);
            }
    }
    std::nth_element(pred.begin(), pred.begin() + static_cast<long>(pred.size() / 2), pred.end());
    return {pred[pred.size() / 2], lo, hi};
}

// --- criteria ------------------------------------------------------------------

Outcome criterion1() {
    const auto r = verify_gradients();
    std::string worst;
    double e = 0.0;
    for (const auto& c : r.checks)
        if (c.max_error >= e) e = c.max_error, worst = c.name;
    spdlog::info("\n{}", format_report(r));
    return {r.passed() && r.seconds < 60.0,
            fmt::format("{} checks, max rel err {:.2e} ({}), {:.1f} s", r.checks.size(), e, worst, r.seconds)};
}

Outcome criterion2() {
    const auto r = verify_rasterizer();
    spdlog::info("\n{}", format_report(r));
    return {r.passed(), fmt::format("100 scenes: color err {:.2e}, alpha err {:.2e}, |alpha+T-1| {:.2e}",
                                    r.checks[0].max_error, r.checks[1].max_error, r.checks[2].max_error)};
}

Outcome criterion3() {
    const auto r = verify_cache();
    spdlog::info("\n{}", format_report(r));
    return {r.passed(), fmt::format("20 configs: cached vs joint {:.2e}, context drift joint {:.2e} cached {:.2e}",
                                    r.checks[0].max_error, r.checks[1].max_error, r.checks[2].max_error)};
}

Outcome criterion4(Pipeline& p) {
    const LoadedBTimer m(p.m3(true));
    const double v = mean_psnr(eval_novel_view(p.data.train.dynamic_clips[0], m.models(), kContext));
    return {v >= 28.0, fmt::format("held-out view PSNR {:.2f} dB (threshold 28)", v)};
}

Outcome criterion5(Pipeline& p) {
    const auto& clip = p.data.train.dynamic_clips[0];
    const LoadedBTimer with(p.m3(true)), without(p.m3(false));
    const double a = mean_psnr(eval_novel_time(clip, with.models(), kContext, 8));
    const double b = mean_psnr(eval_novel_time(clip, without.models(), kContext, 8));
    const auto dw = depth_stats(clip, with);
    const auto dn = depth_stats(clip, without);
    const bool depth_ok = dw.median_pred >= dw.gt_min && dw.median_pred <= dw.gt_max;
    return {a > b && depth_ok,
            fmt::format("midpoint PSNR with {:.2f} dB vs without {:.2f} dB; median depth {:.2f} (without {:.2f}) in "
                        "truth range [{:.2f}, {:.2f}]",
                        a, b, dw.median_pred, dn.median_pred, dw.gt_min, dw.gt_max)};
}

Outcome criterion6(Pipeline& p) {
    const LoadedBTimer b(p.fast_btimer());
    const auto& nc = p.fast_nte();
    const auto ncfg = nte_config_of(nc);
    const auto nw = load_nte(nc);
    double with = 0.0, without = 0.0, min_step = 1e9;
    std::size_t mids = 0;
    for (const auto& clip : p.data.fast.dynamic_clips) {
        min_step = std::min(min_step, clip.spec->max_frame_step());
        const EvalModels plain{&b.w, &b.cfg};
        const EvalModels enhanced{&b.w, &b.cfg, &nw, &ncfg};
        const auto rw = eval_novel_time(clip, enhanced, kContext, 8);
        const auto rn = eval_novel_time(clip, plain, kContext, 8);
        with += mean_psnr(rw);
        without += mean_psnr(rn);
        mids += midpoint_times(clip.times(), 8).size();
    }
    const double n = static_cast<double>(p.data.fast.dynamic_clips.size());
    with /= n;
    without /= n;
    return {with > without && min_step >= 2.0 && mids >= 24,
            fmt::format("{} clips, {} midpoints, min step {:.2f}/interval: with enhancer {:.2f} dB vs without {:.2f} dB",
                        n, mids, min_step, with, without)};
}

Outcome criterion7(Pipeline& p) {
    const LoadedBTimer m(p.m1());
    const auto& clip = p.data.train.static_clips[0];
    std::vector<Camera> cams;
    for (int k = 0; k < 8; ++k) cams.push_back({clip.spec->orbit.pose_at(k / 7.0, 0.175), clip.views[0][0].intr});
    const double p1 = mean_psnr_at_cameras(clip, m.models(), {7}, cams);
    const double p2 = mean_psnr_at_cameras(clip, m.models(), {0, 15}, cams);
    const double p4 = mean_psnr_at_cameras(clip, m.models(), {0, 5, 10, 15}, cams);
    return {p1 <= p2 && p2 <= p4, fmt::format("1/2/4 views: {:.2f} / {:.2f} / {:.2f} dB", p1, p2, p4)};
}

Outcome criterion8(Pipeline& p) {
    const LoadedBTimer m1(p.m1()), m2(p.m2(true));
    const double a = held_static_psnr(p.data.held, m1.models());
    const double b = held_static_psnr(p.data.held, m2.models());
    return {b >= a - 1.0, fmt::format("held-out static PSNR: static-only {:.2f} dB, co-trained {:.2f} dB", a, b)};
}

BTimerConfig tiny_btimer() {
    BTimerConfig cfg;
    cfg.backbone = {.dim = 16, .blocks = 1, .heads = 2, .patch = 4, .qk_norm = true, .mlp_ratio = 2};
    return cfg;
}

Outcome criterion9(const fs::path& work) {
    SceneGenConfig sc;
    sc.width = sc.height = 16;
    sc.frames = 6;
    sc.second_camera = true;
    TrainingData data;
    data.static_clips.push_back(generate_static(clip_seed(50, 0), sc, "s"));
    data.dynamic_clips.push_back(generate_dynamic(clip_seed(50, 1), sc, "d"));
    const auto cfg = tiny_btimer();
    const std::vector<CurriculumStage> plan{stage(StageName::stage1_static, 0, 3, 6, 1e-3, 0.0),
                                            stage(StageName::stage2_dynamic_cotrain, 0, 3, 6, 1e-3, 0.5)};
    std::vector<std::string> failures;

    // Same seed, same log bytes.
    std::string logs[2];
    for (int run = 0; run < 2; ++run) {
        const auto dir = work / fmt::format("determinism{}", run);
        fs::remove_all(dir);
        std::mt19937_64 init(7);
        BTimerWeights w(cfg, init);
        auto tc = trainer_config();
        tc.log_every = 1;
        tc.out_dir = dir;
        Trainer t(w, cfg, tc);
        t.run_curriculum(plan, data);
        logs[run] = read_text_file(dir / "train_log.csv");
    }
    if (logs[0] != logs[1] || logs[0].empty()) failures.push_back("training logs differ");

    // Resume: 3 steps, save, reload into fresh weights, next-step loss.
    const auto s = stage(StageName::stage2_dynamic_cotrain, 0, 3, 6, 1e-3, 0.5);
    double resume_err = 0.0;
    {
        std::mt19937_64 i1(8);
        BTimerWeights a(cfg, i1);
        Trainer ta(a, cfg, trainer_config());
        const auto full = ta.train_stage(s, data);

        std::mt19937_64 i2(8);
        BTimerWeights b(cfg, i2);
        Trainer tb(b, cfg, trainer_config());
        tb.train_stage(s, data, 3);
        save_checkpoint(work / "resume.btck", tb.checkpoint());

        std::mt19937_64 i3(99);
        BTimerWeights c(cfg, i3);
        Trainer tcn(c, cfg, trainer_config());
        tcn.resume(load_checkpoint(work / "resume.btck"));
        const auto rest = tcn.train_stage(s, data);
        resume_err = std::abs(rest.loss.at(0) - full.loss.at(3));
        if (!(resume_err <= 1e-6)) failures.push_back(fmt::format("resume loss differs by {:.2e}", resume_err));
    }

    // Checkpoint bytes survive load and save.
    {
        const auto a = read_text_file(work / "resume.btck");
        save_checkpoint(work / "resaved.btck", load_checkpoint(work / "resume.btck"));
        if (a != read_text_file(work / "resaved.btck")) failures.push_back("checkpoint round trip changed bytes");
    }

    // Manifest and images survive write and read.
    {
        std::vector<ClipRecord> clips{data.static_clips[0], data.dynamic_clips[0]};
        const auto dir = work / "dataset";
        fs::remove_all(dir);
        const auto written = write_dataset(dir, clips, sc.cube);
        const auto read = read_manifest(dir / "manifest.json");
        write_manifest(read, work / "manifest_again.json");
        if (!(read == written)) failures.push_back("manifest differs after reading");
        if (read_text_file(dir / "manifest.json") != read_text_file(work / "manifest_again.json"))
            failures.push_back("manifest bytes differ after rewrite");
        const auto ds = load_dataset(dir);
        for (std::size_t c = 0; c < clips.size(); ++c)
            for (std::size_t v = 0; v < clips[c].views.size(); ++v)
                for (std::size_t i = 0; i < clips[c].views[v].size(); ++i) {
                    const auto& x = clips[c].views[v][i];
                    const auto& y = ds.clips[c].views[v][i];
                    if (x.image.data != y.image.data || !(x.pose == y.pose) || x.time != y.time)
                        failures.push_back(fmt::format("frame {}/{}/{} differs after loading", c, v, i));
                }
    }
    std::string detail = fmt::format("log bytes equal, resume loss diff {:.1e}, checkpoint and manifest bytes equal",
                                     resume_err);
    if (!failures.empty()) detail = failures.front();
    return {failures.empty(), detail};
}

Outcome criterion10() {
    const auto r = verify_decode();
    spdlog::info("\n{}", format_report(r));
    return {r.passed(), fmt::format("100000 decodes: ray residual {:.2e}, |q|-1 {:.2e}, {} out of range",
                                    r.checks[0].max_error, r.checks[1].max_error, r.checks[2].max_error)};
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    std::vector<int> only, known;
    std::string cache, work = (fs::temp_directory_path() / "bt_acceptance").string();
    app.add_option("--only", only, "criteria to run")->delimiter(',');
    app.add_option("--cache", cache, "checkpoint cache directory");
    app.add_option("--work", work, "scratch directory");
    app.add_option("--known-failure", known, "criteria whose FAIL does not change the exit status")->delimiter(',');
    CLI11_PARSE(app, argc, argv);
    Options opt{{only.begin(), only.end()}, cache, work};
    fs::create_directories(opt.work);

    const char* names[] = {"",
                           "gradient suite",
                           "rasterizer oracle",
                           "cache and mask suite",
                           "overfit reconstruction",
                           "interpolation supervision ablation",
                           "novel-time enhancer ablation",
                           "context aggregation",
                           "static backward compatibility",
                           "determinism and persistence",
                           "geometric invariants"};

    std::optional<ToyData> data;
    std::optional<ModelStore> store;
    std::optional<Pipeline> pipe;
    auto pipeline = [&]() -> Pipeline& {
        if (!pipe) {
            data.emplace(make_data());
            store.emplace(opt.cache);
            pipe.emplace(Pipeline{*data, *store});
        }
        return *pipe;
    };

    std::map<int, Outcome> results;
    const double t0 = now_seconds();
    for (int c = 1; c <= 10; ++c) {
        if (!opt.wants(c)) continue;
        const double start = now_seconds();
        Outcome o;
        try {
            switch (c) {
            case 1: o = criterion1(); break;
            case 2: o = criterion2(); break;
            case 3: o = criterion3(); break;
            case 4: o = criterion4(pipeline()); break;
            case 5: o = criterion5(pipeline()); break;
            case 6: o = criterion6(pipeline()); break;
            case 7: o = criterion7(pipeline()); break;
            case 8: o = criterion8(pipeline()); break;
            case 9: o = criterion9(opt.work); break;
            default: o = criterion10(); break;
            }
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        spdlog::info("criterion {} finished in {:.0f} s", c, now_seconds() - start);
        results[c] = o;
    }

    bool all = true;
    const std::set<int> excused(known.begin(), known.end());
    fmt::print("\n");
    for (const auto& [c, o] : results) {
        // A known failure must still run to completion.
        const bool tolerated = excused.count(c) && o.detail.rfind("error:", 0) != 0;
        fmt::print("criterion {:2d} [{}]: {} - {}{}\n", c, names[c], o.passed ? "PASS" : "FAIL", o.detail,
                   !o.passed && tolerated ? " (known failure)" : "");
        all = all && (o.passed || tolerated);
    }
    fmt::print("total {:.0f} s\n", now_seconds() - t0);
    return all ? 0 : 1;
}
