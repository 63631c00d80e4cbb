// SPDX-License-Identifier: Apache-2.0
//
// bt: data generation, training, rendering, evaluation, self-checks and
// benchmarks from the command line.
#include "bt/config_json.hpp"
#include "bt/error.hpp"
#include "bt/evaluate.hpp"
#include "bt/io.hpp"
#include "bt/rasterizer.hpp"
#include "bt/trainer.hpp"
#include "bt/verify.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

namespace fs = std::filesystem;
using bt::Json;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kNumerical = 2, kIo = 3 };

// JSON config files: top-level keys are global options, objects named after
// a subcommand hold that subcommand's options.
class JsonConfig : public CLI::Config {
public:
    std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}"; }

    std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
        Json j;
        try {
            input >> j;
        } catch (const Json::exception& e) {
            throw CLI::ConversionError(std::string("config file: ") + e.what());
        }
        std::vector<CLI::ConfigItem> items;
        flatten(j, {}, items);
        return items;
    }

private:
    static void flatten(const Json& j, const std::vector<std::string>& parents, std::vector<CLI::ConfigItem>& out) {
        if (!j.is_object()) throw CLI::ConversionError("config file must hold a JSON object");
        for (const auto& [key, value] : j.items()) {
            if (value.is_object()) {
                auto p = parents;
                p.push_back(key);
                out.push_back({p, "++", {}});
                flatten(value, p, out);
                out.push_back({p, "--", {}});
                continue;
            }
            CLI::ConfigItem item{parents, key, {}};
            if (value.is_array())
                for (const auto& v : value) item.inputs.push_back(v.is_string() ? v.get<std::string>() : v.dump());
            else if (value.is_boolean())
                item.inputs.push_back(value.get<bool>() ? "true" : "false");
            else
                item.inputs.push_back(value.is_string() ? value.get<std::string>() : value.dump());
            out.push_back(std::move(item));
        }
    }
};

struct Global {
    std::uint64_t seed = 0;
    std::string out;
    bool verify_f64 = false;
};

Json option_values(const CLI::App& app) {
    Json j = Json::object();
    for (const CLI::Option* opt : app.get_options()) {
        const std::string name = opt->get_single_name();
        if (name.empty() || name == "help" || name == "config") continue;
        if (opt->count() > 0) {
            const auto& r = opt->results();
            if (opt->get_expected_max() > 1) j[name] = r;
            else j[name] = r.empty() ? "true" : r.back();
        } else {
            j[name] = opt->get_default_str();
        }
    }
    return j;
}

void write_resolved_config(const fs::path& dir, const CLI::App& root, const CLI::App& sub) {
    Json j;
    j["command"] = sub.get_name();
    j["global"] = option_values(root);
    j[sub.get_name()] = option_values(sub);
    fs::create_directories(dir);
    bt::write_text_file(dir / "config.json", j.dump(2) + "\n");
}

fs::path require_out(const Global& g) {
    if (g.out.empty()) throw bt::ConfigError("--out is required");
    fs::create_directories(g.out);
    return g.out;
}

template <class T>
T read_json_file(const std::string& path) {
    const auto j = Json::parse(bt::read_text_file(path), nullptr, false);
    if (j.is_discarded()) throw bt::ConfigError(path + " is not valid JSON");
    return j.get<T>();
}

// --- gen-data ----------------------------------------------------------------

struct GenArgs {
    std::string kind = "dynamic";
    int clips = 1;
    int frames = 16;
    int res = 64;
    int views = 2;
    std::string motion = "any";
    std::string scene_config;
};

int cmd_gen_data(const Global& g, const GenArgs& a) {
    bt::SceneGenConfig cfg;
    if (!a.scene_config.empty()) cfg = read_json_file<bt::SceneGenConfig>(a.scene_config);
    cfg.frames = a.frames;
    cfg.width = cfg.height = a.res;
    cfg.second_camera = a.views == 2;
    if (a.views != 1 && a.views != 2) throw bt::ConfigError("--views must be 1 or 2");
    cfg.motion = bt::motion_mix_from_string(a.motion);
    cfg.validate();
    const auto kind = bt::clip_kind_from_string(a.kind);
    if (a.clips < 1) throw bt::ConfigError("--clips must be positive");
    const auto out = require_out(g);
    std::vector<bt::ClipRecord> clips;
    for (int i = 0; i < a.clips; ++i) {
        const auto seed = bt::clip_seed(g.seed, static_cast<std::size_t>(i));
        const std::string id = fmt::format("{}{:03d}", a.kind, i);
        clips.push_back(kind == bt::ClipKind::static_scene ? bt::generate_static(seed, cfg, id)
                                                           : bt::generate_dynamic(seed, cfg, id));
        const double err = bt::self_consistency_error(clips.back());
        spdlog::info("clip {}: {} gaussians, self-consistency error {:.2e}", id, clips.back().spec->primitives.size(),
                     err);
        if (err > 1.0 / 255.0) throw bt::NumericalError(fmt::format("clip {} failed self-consistency ({})", id, err));
    }
    const auto manifest = bt::write_dataset(out, clips, cfg.cube);
    bt::write_text_file(out / "scene_config.json", Json(cfg).dump(2) + "\n");
    spdlog::info("wrote {} clips to {}", manifest.clips.size(), out.string());
    return kOk;
}

// --- model loading ---------------------------------------------------------------

struct LoadedModels {
    bt::BTimerConfig bcfg;
    bt::BTimerWeights b;
    std::optional<bt::NteConfig> ncfg;
    bt::NteWeights n;

    bt::EvalModels view() const { return {&b, &bcfg, ncfg ? &n : nullptr, ncfg ? &*ncfg : nullptr}; }
};

LoadedModels load_models(const std::string& ckpt, const std::string& nte) {
    LoadedModels m;
    const auto c = bt::load_checkpoint(ckpt);
    if (c.kind != bt::ModelKind::btimer)
        throw bt::KindMismatchError(ckpt + " holds a " + bt::to_string(c.kind) + " model; --ckpt needs btimer");
    m.bcfg = bt::btimer_config_of(c);
    m.b = bt::load_btimer(c);
    if (!nte.empty()) {
        const auto cn = bt::load_checkpoint(nte);
        if (cn.kind != bt::ModelKind::nte)
            throw bt::KindMismatchError(nte + " holds a " + bt::to_string(cn.kind) + " model; --nte needs nte");
        m.ncfg = bt::nte_config_of(cn);
        m.n = bt::load_nte(cn);
    }
    return m;
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
    std::string model = "btimer";
    std::string data;
    std::string plan;
    std::string model_config;
    std::string resume;
    int log_every = 50;
    int checkpoint_every = 500;
};

bt::TrainingData training_data(const bt::Dataset& ds) {
    bt::TrainingData d;
    for (const auto& c : ds.clips) {
        if (c.spec && c.spec->kind == bt::ClipKind::static_scene) d.static_clips.push_back(c);
        else d.dynamic_clips.push_back(c);
    }
    return d;
}

int cmd_train(const Global& g, const TrainArgs& a) {
    const auto out = require_out(g);
    const auto ds = bt::load_dataset(a.data);
    const auto data = training_data(ds);
    const auto plan = a.plan.empty() ? bt::default_plan() : bt::read_plan(a.plan);
    bt::write_plan(out / "plan.json", plan);
    bt::TrainerConfig tc;
    tc.seed = g.seed;
    tc.out_dir = out;
    tc.log_every = a.log_every;
    tc.checkpoint_every = a.checkpoint_every;
    std::mt19937_64 init(g.seed);
    std::optional<bt::Checkpoint> resume;
    if (!a.resume.empty()) resume = bt::load_checkpoint(a.resume);

    auto run = [&](auto& weights, const auto& cfg) {
        bt::Trainer trainer(weights, cfg, tc);
        if (resume) trainer.resume(*resume);
        bt::save_checkpoint(out / "initial.btck", trainer.checkpoint());
        const auto reports = trainer.run_curriculum(plan, data);
        for (const auto& r : reports)
            if (!r.psnr.empty()) spdlog::info("{}: final psnr {:.2f}", bt::to_string(r.name), r.psnr.back());
    };
    if (a.model == "btimer") {
        bt::BTimerConfig cfg;
        if (!a.model_config.empty()) cfg = read_json_file<bt::BTimerConfig>(a.model_config);
        cfg.cube = ds.cube;
        cfg.validate();
        bt::BTimerWeights w(cfg, init);
        run(w, cfg);
    } else if (a.model == "nte") {
        bt::NteConfig cfg;
        if (!a.model_config.empty()) cfg = read_json_file<bt::NteConfig>(a.model_config);
        cfg.validate();
        bt::NteWeights w(cfg, init);
        run(w, cfg);
    } else {
        throw bt::ConfigError("--model must be btimer or nte");
    }
    return kOk;
}

// --- render ------------------------------------------------------------------

struct RenderArgs {
    std::string ckpt;
    std::string nte;
    std::string data;
    std::string clip;
    double t = 0.0;
    std::string pose_mode = "context";
    int frames = 8;
    int context = 4;
};

// Poses along the context stream's camera path, evenly spaced in frame index.
std::vector<bt::Camera> orbit_cameras(const std::vector<bt::Frame>& video, int count) {
    std::vector<bt::Camera> cams;
    const double last = static_cast<double>(video.size() - 1);
    for (int k = 0; k < count; ++k) {
        const double s = count > 1 ? last * k / (count - 1) : 0.0;
        const auto i = std::min(static_cast<std::size_t>(s), video.size() - 1);
        const auto j = std::min(i + 1, video.size() - 1);
        cams.push_back({bt::interpolate_pose(video[i].pose, video[j].pose, s - static_cast<double>(i)), video[i].intr});
    }
    return cams;
}

int cmd_render(const Global& g, const RenderArgs& a) {
    const auto out = require_out(g);
    const auto models = load_models(a.ckpt, a.nte);
    const auto ds = bt::load_dataset(a.data);
    const auto it = std::find_if(ds.clips.begin(), ds.clips.end(), [&](const auto& c) { return c.id == a.clip; });
    if (it == ds.clips.end()) throw bt::ConfigError("no clip '" + a.clip + "' in " + a.data);
    const auto& clip = *it;
    const auto& video = clip.views.at(0);
    const auto times = clip.times();
    const int observed = bt::observed_index(times, a.t);

    bt::GaussianScene scene;
    if (observed >= 0) {
        scene = bt::reconstruct_at(video, a.t, a.context, models.b, models.bcfg);
    } else {
        if (!models.ncfg)
            throw bt::ContractError(fmt::format(
                "t = {} is not an observed timestamp of clip {}; pass --nte <checkpoint> to synthesize a frame there",
                a.t, clip.id));
        scene = bt::reconstruct_novel_time(video, a.t, a.context, models.n, *models.ncfg, models.b, models.bcfg);
        for (std::size_t k = 0; k < scene.source_frames.size(); ++k)
            if (scene.source_frames[k] < 0) spdlog::info("inserted synthesized frame at t = {} (context slot {})", a.t, k);
    }
    bt::write_btgs(out / "scene.btgs", scene);

    std::vector<bt::Camera> cams;
    std::vector<const bt::Image*> stored;
    if (a.pose_mode == "context") {
        for (std::size_t v = 0; v < clip.views.size(); ++v) {
            if (observed >= 0) {
                const auto& f = clip.views[v][static_cast<std::size_t>(observed)];
                cams.push_back(f.camera());
                stored.push_back(&f.image);
            } else {
                const auto& vv = clip.views[v];
                const auto hi = static_cast<std::size_t>(std::upper_bound(times.begin(), times.end(), a.t) - times.begin());
                if (hi == 0 || hi >= vv.size()) throw bt::ContractError("t lies outside the clip's time span");
                const double alpha = (a.t - times[hi - 1]) / (times[hi] - times[hi - 1]);
                cams.push_back({bt::interpolate_pose(vv[hi - 1].pose, vv[hi].pose, alpha), vv[hi].intr});
                stored.push_back(nullptr);
            }
        }
    } else if (a.pose_mode == "orbit") {
        if (a.frames < 1) throw bt::ConfigError("--frames must be positive");
        cams = orbit_cameras(video, a.frames);
        stored.assign(cams.size(), nullptr);
    } else {
        throw bt::ConfigError("--pose-mode must be context or orbit");
    }

    const bt::Vec3 bg = clip.spec ? clip.spec->config.background : bt::Vec3::Zero();
    Json summary;
    summary["t"] = a.t;
    summary["observed"] = observed >= 0;
    summary["gaussians"] = scene.size();
    summary["frames"] = Json::array();
    for (std::size_t k = 0; k < cams.size(); ++k) {
        auto st = bt::RenderSettings::for_camera(cams[k].intr, models.bcfg.bounds(), bg);
        const auto r = bt::rasterize(scene.gaussians, cams[k], st);
        const std::string stem = fmt::format("{}_{:03d}", a.pose_mode == "context" ? "view" : "orbit", k);
        bt::write_png(out / (stem + ".png"), r.image);
        bt::write_gray_png(out / (stem + "_depth.png"), r.image.width, r.image.height, bt::inverse_depth_visual(r));
        Json row{{"file", stem + ".png"}};
        if (stored[k]) {
            row["psnr"] = bt::psnr(r.image, *stored[k]);
            spdlog::info("{}: psnr {:.2f} dB against the stored frame", stem, row["psnr"].get<double>());
        }
        summary["frames"].push_back(row);
    }
    bt::write_text_file(out / "render.json", summary.dump(2) + "\n");
    spdlog::info("rendered {} frames from {} gaussians", cams.size(), scene.size());
    return kOk;
}

// --- eval ----------------------------------------------------------------------

struct EvalArgs {
    std::string ckpt;
    std::string nte;
    std::string data;
    std::vector<std::string> protocols;
    int context = 4;
    int midpoints = 8;
    bool ground_truth = false;
};

int cmd_eval(const Global& g, const EvalArgs& a) {
    if (a.protocols.empty() && !a.ground_truth)
        throw bt::ContractError("no evaluation protocol given; pass --protocol incontext|noveltime|novelview");
    const auto out = require_out(g);
    const auto ds = bt::load_dataset(a.data);
    Json summary = Json::object();
    auto emit = [&](const std::string& name, const std::vector<bt::MetricRow>& rows) {
        bt::write_metrics_csv(out / ("metrics_" + name + ".csv"), rows);
        const auto s = bt::summarize(rows);
        summary[name] = {{"rows", s.rows}, {"mean_psnr", s.mean_psnr}, {"mean_ssim", s.mean_ssim}};
        spdlog::info("{}: {} rows, psnr {:.3f}, ssim {:.4f}", name, s.rows, s.mean_psnr, s.mean_ssim);
    };
    if (a.ground_truth) {
        std::vector<bt::MetricRow> rows;
        for (const auto& c : ds.clips) {
            const auto r = bt::eval_ground_truth(c);
            rows.insert(rows.end(), r.begin(), r.end());
        }
        emit("groundtruth", rows);
    }
    if (!a.protocols.empty()) {
        const auto models = load_models(a.ckpt, a.nte);
        for (const auto& name : a.protocols) {
            const auto p = bt::protocol_from_string(name);
            std::vector<bt::MetricRow> rows;
            for (const auto& c : ds.clips) {
                std::vector<bt::MetricRow> r;
                switch (p) {
                case bt::Protocol::in_context: r = bt::eval_in_context(c, models.view(), a.context); break;
                case bt::Protocol::novel_view: r = bt::eval_novel_view(c, models.view(), a.context); break;
                case bt::Protocol::novel_time:
                    r = bt::eval_novel_time(c, models.view(), a.context, a.midpoints);
                    break;
                }
                rows.insert(rows.end(), r.begin(), r.end());
            }
            emit(name, rows);
        }
    }
    bt::write_text_file(out / "summary.json", summary.dump(2) + "\n");
    return kOk;
}

// --- verify --------------------------------------------------------------------

struct VerifyArgs {
    std::string suite = "all";
    std::string inject_fault;
    int raster_scenes = 100;
    int cache_configs = 20;
    long decodes = 100000;
};

int cmd_verify(const Global& g, const VerifyArgs& a) {
    if (a.inject_fault == "sigmoid_backward_sign") bt::ad::faults::inject_fault(bt::ad::faults::Fault::sigmoid_backward_sign);
    else if (!a.inject_fault.empty()) throw bt::ConfigError("unknown fault '" + a.inject_fault + "'");
    bt::VerifyOptions opt;
    opt.seed = g.seed;
    opt.raster_scenes = a.raster_scenes;
    opt.cache_configs = a.cache_configs;
    opt.decodes = a.decodes;
    const auto reports = bt::run_suites(a.suite, opt);
    bt::ad::faults::inject_fault(bt::ad::faults::Fault::none);
    std::string text;
    bool ok = true;
    for (const auto& r : reports) {
        text += bt::format_report(r);
        ok = ok && r.passed();
    }
    std::cout << text << (ok ? "all checks passed\n" : "verification FAILED\n");
    if (!g.out.empty()) bt::write_text_file(require_out(g) / "verify_report.txt", text);
    return ok ? kOk : kNumerical;
}

// --- bench ---------------------------------------------------------------------

struct BenchArgs {
    std::vector<int> gaussians{1000};
    int res = 64;
    int iters = 20;
    int repeats = 3;
    std::string ckpt;
};

struct Timing {
    double mean_ms = 0.0;
    double cv = 0.0;
};

template <class F>
Timing time_it(F&& f, int iters, int repeats) {
    std::vector<double> per;
    f(); // warm-up
    for (int r = 0; r < repeats; ++r) {
        const auto start = std::chrono::steady_clock::now();
        for (int i = 0; i < iters; ++i) f();
        per.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count() / iters);
    }
    const double mean = std::accumulate(per.begin(), per.end(), 0.0) / per.size();
    double var = 0.0;
    for (double x : per) var += (x - mean) * (x - mean);
    var /= per.size();
    return {mean, mean > 0 ? std::sqrt(var) / mean : 0.0};
}

int cmd_bench(const Global& g, const BenchArgs& a) {
    if (a.res < 8 || a.iters < 1 || a.repeats < 1) throw bt::ConfigError("bench needs --res >= 8, --iters >= 1, --repeats >= 1");
    const auto out = require_out(g);
    std::string csv = "stage,gaussians,res,ms_per_frame,gaussians_per_s,cv\n";
    std::mt19937_64 rng(g.seed);
    const bt::Camera cam{bt::Pose::look_at(bt::Vec3(9, 0, 4), bt::Vec3::Zero(), bt::Vec3(0, 0, 1)),
                         bt::Intrinsics::centered(a.res, a.res, 1.0)};
    const auto st = bt::RenderSettings::for_camera(cam.intr, bt::DecodeBounds::from_cube(bt::Cube{}));
    for (int n : a.gaussians) {
        if (n < 0) throw bt::ConfigError("--gaussians must be non-negative");
        std::uniform_real_distribution<double> u(0, 1);
        std::vector<bt::Gaussian> scene(static_cast<std::size_t>(n));
        for (auto& gs : scene) {
            gs.mu = bt::Vec3(u(rng) * 6 - 3, u(rng) * 6 - 3, u(rng) * 6 - 3);
            gs.color = bt::Vec3(u(rng), u(rng), u(rng));
            gs.opacity = 0.1 + 0.8 * u(rng);
            gs.scale = bt::Vec3::Constant(0.05 + 0.2 * u(rng));
        }
        const auto t = time_it([&] { (void)bt::rasterize(scene, cam, st); }, a.iters, a.repeats);
        const double gps = t.mean_ms > 0 ? n / (t.mean_ms / 1000.0) : 0.0;
        csv += fmt::format("rasterize,{},{},{:.6g},{:.6g},{:.4f}\n", n, a.res, t.mean_ms, gps, t.cv);
        spdlog::info("rasterize {} gaussians at {}px: {:.3f} ms/frame ({:.3g} gaussians/s, cv {:.2f})", n, a.res,
                     t.mean_ms, gps, t.cv);
    }

    // Reconstruction from 4 context frames at the bench resolution.
    bt::BTimerConfig cfg;
    bt::BTimerWeights w;
    if (!a.ckpt.empty()) {
        const auto m = load_models(a.ckpt, "");
        cfg = m.bcfg;
        w = m.b;
    } else {
        cfg.backbone = {.dim = 128, .blocks = 4, .heads = 4, .patch = 8, .qk_norm = true, .mlp_ratio = 4};
        w = bt::BTimerWeights(cfg, rng);
    }
    bt::SceneGenConfig sg;
    sg.width = sg.height = a.res;
    sg.frames = 4;
    const auto clip = bt::generate_dynamic(g.seed, sg, "bench");
    bt::ContextSet ctx{clip.views[0], clip.views[0][1].time};
    const auto t = time_it([&] { (void)bt::reconstruct(ctx, w, cfg); }, std::max(1, a.iters / 10), a.repeats);
    const long n = 4L * a.res * a.res;
    csv += fmt::format("reconstruct,{},{},{:.6g},{:.6g},{:.4f}\n", n, a.res, t.mean_ms, n / (t.mean_ms / 1000.0), t.cv);
    spdlog::info("reconstruct 4 views at {}px: {:.3f} ms (cv {:.2f})", a.res, t.mean_ms, t.cv);
    bt::write_text_file(out / "bench.csv", csv);
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Feed-forward dynamic Gaussian reconstruction toolkit", "bt"};
    app.config_formatter(std::make_shared<JsonConfig>());
    app.set_config("--config", "", "JSON file with option values (command options under the command's name)");
    app.allow_config_extras(false);
    app.require_subcommand(1);
    app.fallthrough();
    app.option_defaults()->always_capture_default();

    Global g;
    app.add_option("--seed", g.seed, "random seed");
    app.add_option("--out", g.out, "output directory");
    app.add_flag("--verify-f64", g.verify_f64, "run everything in 64-bit verification mode");

    GenArgs gen;
    auto* s_gen = app.add_subcommand("gen-data", "generate a toy dataset");
    s_gen->add_option("--kind", gen.kind)->check(CLI::IsMember({"static", "dynamic"}));
    s_gen->add_option("--clips", gen.clips);
    s_gen->add_option("--frames", gen.frames);
    s_gen->add_option("--res", gen.res);
    s_gen->add_option("--views", gen.views);
    s_gen->add_option("--motion", gen.motion)->check(CLI::IsMember({"any", "linear", "sinusoidal"}));
    s_gen->add_option("--scene-config", gen.scene_config, "JSON scene generator config");

    TrainArgs tr;
    auto* s_train = app.add_subcommand("train", "run the training curriculum");
    s_train->add_option("--model", tr.model)->check(CLI::IsMember({"btimer", "nte"}));
    s_train->add_option("--data", tr.data)->required();
    s_train->add_option("--plan", tr.plan, "JSON curriculum plan");
    s_train->add_option("--model-config", tr.model_config, "JSON architecture config");
    s_train->add_option("--resume", tr.resume, "checkpoint to resume from");
    s_train->add_option("--log-every", tr.log_every);
    s_train->add_option("--checkpoint-every", tr.checkpoint_every);

    RenderArgs rd;
    auto* s_render = app.add_subcommand("render", "reconstruct a bullet-time scene and render it");
    s_render->add_option("--ckpt", rd.ckpt)->required();
    s_render->add_option("--nte", rd.nte);
    s_render->add_option("--data", rd.data)->required();
    s_render->add_option("--clip", rd.clip)->required();
    s_render->add_option("--t", rd.t)->required();
    s_render->add_option("--pose-mode", rd.pose_mode)->check(CLI::IsMember({"context", "orbit"}));
    s_render->add_option("--frames", rd.frames, "orbit frame count");
    s_render->add_option("--context", rd.context, "context frame count");

    EvalArgs ev;
    auto* s_eval = app.add_subcommand("eval", "score reconstructions against stored frames");
    s_eval->add_option("--ckpt", ev.ckpt);
    s_eval->add_option("--nte", ev.nte);
    s_eval->add_option("--data", ev.data)->required();
    s_eval->add_option("--protocol", ev.protocols)->check(CLI::IsMember({"incontext", "noveltime", "novelview"}));
    s_eval->add_option("--context", ev.context);
    s_eval->add_option("--midpoints", ev.midpoints);
    s_eval->add_flag("--ground-truth", ev.ground_truth, "score ground-truth renders against the stored frames");

    VerifyArgs vf;
    auto* s_verify = app.add_subcommand("verify", "run the self-check suites");
    s_verify->add_option("--suite", vf.suite)->check(CLI::IsMember({"gradcheck", "oracle", "cache", "all"}));
    s_verify->add_option("--raster-scenes", vf.raster_scenes);
    s_verify->add_option("--cache-configs", vf.cache_configs);
    s_verify->add_option("--decodes", vf.decodes);
    s_verify->add_option("--inject-fault", vf.inject_fault)->group("");

    BenchArgs bn;
    auto* s_bench = app.add_subcommand("bench", "time rasterization and reconstruction");
    s_bench->add_option("--gaussians", bn.gaussians);
    s_bench->add_option("--res", bn.res);
    s_bench->add_option("--iters", bn.iters);
    s_bench->add_option("--repeats", bn.repeats);
    s_bench->add_option("--ckpt", bn.ckpt);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (g.verify_f64) bt::ad::set_default_precision(bt::ad::Precision::f64);
        const CLI::App* sub = app.get_subcommands().front();
        if (!g.out.empty()) write_resolved_config(g.out, app, *sub);
        if (sub == s_gen) return cmd_gen_data(g, gen);
        if (sub == s_train) return cmd_train(g, tr);
        if (sub == s_render) return cmd_render(g, rd);
        if (sub == s_eval) return cmd_eval(g, ev);
        if (sub == s_verify) return cmd_verify(g, vf);
        return cmd_bench(g, bn);
    } catch (const bt::NumericalError& e) {
        spdlog::error("{}", e.what());
        return kNumerical;
    } catch (const bt::IoError& e) {
        spdlog::error("{}", e.what());
        return kIo;
    } catch (const fs::filesystem_error& e) {
        spdlog::error("{}", e.what());
        return kIo;
    } catch (const bt::Error& e) {
        spdlog::error("{}", e.what());
        return kUsage;
    } catch (const Json::exception& e) {
        spdlog::error("config: {}", e.what());
        return kUsage;
    }
}
