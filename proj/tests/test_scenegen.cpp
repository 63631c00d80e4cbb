// SPDX-License-Identifier: Apache-2.0
#include "bt/config_json.hpp"
#include "bt/error.hpp"
#include "bt/io.hpp"
#include "bt/rasterizer.hpp"
#include "bt/scenegen.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

using namespace bt;
namespace fs = std::filesystem;

namespace {

SceneGenConfig small_config() {
    SceneGenConfig cfg;
    cfg.width = 32;
    cfg.height = 32;
    cfg.frames = 6;
    return cfg;
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("bt_scenegen_" + name);
    fs::remove_all(p);
    return p;
}

} // namespace

TEST(SceneGen, SameSeedGivesIdenticalClips) {
    auto cfg = small_config();
    cfg.second_camera = true;
    for (auto kind : {ClipKind::static_scene, ClipKind::dynamic_scene}) {
        auto a = render_clip(make_spec(kind, 7, cfg), "a");
        auto b = render_clip(make_spec(kind, 7, cfg), "a");
        ASSERT_EQ(a.views.size(), 2u);
        for (std::size_t v = 0; v < a.views.size(); ++v)
            for (std::size_t i = 0; i < a.views[v].size(); ++i) {
                EXPECT_EQ(a.views[v][i].image, b.views[v][i].image);
                EXPECT_EQ(a.views[v][i].pose, b.views[v][i].pose);
            }
    }
    auto c = generate_dynamic(8, cfg);
    auto d = generate_dynamic(7, cfg);
    EXPECT_NE(c.views[0][0].image, d.views[0][0].image);
}

TEST(SceneGen, GaussianCountAndMovingClustersFollowConfig) {
    auto cfg = small_config();
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const auto s = make_spec(ClipKind::dynamic_scene, seed, cfg);
        const auto n = s.gaussians_at(0.0).size();
        EXPECT_GE(n, 20u);
        EXPECT_LE(n, 100u);
        int moving = 0;
        for (const auto& p : s.primitives) moving += p.motion.type != Trajectory::Type::fixed;
        EXPECT_GE(moving, 1);
        EXPECT_LE(moving, 5);
        const auto st = make_spec(ClipKind::static_scene, seed, cfg);
        for (const auto& p : st.primitives) EXPECT_EQ(p.motion.type, Trajectory::Type::fixed);
    }
}

TEST(SceneGen, EveryPositionStaysInsideTheCube) {
    auto cfg = small_config();
    cfg.min_amplitude = 3.0;
    cfg.max_amplitude = 6.0;
    cfg.max_frequency = 3.0;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        const auto s = make_spec(ClipKind::dynamic_scene, seed, cfg);
        for (int k = 0; k <= 200; ++k)
            for (const auto& g : s.gaussians_at(k / 200.0)) ASSERT_TRUE(cfg.cube.contains(g.mu)) << seed;
    }
}

TEST(SceneGen, FramesReRenderFromGroundTruth) {
    auto cfg = small_config();
    cfg.second_camera = true;
    auto clip = generate_dynamic(3, cfg);
    EXPECT_EQ(self_consistency_error(clip), 0.0);
    // Independent re-render through the reference renderer.
    const auto& spec = *clip.spec;
    for (std::size_t i = 0; i < clip.views[0].size(); i += 2) {
        const double t = clip.views[0][i].time;
        const auto cam = spec.camera_at(t, 1);
        const auto settings = RenderSettings::for_camera(cam.intr, DecodeBounds::from_cube(cfg.cube));
        const auto ref = rasterize_reference(clip.gt_scene_at(t).gaussians, cam, settings).image.quantized();
        double diff = 0;
        for (std::size_t k = 0; k < ref.data.size(); ++k)
            diff = std::max(diff, std::abs(ref.data[k] - clip.views[1][i].image.data[k]));
        EXPECT_LE(diff, 1.0 / 255.0 + 1e-12);
    }
}

TEST(SceneGen, ZeroMotionMatchesStaticClip) {
    auto cfg = small_config();
    cfg.motion_scale = 0.0;
    auto dyn = generate_dynamic(11, cfg);
    auto st = generate_static(11, cfg);
    for (std::size_t i = 0; i < dyn.views[0].size(); ++i) EXPECT_EQ(dyn.views[0][i].image, st.views[0][i].image);
}

TEST(SceneGen, GroundTruthFollowsClosedFormTrajectories) {
    const auto s = make_spec(ClipKind::dynamic_scene, 5, small_config());
    const auto g = s.gaussians_at(0.5);
    std::size_t k = 0;
    for (const auto& p : s.primitives)
        for (const auto& m : p.cluster) {
            Vec3 expected = p.center + m.mu;
            if (p.motion.type == Trajectory::Type::sinusoidal)
                expected += p.motion.vector * std::sin(std::numbers::pi * p.motion.frequency + p.motion.phase);
            EXPECT_LT((g[k++].mu - expected).norm(), 1e-12);
        }
}

TEST(SceneGen, FastMotionStepIsMeasured) {
    auto cfg = small_config();
    cfg.frames = 9;
    cfg.motion = MotionMix::sinusoidal;
    cfg.min_amplitude = 3.0;
    cfg.max_amplitude = 3.5;
    cfg.min_frequency = 1.0;
    cfg.max_frequency = 1.25;
    for (std::uint64_t seed = 0; seed < 10; ++seed)
        EXPECT_GE(make_spec(ClipKind::dynamic_scene, seed, cfg).max_frame_step(), 2.0);
}

TEST(SceneGen, TimestampsIncreaseStrictly) {
    auto clip = generate_static(2, small_config());
    const auto t = clip.times();
    for (std::size_t i = 1; i < t.size(); ++i) EXPECT_GT(t[i], t[i - 1]);
    EXPECT_EQ(t.front(), 0.0);
    EXPECT_EQ(t.back(), 1.0);
}

TEST(SceneGen, InvalidConfigIsRejected) {
    auto cfg = small_config();
    cfg.frames = 1;
    EXPECT_THROW(make_spec(ClipKind::static_scene, 0, cfg), ConfigError);
    cfg = small_config();
    cfg.min_gaussians = 10; // not above the 16 ground tiles
    EXPECT_THROW(make_spec(ClipKind::static_scene, 0, cfg), ConfigError);
}

TEST(Manifest, DatasetRoundTripIsExact) {
    auto cfg = small_config();
    cfg.second_camera = true;
    std::vector<ClipRecord> clips{generate_dynamic(clip_seed(1, 0), cfg, "clip_000"),
                                  generate_static(clip_seed(1, 1), cfg, "clip_001")};
    const auto dir = scratch("roundtrip");
    const auto written = write_dataset(dir, clips, cfg.cube);
    EXPECT_EQ(read_manifest(dir / "manifest.json"), written);
    const auto d = load_dataset(dir);
    ASSERT_EQ(d.clips.size(), 2u);
    for (std::size_t c = 0; c < 2; ++c) {
        ASSERT_EQ(d.clips[c].views.size(), 2u);
        for (std::size_t v = 0; v < 2; ++v)
            for (std::size_t i = 0; i < clips[c].views[v].size(); ++i) {
                const auto& a = clips[c].views[v][i];
                const auto& b = d.clips[c].views[v][i];
                EXPECT_EQ(a.image, b.image);
                EXPECT_EQ(a.pose, b.pose);
                EXPECT_EQ(a.intr, b.intr);
                EXPECT_EQ(a.time, b.time);
            }
        EXPECT_EQ(self_consistency_error(d.clips[c]), 0.0);
    }
    fs::remove_all(dir);
}

TEST(Manifest, RandomPosesSurviveBitExactly) {
    DatasetManifest m;
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    const auto dir = scratch("poses");
    fs::create_directories(dir);
    write_text_file(dir / "x.png", "");
    ManifestClip c;
    c.id = "c";
    for (int i = 0; i < 20; ++i) {
        ManifestFrame f;
        f.image = "x.png";
        const Vec3 eye(u(rng) * 10, u(rng) * 10, u(rng) * 10 + 20);
        f.pose = Pose::look_at(eye, Vec3(u(rng), u(rng), u(rng)), Vec3(0, 0, 1));
        f.intr = Intrinsics::centered(17, 9, 0.7 + u(rng) * 0.1);
        f.time = i / 19.0 + 1e-17 * i;
        c.frames.push_back(f);
    }
    m.clips.push_back(c);
    write_manifest(m, dir / "m.json");
    EXPECT_EQ(read_manifest(dir / "m.json"), m);
    fs::remove_all(dir);
}

TEST(Manifest, ErrorsAreDistinct) {
    const auto dir = scratch("errors");
    fs::create_directories(dir);
    EXPECT_THROW(read_manifest(dir / "absent.json"), MissingFileError);

    write_text_file(dir / "v.json", R"({"version": 7, "cube": [-5,-5,-5,5,5,5], "clips": []})");
    EXPECT_THROW(read_manifest(dir / "v.json"), VersionError);

    write_text_file(dir / "bad.json", R"({"version": 1, "cube": [-5,-5,-5,5,5,5], "clips": [{"id": "a"}]})");
    EXPECT_THROW(read_manifest(dir / "bad.json"), FormatError);
    write_text_file(dir / "junk.json", "{not json");
    EXPECT_THROW(read_manifest(dir / "junk.json"), FormatError);

    const std::string frame = R"({"image": "img/%s.png", "pose_3x4": [1,0,0,0, 0,1,0,0, 0,0,1,0],
                                  "intrinsics": [8,8,4,4,8,8], "time": %s})";
    auto frame_at = [&](const std::string& name, const std::string& t) {
        std::string s = frame;
        s.replace(s.find("%s"), 2, name);
        s.replace(s.find("%s"), 2, t);
        return s;
    };
    fs::create_directories(dir / "img");
    write_text_file(dir / "img/a.png", "");
    write_text_file(dir / "order.json", R"({"version": 1, "cube": [-5,-5,-5,5,5,5], "clips": [{"id": "a", "frames": [)" +
                                            frame_at("a", "0.5") + "," + frame_at("a", "0.5") + "]}]}");
    EXPECT_THROW(read_manifest(dir / "order.json"), FormatError);

    write_text_file(dir / "ref.json", R"({"version": 1, "cube": [-5,-5,-5,5,5,5], "clips": [{"id": "a", "frames": [)" +
                                          frame_at("a", "0.0") + "," + frame_at("gone", "0.5") + "]}]}");
    try {
        read_manifest(dir / "ref.json");
        FAIL() << "expected ReferenceError";
    } catch (const ReferenceError& e) {
        EXPECT_NE(e.path().find("gone.png"), std::string::npos);
    }
    fs::remove_all(dir);
}

TEST(ConfigJson, SceneConfigRoundTripAndUnknownKeys) {
    SceneGenConfig cfg = small_config();
    cfg.motion = MotionMix::sinusoidal;
    cfg.background = Vec3(0.1, 0.2, 0.3);
    cfg.second_camera = true;
    Json j = cfg;
    EXPECT_EQ(j.get<SceneGenConfig>(), cfg);
    j["bogus"] = 1;
    EXPECT_THROW(j.get<SceneGenConfig>(), ConfigError);
}
