// SPDX-License-Identifier: Apache-2.0
#include "bt/parallel.hpp"
#include "bt/rasterizer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

using namespace bt;

namespace {

Camera test_camera(int size = 64) {
    return {Pose::look_at(Vec3(0, -2, -9), Vec3(0, 0, 0), Vec3(0, 1, 0)), Intrinsics::centered(size, size, 0.9)};
}

RenderSettings settings_for(const Camera& cam) {
    RenderSettings s = RenderSettings::for_camera(cam.intr, DecodeBounds::from_cube(Cube{}));
    s.background = Vec3(0.2, 0.3, 0.4);
    return s;
}

std::vector<Gaussian> random_scene(std::mt19937_64& rng, int n) {
    std::uniform_real_distribution<double> u(0, 1);
    std::normal_distribution<double> nd(0, 1);
    std::vector<Gaussian> scene(n);
    for (auto& g : scene) {
        g.mu = Vec3(u(rng) * 6 - 3, u(rng) * 6 - 3, u(rng) * 6 - 3);
        g.color = Vec3(u(rng), u(rng), u(rng));
        g.opacity = 0.05 + 0.9 * u(rng);
        g.scale = Vec3(0.05 + 0.5 * u(rng), 0.05 + 0.5 * u(rng), 0.05 + 0.5 * u(rng));
        g.rotation = Vec4(nd(rng), nd(rng), nd(rng), nd(rng)).normalized();
    }
    return scene;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace

TEST(Project, IsotropicOnAxisMatchesSimilarTriangles) {
    Camera cam{Pose{}, Intrinsics::centered(64, 64, 1.0)};
    RenderSettings st = settings_for(cam);
    for (double z : {4.0, 8.0, 15.0}) {
        Gaussian g;
        g.mu = Vec3(0, 0, z);
        g.scale = Vec3::Constant(0.3);
        const auto s = project(g, cam, st);
        ASSERT_TRUE(s.has_value());
        const double expect = std::pow(cam.intr.fx * 0.3 / z, 2) + kCovarianceFloor;
        EXPECT_NEAR(s->cov(0, 0), expect, 0.05 * expect);
        EXPECT_NEAR(s->cov(1, 1), expect, 0.05 * expect);
        EXPECT_NEAR(s->cov(0, 1), 0.0, 1e-12);
        EXPECT_NEAR(s->depth, z, 1e-12);
    }
}

TEST(Project, BehindCameraAndBeyondFarAreCulled) {
    Camera cam{Pose{}, Intrinsics::centered(64, 64, 1.0)};
    RenderSettings st = settings_for(cam);
    Gaussian g;
    g.mu = Vec3(0, 0, -1);
    EXPECT_FALSE(project(g, cam, st).has_value());
    g.mu = Vec3(0, 0, 0.05);
    EXPECT_FALSE(project(g, cam, st).has_value());
    g.mu = Vec3(0, 0, st.far + 1);
    EXPECT_FALSE(project(g, cam, st).has_value());
    g.mu = Vec3(100, 0, 5); // far outside the image
    EXPECT_FALSE(project(g, cam, st).has_value());
}

TEST(Project, QuaternionScaleDoesNotMatter) {
    const Camera cam = test_camera();
    RenderSettings st = settings_for(cam);
    Gaussian g;
    g.mu = Vec3(0.5, 0.2, 0.1);
    g.scale = Vec3(0.4, 0.1, 0.2);
    const auto a = project(g, cam, st);
    g.rotation = Vec4(2.5, 0, 0, 0);
    const auto b = project(g, cam, st);
    EXPECT_LT((a->cov - b->cov).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Rasterize, EmptySceneIsBackground) {
    const Camera cam = test_camera();
    const auto st = settings_for(cam);
    const auto out = rasterize({}, cam, st);
    for (std::size_t i = 0; i < out.image.pixels(); ++i) {
        for (int c = 0; c < 3; ++c) EXPECT_EQ(out.image.data[3 * i + c], st.background[c]);
        EXPECT_EQ(out.transmittance[i], 1.0);
        EXPECT_EQ(out.depth[i], 0.0);
    }
    EXPECT_EQ(rasterize_reference({}, cam, st).image, out.image);
}

TEST(Rasterize, OpaqueSingleGaussianShowsItsColor) {
    Camera cam{Pose{}, Intrinsics::centered(32, 32, 1.0)};
    auto st = settings_for(cam);
    st.background = Vec3::Zero();
    Gaussian g;
    // Centered on pixel (16, 16), whose center sits half a pixel off the principal point.
    g.mu = Vec3(0.5 / cam.intr.fx * 6, 0.5 / cam.intr.fy * 6, 6);
    g.opacity = 1.0 - 1e-9;
    g.color = Vec3(0.9, 0.2, 0.6);
    const std::vector<Gaussian> scene{g};
    const auto out = rasterize(scene, cam, st);
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(out.image.at(16, 16, c), g.color[c], 1e-3);
    EXPECT_NEAR(out.depth[16 * 32 + 16], 6.0, 1e-12);
}

TEST(Rasterize, TiledMatchesReferenceOnRandomScenes) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        const Camera cam = test_camera();
        const auto st = settings_for(cam);
        const auto scene = random_scene(rng, 50);
        const auto tiled = rasterize(scene, cam, st);
        const auto ref = rasterize_reference(scene, cam, st);
        EXPECT_LT(max_abs_diff(tiled.image.data, ref.image.data), 1e-4);
        for (std::size_t i = 0; i < tiled.alpha.size(); ++i)
            ASSERT_NEAR(tiled.alpha[i] + tiled.transmittance[i], 1.0, 1e-5);
    }
}

TEST(Rasterize, TileSizeDoesNotChangeResult) {
    std::mt19937_64 rng(12);
    const Camera cam = test_camera(48);
    auto st = settings_for(cam);
    const auto scene = random_scene(rng, 80);
    st.early_termination = false;
    const auto a = rasterize(scene, cam, st);
    st.tile = 7; // edge tiles clipped
    const auto b = rasterize(scene, cam, st);
    EXPECT_EQ(a.image, b.image);
}

TEST(Rasterize, ColorsStayWithinContributingRange) {
    std::mt19937_64 rng(13);
    const Camera cam = test_camera();
    const auto st = settings_for(cam);
    const auto scene = random_scene(rng, 100);
    Vec3 lo = st.background, hi = st.background;
    for (const auto& g : scene) lo = lo.cwiseMin(g.color), hi = hi.cwiseMax(g.color);
    const auto out = rasterize(scene, cam, st);
    for (std::size_t i = 0; i < out.image.pixels(); ++i)
        for (int c = 0; c < 3; ++c) {
            EXPECT_GE(out.image.data[3 * i + c], lo[c] - 1e-12);
            EXPECT_LE(out.image.data[3 * i + c], hi[c] + 1e-12);
        }
}

TEST(Rasterize, UnionOfFramesEqualsCombinedList) {
    std::mt19937_64 rng(14);
    const Camera cam = test_camera();
    const auto st = settings_for(cam);
    auto left = random_scene(rng, 30), right = random_scene(rng, 30);
    for (auto& g : left) g.mu.x() = -std::abs(g.mu.x());
    for (auto& g : right) g.mu.x() = std::abs(g.mu.x());
    const auto scene = assemble_scene({left, right}, 0.0);
    const auto tiled = rasterize(scene.gaussians, cam, st);
    const auto ref = rasterize_reference(scene.gaussians, cam, st);
    EXPECT_LT(max_abs_diff(tiled.image.data, ref.image.data), 1e-4);
}

TEST(Rasterize, DeterministicAcrossThreadCounts) {
    std::mt19937_64 rng(15);
    const Camera cam = test_camera();
    const auto st = settings_for(cam);
    const auto scene = random_scene(rng, 150);
    set_thread_count(1);
    const auto a = rasterize(scene, cam, st);
    Image grad(64, 64, 0.3);
    const auto ga = rasterize_backward(scene, cam, st, grad);
    set_thread_count(4);
    const auto b = rasterize(scene, cam, st);
    const auto gb = rasterize_backward(scene, cam, st, grad);
    set_thread_count(0);
    EXPECT_EQ(a.image, b.image);
    EXPECT_EQ(ga.mu, gb.mu);
    EXPECT_EQ(ga.rotation, gb.rotation);
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
    std::mt19937_64 rng(16);
    const Camera cam = test_camera();
    const auto st = settings_for(cam);
    const auto scene = random_scene(rng, 20);
    const auto g = rasterize_backward(scene, cam, st, Image(64, 64, 0.0));
    for (std::size_t i = 0; i < scene.size(); ++i) {
        EXPECT_EQ(g.mu[i], Vec3::Zero());
        EXPECT_EQ(g.opacity[i], 0.0);
        EXPECT_EQ(g.rotation[i], Vec4::Zero());
    }
}

TEST(Backward, CulledGaussianGetsZeroGradient) {
    std::mt19937_64 rng(17);
    const Camera cam = test_camera();
    const auto st = settings_for(cam);
    auto scene = random_scene(rng, 5);
    scene[2].mu = cam.pose.to_world(Vec3(0, 0, -3));
    const auto g = rasterize_backward(scene, cam, st, Image(64, 64, 1.0));
    EXPECT_EQ(g.mu[2], Vec3::Zero());
    EXPECT_EQ(g.color[2], Vec3::Zero());
    EXPECT_EQ(g.scale[2], Vec3::Zero());
}

TEST(Backward, SingleGaussianColorGradientIsAlpha) {
    ad::VerificationScope verify;
    Camera cam{Pose{}, Intrinsics::centered(16, 16, 1.0)};
    auto st = settings_for(cam);
    Gaussian g;
    g.mu = Vec3(0.1, -0.05, 5);
    g.scale = Vec3(0.4, 0.3, 0.2);
    g.opacity = 0.7;
    const std::vector<Gaussian> scene{g};
    const int px = 9, py = 7;
    Image grad(16, 16, 0.0);
    grad.at(px, py, 1) = 1.0;
    const auto gg = rasterize_backward(scene, cam, st, grad);
    const auto s = project(g, cam, st);
    const double dx = px + 0.5 - s->mean.x(), dy = py + 0.5 - s->mean.y();
    const double alpha = g.opacity * std::exp(-0.5 * (s->conic[0] * dx * dx + 2 * s->conic[1] * dx * dy +
                                                       s->conic[2] * dy * dy));
    EXPECT_NEAR(gg.color[0][1], alpha, 1e-12);
    // Finite-difference oracle on the green channel.
    auto pixel = [&](double c) {
        auto sc = scene;
        sc[0].color[1] = c;
        return rasterize(sc, cam, st).image.at(px, py, 1);
    };
    const double h = 1e-5;
    EXPECT_NEAR((pixel(g.color[1] + h) - pixel(g.color[1] - h)) / (2 * h), gg.color[0][1], 1e-4);
}

TEST(Backward, RenderOpMatchesFiniteDifferences) {
    ad::VerificationScope verify;
    std::mt19937_64 rng(18);
    Camera cam{Pose::look_at(Vec3(0.5, -1, -7), Vec3(0, 0, 0), Vec3(0, 1, 0)), Intrinsics::centered(24, 24, 0.9)};
    auto st = settings_for(cam);
    st.alpha_cutoff = 0.0;
    auto scene = random_scene(rng, 20);
    for (auto& g : scene) g.opacity = std::min(g.opacity, 0.9);
    std::normal_distribution<double> nd(0, 1);
    std::vector<double> w(24 * 24 * 3);
    for (auto& v : w) v = nd(rng);
    auto weights = ad::Tensor::from_values({24, 24, 3}, std::span<const double>(w));
    auto packed = ad::Tensor::parameter(pack_scene(scene));
    auto f = [&] { return ad::sum(ad::mul(render(packed, cam, st), weights)); };
    const auto report = ad::grad_check(f, {packed}, {.step = 1e-5, .samples = 280, .order = 4});
    EXPECT_LT(report.max_rel_err, 1e-3) << "index " << report.worst_index << " analytic "
                                        << report.worst_analytic << " numeric " << report.worst_numeric;
}

TEST(Backward, DefaultCutoffStillMatchesFiniteDifferences) {
    ad::VerificationScope verify;
    std::mt19937_64 rng(19);
    const Camera cam = test_camera(32);
    const auto st = settings_for(cam);
    auto packed = ad::Tensor::parameter(pack_scene(random_scene(rng, 20)));
    auto f = [&] { return ad::mean(render(packed, cam, st)); };
    EXPECT_LT(ad::grad_check(f, {packed}, {.samples = 150, .order = 4}).max_rel_err, 1e-3);
}

TEST(Png, RoundTripQuantizes) {
    std::mt19937_64 rng(20);
    std::uniform_real_distribution<double> u(-0.2, 1.2);
    Image img(13, 7);
    for (auto& v : img.data) v = u(rng);
    const auto path = std::filesystem::temp_directory_path() / "bt_test_img.png";
    write_png(path, img);
    const Image back = read_png(path);
    EXPECT_EQ(back, img.quantized());
    EXPECT_EQ(to_byte(0.5), 128);
    EXPECT_EQ(to_byte(-1.0), 0);
    EXPECT_EQ(to_byte(2.0), 255);
    std::filesystem::remove(path);
}
