// SPDX-License-Identifier: Apache-2.0
#include "bt/verify.hpp"

#include "bt/error.hpp"
#include "bt/nte.hpp"
#include "bt/rasterizer.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <random>

namespace bt {

bool SuiteReport::passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

double SuiteReport::max_error() const {
    double m = 0.0;
    for (const auto& c : checks) m = std::max(m, c.max_error);
    return m;
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

CheckResult check(std::string name, double err, double tol) {
    // NaN fails.
    return {std::move(name), err, tol, err < tol};
}

ad::Tensor random_tensor(ad::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(static_cast<std::size_t>(ad::numel(shape)));
    for (auto& x : v) x = u(rng);
    return ad::Tensor::adopt(std::move(shape), std::move(v));
}

ad::Tensor random_param(ad::Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    return ad::Tensor::parameter(random_tensor(std::move(shape), rng, lo, hi));
}

// Weighted sum so every output element carries a distinct upstream gradient.
ad::Tensor project_out(const ad::Tensor& y, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return ad::sum(ad::mul(y, random_tensor(y.shape(), rng)));
}

std::vector<Gaussian> random_scene(std::mt19937_64& rng, int n) {
    std::uniform_real_distribution<double> u(0, 1);
    std::normal_distribution<double> nd(0, 1);
    std::vector<Gaussian> scene(static_cast<std::size_t>(n));
    for (auto& g : scene) {
        g.mu = Vec3(u(rng) * 6 - 3, u(rng) * 6 - 3, u(rng) * 6 - 3);
        g.color = Vec3(u(rng), u(rng), u(rng));
        g.opacity = 0.05 + 0.9 * u(rng);
        g.scale = Vec3(0.05 + 0.5 * u(rng), 0.05 + 0.5 * u(rng), 0.05 + 0.5 * u(rng));
        g.rotation = Vec4(nd(rng), nd(rng), nd(rng), nd(rng)).normalized();
    }
    return scene;
}

Camera orbit_camera(std::mt19937_64& rng, int size) {
    std::uniform_real_distribution<double> u(0, 1);
    const double a = 2 * M_PI * u(rng);
    const double r = 8.0 + 3.0 * u(rng);
    const Vec3 eye(r * std::cos(a), r * std::sin(a), 1.0 + 3.0 * u(rng));
    return {Pose::look_at(eye, Vec3::Zero(), Vec3(0, 0, 1)), Intrinsics::centered(size, size, 0.8 + 0.4 * u(rng))};
}

Frame random_frame(std::mt19937_64& rng, int size, double time) {
    std::uniform_real_distribution<double> u(0, 1);
    Frame f;
    f.image = Image(size, size);
    for (auto& v : f.image.data) v = u(rng);
    const Camera cam = orbit_camera(rng, size);
    f.pose = cam.pose;
    f.intr = cam.intr;
    f.time = time;
    return f;
}

template <class W>
void perturb(W& w, std::mt19937_64& rng, double amount) {
    std::uniform_real_distribution<double> u(-amount, amount);
    w.visit([&](const std::string&, ad::Tensor& p) {
        if (p.precision() == ad::Precision::f64)
            for (auto& x : p.mutable_data<double>()) x += u(rng);
        else
            for (auto& x : p.mutable_data<float>()) x += static_cast<float>(u(rng));
    });
}

template <class W>
std::vector<ad::Tensor> params_of(W& w) {
    std::vector<ad::Tensor> out;
    w.visit([&](const std::string&, ad::Tensor& p) { out.push_back(p); });
    return out;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace

SuiteReport verify_gradients(const VerifyOptions& opt) {
    const auto start = Clock::now();
    ad::VerificationScope f64;
    SuiteReport rep{"gradcheck", {}, 0.0};
    std::mt19937_64 rng(opt.seed + 1);
    constexpr double tol = 1e-3;
    const ad::GradCheckOptions gc{.step = 1e-5, .samples = 100, .seed = opt.seed, .order = 4};

    auto unary = [&](const char* name, auto op, double lo = -2.0, double hi = 2.0) {
        auto x = random_param({3, 7}, rng, lo, hi);
        const auto seed = rng();
        rep.checks.push_back(check(name, ad::grad_check([&] { return project_out(op(x), seed); }, {x}, gc).max_rel_err, tol));
    };
    auto binary = [&](const char* name, ad::Shape sb, auto op) {
        auto a = random_param({4, 5}, rng);
        auto b = random_param(std::move(sb), rng);
        const auto seed = rng();
        rep.checks.push_back(
            check(name, ad::grad_check([&] { return project_out(op(a, b), seed); }, {a, b}, gc).max_rel_err, tol));
    };

    {
        auto a = random_param({5, 7}, rng);
        auto b = random_param({7, 3}, rng);
        auto bt = random_param({3, 7}, rng);
        auto ba = random_param({2, 5, 7}, rng);
        auto bb = random_param({2, 7, 3}, rng);
        const auto seed = rng();
        double e = 0.0;
        e = std::max(e, ad::grad_check([&] { return project_out(ad::matmul(a, b), seed); }, {a, b}, gc).max_rel_err);
        e = std::max(e, ad::grad_check([&] { return project_out(ad::matmul(a, bt, true), seed); }, {a, bt}, gc).max_rel_err);
        e = std::max(e, ad::grad_check([&] { return project_out(ad::matmul(ba, bb), seed); }, {ba, bb}, gc).max_rel_err);
        e = std::max(e, ad::grad_check([&] { return project_out(ad::matmul(ba, b), seed); }, {ba, b}, gc).max_rel_err);
        rep.checks.push_back(check("matmul", e, tol));
    }
    binary("add", {5}, [](auto& a, auto& b) { return ad::add(a, b); });
    binary("sub", {4, 5}, [](auto& a, auto& b) { return ad::sub(a, b); });
    binary("mul", {1, 5}, [](auto& a, auto& b) { return ad::mul(a, b); });
    unary("scale", [](auto& x) { return ad::scale(x, -1.7); });
    unary("sigmoid", [](auto& x) { return ad::sigmoid(x); }, -4.0, 4.0);
    unary("softplus", [](auto& x) { return ad::softplus(x); }, -4.0, 4.0);
    unary("gelu", [](auto& x) { return ad::gelu(x); }, -3.0, 3.0);
    {
        auto x = random_param({3, 8}, rng);
        auto g = random_param({8}, rng, 0.5, 1.5);
        auto b = random_param({8}, rng);
        const auto seed = rng();
        rep.checks.push_back(check(
            "layer_norm", ad::grad_check([&] { return project_out(ad::layer_norm(x, g, b), seed); }, {x, g, b}, gc).max_rel_err,
            tol));
    }
    {
        auto s = random_param({2, 4, 4}, rng, -2.0, 2.0);
        ad::Mask causal{{4, 4}, {1, 0, 0, 0, 1, 1, 0, 0, 1, 1, 1, 0, 1, 1, 1, 1}};
        const auto seed = rng();
        double e = ad::grad_check([&] { return project_out(ad::masked_softmax(s), seed); }, {s}, gc).max_rel_err;
        e = std::max(e, ad::grad_check([&] { return project_out(ad::masked_softmax(s, &causal), seed); }, {s}, gc).max_rel_err);
        rep.checks.push_back(check("masked_softmax", e, tol));
    }
    unary("l2_normalize", [](auto& x) { return ad::l2_normalize(x); });
    unary("reshape", [](auto& x) { return ad::reshape(x, {7, 3}); });
    unary("transpose", [](auto& x) { return ad::transpose(ad::reshape(x, {3, 7, 1}), 0, 1); });
    unary("slice", [](auto& x) { return ad::slice(x, 1, 2, 6); });
    binary("concat", {4, 2}, [](auto& a, auto& b) { return ad::concat({a, b, a}, 1); });
    unary("sum", [](auto& x) { return ad::scale(ad::sum(x), 1.0); });
    unary("mean", [](auto& x) { return ad::mean(x); });

    // Decode alone and decode followed by rasterization.
    {
        const int n = 16;
        std::normal_distribution<double> nd(0, 1);
        std::vector<double> raw, origins, dirs;
        const Camera cam = orbit_camera(rng, 20);
        const auto rays = pixel_rays(cam.pose, cam.intr);
        std::uniform_int_distribution<int> pix(0, 20 * 20 - 1);
        for (int i = 0; i < n; ++i) {
            for (int k = 0; k < kRawParams; ++k) raw.push_back(nd(rng));
            const int p = pix(rng);
            for (int c = 0; c < 3; ++c) {
                origins.push_back(rays.origins[static_cast<std::size_t>(3 * p + c)]);
                dirs.push_back(rays.directions[static_cast<std::size_t>(3 * p + c)]);
            }
        }
        const auto bounds = DecodeBounds::from_cube(Cube{});
        auto r = ad::Tensor::parameter(ad::Tensor::from_values({n, kRawParams}, std::span<const double>(raw)));
        const auto seed = rng();
        rep.checks.push_back(check(
            "decode",
            ad::grad_check([&] { return project_out(decode_gaussians(r, origins, dirs, bounds), seed); }, {r},
                           {.step = 1e-4, .samples = 150, .seed = opt.seed, .order = 4})
                .max_rel_err,
            tol));
        auto st = RenderSettings::for_camera(cam.intr, bounds);
        st.alpha_cutoff = 0.0;
        rep.checks.push_back(check(
            "decode_rasterize",
            ad::grad_check([&] { return project_out(render(decode_gaussians(r, origins, dirs, bounds), cam, st), seed); },
                           {r}, {.step = 1e-5, .samples = 150, .seed = opt.seed, .order = 4})
                .max_rel_err,
            tol));
    }

    // Reconstructor: 2 context views of 16x16, dim 64, 2 blocks.
    {
        BTimerConfig cfg;
        cfg.backbone = {.dim = 64, .blocks = 2, .heads = 4, .patch = 4, .qk_norm = true, .mlp_ratio = 2};
        std::mt19937_64 init(opt.seed + 2);
        BTimerWeights w(cfg, init);
        perturb(w, rng, 0.05);
        ContextSet ctx;
        ctx.frames = {random_frame(rng, 16, 0.0), random_frame(rng, 16, 1.0)};
        ctx.bullet_time = 0.4;
        const Frame target = random_frame(rng, 16, 0.4);
        auto st = RenderSettings::for_camera(target.intr, cfg.bounds());
        st.alpha_cutoff = 0.0;
        const auto gt = target.image.tensor();
        auto f = [&] {
            auto d = ad::sub(render(predict(ctx, w, cfg).packed, target.camera(), st), gt);
            return ad::mean(ad::mul(d, d));
        };
        rep.checks.push_back(check(
            "btimer_end_to_end",
            ad::grad_check(f, params_of(w), {.step = 1e-5, .samples = 200, .seed = opt.seed, .order = 4}).max_rel_err,
            tol));
    }

    // Synthesizer: 2 context frames, 8x8.
    {
        NteConfig cfg;
        cfg.backbone = {.dim = 16, .blocks = 1, .heads = 2, .patch = 4, .qk_norm = true, .mlp_ratio = 2};
        std::mt19937_64 init(opt.seed + 3);
        NteWeights w(cfg, init);
        perturb(w, rng, 0.3);
        const std::vector<Frame> ctx{random_frame(rng, 8, 0.0), random_frame(rng, 8, 1.0)};
        const Frame target = random_frame(rng, 8, 0.5);
        const auto gt = target.image.tensor();
        auto f = [&] {
            auto d = ad::sub(synthesize(ctx, {target.pose, target.intr, target.time}, w, cfg), gt);
            return ad::mean(ad::mul(d, d));
        };
        rep.checks.push_back(check(
            "nte_end_to_end",
            ad::grad_check(f, params_of(w), {.step = 1e-5, .samples = 200, .seed = opt.seed, .order = 4}).max_rel_err,
            tol));
    }
    rep.seconds = seconds_since(start);
    return rep;
}

SuiteReport verify_rasterizer(const VerifyOptions& opt) {
    const auto start = Clock::now();
    SuiteReport rep{"rasterizer", {}, 0.0};
    std::mt19937_64 rng(opt.seed + 11);
    std::uniform_int_distribution<int> count(0, opt.max_gaussians);
    double color_err = 0.0, conservation_err = 0.0, alpha_err = 0.0;
    for (int s = 0; s < opt.raster_scenes; ++s) {
        const Camera cam = orbit_camera(rng, 64);
        auto st = RenderSettings::for_camera(cam.intr, DecodeBounds::from_cube(Cube{}));
        st.background = Vec3(0.2, 0.3, 0.4);
        const auto scene = random_scene(rng, count(rng));
        const auto tiled = rasterize(scene, cam, st);
        const auto ref = rasterize_reference(scene, cam, st);
        color_err = std::max(color_err, max_abs_diff(tiled.image.data, ref.image.data));
        alpha_err = std::max(alpha_err, max_abs_diff(tiled.alpha, ref.alpha));
        for (const auto* out : {&tiled, &ref})
            for (std::size_t i = 0; i < out->alpha.size(); ++i)
                conservation_err = std::max(conservation_err, std::abs(out->alpha[i] + out->transmittance[i] - 1.0));
    }
    rep.checks.push_back(check("tiled_vs_reference_color", color_err, 1e-4));
    rep.checks.push_back(check("tiled_vs_reference_alpha", alpha_err, 1e-4));
    rep.checks.push_back(check("alpha_plus_transmittance", conservation_err, 1e-5));
    rep.seconds = seconds_since(start);
    return rep;
}

SuiteReport verify_cache(const VerifyOptions& opt) {
    const auto start = Clock::now();
    SuiteReport rep{"cache", {}, 0.0};
    std::mt19937_64 rng(opt.seed + 21);
    double cache_err = 0.0, leak_joint = 0.0, leak_cached = 0.0;
    const int dims[] = {8, 16, 32};
    const int heads[] = {1, 2, 4};
    for (int c = 0; c < opt.cache_configs; ++c) {
        NteConfig cfg;
        cfg.backbone.dim = dims[rng() % 3];
        cfg.backbone.heads = heads[rng() % 3];
        cfg.backbone.blocks = 1 + static_cast<int>(rng() % 3);
        cfg.backbone.patch = (rng() % 2) ? 4 : 2;
        cfg.backbone.mlp_ratio = 2;
        const int size = (rng() % 2) ? 8 : 16;
        const int frames = 1 + static_cast<int>(rng() % 4);
        std::mt19937_64 init(rng());
        NteWeights w(cfg, init);
        perturb(w, rng, 0.3);
        std::vector<Frame> ctx;
        for (int i = 0; i < frames; ++i) ctx.push_back(random_frame(rng, size, frames > 1 ? double(i) / (frames - 1) : 0.0));
        const Frame q = random_frame(rng, size, 0.37);
        const auto tokens = nte_tokens(ctx, {q.pose, q.intr, q.time}, w, cfg);
        const auto joint = nte_forward(tokens, w, cfg, NteMode::joint);
        const auto cached = nte_forward(tokens, w, cfg, NteMode::cached);
        cache_err = std::max(cache_err, max_abs_diff(joint.target.values(), cached.target.values()));
        cache_err = std::max(cache_err, max_abs_diff(joint.context.values(), cached.context.values()));

        auto moved = tokens;
        moved.target = ad::add(tokens.target, random_tensor(tokens.target.shape(), rng, -5.0, 5.0).to(tokens.target.precision()));
        const auto joint2 = nte_forward(moved, w, cfg, NteMode::joint);
        const auto cached2 = nte_forward(moved, w, cfg, NteMode::cached);
        leak_joint = std::max(leak_joint, max_abs_diff(joint.context.values(), joint2.context.values()));
        leak_cached = std::max(leak_cached, max_abs_diff(cached.context.values(), cached2.context.values()));
        // The perturbation must reach the target outputs for the check to mean anything.
        if (max_abs_diff(joint.target.values(), joint2.target.values()) == 0.0) leak_joint = 1.0;
    }
    rep.checks.push_back(check("cached_vs_joint", cache_err, 1e-5));
    rep.checks.push_back(check("target_isolation_joint", leak_joint, 1e-7));
    rep.checks.push_back(check("target_isolation_cached", leak_cached, 1e-7));
    rep.seconds = seconds_since(start);
    return rep;
}

SuiteReport verify_decode(const VerifyOptions& opt) {
    const auto start = Clock::now();
    SuiteReport rep{"decode", {}, 0.0};
    std::mt19937_64 rng(opt.seed + 31);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::uniform_real_distribution<double> spread(0.1, 8.0);
    double ray = 0.0, quat = 0.0, range = 0.0;
    const auto bounds = DecodeBounds::from_cube(Cube{});
    for (long i = 0; i < opt.decodes; ++i) {
        const double s = spread(rng);
        std::array<double, kRawParams> raw;
        for (auto& v : raw) v = s * nd(rng);
        const Vec3 o(5 * nd(rng), 5 * nd(rng), 5 * nd(rng));
        const Vec3 d = Vec3(nd(rng), nd(rng), nd(rng)).normalized();
        const Gaussian g = decode_gaussian(raw, o, d, bounds);
        ray = std::max(ray, (g.mu - o).cross(d).norm());
        quat = std::max(quat, std::abs(g.rotation.norm() - 1.0));
        const bool ok = (g.color.array() >= 0).all() && (g.color.array() <= 1).all() && g.opacity > 0 &&
                        g.opacity < 1 && (g.scale.array() >= kMinScale).all() && (g.scale.array() <= bounds.max_scale).all() &&
                        (g.mu - o).dot(d) >= bounds.near - 1e-9 && (g.mu - o).dot(d) <= bounds.far + 1e-9;
        if (!ok) range += 1.0;
    }
    rep.checks.push_back(check("on_ray_residual", ray, 1e-6));
    rep.checks.push_back(check("quaternion_norm", quat, 1e-6));
    rep.checks.push_back(check("out_of_range_count", range, 0.5));
    rep.seconds = seconds_since(start);
    return rep;
}

std::vector<SuiteReport> run_suites(const std::string& suite, const VerifyOptions& opt) {
    if (suite == "gradcheck") return {verify_gradients(opt)};
    if (suite == "oracle") return {verify_rasterizer(opt), verify_decode(opt)};
    if (suite == "cache") return {verify_cache(opt)};
    if (suite == "all") return {verify_gradients(opt), verify_rasterizer(opt), verify_decode(opt), verify_cache(opt)};
    throw ConfigError("unknown suite '" + suite + "'");
}

std::string format_report(const SuiteReport& report) {
    std::string out = fmt::format("suite {} ({:.2f} s): {}\n", report.suite, report.seconds,
                                  report.passed() ? "PASS" : "FAIL");
    for (const auto& c : report.checks)
        out += fmt::format("  {:<28} max_err {:.3e}  tol {:.1e}  {}\n", c.name, c.max_error, c.tolerance,
                           c.passed ? "ok" : "FAIL");
    return out;
}

} // namespace bt
