// SPDX-License-Identifier: Apache-2.0
#include "bt/rasterizer.hpp"

#include "bt/error.hpp"
#include "bt/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace bt {

RenderSettings RenderSettings::for_camera(const Intrinsics& intr, const DecodeBounds& bounds,
                                          const Vec3& background) {
    RenderSettings s;
    s.width = intr.width;
    s.height = intr.height;
    s.near = bounds.near;
    s.far = bounds.far;
    s.background = background;
    return s;
}

void RenderSettings::validate() const {
    if (width <= 0 || height <= 0 || tile <= 0) throw ContractError("render settings: non-positive extent");
    if (!(near < far)) throw ContractError("render settings: near must be below far");
    if (!(alpha_cutoff >= 0 && alpha_cutoff < 1)) throw ContractError("render settings: alpha_cutoff outside [0,1)");
}

namespace {

using Mat23 = Eigen::Matrix<double, 2, 3>;

// Intermediates of the projection kept for the backward pass.
struct ProjectionAux {
    Vec4 qhat;
    double qnorm = 1.0;
    Mat3 rot;  // R(q̂)
    Vec3 t;    // camera-space mean
    Mat3 m;    // W Σ Wᵀ
    Mat23 j;   // perspective Jacobian
};

std::optional<Splat2D> project_impl(const Gaussian& g, const Camera& cam, const RenderSettings& st,
                                    ProjectionAux* aux) {
    const Vec3 t = cam.pose.to_camera(g.mu);
    if (!(t.z() > st.near && t.z() < st.far)) return std::nullopt;
    const double qn = g.rotation.norm();
    const Vec4 qhat = qn > 0 ? Vec4(g.rotation / qn) : Vec4(1, 0, 0, 0);
    const Mat3 r = quat_to_rotation(qhat);
    const Vec3 s2 = g.scale.cwiseProduct(g.scale);
    const Mat3 sigma = r * s2.asDiagonal() * r.transpose();
    const Mat3& w = cam.pose.rotation; // camera-to-world; world-to-camera is its transpose
    const Mat3 m = w.transpose() * sigma * w;
    const double fx = cam.intr.fx, fy = cam.intr.fy;
    const double iz = 1.0 / t.z();
    Mat23 j;
    j << fx * iz, 0, -fx * t.x() * iz * iz, 0, fy * iz, -fy * t.y() * iz * iz;
    Mat2 cov = j * m * j.transpose();
    cov(0, 1) = cov(1, 0) = 0.5 * (cov(0, 1) + cov(1, 0));
    cov(0, 0) += kCovarianceFloor;
    cov(1, 1) += kCovarianceFloor;

    Splat2D s;
    s.mean = Vec2(fx * t.x() * iz + cam.intr.cx, fy * t.y() * iz + cam.intr.cy);
    s.cov = cov;
    const double det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(0, 1);
    s.conic = Vec3(cov(1, 1) / det, -cov(0, 1) / det, cov(0, 0) / det);
    const double mid = 0.5 * (cov(0, 0) + cov(1, 1));
    const double lambda_max = mid + std::sqrt(std::max(0.0, mid * mid - det));
    const double sigma_px = std::sqrt(lambda_max);
    if (s.mean.x() < -3 * sigma_px || s.mean.x() > st.width + 3 * sigma_px ||
        s.mean.y() < -3 * sigma_px || s.mean.y() > st.height + 3 * sigma_px)
        return std::nullopt;
    s.depth = t.z();
    s.color = g.color;
    s.opacity = g.opacity;
    if (st.alpha_cutoff <= 0) {
        s.radius = std::numeric_limits<double>::infinity();
    } else if (g.opacity <= st.alpha_cutoff) {
        s.radius = -1.0;
    } else {
        const double m2 = 2.0 * std::log(g.opacity / st.alpha_cutoff);
        s.radius = std::sqrt(lambda_max * m2) * (1 + 1e-9) + 1e-9;
    }
    if (aux) {
        aux->qhat = qhat;
        aux->qnorm = qn;
        aux->rot = r;
        aux->t = t;
        aux->m = m;
        aux->j = j;
    }
    return s;
}

struct PixelRange {
    int x0, x1, y0, y1;
    bool empty() const { return x0 > x1 || y0 > y1; }
    bool contains(int x, int y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
};

PixelRange pixel_range(const Splat2D& s, const RenderSettings& st) {
    if (s.radius < 0) return {1, 0, 1, 0};
    if (std::isinf(s.radius)) return {0, st.width - 1, 0, st.height - 1};
    auto lo = [](double v) { return static_cast<int>(std::ceil(v)); };
    auto hi = [](double v) { return static_cast<int>(std::floor(v)); };
    const double cap = 1e6;
    // Slightly widened so pixels on the cutoff boundary reach the exact alpha test.
    const double rad = s.radius * (1.0 + 1e-9) + 1e-9;
    PixelRange r;
    r.x0 = std::max(0, lo(std::max(-cap, s.mean.x() - rad - 0.5)));
    r.x1 = std::min(st.width - 1, hi(std::min(cap, s.mean.x() + rad - 0.5)));
    r.y0 = std::max(0, lo(std::max(-cap, s.mean.y() - rad - 0.5)));
    r.y1 = std::min(st.height - 1, hi(std::min(cap, s.mean.y() + rad - 0.5)));
    return r;
}

struct AlphaEval {
    double alpha;
    double g;   // exp(power)
    double dx, dy;
    bool clipped;
};

inline AlphaEval evaluate(const Splat2D& s, double px, double py) {
    AlphaEval e;
    e.dx = px - s.mean.x();
    e.dy = py - s.mean.y();
    const double power = -0.5 * (s.conic[0] * e.dx * e.dx + 2 * s.conic[1] * e.dx * e.dy +
                                 s.conic[2] * e.dy * e.dy);
    e.g = std::exp(std::min(0.0, power));
    const double a = s.opacity * e.g;
    e.clipped = a > kMaxAlpha;
    e.alpha = e.clipped ? kMaxAlpha : a;
    return e;
}

// Projection, depth order, and per-tile splat lists for one camera.
struct Plan {
    std::vector<std::optional<Splat2D>> splats;
    std::vector<std::uint32_t> order; // visible splats by (depth, index)
    std::vector<PixelRange> ranges;   // per splat; alpha is below the cutoff outside
    int tiles_x = 0, tiles_y = 0;
    std::vector<std::vector<std::uint32_t>> tiles;
};

Plan make_plan(std::span<const Gaussian> scene, const Camera& cam, const RenderSettings& st) {
    st.validate();
    Plan p;
    p.splats.resize(scene.size());
    parallel_for(scene.size(), [&](std::size_t i) { p.splats[i] = project_impl(scene[i], cam, st, nullptr); });
    for (std::uint32_t i = 0; i < scene.size(); ++i)
        if (p.splats[i]) p.order.push_back(i);
    std::sort(p.order.begin(), p.order.end(), [&](std::uint32_t a, std::uint32_t b) {
        const double da = p.splats[a]->depth, db = p.splats[b]->depth;
        return da < db || (da == db && a < b);
    });
    p.tiles_x = (st.width + st.tile - 1) / st.tile;
    p.tiles_y = (st.height + st.tile - 1) / st.tile;
    p.tiles.resize(static_cast<std::size_t>(p.tiles_x) * p.tiles_y);
    p.ranges.assign(scene.size(), PixelRange{1, 0, 1, 0});
    for (std::uint32_t idx : p.order) {
        const PixelRange r = pixel_range(*p.splats[idx], st);
        p.ranges[idx] = r;
        if (r.empty()) continue;
        for (int ty = r.y0 / st.tile; ty <= r.y1 / st.tile; ++ty)
            for (int tx = r.x0 / st.tile; tx <= r.x1 / st.tile; ++tx)
                p.tiles[static_cast<std::size_t>(ty) * p.tiles_x + tx].push_back(idx);
    }
    return p;
}

bool terminate_early(const RenderSettings& st) {
    return st.early_termination && ad::default_precision() != ad::Precision::f64;
}

RenderOutput blank_output(const RenderSettings& st) {
    RenderOutput out;
    out.image = Image(st.width, st.height);
    const auto n = static_cast<std::size_t>(st.width) * st.height;
    out.depth.assign(n, 0.0);
    out.alpha.assign(n, 0.0);
    out.transmittance.assign(n, 1.0);
    return out;
}

// Front-to-back compositing of one pixel over the given splat sequence.
template <class Seq>
void composite_pixel(const Plan& p, const Seq& seq, int x, int y, const RenderSettings& st, bool early,
                     RenderOutput& out) {
    const double px = x + 0.5, py = y + 0.5;
    double t = 1.0, acc = 0.0, dsum = 0.0;
    Vec3 c = Vec3::Zero();
    for (std::uint32_t idx : seq) {
        if (!p.ranges[idx].contains(x, y)) continue;
        const Splat2D& s = *p.splats[idx];
        const AlphaEval e = evaluate(s, px, py);
        if (e.alpha < st.alpha_cutoff) continue;
        const double w = e.alpha * t;
        c += w * s.color;
        dsum += w * s.depth;
        acc += w;
        t *= 1.0 - e.alpha;
        if (early && t < kTerminationT) break;
    }
    const std::size_t pix = static_cast<std::size_t>(y) * st.width + x;
    for (int ch = 0; ch < 3; ++ch) out.image.data[3 * pix + ch] = c[ch] + t * st.background[ch];
    out.depth[pix] = acc > 0 ? dsum / acc : 0.0;
    out.alpha[pix] = acc;
    out.transmittance[pix] = t;
}

RenderOutput rasterize_plan(const Plan& p, const RenderSettings& st) {
    RenderOutput out = blank_output(st);
    const bool early = terminate_early(st);
    parallel_for(p.tiles.size(), [&](std::size_t tile) {
        const int tx = static_cast<int>(tile % p.tiles_x), ty = static_cast<int>(tile / p.tiles_x);
        const int x_end = std::min(st.width, (tx + 1) * st.tile);
        const int y_end = std::min(st.height, (ty + 1) * st.tile);
        for (int y = ty * st.tile; y < y_end; ++y)
            for (int x = tx * st.tile; x < x_end; ++x) composite_pixel(p, p.tiles[tile], x, y, st, early, out);
    });
    return out;
}

// Screen-space gradient of one splat.
struct Grad2D {
    double mean[2] = {0, 0};
    double conic[3] = {0, 0, 0};
    double color[3] = {0, 0, 0};
    double opacity = 0;

    void add(const Grad2D& o) {
        for (int i = 0; i < 2; ++i) mean[i] += o.mean[i];
        for (int i = 0; i < 3; ++i) conic[i] += o.conic[i], color[i] += o.color[i];
        opacity += o.opacity;
    }
};

struct Contribution {
    std::uint32_t slot;
    AlphaEval e;
    double t; // transmittance in front of the splat
};

std::vector<Grad2D> screen_gradients(const Plan& p, const RenderSettings& st, const Image& grad) {
    const bool early = terminate_early(st);
    std::vector<std::vector<Grad2D>> partial(p.tiles.size());
    parallel_for(p.tiles.size(), [&](std::size_t tile) {
        const auto& list = p.tiles[tile];
        auto& acc = partial[tile];
        acc.assign(list.size(), Grad2D{});
        const int tx = static_cast<int>(tile % p.tiles_x), ty = static_cast<int>(tile / p.tiles_x);
        const int x_end = std::min(st.width, (tx + 1) * st.tile);
        const int y_end = std::min(st.height, (ty + 1) * st.tile);
        std::vector<Contribution> seen;
        for (int y = ty * st.tile; y < y_end; ++y) {
            for (int x = tx * st.tile; x < x_end; ++x) {
                const std::size_t pix = static_cast<std::size_t>(y) * st.width + x;
                const Vec3 g(grad.data[3 * pix], grad.data[3 * pix + 1], grad.data[3 * pix + 2]);
                if (g.isZero()) continue;
                const double px = x + 0.5, py = y + 0.5;
                seen.clear();
                double t = 1.0;
                for (std::uint32_t slot = 0; slot < list.size(); ++slot) {
                    if (!p.ranges[list[slot]].contains(x, y)) continue;
                    const AlphaEval e = evaluate(*p.splats[list[slot]], px, py);
                    if (e.alpha < st.alpha_cutoff) continue;
                    seen.push_back({slot, e, t});
                    t *= 1.0 - e.alpha;
                    if (early && t < kTerminationT) break;
                }
                Vec3 behind = st.background;
                for (auto it = seen.rbegin(); it != seen.rend(); ++it) {
                    const Splat2D& s = *p.splats[list[it->slot]];
                    const AlphaEval& e = it->e;
                    Grad2D& out = acc[it->slot];
                    const double w = e.alpha * it->t;
                    for (int ch = 0; ch < 3; ++ch) out.color[ch] += g[ch] * w;
                    const double dalpha = it->t * g.dot(s.color - behind);
                    behind = e.alpha * s.color + (1.0 - e.alpha) * behind;
                    if (e.clipped) continue;
                    out.opacity += dalpha * e.g;
                    const double dpower = dalpha * e.alpha;
                    out.mean[0] += dpower * (s.conic[0] * e.dx + s.conic[1] * e.dy);
                    out.mean[1] += dpower * (s.conic[1] * e.dx + s.conic[2] * e.dy);
                    out.conic[0] += dpower * (-0.5 * e.dx * e.dx);
                    out.conic[1] += dpower * (-e.dx * e.dy);
                    out.conic[2] += dpower * (-0.5 * e.dy * e.dy);
                }
            }
        }
    });
    // Tile-order reduction keeps the summation order fixed.
    std::vector<Grad2D> total(p.splats.size());
    for (std::size_t tile = 0; tile < p.tiles.size(); ++tile)
        for (std::size_t slot = 0; slot < p.tiles[tile].size(); ++slot)
            total[p.tiles[tile][slot]].add(partial[tile][slot]);
    return total;
}

Vec4 rotation_backward(const Vec4& q, const Mat3& g) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Vec4 d;
    d[0] = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    d[1] = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) +
                w * g(2, 1) - 2 * x * g(2, 2));
    d[2] = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) +
                z * g(2, 1) - 2 * y * g(2, 2));
    d[3] = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1) +
                y * g(1, 2) + x * g(2, 0) + y * g(2, 1));
    return d;
}

GaussianGradients project_backward(std::span<const Gaussian> scene, const Camera& cam,
                                   const RenderSettings& st, const std::vector<Grad2D>& screen) {
    GaussianGradients out;
    const std::size_t n = scene.size();
    out.mu.assign(n, Vec3::Zero());
    out.color.assign(n, Vec3::Zero());
    out.opacity.assign(n, 0.0);
    out.scale.assign(n, Vec3::Zero());
    out.rotation.assign(n, Vec4::Zero());
    parallel_for(n, [&](std::size_t i) {
        ProjectionAux aux;
        const auto s = project_impl(scene[i], cam, st, &aux);
        if (!s) return;
        const Grad2D& g = screen[i];
        out.color[i] = Vec3(g.color[0], g.color[1], g.color[2]);
        out.opacity[i] = g.opacity;

        // conic = cov⁻¹  ->  dL/dcov = -K Ĝ K
        Mat2 k;
        k << s->conic[0], s->conic[1], s->conic[1], s->conic[2];
        Mat2 gk;
        gk << g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2];
        const Mat2 gcov = -k * gk * k;
        // cov = J M Jᵀ + floor
        const Mat3 gm = aux.j.transpose() * gcov * aux.j;
        const Mat23 gj = 2.0 * gcov * aux.j * aux.m;
        // M = Wᵀ Σ W with W the camera-to-world rotation
        const Mat3& w = cam.pose.rotation;
        const Mat3 gsigma = w * gm * w.transpose();
        // Σ = R diag(s²) Rᵀ
        const Vec3 s2 = scene[i].scale.cwiseProduct(scene[i].scale);
        const Mat3 grot = 2.0 * gsigma * aux.rot * s2.asDiagonal();
        const Mat3 inner = aux.rot.transpose() * gsigma * aux.rot;
        for (int c = 0; c < 3; ++c) out.scale[i][c] = 2.0 * scene[i].scale[c] * inner(c, c);
        const Vec4 gqhat = rotation_backward(aux.qhat, grot);
        if (aux.qnorm > 0) out.rotation[i] = (gqhat - aux.qhat * aux.qhat.dot(gqhat)) / aux.qnorm;

        const double fx = cam.intr.fx, fy = cam.intr.fy;
        const double x = aux.t.x(), y = aux.t.y(), z = aux.t.z();
        const double iz = 1.0 / z, iz2 = iz * iz, iz3 = iz2 * iz;
        Vec3 gt;
        gt.x() = gj(0, 2) * (-fx * iz2) + g.mean[0] * fx * iz;
        gt.y() = gj(1, 2) * (-fy * iz2) + g.mean[1] * fy * iz;
        gt.z() = gj(0, 0) * (-fx * iz2) + gj(0, 2) * (2 * fx * x * iz3) + gj(1, 1) * (-fy * iz2) +
                 gj(1, 2) * (2 * fy * y * iz3) - g.mean[0] * fx * x * iz2 - g.mean[1] * fy * y * iz2;
        out.mu[i] = w * gt;
    });
    return out;
}

} // namespace

std::optional<Splat2D> project(const Gaussian& g, const Camera& cam, const RenderSettings& settings) {
    return project_impl(g, cam, settings, nullptr);
}

RenderOutput rasterize(std::span<const Gaussian> scene, const Camera& cam, const RenderSettings& settings) {
    return rasterize_plan(make_plan(scene, cam, settings), settings);
}

RenderOutput rasterize_reference(std::span<const Gaussian> scene, const Camera& cam,
                                 const RenderSettings& settings) {
    settings.validate();
    Plan p;
    p.splats.resize(scene.size());
    for (std::size_t i = 0; i < scene.size(); ++i) p.splats[i] = project_impl(scene[i], cam, settings, nullptr);
    for (std::uint32_t i = 0; i < scene.size(); ++i)
        if (p.splats[i]) p.order.push_back(i);
    std::stable_sort(p.order.begin(), p.order.end(), [&](std::uint32_t a, std::uint32_t b) {
        return p.splats[a]->depth < p.splats[b]->depth;
    });
    RenderOutput out = blank_output(settings);
    for (int y = 0; y < settings.height; ++y) {
        for (int x = 0; x < settings.width; ++x) {
            std::vector<double> alphas;
            for (std::uint32_t idx : p.order) {
                const AlphaEval e = evaluate(*p.splats[idx], x + 0.5, y + 0.5);
                alphas.push_back(e.alpha >= settings.alpha_cutoff ? e.alpha : 0.0);
            }
            const std::size_t pix = static_cast<std::size_t>(y) * settings.width + x;
            double acc = 0.0, dsum = 0.0;
            Vec3 c = Vec3::Zero();
            double t = 1.0;
            for (std::size_t k = 0; k < p.order.size(); ++k) {
                const Splat2D& s = *p.splats[p.order[k]];
                c += alphas[k] * t * s.color;
                dsum += alphas[k] * t * s.depth;
                acc += alphas[k] * t;
                t *= 1.0 - alphas[k];
            }
            for (int ch = 0; ch < 3; ++ch) out.image.data[3 * pix + ch] = c[ch] + t * settings.background[ch];
            out.depth[pix] = acc > 0 ? dsum / acc : 0.0;
            out.alpha[pix] = acc;
            out.transmittance[pix] = t;
        }
    }
    return out;
}

GaussianGradients rasterize_backward(std::span<const Gaussian> scene, const Camera& cam,
                                     const RenderSettings& settings, const Image& grad_image) {
    if (grad_image.width != settings.width || grad_image.height != settings.height)
        throw ShapeError("rasterize_backward: gradient image size does not match settings");
    const Plan p = make_plan(scene, cam, settings);
    return project_backward(scene, cam, settings, screen_gradients(p, settings, grad_image));
}

ad::Tensor render(const ad::Tensor& packed, const Camera& cam, const RenderSettings& settings) {
    auto scene = std::make_shared<std::vector<Gaussian>>(unpack_scene(packed));
    auto plan = std::make_shared<Plan>(make_plan(*scene, cam, settings));
    const RenderOutput out = rasterize_plan(*plan, settings);
    ad::Tensor image = out.image.tensor(packed.precision());
    return ad::Tape::record({packed}, image, [packed, scene, plan, cam, settings](const ad::Tensor& g) {
        const Image gi = Image::from_tensor(g);
        const GaussianGradients gg = project_backward(*scene, cam, settings, screen_gradients(*plan, settings, gi));
        std::vector<double> flat(scene->size() * kPackedParams);
        for (std::size_t i = 0; i < scene->size(); ++i) {
            double* d = &flat[i * kPackedParams];
            for (int c = 0; c < 3; ++c) {
                d[c] = gg.mu[i][c];
                d[3 + c] = gg.color[i][c];
                d[7 + c] = gg.scale[i][c];
            }
            d[6] = gg.opacity[i];
            for (int c = 0; c < 4; ++c) d[10 + c] = gg.rotation[i][c];
        }
        return std::vector<ad::Tensor>{
            ad::Tensor::from_values(packed.shape(), std::span<const double>(flat), packed.precision())};
    });
}

std::vector<double> inverse_depth_visual(const RenderOutput& out) {
    double max_inv = 0.0;
    for (std::size_t i = 0; i < out.depth.size(); ++i)
        if (out.depth[i] > 0) max_inv = std::max(max_inv, 1.0 / out.depth[i]);
    std::vector<double> v(out.depth.size(), 0.0);
    if (max_inv == 0.0) return v;
    for (std::size_t i = 0; i < v.size(); ++i)
        if (out.depth[i] > 0) v[i] = (1.0 / out.depth[i]) / max_inv * std::min(1.0, out.alpha[i]);
    return v;
}

} // namespace bt
