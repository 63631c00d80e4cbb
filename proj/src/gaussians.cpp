// SPDX-License-Identifier: Apache-2.0
#include "bt/gaussians.hpp"

#include "bt/error.hpp"
#include "bt/io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace bt {

namespace {

double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus(double x) { return x > 20.0 ? x : std::log1p(std::exp(x)); }

// Decoded values plus the partial derivatives needed by the backward pass.
struct Decoded {
    double packed[kPackedParams];
    double dcolor[3];
    double dopacity;
    double dscale[3]; // zero where the clamp is active
    double qnorm;
    double dtau;
};

void decode_row(const double* raw, const double* o, const double* d, const DecodeBounds& b,
                Decoded& out) {
    for (int c = 0; c < 3; ++c) {
        const double s = sigmoid(raw[c]);
        out.packed[3 + c] = s;
        out.dcolor[c] = s * (1 - s);
    }
    const double op = sigmoid(raw[3]);
    out.packed[6] = op;
    out.dopacity = op * (1 - op);
    for (int c = 0; c < 3; ++c) {
        const double sp = softplus(raw[4 + c]);
        if (sp < kMinScale) {
            out.packed[7 + c] = kMinScale;
            out.dscale[c] = 0.0;
        } else if (sp > b.max_scale) {
            out.packed[7 + c] = b.max_scale;
            out.dscale[c] = 0.0;
        } else {
            out.packed[7 + c] = sp;
            out.dscale[c] = sigmoid(raw[4 + c]);
        }
    }
    double q[4] = {raw[7] + 1.0, raw[8], raw[9], raw[10]};
    double n = std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]);
    if (n < 1e-12) {
        q[0] = 1.0;
        q[1] = q[2] = q[3] = 0.0;
        n = 0.0;
    }
    out.qnorm = n;
    for (int c = 0; c < 4; ++c) out.packed[10 + c] = n > 0 ? q[c] / n : q[c];
    const double st = sigmoid(raw[11]);
    const double tau = b.near + (b.far - b.near) * st;
    out.dtau = (b.far - b.near) * st * (1 - st);
    for (int c = 0; c < 3; ++c) out.packed[c] = o[c] + tau * d[c];
}

} // namespace

void Gaussian::pack(std::span<double, kPackedParams> out) const {
    for (int c = 0; c < 3; ++c) {
        out[c] = mu[c];
        out[3 + c] = color[c];
        out[7 + c] = scale[c];
    }
    out[6] = opacity;
    for (int c = 0; c < 4; ++c) out[10 + c] = rotation[c];
}

Gaussian Gaussian::unpack(std::span<const double, kPackedParams> in) {
    Gaussian g;
    g.mu = Vec3(in[0], in[1], in[2]);
    g.color = Vec3(in[3], in[4], in[5]);
    g.opacity = in[6];
    g.scale = Vec3(in[7], in[8], in[9]);
    g.rotation = Vec4(in[10], in[11], in[12], in[13]);
    return g;
}

DecodeBounds DecodeBounds::from_cube(const Cube& cube) {
    DecodeBounds b;
    b.near = 0.1;
    b.far = 1.5 * cube.diagonal();
    b.max_scale = cube.diagonal() / 4.0;
    return b;
}

Gaussian decode_gaussian(std::span<const double, kRawParams> raw, const Vec3& o, const Vec3& d,
                         const DecodeBounds& bounds) {
    if (!(bounds.near < bounds.far)) throw ContractError("decode: near must be below far");
    Decoded out;
    decode_row(raw.data(), o.data(), d.data(), bounds, out);
    return Gaussian::unpack(std::span<const double, kPackedParams>(out.packed, kPackedParams));
}

GaussianScene assemble_scene(const std::vector<std::vector<Gaussian>>& per_frame, double bullet_time,
                             std::vector<int> source_frames) {
    if (per_frame.empty()) throw ContractError("assemble_scene: no frames");
    GaussianScene scene;
    scene.bullet_time = bullet_time;
    std::size_t total = 0;
    for (const auto& f : per_frame) total += f.size();
    scene.gaussians.reserve(total);
    for (const auto& f : per_frame) scene.gaussians.insert(scene.gaussians.end(), f.begin(), f.end());
    if (source_frames.empty()) {
        source_frames.resize(per_frame.size());
        for (std::size_t i = 0; i < per_frame.size(); ++i) source_frames[i] = static_cast<int>(i);
    }
    scene.source_frames = std::move(source_frames);
    return scene;
}

GaussianScene prune(const GaussianScene& scene, double min_opacity) {
    if (!(min_opacity >= 0 && min_opacity < 1)) throw ContractError("prune: min_opacity outside [0,1)");
    GaussianScene out;
    out.bullet_time = scene.bullet_time;
    out.source_frames = scene.source_frames;
    std::copy_if(scene.gaussians.begin(), scene.gaussians.end(), std::back_inserter(out.gaussians),
                 [&](const Gaussian& g) { return g.opacity >= min_opacity; });
    return out;
}

ad::Tensor pack_scene(const std::vector<Gaussian>& gaussians, ad::Precision p) {
    if (gaussians.empty()) throw ShapeError("pack_scene: empty scene has no tensor form");
    std::vector<double> v(gaussians.size() * kPackedParams);
    for (std::size_t i = 0; i < gaussians.size(); ++i)
        gaussians[i].pack(std::span<double, kPackedParams>(&v[i * kPackedParams], kPackedParams));
    return ad::Tensor::from_values({static_cast<std::int64_t>(gaussians.size()), kPackedParams},
                                   std::span<const double>(v), p);
}

std::vector<Gaussian> unpack_scene(const ad::Tensor& packed) {
    if (packed.rank() != 2 || packed.size(1) != kPackedParams)
        throw ShapeError("unpack_scene: expected [N,14], got " + ad::to_string(packed.shape()));
    const auto v = packed.values();
    std::vector<Gaussian> out(static_cast<std::size_t>(packed.size(0)));
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = Gaussian::unpack(std::span<const double, kPackedParams>(&v[i * kPackedParams], kPackedParams));
    return out;
}

ad::Tensor decode_gaussians(const ad::Tensor& raw, std::span<const double> origins,
                            std::span<const double> directions, const DecodeBounds& bounds) {
    if (raw.rank() != 2 || raw.size(1) != kRawParams)
        throw ShapeError("decode_gaussians: expected [N,12], got " + ad::to_string(raw.shape()));
    const auto n = static_cast<std::size_t>(raw.size(0));
    if (origins.size() != 3 * n || directions.size() != 3 * n)
        throw ShapeError("decode_gaussians: ray count does not match Gaussian count");
    if (!(bounds.near < bounds.far)) throw ContractError("decode: near must be below far");

    const auto rv = raw.values();
    auto saved = std::make_shared<std::vector<Decoded>>(n);
    std::vector<double> packed(n * kPackedParams);
    for (std::size_t i = 0; i < n; ++i) {
        decode_row(&rv[i * kRawParams], &origins[3 * i], &directions[3 * i], bounds, (*saved)[i]);
        std::copy_n((*saved)[i].packed, kPackedParams, &packed[i * kPackedParams]);
    }
    ad::Tensor out = ad::Tensor::from_values({static_cast<std::int64_t>(n), kPackedParams},
                                             std::span<const double>(packed), raw.precision());
    std::vector<double> dirs(directions.begin(), directions.end());
    return ad::Tape::record({raw}, out, [raw, saved, dirs = std::move(dirs)](const ad::Tensor& g) {
        const auto gv = g.values();
        const std::size_t n = saved->size();
        std::vector<double> dr(n * kRawParams, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const Decoded& s = (*saved)[i];
            const double* gi = &gv[i * kPackedParams];
            double* di = &dr[i * kRawParams];
            for (int c = 0; c < 3; ++c) di[c] = gi[3 + c] * s.dcolor[c];
            di[3] = gi[6] * s.dopacity;
            for (int c = 0; c < 3; ++c) di[4 + c] = gi[7 + c] * s.dscale[c];
            if (s.qnorm > 0) {
                // d(q/|q|) = (I - q̂ q̂ᵀ) / |q|
                const double* qh = &s.packed[10];
                double dot = 0.0;
                for (int c = 0; c < 4; ++c) dot += gi[10 + c] * qh[c];
                for (int c = 0; c < 4; ++c) di[7 + c] = (gi[10 + c] - qh[c] * dot) / s.qnorm;
            }
            double gt = 0.0;
            for (int c = 0; c < 3; ++c) gt += gi[c] * dirs[3 * i + c];
            di[11] = gt * s.dtau;
        }
        return std::vector<ad::Tensor>{ad::Tensor::from_values(raw.shape(), std::span<const double>(dr),
                                                               raw.precision())};
    });
}

void write_btgs(const std::filesystem::path& path, const GaussianScene& scene) {
    BinaryWriter w(path);
    w.bytes("BTGS", 4);
    w.u32(kBtgsVersion);
    w.u64(scene.gaussians.size());
    double packed[kPackedParams];
    for (const auto& g : scene.gaussians) {
        g.pack(std::span<double, kPackedParams>(packed, kPackedParams));
        for (double v : packed) w.f32(static_cast<float>(v));
    }
    w.close();
}

GaussianScene read_btgs(const std::filesystem::path& path) {
    BinaryReader r(path);
    if (r.string(4) != "BTGS") throw FormatError("not a BTGS scene file: " + path.string());
    const auto version = r.u32();
    if (version != kBtgsVersion)
        throw VersionError("unsupported BTGS version " + std::to_string(version) + " in " + path.string());
    const auto count = r.u64();
    GaussianScene scene;
    scene.gaussians.resize(count);
    double packed[kPackedParams];
    for (auto& g : scene.gaussians) {
        for (double& v : packed) v = r.f32();
        g = Gaussian::unpack(std::span<const double, kPackedParams>(packed, kPackedParams));
    }
    return scene;
}

} // namespace bt
