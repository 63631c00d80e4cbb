// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "bt/geometry.hpp"
#include "bt/tensor.hpp"

#include <array>
#include <filesystem>
#include <span>
#include <vector>

namespace bt {

inline constexpr int kRawParams = 12;
// Packed layout shared by the render op and the BTGS file:
// mu[3], color[3], opacity, scale[3], quat[4] (w first).
inline constexpr int kPackedParams = 14;

struct Gaussian {
    Vec3 mu = Vec3::Zero();
    Vec3 color = Vec3::Constant(0.5);
    double opacity = 0.5;
    Vec3 scale = Vec3::Constant(0.1);
    Vec4 rotation = Vec4(1, 0, 0, 0);

    void pack(std::span<double, kPackedParams> out) const;
    static Gaussian unpack(std::span<const double, kPackedParams> in);
};

// Axis-aligned scene cube.
struct Cube {
    Vec3 lo = Vec3::Constant(-5.0);
    Vec3 hi = Vec3::Constant(5.0);

    double diagonal() const { return (hi - lo).norm(); }
    bool contains(const Vec3& p, double slack = 0.0) const {
        return (p.array() >= lo.array() - slack).all() && (p.array() <= hi.array() + slack).all();
    }
};

// Ray-distance range and scale ceiling applied during decoding.
struct DecodeBounds {
    double near = 0.1;
    double far = 10.0;
    double max_scale = 1.0;

    // near 0.1, far 1.5 x diagonal, scale ceiling diagonal / 4.
    static DecodeBounds from_cube(const Cube& cube);
};

inline constexpr double kMinScale = 1e-4;

Gaussian decode_gaussian(std::span<const double, kRawParams> raw, const Vec3& o, const Vec3& d,
                         const DecodeBounds& bounds);

struct GaussianScene {
    std::vector<Gaussian> gaussians;
    double bullet_time = 0.0;
    std::vector<int> source_frames;

    std::size_t size() const { return gaussians.size(); }
};

// Concatenates frames in order, each in pixel raster order.
GaussianScene assemble_scene(const std::vector<std::vector<Gaussian>>& per_frame, double bullet_time,
                             std::vector<int> source_frames = {});
GaussianScene prune(const GaussianScene& scene, double min_opacity);

// Row-major [N, 14] tensor in the packed layout, and back.
ad::Tensor pack_scene(const std::vector<Gaussian>& gaussians, ad::Precision p = ad::default_precision());
std::vector<Gaussian> unpack_scene(const ad::Tensor& packed);

// Differentiable batched decode. raw is [N, 12]; origins and directions hold
// 3 doubles per row. Returns [N, 14] in the packed layout.
ad::Tensor decode_gaussians(const ad::Tensor& raw, std::span<const double> origins,
                            std::span<const double> directions, const DecodeBounds& bounds);

// Binary scene export: "BTGS", u32 version, u64 count, 14 little-endian f32 each.
inline constexpr std::uint32_t kBtgsVersion = 1;
void write_btgs(const std::filesystem::path& path, const GaussianScene& scene);
GaussianScene read_btgs(const std::filesystem::path& path);

} // namespace bt
