// SPDX-License-Identifier: Apache-2.0
//
// Tile-based Gaussian splatting with an analytic backward pass, plus a
// brute-force per-pixel reference renderer that shares the projection and
// ordering rules and serves as the oracle for the tiled path.
#pragma once

#include "bt/gaussians.hpp"
#include "bt/geometry.hpp"
#include "bt/image.hpp"
#include "bt/tensor.hpp"

#include <optional>
#include <span>
#include <vector>

namespace bt {

inline constexpr double kCovarianceFloor = 0.3;
inline constexpr double kMaxAlpha = 0.999;
inline constexpr double kTerminationT = 1e-4;

struct RenderSettings {
    int width = 64;
    int height = 64;
    int tile = 4; // small tiles keep per-pixel splat lists short at low resolution
    Vec3 background = Vec3::Zero();
    double near = 0.1;
    double far = 100.0;
    double alpha_cutoff = 1.0 / 255.0;
    // Stop a pixel once transmittance drops below kTerminationT. Ignored while
    // a VerificationScope is active.
    bool early_termination = true;

    static RenderSettings for_camera(const Intrinsics& intr, const DecodeBounds& bounds,
                                     const Vec3& background = Vec3::Zero());
    void validate() const;
};

struct Splat2D {
    Vec2 mean;
    Mat2 cov;
    Vec3 conic; // inverse covariance (a, b, c) = [[a, b], [b, c]]
    double depth = 0.0;
    Vec3 color;
    double opacity = 0.0;
    // Pixel distance beyond which alpha falls below the cutoff.
    double radius = 0.0;
};

std::optional<Splat2D> project(const Gaussian& g, const Camera& cam, const RenderSettings& settings);

struct RenderOutput {
    Image image;
    std::vector<double> depth;         // alpha-normalized expected depth, 0 where nothing hit
    std::vector<double> alpha;         // accumulated sum of alpha_i * T_i
    std::vector<double> transmittance; // final T
};

RenderOutput rasterize(std::span<const Gaussian> scene, const Camera& cam, const RenderSettings& settings);
RenderOutput rasterize_reference(std::span<const Gaussian> scene, const Camera& cam,
                                 const RenderSettings& settings);

struct GaussianGradients {
    std::vector<Vec3> mu;
    std::vector<Vec3> color;
    std::vector<double> opacity;
    std::vector<Vec3> scale;
    std::vector<Vec4> rotation;
};

// Gradients of sum(grad_image * image) with respect to every Gaussian.
// Culled Gaussians receive zeros.
GaussianGradients rasterize_backward(std::span<const Gaussian> scene, const Camera& cam,
                                     const RenderSettings& settings, const Image& grad_image);

// Differentiable render of a packed [N, 14] scene to an [H, W, 3] image.
ad::Tensor render(const ad::Tensor& packed, const Camera& cam, const RenderSettings& settings);

// Inverse depth mapped to [0,1] for visualization (nearest hit = 1, empty = 0).
std::vector<double> inverse_depth_visual(const RenderOutput& out);

} // namespace bt
