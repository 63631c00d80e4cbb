// SPDX-License-Identifier: Apache-2.0
//
// Pinhole cameras. Poses are camera-to-world; the camera looks down +z of
// its own frame with +x right and +y down, and the image origin is the
// top-left corner. Pixel (u, v) has its center at (u + 0.5, v + 0.5).
#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <optional>
#include <vector>

namespace bt {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;

struct Intrinsics {
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.0;
    double cy = 0.0;
    int width = 1;
    int height = 1;

    // fx = fy = focal_scale * width, principal point at the image center.
    static Intrinsics centered(int width, int height, double focal_scale);
    void validate() const;
    bool operator==(const Intrinsics&) const = default;
};

struct Pose {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    // Camera at eye looking at target; world_up maps to image-up.
    static Pose look_at(const Vec3& eye, const Vec3& target, const Vec3& world_up);

    const Vec3& center() const { return translation; }
    Vec3 to_camera(const Vec3& world) const { return rotation.transpose() * (world - translation); }
    Vec3 to_world(const Vec3& camera) const { return rotation * camera + translation; }
    // Throws ContractError unless R is orthonormal with det +1 (tolerance 1e-6).
    void validate() const;
    bool operator==(const Pose& o) const {
        return rotation == o.rotation && translation == o.translation;
    }
};

struct Camera {
    Pose pose;
    Intrinsics intr;
};

// Per-pixel rays, row-major over (v, u), 3 doubles per pixel.
struct RayBundle {
    int width = 0;
    int height = 0;
    std::vector<double> origins;
    std::vector<double> directions;

    std::size_t pixels() const { return static_cast<std::size_t>(width) * height; }
    Vec3 origin(std::size_t pixel) const { return Eigen::Map<const Vec3>(&origins[3 * pixel]); }
    Vec3 direction(std::size_t pixel) const {
        return Eigen::Map<const Vec3>(&directions[3 * pixel]);
    }
};

// Per-pixel (d, o x d), 6 doubles per pixel, same layout as RayBundle.
struct PluckerMap {
    int width = 0;
    int height = 0;
    std::vector<double> values;
};

Vec3 pixel_direction(const Pose& pose, const Intrinsics& intr, double u, double v);
RayBundle pixel_rays(const Pose& pose, const Intrinsics& intr);
PluckerMap plucker(const RayBundle& rays);

// Translation interpolated linearly, rotation along the shortest geodesic.
Pose interpolate_pose(const Pose& p0, const Pose& p1, double alpha);

inline Vec3 unproject(const Vec3& o, const Vec3& d, double tau) { return o + tau * d; }

// Continuous pixel coordinates of a world point; empty behind the camera.
std::optional<Vec2> project_point(const Camera& cam, const Vec3& world);

// Quaternions are stored (w, x, y, z).
Mat3 quat_to_rotation(const Vec4& q);
Vec4 rotation_to_quat(const Mat3& r);

} // namespace bt
