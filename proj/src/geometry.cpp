// SPDX-License-Identifier: Apache-2.0
#include "bt/geometry.hpp"

#include "bt/error.hpp"

#include <cmath>

namespace bt {

Intrinsics Intrinsics::centered(int width, int height, double focal_scale) {
    Intrinsics k;
    k.fx = k.fy = focal_scale * width;
    k.cx = 0.5 * width;
    k.cy = 0.5 * height;
    k.width = width;
    k.height = height;
    return k;
}

void Intrinsics::validate() const {
    if (!(fx > 0 && fy > 0)) throw ContractError("intrinsics: focal lengths must be positive");
    if (width <= 0 || height <= 0) throw ContractError("intrinsics: image extents must be positive");
    if (!(cx >= 0 && cx < width && cy >= 0 && cy < height))
        throw ContractError("intrinsics: principal point outside the image");
}

Pose Pose::look_at(const Vec3& eye, const Vec3& target, const Vec3& world_up) {
    const Vec3 z = (target - eye).normalized();
    Vec3 y = -(world_up - world_up.dot(z) * z);
    if (y.norm() < 1e-12) throw ContractError("look_at: view direction parallel to up vector");
    y.normalize();
    const Vec3 x = y.cross(z);
    Pose p;
    p.rotation.col(0) = x;
    p.rotation.col(1) = y;
    p.rotation.col(2) = z;
    p.translation = eye;
    return p;
}

void Pose::validate() const {
    const double ortho = (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
    if (!(ortho <= 1e-6) || std::abs(rotation.determinant() - 1.0) > 1e-6)
        throw ContractError("pose: rotation is not a proper orthonormal matrix");
    if (!translation.allFinite()) throw ContractError("pose: non-finite translation");
}

Vec3 pixel_direction(const Pose& pose, const Intrinsics& intr, double u, double v) {
    const Vec3 cam((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0);
    return (pose.rotation * cam).normalized();
}

RayBundle pixel_rays(const Pose& pose, const Intrinsics& intr) {
    RayBundle rays;
    rays.width = intr.width;
    rays.height = intr.height;
    rays.origins.resize(rays.pixels() * 3);
    rays.directions.resize(rays.pixels() * 3);
    std::size_t i = 0;
    for (int v = 0; v < intr.height; ++v) {
        for (int u = 0; u < intr.width; ++u, ++i) {
            const Vec3 d = pixel_direction(pose, intr, u + 0.5, v + 0.5);
            for (int c = 0; c < 3; ++c) {
                rays.origins[3 * i + c] = pose.translation[c];
                rays.directions[3 * i + c] = d[c];
            }
        }
    }
    return rays;
}

PluckerMap plucker(const RayBundle& rays) {
    PluckerMap map;
    map.width = rays.width;
    map.height = rays.height;
    map.values.resize(rays.pixels() * 6);
    for (std::size_t i = 0; i < rays.pixels(); ++i) {
        const Vec3 d = rays.direction(i);
        const Vec3 m = rays.origin(i).cross(d);
        for (int c = 0; c < 3; ++c) {
            map.values[6 * i + c] = d[c];
            map.values[6 * i + 3 + c] = m[c];
        }
    }
    return map;
}

Mat3 quat_to_rotation(const Vec4& q) {
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
}

Vec4 rotation_to_quat(const Mat3& r) {
    const Eigen::Quaterniond q(r);
    return {q.w(), q.x(), q.y(), q.z()};
}

Pose interpolate_pose(const Pose& p0, const Pose& p1, double alpha) {
    if (alpha == 0.0) return p0;
    if (alpha == 1.0) return p1;
    Vec4 a = rotation_to_quat(p0.rotation);
    Vec4 b = rotation_to_quat(p1.rotation);
    double cos_theta = a.dot(b);
    if (cos_theta < 0) {
        b = -b;
        cos_theta = -cos_theta;
    }
    Vec4 q;
    if (cos_theta > 1.0 - 1e-12) {
        q = ((1 - alpha) * a + alpha * b).normalized();
    } else {
        const double theta = std::acos(std::min(1.0, cos_theta));
        const double s = std::sin(theta);
        q = (std::sin((1 - alpha) * theta) / s) * a + (std::sin(alpha * theta) / s) * b;
        q.normalize();
    }
    Pose out;
    out.rotation = quat_to_rotation(q);
    out.translation = (1 - alpha) * p0.translation + alpha * p1.translation;
    return out;
}

std::optional<Vec2> project_point(const Camera& cam, const Vec3& world) {
    const Vec3 c = cam.pose.to_camera(world);
    if (c.z() <= 0) return std::nullopt;
    return Vec2(cam.intr.fx * c.x() / c.z() + cam.intr.cx, cam.intr.fy * c.y() / c.z() + cam.intr.cy);
}

} // namespace bt
