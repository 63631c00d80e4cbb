// SPDX-License-Identifier: Apache-2.0
#include "bt/config_json.hpp"

#include "bt/error.hpp"

#include <algorithm>
#include <cstring>

namespace bt {

void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        const bool known = std::any_of(allowed.begin(), allowed.end(),
                                       [&](const char* k) { return it.key() == k; });
        if (!known) throw ConfigError(where + ": unknown key '" + it.key() + "'");
    }
}

namespace {

template <typename T>
void get(const Json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

Json vec3(const Vec3& v) { return Json::array({v.x(), v.y(), v.z()}); }

void get_vec3(const Json& j, const char* key, Vec3& out, const std::string& where) {
    if (!j.contains(key)) return;
    const auto& a = j.at(key);
    if (!a.is_array() || a.size() != 3) throw ConfigError(where + "." + key + ": expected 3 numbers");
    for (int i = 0; i < 3; ++i) out[i] = a[i].get<double>();
}

const char* motion_name(MotionMix m) {
    switch (m) {
    case MotionMix::linear: return "linear";
    case MotionMix::sinusoidal: return "sinusoidal";
    default: return "any";
    }
}

} // namespace

MotionMix motion_mix_from_string(const std::string& s) {
    if (s == "any") return MotionMix::any;
    if (s == "linear") return MotionMix::linear;
    if (s == "sinusoidal") return MotionMix::sinusoidal;
    throw ConfigError("unknown motion mix '" + s + "'");
}

void to_json(Json& j, const Cube& c) {
    j = Json::array({c.lo.x(), c.lo.y(), c.lo.z(), c.hi.x(), c.hi.y(), c.hi.z()});
}

void from_json(const Json& j, Cube& c) {
    if (!j.is_array() || j.size() != 6) throw ConfigError("cube: expected 6 numbers");
    for (int i = 0; i < 3; ++i) {
        c.lo[i] = j[i].get<double>();
        c.hi[i] = j[i + 3].get<double>();
    }
    if (!(c.lo.array() < c.hi.array()).all()) throw ConfigError("cube: lo must be below hi");
}

void to_json(Json& j, const BackboneConfig& c) {
    j = Json{{"dim", c.dim},   {"blocks", c.blocks},   {"heads", c.heads},
             {"patch", c.patch}, {"qk_norm", c.qk_norm}, {"mlp_ratio", c.mlp_ratio}};
}

void from_json(const Json& j, BackboneConfig& c) {
    const std::string w = "backbone";
    check_keys(j, {"dim", "blocks", "heads", "patch", "qk_norm", "mlp_ratio"}, w);
    get(j, "dim", c.dim, w);
    get(j, "blocks", c.blocks, w);
    get(j, "heads", c.heads, w);
    get(j, "patch", c.patch, w);
    get(j, "qk_norm", c.qk_norm, w);
    get(j, "mlp_ratio", c.mlp_ratio, w);
}

void to_json(Json& j, const BTimerConfig& c) {
    j = Json{{"backbone", c.backbone}, {"max_context", c.max_context}, {"time_scale", c.time_scale}, {"cube", c.cube}};
}

void from_json(const Json& j, BTimerConfig& c) {
    const std::string w = "btimer";
    check_keys(j, {"backbone", "max_context", "time_scale", "cube"}, w);
    get(j, "backbone", c.backbone, w);
    get(j, "max_context", c.max_context, w);
    get(j, "time_scale", c.time_scale, w);
    if (j.contains("cube")) c.cube = j.at("cube").get<Cube>();
}

void to_json(Json& j, const NteConfig& c) {
    j = Json{{"backbone", c.backbone},
             {"max_context", c.max_context},
             {"time_scale", c.time_scale},
             {"k_nearest", c.k_nearest}};
}

void from_json(const Json& j, NteConfig& c) {
    const std::string w = "nte";
    check_keys(j, {"backbone", "max_context", "time_scale", "k_nearest"}, w);
    get(j, "backbone", c.backbone, w);
    get(j, "max_context", c.max_context, w);
    get(j, "time_scale", c.time_scale, w);
    get(j, "k_nearest", c.k_nearest, w);
}

void to_json(Json& j, const LossConfig& c) {
    j = Json{{"lambda_perceptual", c.lambda_perceptual},
             {"perceptual", c.perceptual == Perceptual::off ? "off" : "gradient_pyramid"},
             {"pyramid_levels", c.pyramid_levels}};
}

void from_json(const Json& j, LossConfig& c) {
    const std::string w = "loss";
    check_keys(j, {"lambda_perceptual", "perceptual", "pyramid_levels"}, w);
    get(j, "lambda_perceptual", c.lambda_perceptual, w);
    get(j, "pyramid_levels", c.pyramid_levels, w);
    if (j.contains("perceptual")) {
        const auto s = j.at("perceptual").get<std::string>();
        if (s == "off")
            c.perceptual = Perceptual::off;
        else if (s == "gradient_pyramid")
            c.perceptual = Perceptual::gradient_pyramid;
        else
            throw ConfigError("loss.perceptual: unknown value '" + s + "'");
    }
}

void to_json(Json& j, const SceneGenConfig& c) {
    j = Json{{"width", c.width},
             {"height", c.height},
             {"frames", c.frames},
             {"focal_scale", c.focal_scale},
             {"cube", c.cube},
             {"min_gaussians", c.min_gaussians},
             {"max_gaussians", c.max_gaussians},
             {"ground_cells", c.ground_cells},
             {"min_moving", c.min_moving},
             {"max_moving", c.max_moving},
             {"motion", motion_name(c.motion)},
             {"min_amplitude", c.min_amplitude},
             {"max_amplitude", c.max_amplitude},
             {"min_frequency", c.min_frequency},
             {"max_frequency", c.max_frequency},
             {"motion_scale", c.motion_scale},
             {"min_radius", c.min_radius},
             {"max_radius", c.max_radius},
             {"camera_height", c.camera_height},
             {"arc", c.arc},
             {"second_camera", c.second_camera},
             {"second_camera_offset", c.second_camera_offset},
             {"background", vec3(c.background)}};
}

void from_json(const Json& j, SceneGenConfig& c) {
    const std::string w = "scene";
    check_keys(j,
               {"width", "height", "frames", "focal_scale", "cube", "min_gaussians", "max_gaussians", "ground_cells",
                "min_moving", "max_moving", "motion", "min_amplitude", "max_amplitude", "min_frequency",
                "max_frequency", "motion_scale", "min_radius", "max_radius", "camera_height", "arc", "second_camera",
                "second_camera_offset", "background"},
               w);
    get(j, "width", c.width, w);
    get(j, "height", c.height, w);
    get(j, "frames", c.frames, w);
    get(j, "focal_scale", c.focal_scale, w);
    if (j.contains("cube")) c.cube = j.at("cube").get<Cube>();
    get(j, "min_gaussians", c.min_gaussians, w);
    get(j, "max_gaussians", c.max_gaussians, w);
    get(j, "ground_cells", c.ground_cells, w);
    get(j, "min_moving", c.min_moving, w);
    get(j, "max_moving", c.max_moving, w);
    if (j.contains("motion")) c.motion = motion_mix_from_string(j.at("motion").get<std::string>());
    get(j, "min_amplitude", c.min_amplitude, w);
    get(j, "max_amplitude", c.max_amplitude, w);
    get(j, "min_frequency", c.min_frequency, w);
    get(j, "max_frequency", c.max_frequency, w);
    get(j, "motion_scale", c.motion_scale, w);
    get(j, "min_radius", c.min_radius, w);
    get(j, "max_radius", c.max_radius, w);
    get(j, "camera_height", c.camera_height, w);
    get(j, "arc", c.arc, w);
    get(j, "second_camera", c.second_camera, w);
    get(j, "second_camera_offset", c.second_camera_offset, w);
    get_vec3(j, "background", c.background, w);
}

} // namespace bt
