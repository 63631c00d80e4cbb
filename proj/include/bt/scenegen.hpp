// SPDX-License-Identifier: Apache-2.0
//
// Procedural toy clips whose ground truth is itself a Gaussian scene, and the
// JSON dataset manifest. World up is +z; cameras orbit the z axis.
#pragma once

#include "bt/btimer.hpp"
#include "bt/gaussians.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace bt {

enum class ClipKind { static_scene, dynamic_scene };
enum class MotionMix { any, linear, sinusoidal };

struct SceneGenConfig {
    int width = 64;
    int height = 64;
    int frames = 16;
    double focal_scale = 1.0;
    Cube cube;
    // Total Gaussians including the ground tiles.
    int min_gaussians = 20;
    int max_gaussians = 100;
    int ground_cells = 4; // ground is ground_cells^2 flat tiles
    int min_moving = 1;
    int max_moving = 5;
    MotionMix motion = MotionMix::any;
    // Linear motion covers |v| over the clip; sinusoids swing +-amplitude.
    double min_amplitude = 0.5;
    double max_amplitude = 1.5;
    double min_frequency = 0.5;
    double max_frequency = 1.0;
    double motion_scale = 1.0;
    double min_radius = 8.0;
    double max_radius = 12.0;
    double camera_height = 4.0;
    double arc = 1.0; // radians swept by the camera over the clip
    bool second_camera = false;
    double second_camera_offset = 0.35; // radians ahead of the first camera
    Vec3 background = Vec3::Zero();

    void validate() const;
    bool operator==(const SceneGenConfig&) const;
};

struct Trajectory {
    enum class Type { fixed, linear, sinusoidal };
    Type type = Type::fixed;
    Vec3 vector = Vec3::Zero(); // velocity over [0,1] or amplitude
    double frequency = 0.0;
    double phase = 0.0;

    // Displacement from the primitive's center. Linear motion is centered on
    // t = 0.5 so the center is the mean position.
    Vec3 offset(double t) const;
    // Largest |offset| over any t.
    double reach() const;
};

struct Primitive {
    Vec3 center = Vec3::Zero();
    std::vector<Gaussian> cluster; // mu relative to center
    Trajectory motion;
};

struct OrbitPath {
    double radius = 10.0;
    double height = 4.0;
    double start = 0.0;
    double arc = 1.0;
    Vec3 target = Vec3(0, 0, -1);

    Pose pose_at(double t, double angle_offset = 0.0) const;
};

struct SceneSpec {
    std::uint64_t seed = 0;
    ClipKind kind = ClipKind::static_scene;
    SceneGenConfig config;
    std::vector<Primitive> primitives;
    OrbitPath orbit;

    int views() const { return config.second_camera ? 2 : 1; }
    std::vector<Gaussian> gaussians_at(double t) const;
    Camera camera_at(double t, int view) const;
    std::vector<double> times() const;
    // Largest displacement of any primitive between consecutive frames.
    double max_frame_step() const;
};

struct ClipRecord {
    std::string id;
    std::optional<SceneSpec> spec; // absent for clips without generator info
    std::vector<std::vector<Frame>> views; // views[0] is the monocular context stream

    std::vector<double> times() const;
    std::size_t frame_count() const { return views.empty() ? 0 : views[0].size(); }
    GaussianScene gt_scene_at(double t) const;
};

SceneSpec make_spec(ClipKind kind, std::uint64_t seed, const SceneGenConfig& cfg);
// Renders every frame from the spec; images are snapped to the 8-bit grid so
// they survive PNG storage unchanged.
ClipRecord render_clip(const SceneSpec& spec, std::string id);
ClipRecord generate_static(std::uint64_t seed, const SceneGenConfig& cfg, std::string id = "static");
ClipRecord generate_dynamic(std::uint64_t seed, const SceneGenConfig& cfg, std::string id = "dynamic");
// Seed of clip i in a dataset generated from a base seed.
std::uint64_t clip_seed(std::uint64_t base, std::size_t index);

// Max abs difference between stored frames and fresh renders of the ground
// truth. Zero for a consistent clip.
double self_consistency_error(const ClipRecord& clip);

inline constexpr std::uint32_t kManifestVersion = 1;

struct ManifestFrame {
    std::string image; // relative to the manifest directory
    Pose pose;
    Intrinsics intr;
    double time = 0.0;
    int view = 0;
    bool operator==(const ManifestFrame&) const = default;
};

struct GeneratorInfo {
    ClipKind kind = ClipKind::static_scene;
    std::uint64_t seed = 0;
    SceneGenConfig config;
    bool operator==(const GeneratorInfo&) const = default;
};

struct ManifestClip {
    std::string id;
    std::vector<ManifestFrame> frames;
    std::optional<GeneratorInfo> generator;
    bool operator==(const ManifestClip&) const = default;
};

struct DatasetManifest {
    std::uint32_t version = kManifestVersion;
    Cube cube;
    std::vector<ManifestClip> clips;
    bool operator==(const DatasetManifest& o) const;
};

// Errors: MissingFileError, VersionError, FormatError (schema or ordering),
// ReferenceError (an image path that does not exist).
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);

// Writes dir/manifest.json and dir/images/*.png.
DatasetManifest write_dataset(const std::filesystem::path& dir, const std::vector<ClipRecord>& clips,
                              const Cube& cube);
struct Dataset {
    Cube cube;
    std::vector<ClipRecord> clips;
    const ClipRecord& clip(const std::string& id) const;
};
// Accepts a manifest path or a directory containing manifest.json.
Dataset load_dataset(const std::filesystem::path& path);

std::string to_string(ClipKind kind);
ClipKind clip_kind_from_string(const std::string& s);

} // namespace bt
