// SPDX-License-Identifier: Apache-2.0
#include "bt/scenegen.hpp"

#include "bt/config_json.hpp"
#include "bt/error.hpp"
#include "bt/image.hpp"
#include "bt/io.hpp"
#include "bt/rasterizer.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <random>

namespace bt {

namespace fs = std::filesystem;

void SceneGenConfig::validate() const {
    if (width < 1 || height < 1) throw ConfigError("scene: image size must be positive");
    if (frames < 2) throw ConfigError("scene: a clip needs at least 2 frames");
    if (!(focal_scale > 0)) throw ConfigError("scene: focal_scale must be positive");
    if (!(cube.lo.array() < cube.hi.array()).all()) throw ConfigError("scene: empty cube");
    if (ground_cells < 0) throw ConfigError("scene: ground_cells must be non-negative");
    if (min_gaussians <= ground_cells * ground_cells || max_gaussians < min_gaussians)
        throw ConfigError("scene: gaussian count range must leave room for objects above the ground");
    if (min_moving < 0 || max_moving < min_moving) throw ConfigError("scene: bad moving-cluster range");
    if (min_amplitude < 0 || max_amplitude < min_amplitude) throw ConfigError("scene: bad amplitude range");
    if (min_frequency < 0 || max_frequency < min_frequency) throw ConfigError("scene: bad frequency range");
    if (!(motion_scale >= 0)) throw ConfigError("scene: motion_scale must be non-negative");
    if (!(min_radius > 0) || max_radius < min_radius) throw ConfigError("scene: bad camera radius range");
    if (!std::isfinite(arc) || !std::isfinite(camera_height) || !std::isfinite(second_camera_offset))
        throw ConfigError("scene: camera path must be finite");
}

bool SceneGenConfig::operator==(const SceneGenConfig& o) const {
    return width == o.width && height == o.height && frames == o.frames && focal_scale == o.focal_scale &&
           cube.lo == o.cube.lo && cube.hi == o.cube.hi && min_gaussians == o.min_gaussians &&
           max_gaussians == o.max_gaussians && ground_cells == o.ground_cells && min_moving == o.min_moving &&
           max_moving == o.max_moving && motion == o.motion && min_amplitude == o.min_amplitude &&
           max_amplitude == o.max_amplitude && min_frequency == o.min_frequency &&
           max_frequency == o.max_frequency && motion_scale == o.motion_scale && min_radius == o.min_radius &&
           max_radius == o.max_radius && camera_height == o.camera_height && arc == o.arc &&
           second_camera == o.second_camera && second_camera_offset == o.second_camera_offset &&
           background == o.background;
}

Vec3 Trajectory::offset(double t) const {
    switch (type) {
    case Type::linear: return vector * (t - 0.5);
    case Type::sinusoidal: return vector * std::sin(2.0 * std::numbers::pi * frequency * t + phase);
    default: return Vec3::Zero();
    }
}

double Trajectory::reach() const {
    switch (type) {
    case Type::linear: return 0.5 * vector.norm();
    case Type::sinusoidal: return vector.norm();
    default: return 0.0;
    }
}

Pose OrbitPath::pose_at(double t, double angle_offset) const {
    const double a = start + arc * t + angle_offset;
    const Vec3 eye(radius * std::cos(a), radius * std::sin(a), height);
    return Pose::look_at(eye, target, Vec3(0, 0, 1));
}

std::vector<Gaussian> SceneSpec::gaussians_at(double t) const {
    std::vector<Gaussian> out;
    for (const auto& p : primitives) {
        const Vec3 base = p.center + p.motion.offset(t);
        for (auto g : p.cluster) {
            g.mu = base + g.mu;
            out.push_back(g);
        }
    }
    return out;
}

Camera SceneSpec::camera_at(double t, int view) const {
    if (view < 0 || view >= views()) throw ContractError("camera_at: no such view");
    return {orbit.pose_at(t, view == 1 ? config.second_camera_offset : 0.0),
            Intrinsics::centered(config.width, config.height, config.focal_scale)};
}

std::vector<double> SceneSpec::times() const {
    std::vector<double> t(static_cast<std::size_t>(config.frames));
    for (int i = 0; i < config.frames; ++i) t[i] = static_cast<double>(i) / (config.frames - 1);
    return t;
}

double SceneSpec::max_frame_step() const {
    const auto t = times();
    double m = 0.0;
    for (const auto& p : primitives)
        for (std::size_t i = 0; i + 1 < t.size(); ++i)
            m = std::max(m, (p.motion.offset(t[i + 1]) - p.motion.offset(t[i])).norm());
    return m;
}

std::vector<double> ClipRecord::times() const {
    std::vector<double> t;
    if (!views.empty())
        for (const auto& f : views[0]) t.push_back(f.time);
    return t;
}

GaussianScene ClipRecord::gt_scene_at(double t) const {
    if (!spec) throw ContractError("clip " + id + " has no ground truth");
    GaussianScene s;
    s.gaussians = spec->gaussians_at(t);
    s.bullet_time = t;
    return s;
}

namespace {

class Sampler {
public:
    explicit Sampler(std::uint64_t seed) : rng_(seed) {}
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
    int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
    double normal() { return std::normal_distribution<double>(0.0, 1.0)(rng_); }
    Vec3 color() { return Vec3(uniform(0.1, 0.95), uniform(0.1, 0.95), uniform(0.1, 0.95)); }
    Vec4 rotation() {
        Vec4 q(normal(), normal(), normal(), normal());
        q.normalize();
        return q[0] < 0 ? Vec4(-q) : q;
    }

private:
    std::mt19937_64 rng_;
};

// Shifts the center and shrinks the motion until every position stays
// `margin` inside the cube.
void fit_in_cube(Primitive& p, const Cube& cube, double margin) {
    Vec3 extent = Vec3::Zero();
    for (const auto& g : p.cluster) extent = extent.cwiseMax(g.mu.cwiseAbs());
    Vec3 reach = Vec3::Zero();
    if (p.motion.type == Trajectory::Type::linear) reach = 0.5 * p.motion.vector.cwiseAbs();
    if (p.motion.type == Trajectory::Type::sinusoidal) reach = p.motion.vector.cwiseAbs();
    for (int a = 0; a < 3; ++a) {
        const double lo = cube.lo[a] + margin + extent[a], hi = cube.hi[a] - margin - extent[a];
        if (2 * reach[a] > hi - lo) {
            const double s = 0.5 * (hi - lo) / reach[a];
            p.motion.vector *= s;
            reach *= s;
        }
    }
    for (int a = 0; a < 3; ++a) {
        const double lo = cube.lo[a] + margin + extent[a] + reach[a], hi = cube.hi[a] - margin - extent[a] - reach[a];
        p.center[a] = std::clamp(p.center[a], lo, hi);
    }
}

} // namespace

SceneSpec make_spec(ClipKind kind, std::uint64_t seed, const SceneGenConfig& cfg) {
    cfg.validate();
    Sampler s(seed);
    SceneSpec spec;
    spec.seed = seed;
    spec.kind = kind;
    spec.config = cfg;

    const Vec3 mid = 0.5 * (cfg.cube.lo + cfg.cube.hi);
    const Vec3 half = 0.5 * (cfg.cube.hi - cfg.cube.lo);
    spec.orbit.radius = s.uniform(cfg.min_radius, cfg.max_radius);
    spec.orbit.start = s.uniform(0.0, 2.0 * std::numbers::pi);
    spec.orbit.arc = cfg.arc;
    spec.orbit.height = mid.z() + cfg.camera_height;
    spec.orbit.target = mid - Vec3(0, 0, 0.2 * half.z());

    // Checkered ground of flat tiles.
    const int g = cfg.ground_cells;
    const double ground_z = mid.z() - 0.7 * half.z();
    const Vec3 tone_a = s.color(), tone_b = s.color();
    if (g > 0) {
        Primitive ground;
        ground.center = Vec3(mid.x(), mid.y(), ground_z);
        const double cell_x = 1.6 * half.x() / g, cell_y = 1.6 * half.y() / g;
        for (int i = 0; i < g; ++i)
            for (int j = 0; j < g; ++j) {
                Gaussian tile;
                tile.mu = Vec3((i + 0.5) * cell_x - 0.8 * half.x(), (j + 0.5) * cell_y - 0.8 * half.y(), 0.0);
                const Vec3 base = ((i + j) % 2) ? tone_a : tone_b;
                tile.color = (base + Vec3(s.uniform(-0.05, 0.05), s.uniform(-0.05, 0.05), s.uniform(-0.05, 0.05)))
                                 .cwiseMax(0.0)
                                 .cwiseMin(1.0);
                tile.opacity = 0.9;
                tile.scale = Vec3(0.35 * cell_x, 0.35 * cell_y, 0.05);
                ground.cluster.push_back(tile);
            }
        spec.primitives.push_back(std::move(ground));
    }

    int remaining = s.integer(cfg.min_gaussians, cfg.max_gaussians) - g * g;
    const int moving = s.integer(cfg.min_moving, cfg.max_moving);
    int cluster_index = 0;
    while (remaining > 0) {
        Primitive p;
        const int size = std::min(s.integer(1, 4), remaining);
        remaining -= size;
        p.center = Vec3(mid.x() + s.uniform(-0.6, 0.6) * half.x(), mid.y() + s.uniform(-0.6, 0.6) * half.y(),
                        s.uniform(ground_z + 0.1 * half.z(), mid.z() + 0.3 * half.z()));
        for (int k = 0; k < size; ++k) {
            Gaussian m;
            m.mu = Vec3(s.normal(), s.normal(), s.normal()) * 0.3;
            if (m.mu.norm() > 0.5) m.mu *= 0.5 / m.mu.norm();
            m.color = s.color();
            m.opacity = s.uniform(0.6, 0.95);
            m.scale = Vec3(s.uniform(0.15, 0.45), s.uniform(0.15, 0.45), s.uniform(0.15, 0.45));
            m.rotation = s.rotation();
            p.cluster.push_back(m);
        }
        // Motion parameters are drawn for every cluster so static and dynamic
        // clips from one seed share their layout.
        const bool sinusoid = cfg.motion == MotionMix::sinusoidal ||
                              (cfg.motion == MotionMix::any && s.uniform(0.0, 1.0) < 0.5);
        Vec3 dir(s.normal(), s.normal(), 0.3 * s.normal());
        dir.normalize();
        const double magnitude = s.uniform(cfg.min_amplitude, cfg.max_amplitude) * cfg.motion_scale;
        const double frequency = s.uniform(cfg.min_frequency, cfg.max_frequency);
        const double phase = s.uniform(0.0, 2.0 * std::numbers::pi);
        if (kind == ClipKind::dynamic_scene && cluster_index < moving) {
            p.motion.type = sinusoid ? Trajectory::Type::sinusoidal : Trajectory::Type::linear;
            p.motion.vector = dir * magnitude;
            p.motion.frequency = frequency;
            p.motion.phase = phase;
        }
        fit_in_cube(p, cfg.cube, 0.25);
        spec.primitives.push_back(std::move(p));
        ++cluster_index;
    }
    return spec;
}

ClipRecord render_clip(const SceneSpec& spec, std::string id) {
    ClipRecord clip;
    clip.id = std::move(id);
    clip.spec = spec;
    const auto times = spec.times();
    const auto bounds = DecodeBounds::from_cube(spec.config.cube);
    clip.views.resize(static_cast<std::size_t>(spec.views()));
    for (int v = 0; v < spec.views(); ++v)
        for (double t : times) {
            const auto cam = spec.camera_at(t, v);
            const auto scene = spec.gaussians_at(t);
            const auto settings = RenderSettings::for_camera(cam.intr, bounds, spec.config.background);
            Frame f;
            f.image = rasterize(scene, cam, settings).image.quantized();
            f.pose = cam.pose;
            f.intr = cam.intr;
            f.time = t;
            clip.views[v].push_back(std::move(f));
        }
    return clip;
}

ClipRecord generate_static(std::uint64_t seed, const SceneGenConfig& cfg, std::string id) {
    return render_clip(make_spec(ClipKind::static_scene, seed, cfg), std::move(id));
}

ClipRecord generate_dynamic(std::uint64_t seed, const SceneGenConfig& cfg, std::string id) {
    return render_clip(make_spec(ClipKind::dynamic_scene, seed, cfg), std::move(id));
}

std::uint64_t clip_seed(std::uint64_t base, std::size_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(base), static_cast<std::uint32_t>(base >> 32),
                      static_cast<std::uint32_t>(index)};
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

double self_consistency_error(const ClipRecord& clip) {
    if (!clip.spec) throw ContractError("clip " + clip.id + " has no ground truth");
    const auto fresh = render_clip(*clip.spec, clip.id);
    if (fresh.views.size() != clip.views.size()) return INFINITY;
    double m = 0.0;
    for (std::size_t v = 0; v < clip.views.size(); ++v) {
        if (fresh.views[v].size() != clip.views[v].size()) return INFINITY;
        for (std::size_t i = 0; i < clip.views[v].size(); ++i) {
            const auto& a = clip.views[v][i].image.data;
            const auto& b = fresh.views[v][i].image.data;
            if (a.size() != b.size()) return INFINITY;
            for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b[k]));
        }
    }
    return m;
}

std::string to_string(ClipKind kind) { return kind == ClipKind::static_scene ? "static" : "dynamic"; }

ClipKind clip_kind_from_string(const std::string& s) {
    if (s == "static") return ClipKind::static_scene;
    if (s == "dynamic") return ClipKind::dynamic_scene;
    throw ConfigError("unknown clip kind '" + s + "'");
}

bool DatasetManifest::operator==(const DatasetManifest& o) const {
    return version == o.version && cube.lo == o.cube.lo && cube.hi == o.cube.hi && clips == o.clips;
}

// ---- manifest ----

namespace {

Json pose_json(const Pose& p) {
    Json a = Json::array();
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) a.push_back(p.rotation(r, c));
        a.push_back(p.translation[r]);
    }
    return a;
}

Pose pose_from_json(const Json& a) {
    if (!a.is_array() || a.size() != 12) throw FormatError("pose_3x4 must hold 12 numbers");
    Pose p;
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) p.rotation(r, c) = a[r * 4 + c].get<double>();
        p.translation[r] = a[r * 4 + 3].get<double>();
    }
    return p;
}

Json intr_json(const Intrinsics& k) { return Json::array({k.fx, k.fy, k.cx, k.cy, k.width, k.height}); }

Intrinsics intr_from_json(const Json& a) {
    if (!a.is_array() || a.size() != 6) throw FormatError("intrinsics must hold 6 numbers");
    Intrinsics k;
    k.fx = a[0].get<double>();
    k.fy = a[1].get<double>();
    k.cx = a[2].get<double>();
    k.cy = a[3].get<double>();
    k.width = a[4].get<int>();
    k.height = a[5].get<int>();
    return k;
}

const Json& field(const Json& j, const char* key, const std::string& where) {
    if (!j.is_object() || !j.contains(key)) throw FormatError(where + ": missing field '" + key + "'");
    return j.at(key);
}

} // namespace

void write_manifest(const DatasetManifest& m, const fs::path& path) {
    Json clips = Json::array();
    for (const auto& c : m.clips) {
        Json frames = Json::array();
        for (const auto& f : c.frames)
            frames.push_back(Json{{"image", f.image},
                                  {"pose_3x4", pose_json(f.pose)},
                                  {"intrinsics", intr_json(f.intr)},
                                  {"time", f.time},
                                  {"view", f.view}});
        Json clip{{"id", c.id}, {"frames", std::move(frames)}};
        if (c.generator)
            clip["generator"] = Json{{"kind", to_string(c.generator->kind)},
                                     {"seed", c.generator->seed},
                                     {"config", c.generator->config}};
        clips.push_back(std::move(clip));
    }
    Json j{{"version", m.version}, {"cube", m.cube}, {"clips", std::move(clips)}};
    // nlohmann prints doubles with 17 significant digits, so poses round-trip exactly.
    write_text_file(path, j.dump(1) + "\n");
}

DatasetManifest read_manifest(const fs::path& path) {
    const std::string text = read_text_file(path);
    Json j;
    try {
        j = Json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError("manifest " + path.string() + ": " + e.what());
    }
    const std::string where = "manifest " + path.string();
    const auto& version = field(j, "version", where);
    if (!version.is_number_unsigned()) throw FormatError(where + ": version must be an unsigned integer");
    DatasetManifest m;
    m.version = version.get<std::uint32_t>();
    if (m.version != kManifestVersion)
        throw VersionError(fmt::format("{}: unsupported version {} (expected {})", where, m.version, kManifestVersion));
    const fs::path root = path.parent_path();
    try {
        m.cube = field(j, "cube", where).get<Cube>();
        const auto& clips = field(j, "clips", where);
        if (!clips.is_array()) throw FormatError(where + ": clips must be an array");
        for (const auto& cj : clips) {
            ManifestClip c;
            c.id = field(cj, "id", where).get<std::string>();
            const std::string cw = where + " clip " + c.id;
            if (cj.contains("generator")) {
                const auto& g = cj.at("generator");
                GeneratorInfo info;
                info.kind = clip_kind_from_string(field(g, "kind", cw).get<std::string>());
                info.seed = field(g, "seed", cw).get<std::uint64_t>();
                info.config = field(g, "config", cw).get<SceneGenConfig>();
                c.generator = info;
            }
            const auto& frames = field(cj, "frames", cw);
            if (!frames.is_array() || frames.empty()) throw FormatError(cw + ": frames must be a non-empty array");
            std::map<int, double> last_time;
            for (const auto& fj : frames) {
                ManifestFrame f;
                f.image = field(fj, "image", cw).get<std::string>();
                f.pose = pose_from_json(field(fj, "pose_3x4", cw));
                f.intr = intr_from_json(field(fj, "intrinsics", cw));
                f.time = field(fj, "time", cw).get<double>();
                f.view = fj.value("view", 0);
                if (!std::isfinite(f.time)) throw FormatError(cw + ": non-finite timestamp");
                auto it = last_time.find(f.view);
                if (it != last_time.end() && !(f.time > it->second))
                    throw FormatError(cw + ": timestamps must be strictly increasing");
                last_time[f.view] = f.time;
                c.frames.push_back(std::move(f));
            }
            m.clips.push_back(std::move(c));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(where + ": " + e.what());
    } catch (const ConfigError& e) {
        throw FormatError(where + ": " + e.what());
    }
    for (const auto& c : m.clips)
        for (const auto& f : c.frames) {
            const fs::path img = root / f.image;
            if (!fs::exists(img))
                throw ReferenceError(where + ": clip " + c.id + " references missing image " + img.string(),
                                     img.string());
        }
    return m;
}

DatasetManifest write_dataset(const fs::path& dir, const std::vector<ClipRecord>& clips, const Cube& cube) {
    try {
        fs::create_directories(dir / "images");
    } catch (const fs::filesystem_error& e) {
        throw IoError("cannot create " + (dir / "images").string() + ": " + e.what());
    }
    DatasetManifest m;
    m.cube = cube;
    for (const auto& clip : clips) {
        ManifestClip mc;
        mc.id = clip.id;
        if (clip.spec) mc.generator = GeneratorInfo{clip.spec->kind, clip.spec->seed, clip.spec->config};
        for (std::size_t v = 0; v < clip.views.size(); ++v)
            for (std::size_t i = 0; i < clip.views[v].size(); ++i) {
                const auto& f = clip.views[v][i];
                const std::string rel = fmt::format("images/{}_v{}_{:04d}.png", clip.id, v, i);
                write_png(dir / rel, f.image);
                mc.frames.push_back({rel, f.pose, f.intr, f.time, static_cast<int>(v)});
            }
        m.clips.push_back(std::move(mc));
    }
    write_manifest(m, dir / "manifest.json");
    return m;
}

const ClipRecord& Dataset::clip(const std::string& id) const {
    for (const auto& c : clips)
        if (c.id == id) return c;
    throw ContractError("dataset has no clip '" + id + "'");
}

Dataset load_dataset(const fs::path& path) {
    const fs::path manifest_path = fs::is_directory(path) ? path / "manifest.json" : path;
    const auto m = read_manifest(manifest_path);
    const fs::path root = manifest_path.parent_path();
    Dataset d;
    d.cube = m.cube;
    for (const auto& mc : m.clips) {
        ClipRecord c;
        c.id = mc.id;
        if (mc.generator) c.spec = make_spec(mc.generator->kind, mc.generator->seed, mc.generator->config);
        for (const auto& f : mc.frames) {
            if (f.view < 0 || f.view > 1) throw FormatError("clip " + mc.id + ": view must be 0 or 1");
            if (static_cast<int>(c.views.size()) <= f.view) c.views.resize(static_cast<std::size_t>(f.view) + 1);
            Frame frame;
            frame.image = read_png(root / f.image);
            frame.pose = f.pose;
            frame.intr = f.intr;
            frame.time = f.time;
            if (frame.image.width != f.intr.width || frame.image.height != f.intr.height)
                throw FormatError("clip " + mc.id + ": image " + f.image + " does not match its intrinsics");
            c.views[f.view].push_back(std::move(frame));
        }
        for (const auto& v : c.views)
            if (v.size() != c.views[0].size())
                throw FormatError("clip " + mc.id + ": views have different frame counts");
        d.clips.push_back(std::move(c));
    }
    return d;
}

} // namespace bt
