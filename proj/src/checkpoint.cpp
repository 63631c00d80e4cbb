// SPDX-License-Identifier: Apache-2.0
#include "bt/checkpoint.hpp"

#include "bt/config_json.hpp"
#include "bt/error.hpp"
#include "bt/io.hpp"

#include <cstring>

namespace bt {

std::string to_string(ModelKind kind) { return kind == ModelKind::btimer ? "btimer" : "nte"; }

ModelKind model_kind_from_string(const std::string& s) {
    if (s == "btimer") return ModelKind::btimer;
    if (s == "nte") return ModelKind::nte;
    throw ConfigError("unknown model kind '" + s + "'");
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
    BinaryWriter w(path);
    w.bytes("BTCK", 4);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(c.kind));
    w.str(c.config);
    w.u64(c.params.size());
    for (const auto& p : c.params) {
        w.str(p.name);
        w.u32(static_cast<std::uint32_t>(p.shape.size()));
        for (auto d : p.shape) w.u64(static_cast<std::uint64_t>(d));
        if (static_cast<std::int64_t>(p.data.size()) != ad::numel(p.shape))
            throw ShapeError("checkpoint block " + p.name + " has the wrong number of values");
        w.bytes(p.data.data(), p.data.size() * sizeof(float));
    }
    w.u64(c.moments.size());
    for (const auto& m : c.moments) {
        if (m.m.size() != m.v.size()) throw ShapeError("checkpoint moments differ in size");
        w.u64(m.step);
        w.u64(m.m.size());
        w.bytes(m.m.data(), m.m.size() * sizeof(float));
        w.bytes(m.v.data(), m.v.size() * sizeof(float));
    }
    w.str(c.rng);
    w.u32(c.stage);
    w.u64(c.iteration);
    w.u64(c.global_iteration);
    w.close();
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    BinaryReader r(path);
    if (r.string(4) != "BTCK") throw FormatError("not a checkpoint (bad magic): " + path.string());
    const auto version = r.u32();
    if (version != kCheckpointVersion)
        throw VersionError("unsupported checkpoint version " + std::to_string(version) + ": " + path.string());
    Checkpoint c;
    const auto kind = r.u32();
    if (kind > 1) throw FormatError("unknown model kind in " + path.string());
    c.kind = static_cast<ModelKind>(kind);
    c.config = r.str();
    const auto blocks = r.u64();
    if (blocks > (1u << 20)) throw FormatError("implausible block count in " + path.string());
    for (std::uint64_t b = 0; b < blocks; ++b) {
        ParamBlock p;
        p.name = r.str();
        const auto rank = r.u32();
        if (rank > 8) throw FormatError("implausible rank in " + path.string());
        std::uint64_t n = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            const auto d = r.u64();
            if (d > (1u << 28)) throw FormatError("implausible extent in " + path.string());
            p.shape.push_back(static_cast<std::int64_t>(d));
            n *= d;
        }
        if (n > (1u << 28)) throw FormatError("implausible block size in " + path.string());
        p.data.resize(n);
        r.bytes(p.data.data(), n * sizeof(float));
        c.params.push_back(std::move(p));
    }
    const auto moments = r.u64();
    if (moments != 0 && moments != blocks) throw FormatError("moment count mismatch in " + path.string());
    for (std::uint64_t b = 0; b < moments; ++b) {
        Moments m;
        m.step = r.u64();
        const auto n = r.u64();
        if (n != c.params[b].data.size()) throw FormatError("moment size mismatch in " + path.string());
        m.m.resize(n);
        m.v.resize(n);
        r.bytes(m.m.data(), n * sizeof(float));
        r.bytes(m.v.data(), n * sizeof(float));
        c.moments.push_back(std::move(m));
    }
    c.rng = r.str();
    c.stage = r.u32();
    c.iteration = r.u64();
    c.global_iteration = r.u64();
    if (!r.at_end()) throw FormatError("trailing bytes in " + path.string());
    return c;
}

namespace {

template <class W>
std::vector<ParamBlock> blocks_of(W& w) {
    std::vector<ParamBlock> out;
    w.visit([&](const std::string& name, ad::Tensor& p) {
        const auto v = p.values();
        out.push_back({name, p.shape(), std::vector<float>(v.begin(), v.end())});
    });
    return out;
}

template <class W>
void copy_into(const Checkpoint& c, W& w) {
    std::size_t i = 0;
    w.visit([&](const std::string& name, ad::Tensor& p) {
        if (i >= c.params.size()) throw FormatError("checkpoint is missing parameter " + name);
        const auto& b = c.params[i++];
        if (b.name != name || b.shape != p.shape())
            throw FormatError("checkpoint block " + b.name + " " + ad::to_string(b.shape) + " does not match " + name +
                              " " + ad::to_string(p.shape()));
        if (p.precision() == ad::Precision::f32) {
            auto d = p.mutable_data<float>();
            std::memcpy(d.data(), b.data.data(), b.data.size() * sizeof(float));
        } else {
            auto d = p.mutable_data<double>();
            for (std::size_t k = 0; k < b.data.size(); ++k) d[k] = b.data[k];
        }
    });
    if (i != c.params.size()) throw FormatError("checkpoint has extra parameter blocks");
}

void expect_kind(const Checkpoint& c, ModelKind k) {
    if (c.kind != k)
        throw KindMismatchError("checkpoint holds a " + to_string(c.kind) + " model, expected " + to_string(k));
}

} // namespace

Checkpoint capture(BTimerWeights& w, const BTimerConfig& cfg) {
    Checkpoint c;
    c.kind = ModelKind::btimer;
    c.config = Json(cfg).dump();
    c.params = blocks_of(w);
    return c;
}

Checkpoint capture(NteWeights& w, const NteConfig& cfg) {
    Checkpoint c;
    c.kind = ModelKind::nte;
    c.config = Json(cfg).dump();
    c.params = blocks_of(w);
    return c;
}

BTimerConfig btimer_config_of(const Checkpoint& c) {
    expect_kind(c, ModelKind::btimer);
    try {
        return Json::parse(c.config).get<BTimerConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint config: ") + e.what());
    }
}

NteConfig nte_config_of(const Checkpoint& c) {
    expect_kind(c, ModelKind::nte);
    try {
        return Json::parse(c.config).get<NteConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint config: ") + e.what());
    }
}

void restore(const Checkpoint& c, BTimerWeights& w, const BTimerConfig& cfg) {
    if (!(btimer_config_of(c) == cfg)) throw ConfigError("checkpoint config differs from the requested config");
    copy_into(c, w);
}

void restore(const Checkpoint& c, NteWeights& w, const NteConfig& cfg) {
    if (!(nte_config_of(c) == cfg)) throw ConfigError("checkpoint config differs from the requested config");
    copy_into(c, w);
}

BTimerWeights load_btimer(const Checkpoint& c) {
    const auto cfg = btimer_config_of(c);
    std::mt19937_64 rng(0);
    BTimerWeights w(cfg, rng);
    copy_into(c, w);
    return w;
}

NteWeights load_nte(const Checkpoint& c) {
    const auto cfg = nte_config_of(c);
    std::mt19937_64 rng(0);
    NteWeights w(cfg, rng);
    copy_into(c, w);
    return w;
}

} // namespace bt
