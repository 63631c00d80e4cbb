// SPDX-License-Identifier: Apache-2.0
#include "bt/trainer.hpp"

#include "bt/config_json.hpp"
#include "bt/error.hpp"
#include "bt/io.hpp"
#include "bt/rasterizer.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace bt {

namespace fs = std::filesystem;

double lr_at(long iter, long total, double initial, double warmup_fraction) {
    if (iter < 0 || iter > total) throw ContractError("lr_at: iteration outside [0, total]");
    if (total == 0) return 0.0;
    double lr = initial * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(iter) / total));
    const long warmup = static_cast<long>(std::ceil(warmup_fraction * static_cast<double>(total)));
    if (warmup > 0 && iter < warmup) lr *= static_cast<double>(iter) / warmup;
    return lr;
}

std::string to_string(StageName s) {
    switch (s) {
    case StageName::stage1_static: return "stage1_static";
    case StageName::stage2_dynamic_cotrain: return "stage2_dynamic_cotrain";
    default: return "stage3_long_context";
    }
}

StageName stage_name_from_string(const std::string& s) {
    if (s == "stage1_static") return StageName::stage1_static;
    if (s == "stage2_dynamic_cotrain") return StageName::stage2_dynamic_cotrain;
    if (s == "stage3_long_context") return StageName::stage3_long_context;
    throw ConfigError("unknown stage name '" + s + "'");
}

void CurriculumStage::validate() const {
    if (resolution < 0) throw ConfigError("stage: resolution must be non-negative");
    if (context_count < 1) throw ConfigError("stage: context_count must be positive");
    if (min_context_count < 0 || min_context_count > context_count)
        throw ConfigError("stage: min_context_count must lie in [0, context_count]");
    if (iterations < 0) throw ConfigError("stage: iterations must be non-negative");
    if (!(initial_lr >= 0)) throw ConfigError("stage: initial_lr must be non-negative");
    if (!(static_fraction >= 0 && static_fraction <= 1)) throw ConfigError("stage: static_fraction outside [0,1]");
    if (batch < 1) throw ConfigError("stage: batch must be positive");
    if (!(p_interp >= 0 && p_interp <= 1)) throw ConfigError("stage: p_interp outside [0,1]");
}

std::vector<CurriculumStage> default_plan() {
    CurriculumStage low{StageName::stage1_static, 32, 4, 0, 2000, 4e-4, 0.0, 8, 0.3};
    CurriculumStage high{StageName::stage1_static, 64, 4, 0, 2000, 4e-4, 0.0, 8, 0.3};
    CurriculumStage cotrain{StageName::stage2_dynamic_cotrain, 0, 4, 0, 2000, 2e-4, 0.5, 8, 0.3};
    CurriculumStage longer{StageName::stage3_long_context, 0, 8, 4, 1000, 1e-4, 0.5, 8, 0.3};
    return {low, high, cotrain, longer};
}

// ---- data ----

namespace {

bool uses_static(const CurriculumStage& s) {
    return s.name == StageName::stage1_static || s.static_fraction > 0.0;
}
bool uses_dynamic(const CurriculumStage& s) {
    return s.name != StageName::stage1_static && s.static_fraction < 1.0;
}

int stage_factor(const CurriculumStage& stage, const ClipRecord& clip, int patch) {
    if (clip.views.empty() || clip.views[0].empty()) throw ConfigError("clip " + clip.id + " has no frames");
    const auto& f = clip.views[0][0];
    const int w = f.image.width, h = f.image.height;
    const int res = stage.resolution == 0 ? w : stage.resolution;
    if (res > w || w % res != 0 || h % (w / res) != 0)
        throw ConfigError(fmt::format("clip {}: {}x{} frames cannot be reduced to width {}", clip.id, w, h, res));
    const int factor = w / res;
    if ((w / factor) % patch != 0 || (h / factor) % patch != 0)
        throw ConfigError(fmt::format("clip {}: training size {}x{} is not a multiple of the patch size {}", clip.id,
                                      w / factor, h / factor, patch));
    if (static_cast<int>(clip.views[0].size()) < stage.context_count)
        throw ConfigError(fmt::format("clip {} has {} frames; the stage needs {} context frames", clip.id,
                                      clip.views[0].size(), stage.context_count));
    return factor;
}

void check_stage_data(const CurriculumStage& stage, const TrainingData& data, int patch) {
    stage.validate();
    if (uses_static(stage) && data.static_clips.empty())
        throw ConfigError(to_string(stage.name) + " needs static clips but none were given");
    if (uses_dynamic(stage) && data.dynamic_clips.empty())
        throw ConfigError(to_string(stage.name) + " needs dynamic clips but none were given");
    if (uses_static(stage))
        for (const auto& c : data.static_clips) stage_factor(stage, c, patch);
    if (uses_dynamic(stage))
        for (const auto& c : data.dynamic_clips) stage_factor(stage, c, patch);
}

Image box_filter(const Image& in, int f) {
    Image out(in.width / f, in.height / f);
    const double norm = 1.0 / (f * f);
    for (int y = 0; y < out.height; ++y)
        for (int x = 0; x < out.width; ++x)
            for (int c = 0; c < 3; ++c) {
                double s = 0.0;
                for (int dy = 0; dy < f; ++dy)
                    for (int dx = 0; dx < f; ++dx) s += in.at(x * f + dx, y * f + dy, c);
                out.at(x, y, c) = s * norm;
            }
    return out;
}

} // namespace

ClipRecord downsample_clip(const ClipRecord& clip, int factor) {
    if (factor < 1) throw ContractError("downsample_clip: factor must be positive");
    if (factor == 1) return clip;
    ClipRecord out;
    out.id = clip.id;
    out.spec = clip.spec;
    for (const auto& view : clip.views) {
        std::vector<Frame> frames;
        for (const auto& f : view) {
            Frame g;
            g.image = box_filter(f.image, factor);
            g.pose = f.pose;
            g.intr = f.intr;
            g.intr.fx /= factor;
            g.intr.fy /= factor;
            g.intr.cx /= factor;
            g.intr.cy /= factor;
            g.intr.width = g.image.width;
            g.intr.height = g.image.height;
            g.time = f.time;
            frames.push_back(std::move(g));
        }
        out.views.push_back(std::move(frames));
    }
    return out;
}

StageData prepare_stage_data(const CurriculumStage& stage, const TrainingData& data, int patch) {
    check_stage_data(stage, data, patch);
    StageData out;
    if (uses_static(stage))
        for (const auto& c : data.static_clips) out.static_clips.push_back(downsample_clip(c, stage_factor(stage, c, patch)));
    if (uses_dynamic(stage))
        for (const auto& c : data.dynamic_clips)
            out.dynamic_clips.push_back(downsample_clip(c, stage_factor(stage, c, patch)));
    return out;
}

ContextSet TrainingSample::context() const {
    ContextSet ctx;
    for (int i : supervision.context_indices) ctx.frames.push_back(clip->views[0][i]);
    ctx.bullet_time = supervision.bullet_time;
    return ctx;
}

const Frame& TrainingSample::target() const { return clip->views[supervision.target_view][supervision.target_index]; }

TrainingSample draw_sample(const CurriculumStage& stage, const StageData& data, ModelKind kind, std::mt19937_64& rng) {
    const bool have_static = !data.static_clips.empty(), have_dynamic = !data.dynamic_clips.empty();
    if (!have_static && !have_dynamic) throw ContractError("draw_sample: no clips");
    bool pick_static = have_static;
    if (have_static && have_dynamic)
        pick_static = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < stage.static_fraction;
    const auto& pool = pick_static ? data.static_clips : data.dynamic_clips;
    const auto index = std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng);
    TrainingSample s;
    s.clip = &pool[index];
    const double p = kind == ModelKind::nte ? 1.0 : stage.p_interp;
    int count = stage.context_count;
    if (stage.smallest_context() < count)
        count = std::uniform_int_distribution<int>(stage.smallest_context(), count)(rng);
    s.supervision = sample_supervision(s.clip->times(), count, p, rng,
                                       static_cast<int>(s.clip->views.size()));
    // The enhancer only ever synthesizes frames on the context trajectory.
    if (kind == ModelKind::nte) s.supervision.target_view = 0;
    return s;
}

std::string log_csv_header() { return "iter,lr,loss,psnr"; }

std::string log_csv_row(const LogRow& r) { return fmt::format("{},{:.17g},{:.17g},{:.17g}", r.iter, r.lr, r.loss, r.psnr); }

// ---- trainer ----

struct Trainer::Impl {
    struct Param {
        std::string name;
        ad::Tensor tensor;
        bool time = false;
    };

    ModelKind kind = ModelKind::btimer;
    BTimerWeights* bw = nullptr;
    BTimerConfig bcfg;
    NteWeights* nw = nullptr;
    NteConfig ncfg;
    TrainerConfig tc;
    std::vector<Param> params;
    std::vector<Moments> moments;
    std::mt19937_64 rng;
    std::uint32_t stage = 0;
    long iteration = 0;
    long global = 0;

    int patch() const { return kind == ModelKind::btimer ? bcfg.backbone.patch : ncfg.backbone.patch; }

    template <class W>
    void init(W& w) {
        std::set<std::string> time_names;
        w.visit_time([&](const std::string& name, ad::Tensor&) { time_names.insert(name); });
        w.visit([&](const std::string& name, ad::Tensor& p) {
            params.push_back({name, p, time_names.count(name) != 0});
            Moments m;
            m.m.assign(static_cast<std::size_t>(p.numel()), 0.0f);
            m.v.assign(static_cast<std::size_t>(p.numel()), 0.0f);
            moments.push_back(std::move(m));
        });
        rng.seed(tc.seed);
    }

    // Returns (loss, rendered image).
    std::pair<ad::Tensor, ad::Tensor> forward(const TrainingSample& s, bool use_time) const {
        const Frame& tgt = s.target();
        ad::Tensor image;
        if (kind == ModelKind::btimer) {
            const auto pred = predict(s.context(), *bw, bcfg, use_time);
            const Vec3 bg = s.clip->spec ? s.clip->spec->config.background : Vec3::Zero();
            const auto settings = RenderSettings::for_camera(tgt.intr, bcfg.bounds(), bg);
            image = render(pred.packed, tgt.camera(), settings);
        } else {
            image = synthesize(s.context().frames, TargetQuery{tgt.pose, tgt.intr, tgt.time}, *nw, ncfg, NteMode::joint,
                               use_time);
        }
        return {rgb_loss(image, tgt.image.tensor(), tc.loss), image};
    }

    Checkpoint capture_state() const {
        Checkpoint c = kind == ModelKind::btimer ? capture(*bw, bcfg) : capture(*nw, ncfg);
        c.moments = moments;
        std::ostringstream os;
        os << rng;
        c.rng = os.str();
        c.stage = stage;
        c.iteration = static_cast<std::uint64_t>(iteration);
        c.global_iteration = static_cast<std::uint64_t>(global);
        return c;
    }

    [[noreturn]] void fail(const std::string& why) {
        const std::string msg = fmt::format("{} at stage {} iteration {}", why, stage, iteration);
        if (!tc.out_dir.empty()) {
            const auto path = tc.out_dir / "diagnostic.btck";
            save_checkpoint(path, capture_state());
            spdlog::error("{}; diagnostic checkpoint written to {}", msg, path.string());
        }
        throw NumericalError(msg);
    }

    template <class T>
    void apply(Param& p, Moments& mo, const std::vector<double>& grad, double scale, double lr) {
        const auto& o = tc.optim;
        ++mo.step;
        const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(mo.step));
        const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(mo.step));
        const double decay = p.tensor.rank() >= 2 ? o.weight_decay : 0.0;
        auto data = p.tensor.mutable_data<T>();
        for (std::size_t k = 0; k < data.size(); ++k) {
            const double g = grad[k] * scale;
            mo.m[k] = static_cast<float>(o.beta1 * mo.m[k] + (1.0 - o.beta1) * g);
            mo.v[k] = static_cast<float>(o.beta2 * mo.v[k] + (1.0 - o.beta2) * g * g);
            double x = data[k];
            x -= lr * decay * x;
            x -= lr * (mo.m[k] / bc1) / (std::sqrt(mo.v[k] / bc2) + o.eps);
            data[k] = static_cast<T>(x);
        }
    }

    void step(const std::vector<std::vector<double>>& grads, const std::vector<bool>& frozen, double lr) {
        double sq = 0.0;
        for (std::size_t i = 0; i < params.size(); ++i)
            if (!frozen[i])
                for (double g : grads[i]) sq += g * g;
        const double norm = std::sqrt(sq);
        if (!std::isfinite(norm)) fail("non-finite gradient");
        const double scale = tc.optim.clip_norm > 0 && norm > tc.optim.clip_norm ? tc.optim.clip_norm / norm : 1.0;
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (frozen[i]) continue;
            if (params[i].tensor.precision() == ad::Precision::f32)
                apply<float>(params[i], moments[i], grads[i], scale, lr);
            else
                apply<double>(params[i], moments[i], grads[i], scale, lr);
        }
    }

    void append_log(const LogRow& row) {
        if (tc.out_dir.empty()) return;
        const auto path = tc.out_dir / "train_log.csv";
        const bool fresh = !fs::exists(path);
        std::ofstream out(path, std::ios::app);
        if (!out) throw IoError("cannot append to " + path.string());
        if (fresh) out << log_csv_header() << "\n";
        out << log_csv_row(row) << "\n";
        if (!out) throw IoError("write failed: " + path.string());
    }
};

Trainer::Trainer(BTimerWeights& w, const BTimerConfig& cfg, TrainerConfig tc) : impl_(std::make_unique<Impl>()) {
    cfg.validate();
    tc.loss.validate();
    impl_->kind = ModelKind::btimer;
    impl_->bw = &w;
    impl_->bcfg = cfg;
    impl_->tc = std::move(tc);
    if (!impl_->tc.out_dir.empty()) fs::create_directories(impl_->tc.out_dir);
    impl_->init(w);
}

Trainer::Trainer(NteWeights& w, const NteConfig& cfg, TrainerConfig tc) : impl_(std::make_unique<Impl>()) {
    cfg.validate();
    tc.loss.validate();
    impl_->kind = ModelKind::nte;
    impl_->nw = &w;
    impl_->ncfg = cfg;
    impl_->tc = std::move(tc);
    if (!impl_->tc.out_dir.empty()) fs::create_directories(impl_->tc.out_dir);
    impl_->init(w);
}

Trainer::~Trainer() = default;

ModelKind Trainer::kind() const { return impl_->kind; }
std::mt19937_64& Trainer::rng() { return impl_->rng; }
std::uint32_t Trainer::stage_index() const { return impl_->stage; }
long Trainer::stage_iteration() const { return impl_->iteration; }
long Trainer::global_iteration() const { return impl_->global; }

double Trainer::sample_loss(const CurriculumStage& stage, const TrainingSample& sample) const {
    ad::NoGradScope no_grad;
    return impl_->forward(sample, stage.uses_time()).first.item();
}

StageReport Trainer::train_stage(const CurriculumStage& stage, const TrainingData& data, long max_iterations) {
    auto& m = *impl_;
    StageReport report;
    report.name = stage.name;
    stage.validate();
    if (m.iteration >= stage.iterations || max_iterations == 0) return report;
    const auto sd = prepare_stage_data(stage, data, m.patch());
    const bool use_time = stage.uses_time();
    std::vector<bool> frozen(m.params.size());
    for (std::size_t i = 0; i < m.params.size(); ++i) frozen[i] = !use_time && m.params[i].time;

    double window_loss = 0.0, window_psnr = 0.0;
    int window = 0;
    long executed = 0;
    while (m.iteration < stage.iterations && (max_iterations < 0 || executed < max_iterations)) {
        const long it = m.iteration;
        const double lr = lr_at(it, stage.iterations, stage.initial_lr, m.tc.optim.warmup_fraction);
        std::vector<std::vector<double>> grads(m.params.size());
        for (std::size_t i = 0; i < m.params.size(); ++i)
            grads[i].assign(static_cast<std::size_t>(m.params[i].tensor.numel()), 0.0);
        double loss_sum = 0.0, psnr_sum = 0.0;
        for (int b = 0; b < stage.batch; ++b) {
            const auto sample = draw_sample(stage, sd, m.kind, m.rng);
            ad::Tape tape;
            const auto [loss, image] = m.forward(sample, use_time);
            const double value = loss.item();
            if (!std::isfinite(value)) m.fail("non-finite loss");
            const auto g = tape.backward(loss);
            for (std::size_t i = 0; i < m.params.size(); ++i) {
                if (frozen[i] || !g.contains(m.params[i].tensor.id())) continue;
                const auto v = g.raw().at(m.params[i].tensor.id()).values();
                for (std::size_t k = 0; k < v.size(); ++k) grads[i][k] += v[k] / stage.batch;
            }
            loss_sum += value;
            psnr_sum += psnr(Image::from_tensor(image.detach()), sample.target().image);
        }
        m.step(grads, frozen, lr);

        const double loss_mean = loss_sum / stage.batch, psnr_mean = psnr_sum / stage.batch;
        report.loss.push_back(loss_mean);
        report.psnr.push_back(psnr_mean);
        window_loss += loss_mean;
        window_psnr += psnr_mean;
        ++window;
        ++m.iteration;
        ++m.global;
        ++executed;
        if (m.iteration % m.tc.log_every == 0 || m.iteration == stage.iterations) {
            LogRow row{m.global, lr, window_loss / window, window_psnr / window};
            report.rows.push_back(row);
            m.append_log(row);
            spdlog::info("{} iter {} lr {:.3g} loss {:.5f} psnr {:.2f}", to_string(stage.name), row.iter, row.lr,
                         row.loss, row.psnr);
            window_loss = window_psnr = 0.0;
            window = 0;
        }
        if (!m.tc.out_dir.empty() && m.tc.checkpoint_every > 0 && m.iteration % m.tc.checkpoint_every == 0)
            save(m.tc.out_dir / fmt::format("ckpt_{:06d}.btck", m.global));
    }
    return report;
}

std::vector<StageReport> Trainer::run_curriculum(const std::vector<CurriculumStage>& plan, const TrainingData& data) {
    auto& m = *impl_;
    int stage1_context = 0, stage3_context = 0;
    for (std::size_t i = 0; i < plan.size(); ++i) {
        if (i > 0 && plan[i].name < plan[i - 1].name) throw ConfigError("curriculum stages must be in order");
        if (plan[i].name == StageName::stage1_static) stage1_context = std::max(stage1_context, plan[i].context_count);
        if (plan[i].name == StageName::stage3_long_context)
            stage3_context = stage3_context ? std::min(stage3_context, plan[i].context_count) : plan[i].context_count;
        plan[i].validate();
        // Stages without iterations never draw samples.
        if (plan[i].iterations == 0) continue;
        if (m.kind == ModelKind::nte && plan[i].name == StageName::stage3_long_context) continue;
        check_stage_data(plan[i], data, m.patch());
    }
    if (stage1_context && stage3_context && stage3_context <= stage1_context)
        throw ConfigError("stage 3 must use more context frames than stage 1");

    std::vector<StageReport> reports;
    while (m.stage < plan.size()) {
        const auto& s = plan[m.stage];
        if (!(m.kind == ModelKind::nte && s.name == StageName::stage3_long_context))
            reports.push_back(train_stage(s, data));
        ++m.stage;
        m.iteration = 0;
    }
    if (!m.tc.out_dir.empty()) save(m.tc.out_dir / "final.btck");
    return reports;
}

void Trainer::next_stage() {
    ++impl_->stage;
    impl_->iteration = 0;
}

Checkpoint Trainer::checkpoint() const { return impl_->capture_state(); }

void Trainer::resume(const Checkpoint& c) {
    auto& m = *impl_;
    if (m.kind == ModelKind::btimer)
        restore(c, *m.bw, m.bcfg);
    else
        restore(c, *m.nw, m.ncfg);
    if (!c.moments.empty()) {
        if (c.moments.size() != m.moments.size()) throw FormatError("checkpoint moments do not match the model");
        for (std::size_t i = 0; i < c.moments.size(); ++i)
            if (c.moments[i].m.size() != m.moments[i].m.size())
                throw FormatError("checkpoint moments do not match " + m.params[i].name);
        m.moments = c.moments;
    }
    if (!c.rng.empty()) {
        std::istringstream is(c.rng);
        is >> m.rng;
        if (!is) throw FormatError("checkpoint RNG state is malformed");
    }
    m.stage = c.stage;
    m.iteration = static_cast<long>(c.iteration);
    m.global = static_cast<long>(c.global_iteration);
}

void Trainer::save(const fs::path& path) const { save_checkpoint(path, impl_->capture_state()); }

// ---- plans ----

std::vector<CurriculumStage> read_plan(const fs::path& path) {
    Json j;
    try {
        j = Json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("plan " + path.string() + ": " + e.what());
    }
    check_keys(j, {"stages"}, "plan");
    std::vector<CurriculumStage> plan;
    if (!j.contains("stages") || !j["stages"].is_array()) throw ConfigError("plan: 'stages' must be an array");
    for (const auto& sj : j["stages"]) {
        check_keys(sj,
                   {"name", "resolution", "context_count", "min_context_count", "iterations", "initial_lr", "static_fraction", "batch",
                    "p_interp"},
                   "plan stage");
        CurriculumStage s;
        try {
            s.name = stage_name_from_string(sj.at("name").get<std::string>());
            s.resolution = sj.value("resolution", s.resolution);
            s.context_count = sj.value("context_count", s.context_count);
            s.min_context_count = sj.value("min_context_count", s.min_context_count);
            s.iterations = sj.value("iterations", s.iterations);
            s.initial_lr = sj.value("initial_lr", s.initial_lr);
            s.static_fraction = sj.value("static_fraction", s.static_fraction);
            s.batch = sj.value("batch", s.batch);
            s.p_interp = sj.value("p_interp", s.p_interp);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("plan stage: ") + e.what());
        }
        s.validate();
        plan.push_back(s);
    }
    return plan;
}

void write_plan(const fs::path& path, const std::vector<CurriculumStage>& plan) {
    Json stages = Json::array();
    for (const auto& s : plan)
        stages.push_back(Json{{"name", to_string(s.name)},
                              {"resolution", s.resolution},
                              {"context_count", s.context_count},
                              {"min_context_count", s.min_context_count},
                              {"iterations", s.iterations},
                              {"initial_lr", s.initial_lr},
                              {"static_fraction", s.static_fraction},
                              {"batch", s.batch},
                              {"p_interp", s.p_interp}});
    write_text_file(path, Json{{"stages", stages}}.dump(2) + "\n");
}

} // namespace bt
