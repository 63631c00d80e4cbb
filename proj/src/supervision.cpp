// SPDX-License-Identifier: Apache-2.0
#include "bt/supervision.hpp"

#include "bt/error.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace bt {

namespace {

struct Level {
    int w = 0, h = 0;
    std::vector<double> v; // h * w * 3
    double& at(int x, int y, int c) { return v[(static_cast<std::size_t>(y) * w + x) * 3 + c]; }
    double at(int x, int y, int c) const { return v[(static_cast<std::size_t>(y) * w + x) * 3 + c]; }
};

Level pool2(const Level& l) {
    Level o;
    o.w = l.w / 2;
    o.h = l.h / 2;
    o.v.assign(static_cast<std::size_t>(o.w) * o.h * 3, 0.0);
    for (int y = 0; y < o.h; ++y)
        for (int x = 0; x < o.w; ++x)
            for (int c = 0; c < 3; ++c)
                o.at(x, y, c) = 0.25 * (l.at(2 * x, 2 * y, c) + l.at(2 * x + 1, 2 * y, c) +
                                        l.at(2 * x, 2 * y + 1, c) + l.at(2 * x + 1, 2 * y + 1, c));
    return o;
}

std::vector<Level> pyramid(Level base, int levels) {
    std::vector<Level> out;
    out.push_back(std::move(base));
    while (static_cast<int>(out.size()) < levels && out.back().w >= 4 && out.back().h >= 4)
        out.push_back(pool2(out.back()));
    return out;
}

double sign(double v) { return (v > 0) - (v < 0); }

// Value of the gradient-pyramid term of the difference image d, and its
// gradient with respect to d when grad is non-null.
double pyramid_term(const Level& d, int levels, std::vector<double>* grad) {
    const auto pyr = pyramid(d, levels);
    const double per_level = 1.0 / static_cast<double>(pyr.size());
    double total = 0.0;
    std::vector<Level> g;
    if (grad) {
        g = pyr;
        for (auto& l : g) std::fill(l.v.begin(), l.v.end(), 0.0);
    }
    for (std::size_t k = 0; k < pyr.size(); ++k) {
        const Level& l = pyr[k];
        const double nx = static_cast<double>(l.h) * (l.w - 1) * 3;
        const double ny = static_cast<double>(l.h - 1) * l.w * 3;
        double sx = 0.0, sy = 0.0;
        const double wx = nx > 0 ? 0.5 * per_level / nx : 0.0;
        const double wy = ny > 0 ? 0.5 * per_level / ny : 0.0;
        for (int y = 0; y < l.h; ++y)
            for (int x = 0; x < l.w; ++x)
                for (int c = 0; c < 3; ++c) {
                    if (x + 1 < l.w) {
                        const double gx = l.at(x + 1, y, c) - l.at(x, y, c);
                        sx += std::abs(gx);
                        if (grad) {
                            g[k].at(x + 1, y, c) += wx * sign(gx);
                            g[k].at(x, y, c) -= wx * sign(gx);
                        }
                    }
                    if (y + 1 < l.h) {
                        const double gy = l.at(x, y + 1, c) - l.at(x, y, c);
                        sy += std::abs(gy);
                        if (grad) {
                            g[k].at(x, y + 1, c) += wy * sign(gy);
                            g[k].at(x, y, c) -= wy * sign(gy);
                        }
                    }
                }
        total += (nx > 0 ? 0.5 * sx / nx : 0.0) + (ny > 0 ? 0.5 * sy / ny : 0.0);
    }
    total *= per_level;
    if (grad) {
        for (std::size_t k = pyr.size() - 1; k > 0; --k) {
            const Level& parent = g[k];
            Level& child = g[k - 1];
            for (int y = 0; y < parent.h; ++y)
                for (int x = 0; x < parent.w; ++x)
                    for (int c = 0; c < 3; ++c) {
                        const double q = 0.25 * parent.at(x, y, c);
                        child.at(2 * x, 2 * y, c) += q;
                        child.at(2 * x + 1, 2 * y, c) += q;
                        child.at(2 * x, 2 * y + 1, c) += q;
                        child.at(2 * x + 1, 2 * y + 1, c) += q;
                    }
        }
        *grad = std::move(g[0].v);
    }
    return total;
}

void check_pair(const Image& a, const Image& b, const char* what) {
    if (a.width != b.width || a.height != b.height || a.data.size() != b.data.size())
        throw ShapeError(std::string(what) + ": image sizes differ");
}

} // namespace

void LossConfig::validate() const {
    if (!(lambda_perceptual >= 0)) throw ConfigError("loss: lambda_perceptual must be non-negative");
    if (pyramid_levels < 1) throw ConfigError("loss: pyramid_levels must be positive");
}

double gradient_pyramid_distance(const Image& pred, const Image& gt, int levels) {
    check_pair(pred, gt, "gradient_pyramid_distance");
    Level d{pred.width, pred.height, pred.data};
    for (std::size_t i = 0; i < d.v.size(); ++i) d.v[i] -= gt.data[i];
    return pyramid_term(d, levels, nullptr);
}

ad::Tensor rgb_loss(const ad::Tensor& pred, const ad::Tensor& gt, const LossConfig& cfg) {
    cfg.validate();
    if (pred.shape() != gt.shape()) throw ShapeError("rgb_loss: shapes differ");
    if (pred.rank() != 3 || pred.size(2) != 3) throw ShapeError("rgb_loss: expected [H,W,3] images");
    const auto pv = pred.values(), gv = gt.values();
    const std::size_t n = pv.size();
    Level d{static_cast<int>(pred.size(1)), static_cast<int>(pred.size(0)), std::vector<double>(n)};
    double mse = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        d.v[i] = pv[i] - gv[i];
        mse += d.v[i] * d.v[i];
    }
    mse /= static_cast<double>(n);
    const bool use_perc = cfg.perceptual == Perceptual::gradient_pyramid && cfg.lambda_perceptual > 0;
    auto perc_grad = std::make_shared<std::vector<double>>();
    const double perc = use_perc ? pyramid_term(d, cfg.pyramid_levels, perc_grad.get()) : 0.0;
    const double lambda = cfg.lambda_perceptual;
    auto out = ad::Tensor::scalar(mse + (use_perc ? lambda * perc : 0.0), pred.precision());
    auto diff = std::make_shared<std::vector<double>>(std::move(d.v));
    return ad::Tape::record({pred, gt}, out, [pred, diff, perc_grad, lambda, use_perc](const ad::Tensor& g) {
        const double go = g.item();
        const std::size_t n = diff->size();
        std::vector<double> dp(n);
        for (std::size_t i = 0; i < n; ++i) {
            dp[i] = go * 2.0 * (*diff)[i] / static_cast<double>(n);
            if (use_perc) dp[i] += go * lambda * (*perc_grad)[i];
        }
        return std::vector<ad::Tensor>{
            ad::Tensor::from_values(pred.shape(), std::span<const double>(dp), pred.precision()), ad::Tensor()};
    });
}

double psnr(const Image& pred, const Image& gt) {
    check_pair(pred, gt, "psnr");
    double mse = 0.0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const double e = pred.data[i] - gt.data[i];
        mse += e * e;
    }
    mse /= static_cast<double>(pred.data.size());
    if (mse < 1e-10) return 99.0;
    return std::min(99.0, -10.0 * std::log10(mse));
}

double ssim(const Image& pred, const Image& gt) {
    check_pair(pred, gt, "ssim");
    const int w = pred.width, h = pred.height;
    int win = std::min({11, w, h});
    if (win % 2 == 0) --win;
    const int r = win / 2;
    std::vector<double> k(win);
    double ks = 0.0;
    for (int i = 0; i < win; ++i) ks += k[i] = std::exp(-0.5 * (i - r) * (i - r) / (1.5 * 1.5));
    for (auto& v : k) v /= ks;
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    const int ow = w - win + 1, oh = h - win + 1;

    // Separable valid-mode filter of an h x w plane.
    auto filter = [&](const std::vector<double>& plane) {
        std::vector<double> tmp(static_cast<std::size_t>(h) * ow), out(static_cast<std::size_t>(oh) * ow);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < ow; ++x) {
                double s = 0.0;
                for (int i = 0; i < win; ++i) s += k[i] * plane[static_cast<std::size_t>(y) * w + x + i];
                tmp[static_cast<std::size_t>(y) * ow + x] = s;
            }
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) {
                double s = 0.0;
                for (int i = 0; i < win; ++i) s += k[i] * tmp[static_cast<std::size_t>(y + i) * ow + x];
                out[static_cast<std::size_t>(y) * ow + x] = s;
            }
        return out;
    };

    double total = 0.0;
    const std::size_t plane = static_cast<std::size_t>(w) * h;
    for (int c = 0; c < 3; ++c) {
        std::vector<double> a(plane), b(plane), aa(plane), bb(plane), ab(plane);
        for (std::size_t i = 0; i < plane; ++i) {
            a[i] = pred.data[3 * i + c];
            b[i] = gt.data[3 * i + c];
            aa[i] = a[i] * a[i];
            bb[i] = b[i] * b[i];
            ab[i] = a[i] * b[i];
        }
        const auto ma = filter(a), mb = filter(b), saa = filter(aa), sbb = filter(bb), sab = filter(ab);
        double sum = 0.0;
        for (std::size_t i = 0; i < ma.size(); ++i) {
            const double va = saa[i] - ma[i] * ma[i], vb = sbb[i] - mb[i] * mb[i], cov = sab[i] - ma[i] * mb[i];
            sum += ((2 * ma[i] * mb[i] + c1) * (2 * cov + c2)) /
                   ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
        }
        total += sum / static_cast<double>(ma.size());
    }
    return total / 3.0;
}

SupervisionSample sample_supervision(const std::vector<double>& times, int count, double p_interp,
                                     std::mt19937_64& rng, int views) {
    const int n = static_cast<int>(times.size());
    if (count < 1 || count > n) throw ContractError("sample_supervision: count must be in [1, clip length]");
    if (!(p_interp >= 0 && p_interp <= 1)) throw ContractError("sample_supervision: p_interp outside [0,1]");
    if (views != 1 && views != 2) throw ContractError("sample_supervision: views must be 1 or 2");
    auto uniform = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
    auto feasible_strides = [&](int span_steps) {
        std::vector<int> s;
        for (int stride = 1; stride <= 3; ++stride)
            if (span_steps * stride <= n - 1) s.push_back(stride);
        return s;
    };

    SupervisionSample out;
    const bool want_interp = std::bernoulli_distribution(p_interp)(rng);
    if (want_interp) {
        const auto strides = count >= 2 ? feasible_strides(count) : std::vector<int>{};
        if (!strides.empty()) {
            // count + 1 evenly strided frames; one interior frame is dropped and
            // the target is drawn strictly inside the resulting gap.
            const int s = strides[uniform(0, static_cast<int>(strides.size()) - 1)];
            const int start = uniform(0, n - 1 - count * s);
            std::vector<int> window;
            for (int k = 0; k <= count; ++k) window.push_back(start + k * s);
            const int drop = uniform(1, count - 1);
            out.target_index = uniform(window[drop - 1] + 1, window[drop + 1] - 1);
            window.erase(window.begin() + drop);
            out.context_indices = window;
            out.mode = SupervisionMode::interpolation;
            out.target_view = views == 2 ? uniform(0, 1) : 0;
            out.bullet_time = times[out.target_index];
            return out;
        }
        out.fell_back = true;
        spdlog::debug("sample_supervision: interpolation impossible for {} frames, count {}", n, count);
    }
    const auto strides = feasible_strides(count - 1);
    const int s = strides[uniform(0, static_cast<int>(strides.size()) - 1)];
    const int start = uniform(0, n - 1 - (count - 1) * s);
    for (int k = 0; k < count; ++k) out.context_indices.push_back(start + k * s);
    out.target_index = out.context_indices[uniform(0, count - 1)];
    out.mode = SupervisionMode::in_context;
    out.target_view = views == 2 ? uniform(0, 1) : 0;
    out.bullet_time = times[out.target_index];
    return out;
}

MetricSummary summarize(const std::vector<MetricRow>& rows) {
    MetricSummary s;
    s.rows = rows.size();
    for (const auto& r : rows) {
        s.mean_psnr += r.psnr;
        s.mean_ssim += r.ssim;
    }
    if (!rows.empty()) {
        s.mean_psnr /= static_cast<double>(rows.size());
        s.mean_ssim /= static_cast<double>(rows.size());
    }
    return s;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows) {
    std::string text = "clip_id,t_b,view_id,psnr,ssim\n";
    for (const auto& r : rows)
        text += fmt::format("{},{:.17g},{},{:.17g},{:.17g}\n", r.clip_id, r.time, r.view, r.psnr, r.ssim);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed: " + path.string());
}

std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw MissingFileError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != "clip_id,t_b,view_id,psnr,ssim")
        throw FormatError("metrics csv: unexpected header in " + path.string());
    std::vector<MetricRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string f[5];
        for (auto& s : f)
            if (!std::getline(ss, s, ',')) throw FormatError("metrics csv: short row: " + line);
        try {
            rows.push_back({f[0], std::stod(f[1]), std::stoi(f[2]), std::stod(f[3]), std::stod(f[4])});
        } catch (const std::exception&) {
            throw FormatError("metrics csv: malformed row: " + line);
        }
    }
    return rows;
}

} // namespace bt
