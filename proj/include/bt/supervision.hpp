// SPDX-License-Identifier: Apache-2.0
//
// Photometric training loss, supervision sampling, and image metrics.
#pragma once

#include "bt/image.hpp"
#include "bt/tensor.hpp"

#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace bt {

enum class Perceptual { off, gradient_pyramid };

struct LossConfig {
    double lambda_perceptual = 0.5;
    Perceptual perceptual = Perceptual::gradient_pyramid;
    int pyramid_levels = 3;

    void validate() const;
};

// Mean L1 difference of horizontal and vertical finite differences over an
// average-pooled pyramid, averaged over levels. Zero iff pred - gt is
// constant on each level.
double gradient_pyramid_distance(const Image& pred, const Image& gt, int levels);

// MSE + lambda * perceptual proxy over [H, W, 3] tensors. gt receives no
// gradient.
ad::Tensor rgb_loss(const ad::Tensor& pred, const ad::Tensor& gt, const LossConfig& cfg);

// 10 log10(1 / MSE), 99 when MSE < 1e-10.
double psnr(const Image& pred, const Image& gt);
// Mean SSIM over channels, 11x11 Gaussian window (sigma 1.5), valid region.
double ssim(const Image& pred, const Image& gt);

enum class SupervisionMode { in_context, interpolation };

struct SupervisionSample {
    std::vector<int> context_indices; // sorted
    int target_index = 0;
    int target_view = 0; // 0: the context camera, 1: the second camera
    double bullet_time = 0.0;
    SupervisionMode mode = SupervisionMode::in_context;
    bool fell_back = false; // interpolation requested but impossible
};

// times: the clip's sorted timestamps. views: cameras available per
// timestamp (1 or 2).
SupervisionSample sample_supervision(const std::vector<double>& times, int count, double p_interp,
                                     std::mt19937_64& rng, int views = 1);

struct MetricRow {
    std::string clip_id;
    double time = 0.0;
    int view = 0;
    double psnr = 0.0;
    double ssim = 0.0;
};

struct MetricSummary {
    std::size_t rows = 0;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
};

MetricSummary summarize(const std::vector<MetricRow>& rows);
// Header clip_id,t_b,view_id,psnr,ssim; 17 significant digits.
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricRow>& rows);
std::vector<MetricRow> read_metrics_csv(const std::filesystem::path& path);

} // namespace bt
