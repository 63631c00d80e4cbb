// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "bt/tensor.hpp"

#include <filesystem>
#include <vector>

namespace bt {

// Row-major H x W x 3 image with channel-last storage.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<double> data;

    Image() = default;
    Image(int w, int h, double fill = 0.0)
        : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, fill) {}

    std::size_t pixels() const { return static_cast<std::size_t>(width) * height; }
    double& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    double at(int x, int y, int c) const {
        return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
    }
    bool operator==(const Image&) const = default;

    ad::Tensor tensor(ad::Precision p = ad::default_precision()) const;
    static Image from_tensor(const ad::Tensor& t);
    // Values snapped to the 8-bit grid used by PNG storage.
    Image quantized() const;
};

std::uint8_t to_byte(double v);

// 8-bit RGB PNG, values round(clamp(c, 0, 1) * 255).
void write_png(const std::filesystem::path& path, const Image& image);
// Single-channel 8-bit PNG from H x W values in [0,1].
void write_gray_png(const std::filesystem::path& path, int width, int height,
                    const std::vector<double>& values);
// Reads 8-bit gray/RGB/RGBA PNGs into [0,1] RGB.
Image read_png(const std::filesystem::path& path);

} // namespace bt
