// SPDX-License-Identifier: Apache-2.0
#include "bt/image.hpp"

#include "bt/error.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace bt {

ad::Tensor Image::tensor(ad::Precision p) const {
    return ad::Tensor::from_values({height, width, 3}, std::span<const double>(data), p);
}

Image Image::from_tensor(const ad::Tensor& t) {
    if (t.rank() != 3 || t.size(2) != 3) throw ShapeError("image tensor must be [H,W,3], got " + ad::to_string(t.shape()));
    Image img;
    img.height = static_cast<int>(t.size(0));
    img.width = static_cast<int>(t.size(1));
    img.data = t.values();
    return img;
}

std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

Image Image::quantized() const {
    Image out = *this;
    for (double& v : out.data) v = to_byte(v) / 255.0;
    return out;
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};

void write_png_rows(const std::filesystem::path& path, int width, int height, int color_type,
                    const std::vector<std::uint8_t>& bytes, int channels) {
    std::unique_ptr<std::FILE, FileCloser> file(std::fopen(path.c_str(), "wb"));
    if (!file) throw IoError("cannot open for writing: " + path.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw IoError("libpng initialisation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("PNG encoding failed: " + path.string());
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                 color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y)
        png_write_row(png, bytes.data() + static_cast<std::size_t>(y) * width * channels);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

} // namespace

void write_png(const std::filesystem::path& path, const Image& image) {
    std::vector<std::uint8_t> bytes(image.data.size());
    std::transform(image.data.begin(), image.data.end(), bytes.begin(), to_byte);
    write_png_rows(path, image.width, image.height, PNG_COLOR_TYPE_RGB, bytes, 3);
}

void write_gray_png(const std::filesystem::path& path, int width, int height,
                    const std::vector<double>& values) {
    if (values.size() != static_cast<std::size_t>(width) * height)
        throw ShapeError("gray image size mismatch");
    std::vector<std::uint8_t> bytes(values.size());
    std::transform(values.begin(), values.end(), bytes.begin(), to_byte);
    write_png_rows(path, width, height, PNG_COLOR_TYPE_GRAY, bytes, 1);
}

Image read_png(const std::filesystem::path& path) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!std::filesystem::exists(path)) throw MissingFileError("no such file: " + path.string());
    if (!png_image_begin_read_from_file(&img, path.c_str()))
        throw FormatError("cannot decode PNG " + path.string() + ": " + img.message);
    img.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, bytes.data(), 0, nullptr)) {
        png_image_free(&img);
        throw FormatError("cannot decode PNG " + path.string() + ": " + img.message);
    }
    Image out(static_cast<int>(img.width), static_cast<int>(img.height));
    for (std::size_t i = 0; i < bytes.size(); ++i) out.data[i] = bytes[i] / 255.0;
    return out;
}

} // namespace bt
