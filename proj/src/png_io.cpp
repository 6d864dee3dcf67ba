#include "vstain/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <vector>

namespace vstain {

namespace {

struct FileCloser {
    void operator()(FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

uint16_t quant16(float v) {
    const float c = std::clamp(v, 0.f, 1.f);
    return static_cast<uint16_t>(std::lround(c * 65535.0f));
}

uint8_t quant8(float v) {
    const float c = std::clamp(v, 0.f, 1.f);
    return static_cast<uint8_t>(std::lround(c * 255.0f));
}

}  // namespace

void write_png_gray16(const std::string& path, const Image& img, int channel) {
    if (channel < 0 || channel >= img.channels)
        throw std::out_of_range("write_png_gray16: bad channel");
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw std::runtime_error("cannot open for write: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw std::runtime_error("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng write error: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width, img.height, 16, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<uint16_t> row(img.width);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            const uint16_t v = quant16(img.at(channel, y, x));
            row[x] = static_cast<uint16_t>((v >> 8) | (v << 8));  // PNG is big-endian
        }
        png_write_row(png, reinterpret_cast<png_bytep>(row.data()));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image read_png_gray16(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw std::runtime_error("cannot open for read: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw std::runtime_error("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("libpng read error: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    const int w = png_get_image_width(png, info);
    const int h = png_get_image_height(png, info);
    if (png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY ||
        png_get_bit_depth(png, info) != 16) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("expected 16-bit gray PNG: " + path);
    }

    Image out(1, h, w);
    std::vector<uint16_t> row(w);
    for (int y = 0; y < h; ++y) {
        png_read_row(png, reinterpret_cast<png_bytep>(row.data()), nullptr);
        for (int x = 0; x < w; ++x) {
            const uint16_t be = row[x];
            const uint16_t v = static_cast<uint16_t>((be >> 8) | (be << 8));
            out.at(0, y, x) = static_cast<float>(v) / 65535.0f;
        }
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

void write_png_rgb8(const std::string& path, const Image& img) {
    if (img.channels != 3) throw std::invalid_argument("write_png_rgb8: need 3 channels");
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw std::runtime_error("cannot open for write: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw std::runtime_error("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("libpng write error: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<uint8_t> row(static_cast<size_t>(img.width) * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x) {
            row[3 * x + 0] = quant8(img.at(0, y, x));
            row[3 * x + 1] = quant8(img.at(1, y, x));
            row[3 * x + 2] = quant8(img.at(2, y, x));
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image read_png_rgb8(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw std::runtime_error("cannot open for read: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw std::runtime_error("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw std::runtime_error("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("libpng read error: " + path);
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);

    const int w = png_get_image_width(png, info);
    const int h = png_get_image_height(png, info);
    if (png_get_color_type(png, info) != PNG_COLOR_TYPE_RGB ||
        png_get_bit_depth(png, info) != 8) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw std::runtime_error("expected 8-bit RGB PNG: " + path);
    }

    Image out(3, h, w);
    std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w; ++x) {
            out.at(0, y, x) = row[3 * x + 0] / 255.0f;
            out.at(1, y, x) = row[3 * x + 1] / 255.0f;
            out.at(2, y, x) = row[3 * x + 2] / 255.0f;
        }
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

}  // namespace vstain
