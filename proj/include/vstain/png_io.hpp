#pragma once

#include <string>

#include "vstain/image.hpp"

namespace vstain {

// 16-bit grayscale PNG; values are clamped to [0,1] and quantized to 0..65535.
void write_png_gray16(const std::string& path, const Image& img, int channel = 0);
// Returns a 1-channel image with values scaled back to [0,1].
Image read_png_gray16(const std::string& path);

// 8-bit RGB PNG; expects a 3-channel image with values in [0,1].
void write_png_rgb8(const std::string& path, const Image& img);
Image read_png_rgb8(const std::string& path);

}  // namespace vstain
