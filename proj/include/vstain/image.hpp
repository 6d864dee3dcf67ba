#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace vstain {

// Planar CHW float image. The shared pixel container for synthesis,
// registration, and metrics; network tensors convert to/from it at module
// boundaries.
struct Image {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<float> data;  // size channels*height*width

    Image() = default;
    Image(int c, int h, int w, float fill = 0.f)
        : channels(c), height(h), width(w), data(static_cast<size_t>(c) * h * w, fill) {
        if (c <= 0 || h <= 0 || w <= 0)
            throw std::invalid_argument("Image: dimensions must be positive");
    }

    size_t size() const { return data.size(); }
    size_t plane() const { return static_cast<size_t>(height) * width; }

    float& at(int c, int y, int x) { return data[(static_cast<size_t>(c) * height + y) * width + x]; }
    float at(int c, int y, int x) const { return data[(static_cast<size_t>(c) * height + y) * width + x]; }

    bool same_shape(const Image& o) const {
        return channels == o.channels && height == o.height && width == o.width;
    }
};

// Extracts channel c as a single-channel image.
Image channel_view(const Image& img, int c);

// Per-channel separable Gaussian blur, kernel truncated at 3 sigma and
// renormalized at the boundary (constants are preserved exactly).
Image gaussian_blur(const Image& img, double sigma);

// Mean magnitude of forward-difference gradients, averaged over channels.
// Sharpness measure used to order defocus planes.
double mean_gradient_magnitude(const Image& img);

// Bilinear lookup with replicate boundary, single channel.
float bilinear_sample(const Image& img, int c, double y, double x);

double channel_mean(const Image& img, int c);
double channel_stddev(const Image& img, int c);

// patch copy; throws when the patch leaves the image
Image crop(const Image& img, int y0, int x0, int h, int w);

// The eight dihedral-group images of a square patch; index 0..3 are rotations
// by 0/90/180/270 degrees, 4..7 the same rotations after a horizontal flip.
Image dihedral(const Image& img, int index);

}  // namespace vstain
