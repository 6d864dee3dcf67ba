#include "vstain/image.hpp"

#include <algorithm>
#include <cmath>

namespace vstain {

Image channel_view(const Image& img, int c) {
    if (c < 0 || c >= img.channels) throw std::out_of_range("channel_view: bad channel");
    Image out(1, img.height, img.width);
    const float* src = img.data.data() + static_cast<size_t>(c) * img.plane();
    std::copy(src, src + img.plane(), out.data.begin());
    return out;
}

static std::vector<double> gaussian_kernel(double sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        sum += k[i + radius];
    }
    for (double& v : k) v /= sum;
    return k;
}

Image gaussian_blur(const Image& img, double sigma) {
    if (sigma <= 0.0) return img;
    const auto k = gaussian_kernel(sigma);
    const int radius = static_cast<int>(k.size() / 2);
    Image tmp(img.channels, img.height, img.width);
    Image out(img.channels, img.height, img.width);

    // horizontal pass, kernel renormalized where it overhangs the border
    for (int c = 0; c < img.channels; ++c) {
        for (int y = 0; y < img.height; ++y) {
            for (int x = 0; x < img.width; ++x) {
                double acc = 0.0, wsum = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    const int xx = x + i;
                    if (xx < 0 || xx >= img.width) continue;
                    acc += k[i + radius] * img.at(c, y, xx);
                    wsum += k[i + radius];
                }
                tmp.at(c, y, x) = static_cast<float>(acc / wsum);
            }
        }
    }
    // vertical pass
    for (int c = 0; c < img.channels; ++c) {
        for (int y = 0; y < img.height; ++y) {
            for (int x = 0; x < img.width; ++x) {
                double acc = 0.0, wsum = 0.0;
                for (int i = -radius; i <= radius; ++i) {
                    const int yy = y + i;
                    if (yy < 0 || yy >= img.height) continue;
                    acc += k[i + radius] * tmp.at(c, yy, x);
                    wsum += k[i + radius];
                }
                out.at(c, y, x) = static_cast<float>(acc / wsum);
            }
        }
    }
    return out;
}

double mean_gradient_magnitude(const Image& img) {
    double acc = 0.0;
    size_t n = 0;
    for (int c = 0; c < img.channels; ++c) {
        for (int y = 0; y + 1 < img.height; ++y) {
            for (int x = 0; x + 1 < img.width; ++x) {
                const double gx = img.at(c, y, x + 1) - img.at(c, y, x);
                const double gy = img.at(c, y + 1, x) - img.at(c, y, x);
                acc += std::sqrt(gx * gx + gy * gy);
                ++n;
            }
        }
    }
    return n ? acc / static_cast<double>(n) : 0.0;
}

float bilinear_sample(const Image& img, int c, double y, double x) {
    const int h = img.height, w = img.width;
    const double yc = std::clamp(y, 0.0, static_cast<double>(h - 1));
    const double xc = std::clamp(x, 0.0, static_cast<double>(w - 1));
    const int y0 = static_cast<int>(std::floor(yc));
    const int x0 = static_cast<int>(std::floor(xc));
    const int y1 = std::min(y0 + 1, h - 1);
    const int x1 = std::min(x0 + 1, w - 1);
    const double fy = yc - y0, fx = xc - x0;
    const double v00 = img.at(c, y0, x0), v01 = img.at(c, y0, x1);
    const double v10 = img.at(c, y1, x0), v11 = img.at(c, y1, x1);
    return static_cast<float>((1 - fy) * ((1 - fx) * v00 + fx * v01) +
                              fy * ((1 - fx) * v10 + fx * v11));
}

double channel_mean(const Image& img, int c) {
    const float* p = img.data.data() + static_cast<size_t>(c) * img.plane();
    double acc = 0.0;
    for (size_t i = 0; i < img.plane(); ++i) acc += p[i];
    return acc / static_cast<double>(img.plane());
}

double channel_stddev(const Image& img, int c) {
    const double mu = channel_mean(img, c);
    const float* p = img.data.data() + static_cast<size_t>(c) * img.plane();
    double acc = 0.0;
    for (size_t i = 0; i < img.plane(); ++i) {
        const double d = p[i] - mu;
        acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(img.plane()));
}

Image crop(const Image& img, int y0, int x0, int h, int w) {
    if (y0 < 0 || x0 < 0 || y0 + h > img.height || x0 + w > img.width)
        throw std::out_of_range("crop: patch leaves the image");
    Image out(img.channels, h, w);
    for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
    return out;
}

Image dihedral(const Image& img, int index) {
    if (img.height != img.width) throw std::invalid_argument("dihedral: patch must be square");
    if (index < 0 || index > 7) throw std::out_of_range("dihedral: index in 0..7");
    const int n = img.height;
    Image out(img.channels, n, n);
    const int rot = index % 4;
    const bool flip = index >= 4;
    for (int c = 0; c < img.channels; ++c) {
        for (int y = 0; y < n; ++y) {
            for (int x = 0; x < n; ++x) {
                int sx = flip ? (n - 1 - x) : x;
                int sy = y;
                // inverse rotation maps output coords to source coords
                int ry = sy, rx = sx;
                switch (rot) {
                    case 1: ry = n - 1 - sx; rx = sy; break;
                    case 2: ry = n - 1 - sy; rx = n - 1 - sx; break;
                    case 3: ry = sx; rx = n - 1 - sy; break;
                    default: break;
                }
                out.at(c, y, x) = img.at(c, ry, rx);
            }
        }
    }
    return out;
}

}  // namespace vstain
