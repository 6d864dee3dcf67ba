#pragma once

// The three network architectures: virtual-staining generator (4-level U-net,
// 3 convs per block, residual downsampling blocks, average pooling), the
// refocusing generator (5 levels, 2 convs per block, residuals in both paths,
// max pooling), and the 6-block discriminator. Parameters live in shared
// value buffers; a "binding" materializes graph leaves over them, so several
// per-sample graphs can backpropagate into separate gradient buffers while
// reading one parameter set.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "vstain/image.hpp"
#include "vstain/tensor.hpp"
#include "vstain/util.hpp"

namespace vstain {

enum class GeneratorVariant { VirtualStainer, Refocuser };

struct GeneratorConfig {
    GeneratorVariant variant = GeneratorVariant::VirtualStainer;
    int levels = 4;
    int convs_per_block = 3;
    PoolKind pool = PoolKind::Avg;
    int base_channels = 16;
    int in_channels = 2;
    int out_channels = 3;
    float leaky_slope = 0.1f;
    bool residual_down = true;
    bool residual_up = false;
    bool tap_post_pool = true;  // feature taps taken after each block's pooling

    int spatial_divisor() const { return 1 << levels; }
    int encoder_channels(int level) const {  // level 1..levels
        return base_channels << (level - 1);
    }
};

struct DiscriminatorConfig {
    int blocks = 6;
    int convs_per_block = 2;
    int in_channels = 3;
    int base_channels = 8;
    float leaky_slope = 0.1f;

    int spatial_divisor() const { return 1 << blocks; }
    int block_channels(int j) const { return base_channels << j; }  // j = 1..blocks
};

template <typename T>
struct NetParamT {
    std::string name;
    Shape shape;
    std::shared_ptr<std::vector<T>> values;

    size_t size() const { return values->size(); }
};

namespace detail {

template <typename T>
class ParamBuilder {
public:
    ParamBuilder(std::vector<NetParamT<T>>& out, Rng& rng, float leaky_slope)
        : out_(out), rng_(rng), slope_(leaky_slope) {}

    // He-normal fan-in init, adjusted for the leaky rectifier
    void conv(const std::string& name, int cout, int cin, int k) {
        const double fan_in = static_cast<double>(cin) * k * k;
        const double gain2 = 2.0 / (1.0 + static_cast<double>(slope_) * slope_);
        const double stddev = std::sqrt(gain2 / fan_in);
        add(name + ".w", {cout, cin, k, k}, stddev);
        add(name + ".b", {cout}, 0.0);
    }
    void proj(const std::string& name, int cout, int cin) {
        const double stddev = std::sqrt(1.0 / cin);
        add(name + ".w", {cout, cin, 1, 1}, stddev);
    }
    void dense(const std::string& name, int m, int n) {
        const double stddev = std::sqrt(2.0 / n);
        add(name + ".w", {m, n}, stddev);
        add(name + ".b", {m}, 0.0);
    }

private:
    void add(const std::string& name, Shape shape, double stddev) {
        auto vals = std::make_shared<std::vector<T>>(shape_numel(shape));
        if (stddev > 0)
            for (auto& v : *vals) v = static_cast<T>(stddev * rng_.normal());
        out_.push_back({name, std::move(shape), std::move(vals)});
    }

    std::vector<NetParamT<T>>& out_;
    Rng& rng_;
    float slope_;
};

// sequential access to bound leaves in parameter-creation order
template <typename T>
struct LeafCursor {
    const std::vector<TensorT<T>>* leaves;
    size_t i = 0;
    const TensorT<T>& next() {
        if (i >= leaves->size()) throw std::logic_error("LeafCursor: parameter walk out of sync");
        return (*leaves)[i++];
    }
    void finish() const {
        if (i != leaves->size()) throw std::logic_error("LeafCursor: parameters left unvisited");
    }
};

}  // namespace detail

template <typename T>
uint64_t params_hash(const std::vector<NetParamT<T>>& params) {
    uint64_t h = 1469598103934665603ull;
    for (const auto& p : params) {
        h = fnv1a(p.name, h);
        h = fnv1a(p.values->data(), p.values->size() * sizeof(T), h);
    }
    return h;
}

// ---------------------------------------------------------------------------
// generator
// ---------------------------------------------------------------------------

template <typename T>
struct BoundGeneratorT {
    GeneratorConfig cfg;
    std::vector<TensorT<T>> leaves;

    struct Forward {
        TensorT<T> output;
        std::vector<TensorT<T>> taps;  // per-level encoder features
    };

    Forward forward_with_taps(const TensorT<T>& input) const {
        if (input.shape().size() != 3 || input.dim(0) != cfg.in_channels)
            throw std::invalid_argument("generator: input channel mismatch");
        const int div = cfg.spatial_divisor();
        if (input.dim(1) % div || input.dim(2) % div)
            throw std::invalid_argument("generator: spatial dims must be divisible by " +
                                        std::to_string(div));
        detail::LeafCursor<T> cur{&leaves};
        const T slope = static_cast<T>(cfg.leaky_slope);

        Forward fw;
        std::vector<TensorT<T>> skips;
        TensorT<T> x = input;
        // encoder
        for (int lvl = 1; lvl <= cfg.levels; ++lvl) {
            const TensorT<T> block_in = x;
            for (int c = 0; c < cfg.convs_per_block; ++c) {
                x = leaky_relu(add_channel_bias(conv2d(x, cur.next()), cur.next()), slope);
            }
            if (cfg.residual_down) {
                if (block_in.dim(0) != x.dim(0))
                    x = add(x, conv2d(block_in, cur.next()));
                else
                    x = add(x, block_in);
            }
            skips.push_back(x);
            x = pool2(x, cfg.pool);
            fw.taps.push_back(cfg.tap_post_pool ? x : skips.back());
        }
        // decoder
        for (int lvl = cfg.levels; lvl >= 1; --lvl) {
            x = resize_bilinear_2x(x);
            x = concat_channels(x, skips[lvl - 1]);
            const TensorT<T> block_in = x;
            for (int c = 0; c < cfg.convs_per_block; ++c) {
                x = leaky_relu(add_channel_bias(conv2d(x, cur.next()), cur.next()), slope);
            }
            if (cfg.residual_up) {
                if (block_in.dim(0) != x.dim(0))
                    x = add(x, conv2d(block_in, cur.next()));
                else
                    x = add(x, block_in);
            }
        }
        fw.output = add_channel_bias(conv2d(x, cur.next()), cur.next());
        cur.finish();
        return fw;
    }

    TensorT<T> forward(const TensorT<T>& input) const { return forward_with_taps(input).output; }
};

template <typename T>
class GeneratorNetworkT {
public:
    static GeneratorNetworkT build(const GeneratorConfig& cfg, uint64_t seed) {
        if (cfg.base_channels < 4) throw std::invalid_argument("generator: base_channels >= 4");
        if (cfg.in_channels < 1 || cfg.out_channels < 1)
            throw std::invalid_argument("generator: invalid channel counts");
        GeneratorNetworkT net;
        net.cfg_ = cfg;
        Rng rng(seed);
        detail::ParamBuilder<T> pb(net.params_, rng, cfg.leaky_slope);

        int ch = cfg.in_channels;
        for (int lvl = 1; lvl <= cfg.levels; ++lvl) {
            const int out = cfg.encoder_channels(lvl);
            const std::string base = "down" + std::to_string(lvl);
            for (int c = 0; c < cfg.convs_per_block; ++c)
                pb.conv(base + ".conv" + std::to_string(c), out, c == 0 ? ch : out, 3);
            if (cfg.residual_down && ch != out) pb.proj(base + ".proj", out, ch);
            ch = out;
        }
        for (int lvl = cfg.levels; lvl >= 1; --lvl) {
            const int cat = ch + cfg.encoder_channels(lvl);
            if (cat % 4) throw std::invalid_argument("generator: decoder channels not divisible by 4");
            const int out = cat / 4;
            const std::string base = "up" + std::to_string(lvl);
            for (int c = 0; c < cfg.convs_per_block; ++c)
                pb.conv(base + ".conv" + std::to_string(c), out, c == 0 ? cat : out, 3);
            if (cfg.residual_up && cat != out) pb.proj(base + ".proj", out, cat);
            ch = out;
        }
        pb.conv("final", cfg.out_channels, ch, 3);
        return net;
    }

    const GeneratorConfig& config() const { return cfg_; }
    std::vector<NetParamT<T>>& params() { return params_; }
    const std::vector<NetParamT<T>>& params() const { return params_; }

    size_t parameter_count() const {
        size_t n = 0;
        for (const auto& p : params_) n += p.size();
        return n;
    }
    uint64_t parameter_hash() const { return params_hash(params_); }

    BoundGeneratorT<T> bind(bool trainable) const {
        BoundGeneratorT<T> b;
        b.cfg = cfg_;
        b.leaves.reserve(params_.size());
        for (const auto& p : params_)
            b.leaves.push_back(TensorT<T>::leaf_over(p.shape, p.values, trainable));
        return b;
    }

private:
    GeneratorConfig cfg_;
    std::vector<NetParamT<T>> params_;
};

// ---------------------------------------------------------------------------
// discriminator
// ---------------------------------------------------------------------------

template <typename T>
struct BoundDiscriminatorT {
    DiscriminatorConfig cfg;
    std::vector<TensorT<T>> leaves;

    struct Forward {
        TensorT<T> output;             // scalar in (0,1)
        std::vector<TensorT<T>> taps;  // per-block feature maps
    };

    Forward forward_with_taps(const TensorT<T>& input) const {
        if (input.shape().size() != 3 || input.dim(0) != cfg.in_channels)
            throw std::invalid_argument("discriminator: input channel mismatch");
        const int div = cfg.spatial_divisor();
        if (input.dim(1) % div || input.dim(2) % div)
            throw std::invalid_argument("discriminator: spatial dims must be divisible by " +
                                        std::to_string(div));
        detail::LeafCursor<T> cur{&leaves};
        const T slope = static_cast<T>(cfg.leaky_slope);

        Forward fw;
        TensorT<T> x = input;
        for (int j = 1; j <= cfg.blocks; ++j) {
            x = leaky_relu(add_channel_bias(conv2d(x, cur.next()), cur.next()), slope);
            x = leaky_relu(add_channel_bias(conv2d(x, cur.next(), 2), cur.next()), slope);
            fw.taps.push_back(x);
        }
        TensorT<T> v = global_avg_pool(x);
        v = leaky_relu(dense(v, cur.next(), cur.next()), slope);
        v = dense(v, cur.next(), cur.next());
        fw.output = sigmoid(v);
        cur.finish();
        return fw;
    }

    TensorT<T> forward(const TensorT<T>& input) const { return forward_with_taps(input).output; }
};

template <typename T>
class DiscriminatorNetworkT {
public:
    static DiscriminatorNetworkT build(const DiscriminatorConfig& cfg, uint64_t seed) {
        if (cfg.base_channels < 2) throw std::invalid_argument("discriminator: base_channels >= 2");
        DiscriminatorNetworkT net;
        net.cfg_ = cfg;
        Rng rng(seed);
        detail::ParamBuilder<T> pb(net.params_, rng, cfg.leaky_slope);
        int ch = cfg.in_channels;
        for (int j = 1; j <= cfg.blocks; ++j) {
            const int out = cfg.block_channels(j);
            const std::string base = "block" + std::to_string(j);
            pb.conv(base + ".conv0", out, ch, 3);
            pb.conv(base + ".conv1", out, out, 3);
            ch = out;
        }
        pb.dense("fc0", ch / 2, ch);
        pb.dense("fc1", 1, ch / 2);
        return net;
    }

    const DiscriminatorConfig& config() const { return cfg_; }
    std::vector<NetParamT<T>>& params() { return params_; }
    const std::vector<NetParamT<T>>& params() const { return params_; }
    size_t parameter_count() const {
        size_t n = 0;
        for (const auto& p : params_) n += p.size();
        return n;
    }
    uint64_t parameter_hash() const { return params_hash(params_); }

    BoundDiscriminatorT<T> bind(bool trainable) const {
        BoundDiscriminatorT<T> b;
        b.cfg = cfg_;
        b.leaves.reserve(params_.size());
        for (const auto& p : params_)
            b.leaves.push_back(TensorT<T>::leaf_over(p.shape, p.values, trainable));
        return b;
    }

private:
    DiscriminatorConfig cfg_;
    std::vector<NetParamT<T>> params_;
};

using GeneratorNetwork = GeneratorNetworkT<float>;
using DiscriminatorNetwork = DiscriminatorNetworkT<float>;

// ---------------------------------------------------------------------------
// builders with the architecture constants from the reference design
// ---------------------------------------------------------------------------

inline GeneratorConfig vs_generator_config(int base_channels) {
    GeneratorConfig cfg;
    cfg.variant = GeneratorVariant::VirtualStainer;
    cfg.levels = 4;
    cfg.convs_per_block = 3;
    cfg.pool = PoolKind::Avg;
    cfg.base_channels = base_channels;
    cfg.in_channels = 2;   // DAPI, TxRed
    cfg.out_channels = 3;  // YCbCr
    cfg.residual_down = true;
    cfg.residual_up = false;
    return cfg;
}

inline GeneratorConfig dr_generator_config(int base_channels) {
    GeneratorConfig cfg;
    cfg.variant = GeneratorVariant::Refocuser;
    cfg.levels = 5;
    cfg.convs_per_block = 2;
    cfg.pool = PoolKind::Max;
    cfg.base_channels = base_channels;
    cfg.in_channels = 2;
    cfg.out_channels = 2;
    cfg.residual_down = true;
    cfg.residual_up = true;
    return cfg;
}

template <typename T = float>
GeneratorNetworkT<T> build_vs_generator(int base_channels, uint64_t seed) {
    return GeneratorNetworkT<T>::build(vs_generator_config(base_channels), seed);
}

template <typename T = float>
GeneratorNetworkT<T> build_dr_generator(int base_channels, uint64_t seed) {
    return GeneratorNetworkT<T>::build(dr_generator_config(base_channels), seed);
}

template <typename T = float>
DiscriminatorNetworkT<T> build_discriminator(int in_channels, int base_channels, uint64_t seed) {
    DiscriminatorConfig cfg;
    cfg.in_channels = in_channels;
    cfg.base_channels = base_channels;
    return DiscriminatorNetworkT<T>::build(cfg, seed);
}

// M multiscale feature maps of the (frozen) virtual stainer at `input`;
// gradients flow to `input` but never into the stainer's parameters.
template <typename T>
std::vector<TensorT<T>> tap_vs_features(const BoundGeneratorT<T>& frozen_vs,
                                        const TensorT<T>& input) {
    if (frozen_vs.cfg.variant != GeneratorVariant::VirtualStainer)
        throw std::invalid_argument("tap_vs_features: network is not a virtual stainer");
    return frozen_vs.forward_with_taps(input).taps;
}

template <typename T>
std::vector<TensorT<T>> tap_disc_features(const BoundDiscriminatorT<T>& disc,
                                          const TensorT<T>& input) {
    return disc.forward_with_taps(input).taps;
}

// ---------------------------------------------------------------------------
// Image <-> Tensor bridging
// ---------------------------------------------------------------------------

template <typename T = float>
TensorT<T> to_tensor(const Image& img, bool requires_grad = false) {
    std::vector<T> vals(img.data.begin(), img.data.end());
    return TensorT<T>::from_values({img.channels, img.height, img.width}, std::move(vals),
                                   requires_grad);
}

template <typename T>
Image to_image(const TensorT<T>& t) {
    if (t.shape().size() != 3) throw std::invalid_argument("to_image: expected [C,H,W]");
    Image img(t.dim(0), t.dim(1), t.dim(2));
    for (size_t i = 0; i < t.size(); ++i) img.data[i] = static_cast<float>(t.values()[i]);
    return img;
}

}  // namespace vstain
