#pragma once

// Minimal reverse-mode differentiable array engine. Tensors are handles to
// graph nodes; every primitive builds a node with a backward closure. Ops are
// pure: inputs are never mutated, so independent graphs may be evaluated
// concurrently as long as each graph's backward runs on its own thread.
//
// Two precision modes: TensorT<float> for training, TensorT<double> for
// finite-difference gradient verification.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace vstain {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) {
        if (d <= 0) throw std::invalid_argument("shape dimensions must be positive");
        n *= static_cast<size_t>(d);
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
    return r + "]";
}

enum class Padding { SameReflect, Valid };
enum class PoolKind { Avg, Max };

template <typename T>
struct NodeT {
    Shape shape;
    std::shared_ptr<std::vector<T>> values;
    std::vector<T> grad;  // allocated on first touch
    bool requires_grad = false;
    std::vector<std::shared_ptr<NodeT<T>>> parents;
    std::function<void(NodeT<T>&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != values->size()) grad.assign(values->size(), T(0));
    }
};

template <typename T>
class TensorT {
public:
    TensorT() = default;

    static TensorT zeros(Shape shape, bool requires_grad = false) {
        return from_values(std::move(shape), {}, requires_grad);
    }

    static TensorT from_values(Shape shape, std::vector<T> vals, bool requires_grad = false) {
        const size_t n = shape_numel(shape);
        if (vals.empty()) vals.assign(n, T(0));
        if (vals.size() != n)
            throw std::invalid_argument("tensor values length does not match shape " + shape_str(shape));
        auto node = std::make_shared<NodeT<T>>();
        node->shape = std::move(shape);
        node->values = std::make_shared<std::vector<T>>(std::move(vals));
        node->requires_grad = requires_grad;
        return TensorT(std::move(node));
    }

    // Leaf sharing external value storage; used to run several per-sample
    // graphs over one parameter set with separate gradient buffers.
    static TensorT leaf_over(Shape shape, std::shared_ptr<std::vector<T>> vals, bool requires_grad) {
        if (shape_numel(shape) != vals->size())
            throw std::invalid_argument("leaf_over: shape/value size mismatch");
        auto node = std::make_shared<NodeT<T>>();
        node->shape = std::move(shape);
        node->values = std::move(vals);
        node->requires_grad = requires_grad;
        return TensorT(std::move(node));
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape.at(i); }
    size_t size() const { return node_->values->size(); }
    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<T>& values() const { return *node_->values; }
    std::vector<T>& mutable_values() { return *node_->values; }
    std::shared_ptr<std::vector<T>> values_ptr() const { return node_->values; }

    const std::vector<T>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    std::vector<T>& mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->grad.assign(node_->values->size(), T(0)); }

    T item() const {
        if (size() != 1) throw std::invalid_argument("item(): tensor is not scalar");
        return (*node_->values)[0];
    }

    std::shared_ptr<NodeT<T>> node() const { return node_; }

    explicit TensorT(std::shared_ptr<NodeT<T>> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<NodeT<T>> node_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

namespace detail {

template <typename T>
void check_finite(const std::vector<T>& v, const char* op) {
    for (const T& x : v)
        if (!std::isfinite(x))
            throw std::runtime_error(std::string("non-finite value produced by ") + op);
}

template <typename T>
TensorT<T> make_result(Shape shape, std::vector<T> vals, std::vector<TensorT<T>> parents,
                       std::function<void(NodeT<T>&)> backward, const char* op) {
    check_finite(vals, op);
    auto node = std::make_shared<NodeT<T>>();
    node->shape = std::move(shape);
    node->values = std::make_shared<std::vector<T>>(std::move(vals));
    bool req = false;
    for (auto& p : parents) {
        node->parents.push_back(p.node());
        req = req || p.requires_grad();
    }
    node->requires_grad = req;
    if (req) node->backward_fn = std::move(backward);
    return TensorT<T>(std::move(node));
}

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline int reflect101(int p, int n) {
    if (n == 1) return 0;
    while (p < 0 || p >= n) {
        if (p < 0) p = -p;
        if (p >= n) p = 2 * n - 2 - p;
    }
    return p;
}

struct ConvGeometry {
    int h_out, w_out;
    int pad_top, pad_left, pad_bottom, pad_right;
};

inline ConvGeometry conv_geometry(int h, int w, int k, int stride, Padding pad) {
    ConvGeometry g{};
    if (pad == Padding::SameReflect) {
        g.h_out = (h + stride - 1) / stride;
        g.w_out = (w + stride - 1) / stride;
        const int ph = std::max(0, (g.h_out - 1) * stride + k - h);
        const int pw = std::max(0, (g.w_out - 1) * stride + k - w);
        g.pad_top = ph / 2;
        g.pad_bottom = ph - g.pad_top;
        g.pad_left = pw / 2;
        g.pad_right = pw - g.pad_left;
    } else {
        if (h < k || w < k) throw std::invalid_argument("conv2d: input smaller than kernel");
        g.h_out = (h - k) / stride + 1;
        g.w_out = (w - k) / stride + 1;
    }
    return g;
}

// With Valid padding indices never leave the image, so the reflect mapping is
// the identity there.
inline int reflect_or_raw(int p, int n) { return (p < 0 || p >= n) ? reflect101(p, n) : p; }

// col layout: [Cin*k*k, h_out*w_out]
template <typename T>
void im2col(const std::vector<T>& input, int cin, int h, int w, int k, int stride,
            const ConvGeometry& g, std::vector<T>& col) {
    const int oh = g.h_out, ow = g.w_out;
    col.resize(static_cast<size_t>(cin) * k * k * oh * ow);
    for (int c = 0; c < cin; ++c) {
        const T* plane = input.data() + static_cast<size_t>(c) * h * w;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                T* dst = col.data() + ((static_cast<size_t>(c) * k + ky) * k + kx) * oh * ow;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = reflect_or_raw(oy * stride + ky - g.pad_top, h);
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = reflect_or_raw(ox * stride + kx - g.pad_left, w);
                        dst[static_cast<size_t>(oy) * ow + ox] =
                            plane[static_cast<size_t>(iy) * w + ix];
                    }
                }
            }
        }
    }
}

// scatter-add the col gradient back to the input gradient, folding reflected
// border reads onto their source pixels
template <typename T>
void col2im_add(const std::vector<T>& col, int cin, int h, int w, int k, int stride,
                const ConvGeometry& g, std::vector<T>& dinput) {
    const int oh = g.h_out, ow = g.w_out;
    for (int c = 0; c < cin; ++c) {
        T* dplane = dinput.data() + static_cast<size_t>(c) * h * w;
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const T* src = col.data() + ((static_cast<size_t>(c) * k + ky) * k + kx) * oh * ow;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = reflect_or_raw(oy * stride + ky - g.pad_top, h);
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = reflect_or_raw(ox * stride + kx - g.pad_left, w);
                        dplane[static_cast<size_t>(iy) * w + ix] +=
                            src[static_cast<size_t>(oy) * ow + ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// primitives
// ---------------------------------------------------------------------------

// input [Cin,H,W] * kernel [Cout,Cin,k,k] -> [Cout,H',W']
template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& kernel, int stride = 1,
                  Padding pad = Padding::SameReflect) {
    if (input.shape().size() != 3 || kernel.shape().size() != 4)
        throw std::invalid_argument("conv2d: expected input [C,H,W], kernel [Cout,Cin,k,k]");
    const int cin = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int cout = kernel.dim(0), k = kernel.dim(2);
    if (kernel.dim(1) != cin)
        throw std::invalid_argument("conv2d: kernel Cin mismatch: " + shape_str(input.shape()) +
                                    " vs " + shape_str(kernel.shape()));
    if (kernel.dim(3) != k || k % 2 == 0) throw std::invalid_argument("conv2d: kernel must be square and odd");
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    if (pad == Padding::SameReflect && (h < 2 || w < 2) && k > 1)
        throw std::invalid_argument("conv2d: reflect padding needs H,W >= 2");

    const auto g = detail::conv_geometry(h, w, k, stride, pad);
    const int oh = g.h_out, ow = g.w_out;
    const int kk = cin * k * k;

    std::vector<T> col;
    detail::im2col(input.values(), cin, h, w, k, stride, g, col);

    std::vector<T> out(static_cast<size_t>(cout) * oh * ow);
    {
        detail::ConstMatMap<T> wmat(kernel.values().data(), cout, kk);
        detail::ConstMatMap<T> cmat(col.data(), kk, oh * ow);
        detail::MatMap<T> omat(out.data(), cout, oh * ow);
        omat.noalias() = wmat * cmat;
    }

    auto backward = [cin, h, w, cout, k, stride, g, kk, oh, ow](NodeT<T>& self) {
        auto& in_node = *self.parents[0];
        auto& ker_node = *self.parents[1];
        detail::ConstMatMap<T> dout(self.grad.data(), cout, oh * ow);

        std::vector<T> col;
        detail::im2col(*in_node.values, cin, h, w, k, stride, g, col);
        detail::ConstMatMap<T> cmat(col.data(), kk, oh * ow);

        if (ker_node.requires_grad) {
            ker_node.ensure_grad();
            detail::MatMap<T> dker(ker_node.grad.data(), cout, kk);
            dker.noalias() += dout * cmat.transpose();
        }
        if (in_node.requires_grad) {
            in_node.ensure_grad();
            std::vector<T> dcol(static_cast<size_t>(kk) * oh * ow);
            detail::ConstMatMap<T> wmat(ker_node.values->data(), cout, kk);
            detail::MatMap<T> dcmat(dcol.data(), kk, oh * ow);
            dcmat.noalias() = wmat.transpose() * dout;
            detail::col2im_add(dcol, cin, h, w, k, stride, g, in_node.grad);
        }
    };
    return detail::make_result<T>({cout, oh, ow}, std::move(out), {input, kernel},
                                  std::move(backward), "conv2d");
}

// per-channel bias add: x [C,H,W] + b [C]
template <typename T>
TensorT<T> add_channel_bias(const TensorT<T>& x, const TensorT<T>& bias) {
    if (x.shape().size() != 3 || bias.shape().size() != 1 || bias.dim(0) != x.dim(0))
        throw std::invalid_argument("add_channel_bias: shape mismatch");
    const int c = x.dim(0);
    const size_t plane = static_cast<size_t>(x.dim(1)) * x.dim(2);
    std::vector<T> out(x.values());
    for (int ci = 0; ci < c; ++ci) {
        const T b = bias.values()[ci];
        T* p = out.data() + ci * plane;
        for (size_t i = 0; i < plane; ++i) p[i] += b;
    }
    auto backward = [c, plane](NodeT<T>& self) {
        auto& xn = *self.parents[0];
        auto& bn = *self.parents[1];
        if (xn.requires_grad) {
            xn.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) xn.grad[i] += self.grad[i];
        }
        if (bn.requires_grad) {
            bn.ensure_grad();
            for (int ci = 0; ci < c; ++ci) {
                T acc = T(0);
                const T* g = self.grad.data() + ci * plane;
                for (size_t i = 0; i < plane; ++i) acc += g[i];
                bn.grad[ci] += acc;
            }
        }
    };
    return detail::make_result<T>(x.shape(), std::move(out), {x, bias}, std::move(backward),
                                  "add_channel_bias");
}

// 2x2 window, stride 2. Max routes gradient to the first maximum in row-major
// window order.
template <typename T>
TensorT<T> pool2(const TensorT<T>& x, PoolKind kind) {
    if (x.shape().size() != 3) throw std::invalid_argument("pool2: expected [C,H,W]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h % 2 || w % 2) throw std::invalid_argument("pool2: spatial dims must be even");
    const int oh = h / 2, ow = w / 2;
    std::vector<T> out(static_cast<size_t>(c) * oh * ow);
    std::vector<int32_t> argmax(kind == PoolKind::Max ? out.size() : 0);

    const auto& in = x.values();
    for (int ci = 0; ci < c; ++ci) {
        const T* plane = in.data() + static_cast<size_t>(ci) * h * w;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                const int y = 2 * oy, xx = 2 * ox;
                const size_t oidx = (static_cast<size_t>(ci) * oh + oy) * ow + ox;
                const size_t i00 = static_cast<size_t>(y) * w + xx;
                if (kind == PoolKind::Avg) {
                    out[oidx] = static_cast<T>(0.25) *
                                (plane[i00] + plane[i00 + 1] + plane[i00 + w] + plane[i00 + w + 1]);
                } else {
                    const size_t idx[4] = {i00, i00 + 1, i00 + w, i00 + w + 1};
                    size_t best = idx[0];
                    for (int t = 1; t < 4; ++t)
                        if (plane[idx[t]] > plane[best]) best = idx[t];
                    out[oidx] = plane[best];
                    argmax[oidx] = static_cast<int32_t>(best);
                }
            }
        }
    }
    auto backward = [c, h, w, oh, ow, kind, argmax = std::move(argmax)](NodeT<T>& self) {
        auto& xn = *self.parents[0];
        if (!xn.requires_grad) return;
        xn.ensure_grad();
        for (int ci = 0; ci < c; ++ci) {
            T* dplane = xn.grad.data() + static_cast<size_t>(ci) * h * w;
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    const size_t oidx = (static_cast<size_t>(ci) * oh + oy) * ow + ox;
                    const T g = self.grad[oidx];
                    if (kind == PoolKind::Avg) {
                        const size_t i00 = (static_cast<size_t>(2 * oy)) * w + 2 * ox;
                        const T q = static_cast<T>(0.25) * g;
                        dplane[i00] += q;
                        dplane[i00 + 1] += q;
                        dplane[i00 + w] += q;
                        dplane[i00 + w + 1] += q;
                    } else {
                        dplane[argmax[oidx]] += g;
                    }
                }
            }
        }
    };
    return detail::make_result<T>({c, oh, ow}, std::move(out), {x}, std::move(backward), "pool2");
}

// 2x bilinear upsample, align-corners convention: output grid [0, 2H-1] maps
// linearly onto input grid [0, H-1], so linear ramps stay exactly linear.
template <typename T>
TensorT<T> resize_bilinear_2x(const TensorT<T>& x) {
    if (x.shape().size() != 3) throw std::invalid_argument("resize_bilinear_2x: expected [C,H,W]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h < 2 || w < 2) throw std::invalid_argument("resize_bilinear_2x: spatial dims must be >= 2");
    const int oh = 2 * h, ow = 2 * w;

    auto coords = [](int o, int n, int on) {
        const double src = static_cast<double>(o) * (n - 1) / static_cast<double>(on - 1);
        int i0 = static_cast<int>(std::floor(src));
        if (i0 > n - 2) i0 = n - 2;
        return std::pair<int, double>(i0, src - i0);
    };

    std::vector<T> out(static_cast<size_t>(c) * oh * ow);
    const auto& in = x.values();
    for (int ci = 0; ci < c; ++ci) {
        const T* plane = in.data() + static_cast<size_t>(ci) * h * w;
        for (int oy = 0; oy < oh; ++oy) {
            const auto [y0, fy] = coords(oy, h, oh);
            for (int ox = 0; ox < ow; ++ox) {
                const auto [x0, fx] = coords(ox, w, ow);
                const double v = (1 - fy) * ((1 - fx) * plane[static_cast<size_t>(y0) * w + x0] +
                                             fx * plane[static_cast<size_t>(y0) * w + x0 + 1]) +
                                 fy * ((1 - fx) * plane[static_cast<size_t>(y0 + 1) * w + x0] +
                                       fx * plane[static_cast<size_t>(y0 + 1) * w + x0 + 1]);
                out[(static_cast<size_t>(ci) * oh + oy) * ow + ox] = static_cast<T>(v);
            }
        }
    }
    auto backward = [c, h, w, oh, ow, coords](NodeT<T>& self) {
        auto& xn = *self.parents[0];
        if (!xn.requires_grad) return;
        xn.ensure_grad();
        for (int ci = 0; ci < c; ++ci) {
            T* dplane = xn.grad.data() + static_cast<size_t>(ci) * h * w;
            for (int oy = 0; oy < oh; ++oy) {
                const auto [y0, fy] = coords(oy, h, oh);
                for (int ox = 0; ox < ow; ++ox) {
                    const auto [x0, fx] = coords(ox, w, ow);
                    const T g = self.grad[(static_cast<size_t>(ci) * oh + oy) * ow + ox];
                    dplane[static_cast<size_t>(y0) * w + x0] += static_cast<T>((1 - fy) * (1 - fx)) * g;
                    dplane[static_cast<size_t>(y0) * w + x0 + 1] += static_cast<T>((1 - fy) * fx) * g;
                    dplane[static_cast<size_t>(y0 + 1) * w + x0] += static_cast<T>(fy * (1 - fx)) * g;
                    dplane[static_cast<size_t>(y0 + 1) * w + x0 + 1] += static_cast<T>(fy * fx) * g;
                }
            }
        }
    };
    return detail::make_result<T>({c, oh, ow}, std::move(out), {x}, std::move(backward),
                                  "resize_bilinear_2x");
}

template <typename T>
TensorT<T> leaky_relu(const TensorT<T>& x, T slope) {
    std::vector<T> out(x.values());
    for (T& v : out)
        if (v < T(0)) v *= slope;
    auto backward = [slope](NodeT<T>& self) {
        auto& xn = *self.parents[0];
        if (!xn.requires_grad) return;
        xn.ensure_grad();
        const auto& in = *xn.values;
        for (size_t i = 0; i < in.size(); ++i)
            xn.grad[i] += self.grad[i] * (in[i] < T(0) ? slope : T(1));
    };
    return detail::make_result<T>(x.shape(), std::move(out), {x}, std::move(backward), "leaky_relu");
}

template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x) {
    std::vector<T> out(x.values().size());
    for (size_t i = 0; i < out.size(); ++i) {
        const T v = x.values()[i];
        out[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                           : std::exp(v) / (T(1) + std::exp(v));
    }
    auto backward = [](NodeT<T>& self) {
        auto& xn = *self.parents[0];
        if (!xn.requires_grad) return;
        xn.ensure_grad();
        const auto& y = *self.values;
        for (size_t i = 0; i < y.size(); ++i) xn.grad[i] += self.grad[i] * y[i] * (T(1) - y[i]);
    };
    return detail::make_result<T>(x.shape(), std::move(out), {x}, std::move(backward), "sigmoid");
}

// x [N] -> weights [M,N] * x + bias [M]
template <typename T>
TensorT<T> dense(const TensorT<T>& x, const TensorT<T>& weights, const TensorT<T>& bias) {
    if (x.shape().size() != 1 || weights.shape().size() != 2 || bias.shape().size() != 1)
        throw std::invalid_argument("dense: expected x[N], weights[M,N], bias[M]");
    const int n = x.dim(0), m = weights.dim(0);
    if (weights.dim(1) != n || bias.dim(0) != m)
        throw std::invalid_argument("dense: shape mismatch " + shape_str(weights.shape()));
    std::vector<T> out(m);
    {
        detail::ConstMatMap<T> wm(weights.values().data(), m, n);
        Eigen::Map<const Eigen::Vector<T, Eigen::Dynamic>> xv(x.values().data(), n);
        Eigen::Map<Eigen::Vector<T, Eigen::Dynamic>> ov(out.data(), m);
        ov.noalias() = wm * xv;
        for (int i = 0; i < m; ++i) out[i] += bias.values()[i];
    }
    auto backward = [n, m](NodeT<T>& self) {
        auto& xn = *self.parents[0];
        auto& wn = *self.parents[1];
        auto& bn = *self.parents[2];
        Eigen::Map<const Eigen::Vector<T, Eigen::Dynamic>> g(self.grad.data(), m);
        if (xn.requires_grad) {
            xn.ensure_grad();
            detail::ConstMatMap<T> wm(wn.values->data(), m, n);
            Eigen::Map<Eigen::Vector<T, Eigen::Dynamic>> dx(xn.grad.data(), n);
            dx.noalias() += wm.transpose() * g;
        }
        if (wn.requires_grad) {
            wn.ensure_grad();
            detail::MatMap<T> dw(wn.grad.data(), m, n);
            Eigen::Map<const Eigen::Vector<T, Eigen::Dynamic>> xv(xn.values->data(), n);
            dw.noalias() += g * xv.transpose();
        }
        if (bn.requires_grad) {
            bn.ensure_grad();
            for (int i = 0; i < m; ++i) bn.grad[i] += self.grad[i];
        }
    };
    return detail::make_result<T>({m}, std::move(out), {x, weights, bias}, std::move(backward),
                                  "dense");
}

namespace detail {
template <typename T>
void require_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}
}  // namespace detail

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<T> out(a.values());
    for (size_t i = 0; i < out.size(); ++i) out[i] += b.values()[i];
    auto backward = [](NodeT<T>& self) {
        for (int p = 0; p < 2; ++p) {
            auto& n = *self.parents[p];
            if (!n.requires_grad) continue;
            n.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) n.grad[i] += self.grad[i];
        }
    };
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, std::move(backward), "add");
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<T> out(a.values());
    for (size_t i = 0; i < out.size(); ++i) out[i] -= b.values()[i];
    auto backward = [](NodeT<T>& self) {
        auto& an = *self.parents[0];
        auto& bn = *self.parents[1];
        if (an.requires_grad) {
            an.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) an.grad[i] += self.grad[i];
        }
        if (bn.requires_grad) {
            bn.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) bn.grad[i] -= self.grad[i];
        }
    };
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, std::move(backward), "sub");
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<T> out(a.values());
    for (size_t i = 0; i < out.size(); ++i) out[i] *= b.values()[i];
    auto backward = [](NodeT<T>& self) {
        auto& an = *self.parents[0];
        auto& bn = *self.parents[1];
        if (an.requires_grad) {
            an.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                an.grad[i] += self.grad[i] * (*bn.values)[i];
        }
        if (bn.requires_grad) {
            bn.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                bn.grad[i] += self.grad[i] * (*an.values)[i];
        }
    };
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, std::move(backward), "mul");
}

template <typename T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_shape(a, b, "div");
    std::vector<T> out(a.values());
    for (size_t i = 0; i < out.size(); ++i) out[i] /= b.values()[i];
    auto backward = [](NodeT<T>& self) {
        auto& an = *self.parents[0];
        auto& bn = *self.parents[1];
        if (an.requires_grad) {
            an.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                an.grad[i] += self.grad[i] / (*bn.values)[i];
        }
        if (bn.requires_grad) {
            bn.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) {
                const T bv = (*bn.values)[i];
                bn.grad[i] -= self.grad[i] * (*an.values)[i] / (bv * bv);
            }
        }
    };
    return detail::make_result<T>(a.shape(), std::move(out), {a, b}, std::move(backward), "div");
}

template <typename T>
TensorT<T> scale(const TensorT<T>& x, T c) {
    std::vector<T> out(x.values());
    for (T& v : out) v *= c;
    auto backward = [c](NodeT<T>& self) {
        auto& xn = *self.parents[0];
        if (!xn.requires_grad) return;
        xn.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) xn.grad[i] += self.grad[i] * c;
    };
    return detail::make_result<T>(x.shape(), std::move(out), {x}, std::move(backward), "scale");
}

template <typename T>
TensorT<T> add_scalar(const TensorT<T>& x, T c) {
    std::vector<T> out(x.values());
    for (T& v : out) v += c;
    auto backward = [](NodeT<T>& self) {
        auto& xn = *self.parents[0];
        if (!xn.requires_grad) return;
        xn.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) xn.grad[i] += self.grad[i];
    };
    return detail::make_result<T>(x.shape(), std::move(out), {x}, std::move(backward), "add_scalar");
}

template <typename T>
TensorT<T> abs_op(const TensorT<T>& x) {
    std::vector<T> out(x.values());
    for (T& v : out) v = std::abs(v);
    auto backward = [](NodeT<T>& self) {
        auto& xn = *self.parents[0];
        if (!xn.requires_grad) return;
        xn.ensure_grad();
        const auto& in = *xn.values;
        for (size_t i = 0; i < self.grad.size(); ++i) {
            const T s = in[i] > T(0) ? T(1) : (in[i] < T(0) ? T(-1) : T(0));
            xn.grad[i] += self.grad[i] * s;
        }
    };
    return detail::make_result<T>(x.shape(), std::move(out), {x}, std::move(backward), "abs");
}

template <typename T>
TensorT<T> square(const TensorT<T>& x) {
    std::vector<T> out(x.values());
    for (T& v : out) v *= v;
    auto backward = [](NodeT<T>& self) {
        auto& xn = *self.parents[0];
        if (!xn.requires_grad) return;
        xn.ensure_grad();
        const auto& in = *xn.values;
        for (size_t i = 0; i < self.grad.size(); ++i)
            xn.grad[i] += self.grad[i] * T(2) * in[i];
    };
    return detail::make_result<T>(x.shape(), std::move(out), {x}, std::move(backward), "square");
}

// elementwise x^p for real p; caller must keep the base positive
template <typename T>
TensorT<T> pow_scalar(const TensorT<T>& x, T p) {
    std::vector<T> out(x.values());
    for (T& v : out) v = std::pow(v, p);
    auto backward = [p](NodeT<T>& self) {
        auto& xn = *self.parents[0];
        if (!xn.requires_grad) return;
        xn.ensure_grad();
        const auto& in = *xn.values;
        for (size_t i = 0; i < self.grad.size(); ++i)
            xn.grad[i] += self.grad[i] * p * std::pow(in[i], p - T(1));
    };
    return detail::make_result<T>(x.shape(), std::move(out), {x}, std::move(backward), "pow_scalar");
}

template <typename T>
TensorT<T> clamp_min(const TensorT<T>& x, T lo) {
    std::vector<T> out(x.values());
    for (T& v : out) v = std::max(v, lo);
    auto backward = [lo](NodeT<T>& self) {
        auto& xn = *self.parents[0];
        if (!xn.requires_grad) return;
        xn.ensure_grad();
        const auto& in = *xn.values;
        for (size_t i = 0; i < self.grad.size(); ++i)
            if (in[i] >= lo) xn.grad[i] += self.grad[i];
    };
    return detail::make_result<T>(x.shape(), std::move(out), {x}, std::move(backward), "clamp_min");
}

template <typename T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape().size() != 3 || b.shape().size() != 3 || a.dim(1) != b.dim(1) ||
        a.dim(2) != b.dim(2))
        throw std::invalid_argument("concat_channels: spatial shape mismatch");
    const int ca = a.dim(0), cb = b.dim(0);
    std::vector<T> out;
    out.reserve(a.size() + b.size());
    out.insert(out.end(), a.values().begin(), a.values().end());
    out.insert(out.end(), b.values().begin(), b.values().end());
    auto backward = [na = a.size()](NodeT<T>& self) {
        auto& an = *self.parents[0];
        auto& bn = *self.parents[1];
        if (an.requires_grad) {
            an.ensure_grad();
            for (size_t i = 0; i < na; ++i) an.grad[i] += self.grad[i];
        }
        if (bn.requires_grad) {
            bn.ensure_grad();
            for (size_t i = na; i < self.grad.size(); ++i) bn.grad[i - na] += self.grad[i];
        }
    };
    return detail::make_result<T>({ca + cb, a.dim(1), a.dim(2)}, std::move(out), {a, b},
                                  std::move(backward), "concat_channels");
}

template <typename T>
TensorT<T> take_channel(const TensorT<T>& x, int c) {
    if (x.shape().size() != 3 || c < 0 || c >= x.dim(0))
        throw std::invalid_argument("take_channel: bad channel");
    const size_t plane = static_cast<size_t>(x.dim(1)) * x.dim(2);
    std::vector<T> out(x.values().begin() + c * plane, x.values().begin() + (c + 1) * plane);
    auto backward = [c, plane](NodeT<T>& self) {
        auto& xn = *self.parents[0];
        if (!xn.requires_grad) return;
        xn.ensure_grad();
        for (size_t i = 0; i < plane; ++i) xn.grad[c * plane + i] += self.grad[i];
    };
    return detail::make_result<T>({1, x.dim(1), x.dim(2)}, std::move(out), {x}, std::move(backward),
                                  "take_channel");
}

template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& x) {
    if (x.shape().size() != 3) throw std::invalid_argument("global_avg_pool: expected [C,H,W]");
    const int c = x.dim(0);
    const size_t plane = static_cast<size_t>(x.dim(1)) * x.dim(2);
    std::vector<T> out(c);
    for (int ci = 0; ci < c; ++ci) {
        T acc = T(0);
        const T* p = x.values().data() + ci * plane;
        for (size_t i = 0; i < plane; ++i) acc += p[i];
        out[ci] = acc / static_cast<T>(plane);
    }
    auto backward = [c, plane](NodeT<T>& self) {
        auto& xn = *self.parents[0];
        if (!xn.requires_grad) return;
        xn.ensure_grad();
        for (int ci = 0; ci < c; ++ci) {
            const T g = self.grad[ci] / static_cast<T>(plane);
            T* d = xn.grad.data() + ci * plane;
            for (size_t i = 0; i < plane; ++i) d[i] += g;
        }
    };
    return detail::make_result<T>({c}, std::move(out), {x}, std::move(backward), "global_avg_pool");
}

template <typename T>
TensorT<T> sum_all(const TensorT<T>& x) {
    T acc = T(0);
    for (const T& v : x.values()) acc += v;
    auto backward = [](NodeT<T>& self) {
        auto& xn = *self.parents[0];
        if (!xn.requires_grad) return;
        xn.ensure_grad();
        const T g = self.grad[0];
        for (size_t i = 0; i < xn.grad.size(); ++i) xn.grad[i] += g;
    };
    return detail::make_result<T>({1}, {acc}, {x}, std::move(backward), "sum_all");
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& x) {
    T acc = T(0);
    for (const T& v : x.values()) acc += v;
    const T n = static_cast<T>(x.size());
    auto backward = [n](NodeT<T>& self) {
        auto& xn = *self.parents[0];
        if (!xn.requires_grad) return;
        xn.ensure_grad();
        const T g = self.grad[0] / n;
        for (size_t i = 0; i < xn.grad.size(); ++i) xn.grad[i] += g;
    };
    return detail::make_result<T>({1}, {acc / n}, {x}, std::move(backward), "mean_all");
}

// anisotropic total variation: per channel, sum of |down-neighbor diff| and
// |right-neighbor diff|; last row/column excluded from their own direction
template <typename T>
TensorT<T> tv_sum(const TensorT<T>& x) {
    if (x.shape().size() != 3) throw std::invalid_argument("tv_sum: expected [C,H,W]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h < 2 || w < 2) throw std::invalid_argument("tv_sum: degenerate spatial dims");
    T acc = T(0);
    const auto& in = x.values();
    for (int ci = 0; ci < c; ++ci) {
        const T* p = in.data() + static_cast<size_t>(ci) * h * w;
        for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < w; ++xx) {
                if (y + 1 < h) acc += std::abs(p[(y + 1) * w + xx] - p[y * w + xx]);
                if (xx + 1 < w) acc += std::abs(p[y * w + xx + 1] - p[y * w + xx]);
            }
    }
    auto backward = [c, h, w](NodeT<T>& self) {
        auto& xn = *self.parents[0];
        if (!xn.requires_grad) return;
        xn.ensure_grad();
        const T g = self.grad[0];
        const auto& in = *xn.values;
        for (int ci = 0; ci < c; ++ci) {
            const T* p = in.data() + static_cast<size_t>(ci) * h * w;
            T* d = xn.grad.data() + static_cast<size_t>(ci) * h * w;
            auto sgn = [](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); };
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    if (y + 1 < h) {
                        const T s = sgn(p[(y + 1) * w + xx] - p[y * w + xx]);
                        d[(y + 1) * w + xx] += g * s;
                        d[y * w + xx] -= g * s;
                    }
                    if (xx + 1 < w) {
                        const T s = sgn(p[y * w + xx + 1] - p[y * w + xx]);
                        d[y * w + xx + 1] += g * s;
                        d[y * w + xx] -= g * s;
                    }
                }
        }
    };
    return detail::make_result<T>({1}, {acc}, {x}, std::move(backward), "tv_sum");
}

// same storage order, new shape
template <typename T>
TensorT<T> reshape(const TensorT<T>& x, Shape shape) {
    if (shape_numel(shape) != x.size())
        throw std::invalid_argument("reshape: element count mismatch");
    std::vector<T> out(x.values());
    auto backward = [](NodeT<T>& self) {
        auto& xn = *self.parents[0];
        if (!xn.requires_grad) return;
        xn.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) xn.grad[i] += self.grad[i];
    };
    return detail::make_result<T>(std::move(shape), std::move(out), {x}, std::move(backward),
                                  "reshape");
}

template <typename T>
TensorT<T> reshape_to_vector(const TensorT<T>& x) {
    return reshape(x, {static_cast<int>(x.size())});
}

// cuts the graph: result is a leaf sharing the same values
template <typename T>
TensorT<T> detach(const TensorT<T>& x) {
    return TensorT<T>::leaf_over(x.shape(), x.values_ptr(), false);
}

// ---------------------------------------------------------------------------
// reverse pass
// ---------------------------------------------------------------------------

// Populates gradients for every node reachable from `loss` that requires
// grad. Parameters listed in `params` get their gradient buffer zero-filled
// first, so parameters the loss never touched end with an all-zero gradient.
template <typename T>
void backward(const TensorT<T>& loss, std::span<const TensorT<T>> params = {}) {
    if (loss.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
    for (const auto& p : params) p.node()->ensure_grad();
    if (!loss.requires_grad()) return;

    // iterative post-order topological sort over grad-requiring nodes
    std::vector<NodeT<T>*> order;
    std::unordered_set<NodeT<T>*> visited;
    struct Frame {
        NodeT<T>* node;
        size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.node().get(), 0});
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.node->parents.size()) {
            NodeT<T>* parent = f.node->parents[f.next].get();
            ++f.next;
            if (parent->requires_grad && !visited.count(parent)) {
                visited.insert(parent);
                stack.push_back({parent, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad();
    loss.node()->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        NodeT<T>* node = *it;
        node->ensure_grad();
        if (node->backward_fn) node->backward_fn(*node);
    }
}

template <typename T>
void backward(const TensorT<T>& loss, const std::vector<TensorT<T>>& params) {
    backward(loss, std::span<const TensorT<T>>(params.data(), params.size()));
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename T>
struct AdamStateT {
    std::vector<std::vector<T>> m;  // first moments, one buffer per parameter
    std::vector<std::vector<T>> v;  // second moments
    int64_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

using AdamState = AdamStateT<float>;

// Standard bias-corrected Adam step over the parameters' accumulated
// gradients. Moment buffers are allocated on first use.
template <typename T>
void adam_step(std::span<TensorT<T>> params, AdamStateT<T>& state, double lr) {
    if (lr <= 0) throw std::invalid_argument("adam_step: lr must be positive");
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].size(), T(0));
            state.v[i].assign(params[i].size(), T(0));
        }
    }
    if (state.m.size() != params.size())
        throw std::invalid_argument("adam_step: state/parameter count mismatch");
    state.t += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    for (size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (state.m[i].size() != p.size())
            throw std::invalid_argument("adam_step: moment/parameter shape mismatch");
        const auto& g = p.grad();
        auto& vals = p.mutable_values();
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (size_t j = 0; j < vals.size(); ++j) {
            m[j] = static_cast<T>(state.beta1 * m[j] + (1.0 - state.beta1) * g[j]);
            v[j] = static_cast<T>(state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j]);
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            vals[j] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + state.epsilon));
        }
    }
}

template <typename T>
void adam_step(std::vector<TensorT<T>>& params, AdamStateT<T>& state, double lr) {
    adam_step(std::span<TensorT<T>>(params.data(), params.size()), state, lr);
}

}  // namespace vstain
