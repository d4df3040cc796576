#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "autograd.hpp"
#include "kernels.hpp"
#include "tensor.hpp"

namespace u2net {

enum class Padding { same, valid };

namespace detail {

inline void check(bool ok, const std::string& msg) {
    if (!ok) throw Error(msg);
}

inline std::size_t conv_out_extent(std::size_t n, std::size_t stride, Padding pad, const char* axis) {
    if (pad == Padding::same) return (n + stride - 1) / stride;
    if (n < 3) throw Error(std::string("conv3d: ") + axis + " extent " + std::to_string(n) + " is smaller than the kernel");
    return (n - 3) / stride + 1;
}

inline void require_volume(const Shape& s, const char* op) {
    if (s.size() != 4) throw Error(std::string(op) + ": expected C x D x H x W input, got " + to_string(s));
}

inline void require_same_spatial(const Shape& a, const Shape& b, const char* op) {
    static const char* axes[] = {"channel", "depth", "height", "width"};
    for (std::size_t i = 1; i < 4; ++i)
        if (a[i] != b[i])
            throw Error(std::string(op) + ": " + axes[i] + " extent mismatch (" + std::to_string(a[i]) + " vs " +
                        std::to_string(b[i]) + ")");
}

}  // namespace detail

/// Standard 3x3x3 cross-correlation. weights: C' x C x 3 x 3 x 3, no bias.
template <class T>
Var<T> conv3d(Tape<T>& tape, const Var<T>& x, const Var<T>& w, std::size_t stride = 1, Padding pad = Padding::same) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    detail::require_volume(xs, "conv3d");
    detail::check(ws.size() == 5, "conv3d: weights must be C' x C x 3 x 3 x 3, got " + to_string(ws));
    detail::check(ws[2] == 3 && ws[3] == 3 && ws[4] == 3, "conv3d: kernel axes must be 3x3x3, got " + to_string(ws));
    detail::check(ws[1] == xs[0], "conv3d: channel axis mismatch: input has " + std::to_string(xs[0]) +
                                      " channels, weights expect " + std::to_string(ws[1]));
    detail::check(stride == 1 || stride == 2, "conv3d: stride must be 1 or 2");
    const std::size_t C = xs[0], Co = ws[0];
    kernels::ConvGeometry g;
    g.in = {xs[1], xs[2], xs[3]};
    g.out = {detail::conv_out_extent(xs[1], stride, pad, "depth"), detail::conv_out_extent(xs[2], stride, pad, "height"),
             detail::conv_out_extent(xs[3], stride, pad, "width")};
    g.stride = stride;
    g.pad = pad == Padding::same ? 1 : 0;
    const std::size_t OV = g.out.voxels();

    Tensor<T> out(volume_shape(Co, g.out));
    {
        std::vector<T> cols(C * 27 * OV);
        kernels::im2col(cols.data(), x.value().data(), C, g);
        kernels::gemm_nn(out.data(), w.value().data(), cols.data(), Co, C * 27, OV);
    }

    return tape.emit(std::move(out), {&x, &w}, [x, w, g, C, Co, OV](Node<T>& o) {
        const T* gout = o.grad.data();
        std::vector<T> cols(C * 27 * OV);
        if (T* gw = grad_of(w)) {
            kernels::im2col(cols.data(), x.value().data(), C, g);
            kernels::gemm_nt(gw, gout, cols.data(), Co, C * 27, OV);
        }
        if (T* gx = grad_of(x)) {
            std::fill(cols.begin(), cols.end(), T(0));
            kernels::gemm_tn(cols.data(), w.value().data(), gout, Co, C * 27, OV);
            kernels::col2im(gx, cols.data(), C, g);
        }
    });
}

/// One 3x3x3 filter per channel, stride 1, zero "same" padding. weights: C x 3 x 3 x 3.
template <class T>
Var<T> channelwise_conv3d(Tape<T>& tape, const Var<T>& x, const Var<T>& w) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    detail::require_volume(xs, "channelwise_conv3d");
    detail::check(ws.size() == 4 && ws[1] == 3 && ws[2] == 3 && ws[3] == 3,
                  "channelwise_conv3d: weights must be C x 3 x 3 x 3, got " + to_string(ws));
    detail::check(ws[0] == xs[0], "channelwise_conv3d: filter count " + std::to_string(ws[0]) +
                                      " does not match channel count " + std::to_string(xs[0]));
    const std::size_t C = xs[0];
    kernels::ConvGeometry g;
    g.in = g.out = {xs[1], xs[2], xs[3]};
    const std::size_t V = g.in.voxels();

    Tensor<T> out(xs);
    const T* in = x.value().data();
    const T* wt = w.value().data();
    for (std::size_t c = 0; c < C; ++c) kernels::conv_pair_forward(out.data() + c * V, in + c * V, wt + c * 27, g);

    return tape.emit(std::move(out), {&x, &w}, [x, w, g, C, V](Node<T>& o) {
        const T* gout = o.grad.data();
        if (T* gx = grad_of(x)) {
            const T* wt = w.value().data();
            for (std::size_t c = 0; c < C; ++c) kernels::conv_pair_input_grad(gx + c * V, gout + c * V, wt + c * 27, g);
        }
        if (T* gw = grad_of(w)) {
            const T* in = x.value().data();
            for (std::size_t c = 0; c < C; ++c)
                kernels::conv_pair_weight_grad(gw + c * 27, gout + c * V, in + c * V, g);
        }
    });
}

/// Per-voxel channel mixing (1x1x1 convolution). weights: C' x C.
template <class T>
Var<T> pointwise_conv3d(Tape<T>& tape, const Var<T>& x, const Var<T>& w) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    detail::require_volume(xs, "pointwise_conv3d");
    detail::check(ws.size() == 2, "pointwise_conv3d: weights must be C' x C, got " + to_string(ws));
    detail::check(ws[1] == xs[0], "pointwise_conv3d: channel axis mismatch: input has " + std::to_string(xs[0]) +
                                      " channels, weights expect " + std::to_string(ws[1]));
    const std::size_t C = xs[0], Co = ws[0], V = xs[1] * xs[2] * xs[3];
    Tensor<T> out({Co, xs[1], xs[2], xs[3]});
    const T* in = x.value().data();
    const T* wt = w.value().data();
    for (std::size_t co = 0; co < Co; ++co)
        for (std::size_t ci = 0; ci < C; ++ci) kernels::axpy(wt[co * C + ci], in + ci * V, out.data() + co * V, V);

    return tape.emit(std::move(out), {&x, &w}, [x, w, C, Co, V](Node<T>& o) {
        const T* gout = o.grad.data();
        if (T* gx = grad_of(x)) {
            const T* wt = w.value().data();
            for (std::size_t ci = 0; ci < C; ++ci)
                for (std::size_t co = 0; co < Co; ++co) kernels::axpy(wt[co * C + ci], gout + co * V, gx + ci * V, V);
        }
        if (T* gw = grad_of(w)) {
            const T* in = x.value().data();
            for (std::size_t co = 0; co < Co; ++co)
                for (std::size_t ci = 0; ci < C; ++ci) gw[co * C + ci] += kernels::dot(gout + co * V, in + ci * V, V);
        }
    });
}

/// Stride-2 transposed convolution with a 2x2x2 kernel. weights: C x C' x 2 x 2 x 2.
/// Each input voxel scatters into one 2x2x2 output block.
template <class T>
Var<T> transposed_conv3d(Tape<T>& tape, const Var<T>& x, const Var<T>& w) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    detail::require_volume(xs, "transposed_conv3d");
    detail::check(ws.size() == 5 && ws[2] == 2 && ws[3] == 2 && ws[4] == 2,
                  "transposed_conv3d: weights must be C x C' x 2 x 2 x 2, got " + to_string(ws));
    detail::check(ws[0] == xs[0], "transposed_conv3d: channel axis mismatch: input has " + std::to_string(xs[0]) +
                                      " channels, weights expect " + std::to_string(ws[0]));
    const std::size_t C = xs[0], Co = ws[1];
    const Extent3 in_e{xs[1], xs[2], xs[3]};
    const Extent3 out_e{2 * xs[1], 2 * xs[2], 2 * xs[3]};
    const std::size_t IV = in_e.voxels(), OV = out_e.voxels();

    // Visits every (input row, kernel tap) pair for one channel pair.
    auto for_pairs = [in_e, out_e](auto&& fn) {
        for (std::size_t d = 0; d < in_e.d; ++d)
            for (std::size_t h = 0; h < in_e.h; ++h)
                for (std::size_t kd = 0; kd < 2; ++kd)
                    for (std::size_t kh = 0; kh < 2; ++kh) {
                        const std::size_t in_row = (d * in_e.h + h) * in_e.w;
                        const std::size_t out_row = ((2 * d + kd) * out_e.h + 2 * h + kh) * out_e.w;
                        fn(in_row, out_row, kd * 4 + kh * 2);
                    }
    };

    Tensor<T> out(volume_shape(Co, out_e));
    const T* in = x.value().data();
    const T* wt = w.value().data();
    const std::size_t W = in_e.w;
    for (std::size_t co = 0; co < Co; ++co)
        for (std::size_t ci = 0; ci < C; ++ci) {
            const T* k8 = wt + (ci * Co + co) * 8;
            const T* src = in + ci * IV;
            T* dst = out.data() + co * OV;
            for_pairs([&](std::size_t ir, std::size_t orow, std::size_t t) {
                const T w0 = k8[t], w1 = k8[t + 1];
                for (std::size_t i = 0; i < W; ++i) {
                    dst[orow + 2 * i] += w0 * src[ir + i];
                    dst[orow + 2 * i + 1] += w1 * src[ir + i];
                }
            });
        }

    return tape.emit(std::move(out), {&x, &w}, [x, w, C, Co, IV, OV, W, for_pairs](Node<T>& o) {
        const T* gout = o.grad.data();
        if (T* gx = grad_of(x)) {
            const T* wt = w.value().data();
            for (std::size_t ci = 0; ci < C; ++ci)
                for (std::size_t co = 0; co < Co; ++co) {
                    const T* k8 = wt + (ci * Co + co) * 8;
                    const T* g = gout + co * OV;
                    T* dst = gx + ci * IV;
                    for_pairs([&](std::size_t ir, std::size_t orow, std::size_t t) {
                        const T w0 = k8[t], w1 = k8[t + 1];
                        for (std::size_t i = 0; i < W; ++i)
                            dst[ir + i] += w0 * g[orow + 2 * i] + w1 * g[orow + 2 * i + 1];
                    });
                }
        }
        if (T* gw = grad_of(w)) {
            const T* in = x.value().data();
            for (std::size_t ci = 0; ci < C; ++ci)
                for (std::size_t co = 0; co < Co; ++co) {
                    T acc[8] = {};
                    const T* g = gout + co * OV;
                    const T* src = in + ci * IV;
                    for_pairs([&](std::size_t ir, std::size_t orow, std::size_t t) {
                        T a0 = T(0), a1 = T(0);
                        for (std::size_t i = 0; i < W; ++i) {
                            a0 += src[ir + i] * g[orow + 2 * i];
                            a1 += src[ir + i] * g[orow + 2 * i + 1];
                        }
                        acc[t] += a0;
                        acc[t + 1] += a1;
                    });
                    T* k8 = gw + (ci * Co + co) * 8;
                    for (std::size_t t = 0; t < 8; ++t) k8[t] += acc[t];
                }
        }
    });
}

/// Per-channel normalization over the spatial axes followed by an affine map.
template <class T>
Var<T> instance_norm(Tape<T>& tape, const Var<T>& x, const Var<T>& gain, const Var<T>& bias, T eps = T(1e-5)) {
    const auto& xs = x.shape();
    detail::check(xs.size() >= 2, "instance_norm: expected a channel-first tensor, got " + to_string(xs));
    const std::size_t C = xs[0], V = x.value().size() / C;
    detail::check(gain.value().size() == C && bias.value().size() == C,
                  "instance_norm: affine terms must have one entry per channel (" + std::to_string(C) + ")");
    detail::check(eps > T(0), "instance_norm: eps must be positive");

    Tensor<T> out(xs);
    std::vector<T> xhat(x.value().size());
    std::vector<T> inv_std(C);
    const T* in = x.value().data();
    for (std::size_t c = 0; c < C; ++c) {
        const T* src = in + c * V;
        T mean = T(0);
        for (std::size_t i = 0; i < V; ++i) mean += src[i];
        mean /= T(V);
        T var = T(0);
        for (std::size_t i = 0; i < V; ++i) var += (src[i] - mean) * (src[i] - mean);
        var /= T(V);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[c] = is;
        const T gv = gain.value()[c], bv = bias.value()[c];
        T* xh = xhat.data() + c * V;
        T* dst = out.data() + c * V;
        for (std::size_t i = 0; i < V; ++i) {
            xh[i] = (src[i] - mean) * is;
            dst[i] = gv * xh[i] + bv;
        }
    }

    return tape.emit(std::move(out), {&x, &gain, &bias},
                     [x, gain, bias, C, V, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& o) {
                         const T* gout = o.grad.data();
                         T* gx = grad_of(x);
                         T* gg = grad_of(gain);
                         T* gb = grad_of(bias);
                         for (std::size_t c = 0; c < C; ++c) {
                             const T* g = gout + c * V;
                             const T* xh = xhat.data() + c * V;
                             T sum_g = T(0), sum_gx = T(0);
                             for (std::size_t i = 0; i < V; ++i) {
                                 sum_g += g[i];
                                 sum_gx += g[i] * xh[i];
                             }
                             if (gg) gg[c] += sum_gx;
                             if (gb) gb[c] += sum_g;
                             if (gx) {
                                 const T scale = gain.value()[c] * inv_std[c];
                                 const T mg = sum_g / T(V), mgx = sum_gx / T(V);
                                 T* dst = gx + c * V;
                                 for (std::size_t i = 0; i < V; ++i) dst[i] += scale * (g[i] - mg - xh[i] * mgx);
                             }
                         }
                     });
}

template <class T>
Var<T> leaky_relu(Tape<T>& tape, const Var<T>& x, T slope = T(0.01)) {
    Tensor<T> out(x.shape());
    const T* in = x.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] >= T(0) ? in[i] : slope * in[i];
    return tape.emit(std::move(out), {&x}, [x, slope](Node<T>& o) {
        T* gx = grad_of(x);
        const T* in = x.value().data();
        for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += in[i] >= T(0) ? o.grad[i] : slope * o.grad[i];
    });
}

/// Softmax across axis 0 at every remaining position, with max subtraction.
template <class T>
Var<T> softmax_channels(Tape<T>& tape, const Var<T>& x) {
    const auto& xs = x.shape();
    detail::check(xs.size() >= 2, "softmax_channels: expected a channel-first tensor, got " + to_string(xs));
    const std::size_t K = xs[0], V = x.value().size() / K;
    Tensor<T> out(xs);
    const T* in = x.value().data();
    T* p = out.data();
    std::vector<T> m(V, -std::numeric_limits<T>::infinity());
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t i = 0; i < V; ++i) m[i] = std::max(m[i], in[k * V + i]);
    std::vector<T> z(V, T(0));
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t i = 0; i < V; ++i) {
            p[k * V + i] = std::exp(in[k * V + i] - m[i]);
            z[i] += p[k * V + i];
        }
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t i = 0; i < V; ++i) p[k * V + i] /= z[i];

    auto probs = out;  // kept for the backward rule
    return tape.emit(std::move(out), {&x}, [x, K, V, probs = std::move(probs)](Node<T>& o) {
        T* gx = grad_of(x);
        const T* g = o.grad.data();
        const T* p = probs.data();
        std::vector<T> s(V, T(0));
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t i = 0; i < V; ++i) s[i] += g[k * V + i] * p[k * V + i];
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t i = 0; i < V; ++i) gx[k * V + i] += p[k * V + i] * (g[k * V + i] - s[i]);
    });
}

template <class T>
Var<T> add(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
    detail::check(a.shape() == b.shape(), "add: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
    return tape.emit(std::move(out), {&a, &b}, [a, b](Node<T>& o) {
        if (T* ga = grad_of(a)) kernels::axpy(T(1), o.grad.data(), ga, o.grad.size());
        if (T* gb = grad_of(b)) kernels::axpy(T(1), o.grad.data(), gb, o.grad.size());
    });
}

/// Elementwise product.
template <class T>
Var<T> mul(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
    detail::check(a.shape() == b.shape(), "mul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
    return tape.emit(std::move(out), {&a, &b}, [a, b](Node<T>& o) {
        const std::size_t n = o.grad.size();
        if (T* ga = grad_of(a))
            for (std::size_t i = 0; i < n; ++i) ga[i] += o.grad[i] * b.value()[i];
        if (T* gb = grad_of(b))
            for (std::size_t i = 0; i < n; ++i) gb[i] += o.grad[i] * a.value()[i];
    });
}

/// Sum of all elements as a scalar of shape [1].
template <class T>
Var<T> sum(Tape<T>& tape, const Var<T>& x) {
    T s = T(0);
    for (T v : x.value().values()) s += v;
    return tape.emit(Tensor<T>({1}, std::vector<T>{s}), {&x}, [x](Node<T>& o) {
        T* gx = grad_of(x);
        const T g = o.grad[0];
        for (std::size_t i = 0; i < x.value().size(); ++i) gx[i] += g;
    });
}

/// Concatenation along the channel axis of equally sized volumes.
template <class T>
Var<T> concat_channels(Tape<T>& tape, const Var<T>& a, const Var<T>& b) {
    detail::require_volume(a.shape(), "concat_channels");
    detail::require_volume(b.shape(), "concat_channels");
    detail::require_same_spatial(a.shape(), b.shape(), "concat_channels");
    Shape s = a.shape();
    s[0] += b.shape()[0];
    Tensor<T> out(s);
    const std::size_t na = a.value().size();
    std::copy(a.value().values().begin(), a.value().values().end(), out.data());
    std::copy(b.value().values().begin(), b.value().values().end(), out.data() + na);
    return tape.emit(std::move(out), {&a, &b}, [a, b, na](Node<T>& o) {
        if (T* ga = grad_of(a)) kernels::axpy(T(1), o.grad.data(), ga, na);
        if (T* gb = grad_of(b)) kernels::axpy(T(1), o.grad.data() + na, gb, o.grad.size() - na);
    });
}

/// Nearest-neighbour upsampling by a factor of two along each spatial axis.
template <class T>
Var<T> upsample_nearest2(Tape<T>& tape, const Var<T>& x) {
    detail::require_volume(x.shape(), "upsample_nearest2");
    const auto& xs = x.shape();
    const std::size_t C = xs[0], D = xs[1], H = xs[2], W = xs[3];
    Tensor<T> out({C, 2 * D, 2 * H, 2 * W});
    auto index = [=](std::size_t c, std::size_t z, std::size_t y, std::size_t w) {
        return ((c * D + z / 2) * H + y / 2) * W + w / 2;
    };
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t z = 0; z < 2 * D; ++z)
            for (std::size_t y = 0; y < 2 * H; ++y)
                for (std::size_t w = 0; w < 2 * W; ++w) out.at(c, z, y, w) = x.value()[index(c, z, y, w)];
    return tape.emit(std::move(out), {&x}, [x, C, D, H, W, index](Node<T>& o) {
        T* gx = grad_of(x);
        std::size_t i = 0;
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t z = 0; z < 2 * D; ++z)
                for (std::size_t y = 0; y < 2 * H; ++y)
                    for (std::size_t w = 0; w < 2 * W; ++w) gx[index(c, z, y, w)] += o.grad[i++];
    });
}

/// Flattens each channel-first input to K x N_i and concatenates along the voxel axis.
template <class T>
Var<T> concat_voxels(Tape<T>& tape, const std::vector<Var<T>>& xs) {
    detail::check(!xs.empty(), "concat_voxels: no inputs");
    const std::size_t K = xs[0].shape()[0];
    std::vector<std::size_t> counts;
    std::size_t total = 0;
    for (const auto& x : xs) {
        detail::check(x.shape()[0] == K, "concat_voxels: channel axis mismatch");
        counts.push_back(x.value().size() / K);
        total += counts.back();
    }
    Tensor<T> out({K, total});
    std::size_t offset = 0;
    for (std::size_t j = 0; j < xs.size(); ++j) {
        for (std::size_t k = 0; k < K; ++k)
            std::copy_n(xs[j].value().data() + k * counts[j], counts[j], out.data() + k * total + offset);
        offset += counts[j];
    }
    // Tape::emit takes a fixed input list; register the rule against the first
    // input and mark the output as differentiable if any input is.
    bool needs = false;
    for (const auto& x : xs) needs = needs || x.requires_grad();
    const Var<T>* probe = nullptr;
    for (const auto& x : xs)
        if (x.requires_grad()) probe = &x;
    if (!needs) probe = &xs[0];
    return tape.emit(std::move(out), {probe}, [xs, counts, K, total](Node<T>& o) {
        std::size_t offset = 0;
        for (std::size_t j = 0; j < xs.size(); ++j) {
            if (T* gx = grad_of(xs[j]))
                for (std::size_t k = 0; k < K; ++k)
                    kernels::axpy(T(1), o.grad.data() + k * total + offset, gx + k * counts[j], counts[j]);
            offset += counts[j];
        }
    });
}

}  // namespace u2net
