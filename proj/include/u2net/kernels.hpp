#pragma once

// Raw loops behind the differentiable operations. Every routine walks its
// inputs in a fixed order, so results are bit-reproducible.

#include <algorithm>
#include <array>
#include <cstddef>
#include <vector>

#include "tensor.hpp"

namespace u2net::kernels {

template <class T>
T dot(const T* a, const T* b, std::size_t n) {
    constexpr std::size_t lanes = 16;
    T acc[lanes] = {};
    std::size_t i = 0;
    for (; i + lanes <= n; i += lanes)
        for (std::size_t j = 0; j < lanes; ++j) acc[j] += a[i + j] * b[i + j];
    for (std::size_t j = 0; i < n; ++i, ++j) acc[j] += a[i] * b[i];
    T s = T(0);
    for (std::size_t j = 0; j < lanes; ++j) s += acc[j];
    return s;
}

template <class T>
void axpy(T alpha, const T* x, T* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

/// Geometry of a 3x3x3 cross-correlation with symmetric zero padding.
struct ConvGeometry {
    Extent3 in, out;
    std::size_t stride = 1, pad = 1;

    // Output index range [lo, hi) along one axis whose input tap index
    // o * stride + k - pad stays inside [0, n).
    static std::pair<std::size_t, std::size_t> valid(std::size_t n, std::size_t out_n, std::size_t k,
                                                     std::size_t stride, std::size_t pad) {
        const long long lo_num = static_cast<long long>(pad) - static_cast<long long>(k);
        long long lo = lo_num <= 0 ? 0 : (lo_num + static_cast<long long>(stride) - 1) / stride;
        long long top = static_cast<long long>(n) - 1 + static_cast<long long>(pad) - static_cast<long long>(k);
        long long hi = top < 0 ? 0 : top / static_cast<long long>(stride) + 1;
        hi = std::min<long long>(hi, static_cast<long long>(out_n));
        lo = std::min(lo, hi);
        return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
    }
};

/// out_plane += correlate(in_plane, w27) for one (output, input) channel pair.
template <class T>
void conv_pair_forward(T* out, const T* in, const T* w27, const ConvGeometry& g) {
    const auto [ID, IH, IW] = g.in;
    const auto [OD, OH, OW] = g.out;
    const std::size_t s = g.stride, p = g.pad;
    std::array<std::pair<std::size_t, std::size_t>, 3> rw;
    for (std::size_t k = 0; k < 3; ++k) rw[k] = ConvGeometry::valid(IW, OW, k, s, p);
    for (std::size_t kd = 0; kd < 3; ++kd) {
        const auto [d0, d1] = ConvGeometry::valid(ID, OD, kd, s, p);
        for (std::size_t od = d0; od < d1; ++od) {
            const std::size_t id = od * s + kd - p;
            for (std::size_t kh = 0; kh < 3; ++kh) {
                const auto [h0, h1] = ConvGeometry::valid(IH, OH, kh, s, p);
                for (std::size_t oh = h0; oh < h1; ++oh) {
                    const std::size_t ih = oh * s + kh - p;
                    T* orow = out + (od * OH + oh) * OW;
                    const T* irow = in + (id * IH + ih) * IW;
                    const T* wk = w27 + (kd * 3 + kh) * 3;
                    for (std::size_t kw = 0; kw < 3; ++kw) {
                        const T wv = wk[kw];
                        const auto [w0, w1] = rw[kw];
                        if (s == 1) {
                            const T* src = irow + kw - p;
                            for (std::size_t ow = w0; ow < w1; ++ow) orow[ow] += wv * src[ow];
                        } else {
                            for (std::size_t ow = w0; ow < w1; ++ow) orow[ow] += wv * irow[ow * s + kw - p];
                        }
                    }
                }
            }
        }
    }
}

/// gin_plane += d(out)/d(in)^T gout_plane for one channel pair.
template <class T>
void conv_pair_input_grad(T* gin, const T* gout, const T* w27, const ConvGeometry& g) {
    const auto [ID, IH, IW] = g.in;
    const auto [OD, OH, OW] = g.out;
    const std::size_t s = g.stride, p = g.pad;
    std::array<std::pair<std::size_t, std::size_t>, 3> rw;
    for (std::size_t k = 0; k < 3; ++k) rw[k] = ConvGeometry::valid(IW, OW, k, s, p);
    for (std::size_t kd = 0; kd < 3; ++kd) {
        const auto [d0, d1] = ConvGeometry::valid(ID, OD, kd, s, p);
        for (std::size_t od = d0; od < d1; ++od) {
            const std::size_t id = od * s + kd - p;
            for (std::size_t kh = 0; kh < 3; ++kh) {
                const auto [h0, h1] = ConvGeometry::valid(IH, OH, kh, s, p);
                for (std::size_t oh = h0; oh < h1; ++oh) {
                    const std::size_t ih = oh * s + kh - p;
                    const T* grow = gout + (od * OH + oh) * OW;
                    T* irow = gin + (id * IH + ih) * IW;
                    const T* wk = w27 + (kd * 3 + kh) * 3;
                    for (std::size_t kw = 0; kw < 3; ++kw) {
                        const T wv = wk[kw];
                        const auto [w0, w1] = rw[kw];
                        if (s == 1) {
                            T* dst = irow + kw - p;
                            for (std::size_t ow = w0; ow < w1; ++ow) dst[ow] += wv * grow[ow];
                        } else {
                            for (std::size_t ow = w0; ow < w1; ++ow) irow[ow * s + kw - p] += wv * grow[ow];
                        }
                    }
                }
            }
        }
    }
}

/// gw27 += sum over output voxels of gout * shifted input, for one channel pair.
template <class T>
void conv_pair_weight_grad(T* gw27, const T* gout, const T* in, const ConvGeometry& g) {
    const auto [ID, IH, IW] = g.in;
    const auto [OD, OH, OW] = g.out;
    const std::size_t s = g.stride, p = g.pad;
    std::array<std::pair<std::size_t, std::size_t>, 3> rw;
    for (std::size_t k = 0; k < 3; ++k) rw[k] = ConvGeometry::valid(IW, OW, k, s, p);
    std::vector<T> acc(27 * OW, T(0));
    for (std::size_t kd = 0; kd < 3; ++kd) {
        const auto [d0, d1] = ConvGeometry::valid(ID, OD, kd, s, p);
        for (std::size_t od = d0; od < d1; ++od) {
            const std::size_t id = od * s + kd - p;
            for (std::size_t kh = 0; kh < 3; ++kh) {
                const auto [h0, h1] = ConvGeometry::valid(IH, OH, kh, s, p);
                for (std::size_t oh = h0; oh < h1; ++oh) {
                    const std::size_t ih = oh * s + kh - p;
                    const T* grow = gout + (od * OH + oh) * OW;
                    const T* irow = in + (id * IH + ih) * IW;
                    for (std::size_t kw = 0; kw < 3; ++kw) {
                        T* a = acc.data() + ((kd * 3 + kh) * 3 + kw) * OW;
                        const auto [w0, w1] = rw[kw];
                        if (s == 1) {
                            const T* src = irow + kw - p;
                            for (std::size_t ow = w0; ow < w1; ++ow) a[ow] += grow[ow] * src[ow];
                        } else {
                            for (std::size_t ow = w0; ow < w1; ++ow) a[ow] += grow[ow] * irow[ow * s + kw - p];
                        }
                    }
                }
            }
        }
    }
    for (std::size_t t = 0; t < 27; ++t) {
        T sum = T(0);
        const T* a = acc.data() + t * OW;
        for (std::size_t ow = 0; ow < OW; ++ow) sum += a[ow];
        gw27[t] += sum;
    }
}

/// Unfolds every 3x3x3 neighbourhood: cols[(c * 27 + t) * OV + o] is the
/// input tap t of output voxel o in channel c, zero outside the volume.
template <class T>
void im2col(T* cols, const T* in, std::size_t C, const ConvGeometry& g) {
    const auto [ID, IH, IW] = g.in;
    const auto [OD, OH, OW] = g.out;
    const std::size_t s = g.stride, p = g.pad, OV = g.out.voxels(), IV = g.in.voxels();
    std::fill(cols, cols + C * 27 * OV, T(0));
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t kd = 0; kd < 3; ++kd) {
            const auto [d0, d1] = ConvGeometry::valid(ID, OD, kd, s, p);
            for (std::size_t kh = 0; kh < 3; ++kh) {
                const auto [h0, h1] = ConvGeometry::valid(IH, OH, kh, s, p);
                for (std::size_t kw = 0; kw < 3; ++kw) {
                    const auto [w0, w1] = ConvGeometry::valid(IW, OW, kw, s, p);
                    T* row = cols + (c * 27 + (kd * 3 + kh) * 3 + kw) * OV;
                    for (std::size_t od = d0; od < d1; ++od)
                        for (std::size_t oh = h0; oh < h1; ++oh) {
                            const T* irow = in + c * IV + ((od * s + kd - p) * IH + oh * s + kh - p) * IW;
                            T* orow = row + (od * OH + oh) * OW;
                            for (std::size_t ow = w0; ow < w1; ++ow) orow[ow] = irow[ow * s + kw - p];
                        }
                }
            }
        }
}

/// Adjoint of im2col: scatters cols back onto the input grid, accumulating.
template <class T>
void col2im(T* in, const T* cols, std::size_t C, const ConvGeometry& g) {
    const auto [ID, IH, IW] = g.in;
    const auto [OD, OH, OW] = g.out;
    const std::size_t s = g.stride, p = g.pad, OV = g.out.voxels(), IV = g.in.voxels();
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t kd = 0; kd < 3; ++kd) {
            const auto [d0, d1] = ConvGeometry::valid(ID, OD, kd, s, p);
            for (std::size_t kh = 0; kh < 3; ++kh) {
                const auto [h0, h1] = ConvGeometry::valid(IH, OH, kh, s, p);
                for (std::size_t kw = 0; kw < 3; ++kw) {
                    const auto [w0, w1] = ConvGeometry::valid(IW, OW, kw, s, p);
                    const T* row = cols + (c * 27 + (kd * 3 + kh) * 3 + kw) * OV;
                    for (std::size_t od = d0; od < d1; ++od)
                        for (std::size_t oh = h0; oh < h1; ++oh) {
                            T* irow = in + c * IV + ((od * s + kd - p) * IH + oh * s + kh - p) * IW;
                            const T* orow = row + (od * OH + oh) * OW;
                            for (std::size_t ow = w0; ow < w1; ++ow) irow[ow * s + kw - p] += orow[ow];
                        }
                }
            }
        }
}

inline constexpr std::size_t kVoxelBlock = 512;

// rows[r][i] += coef[r] * x[i] for four rows at once, sharing the loads of x.
template <class T>
void axpy4(const T* coef, const T* __restrict x, T* __restrict r0, T* __restrict r1, T* __restrict r2,
           T* __restrict r3, std::size_t n) {
    const T c0 = coef[0], c1 = coef[1], c2 = coef[2], c3 = coef[3];
    for (std::size_t i = 0; i < n; ++i) {
        const T v = x[i];
        r0[i] += c0 * v;
        r1[i] += c1 * v;
        r2[i] += c2 * v;
        r3[i] += c3 * v;
    }
}

/// out[M x N] += a[M x K] * b[K x N], blocked over N.
template <class T>
void gemm_nn(T* out, const T* a, const T* b, std::size_t M, std::size_t K, std::size_t N) {
    for (std::size_t n0 = 0; n0 < N; n0 += kVoxelBlock) {
        const std::size_t nb = std::min(kVoxelBlock, N - n0);
        std::size_t m = 0;
        for (; m + 4 <= M; m += 4)
            for (std::size_t k = 0; k < K; ++k) {
                const T coef[4] = {a[m * K + k], a[(m + 1) * K + k], a[(m + 2) * K + k], a[(m + 3) * K + k]};
                axpy4(coef, b + k * N + n0, out + m * N + n0, out + (m + 1) * N + n0, out + (m + 2) * N + n0,
                      out + (m + 3) * N + n0, nb);
            }
        for (; m < M; ++m)
            for (std::size_t k = 0; k < K; ++k) axpy(a[m * K + k], b + k * N + n0, out + m * N + n0, nb);
    }
}

/// out[K x N] += a[M x K]^T * b[M x N], blocked over N.
template <class T>
void gemm_tn(T* out, const T* a, const T* b, std::size_t M, std::size_t K, std::size_t N) {
    for (std::size_t n0 = 0; n0 < N; n0 += kVoxelBlock) {
        const std::size_t nb = std::min(kVoxelBlock, N - n0);
        std::size_t k = 0;
        for (; k + 4 <= K; k += 4)
            for (std::size_t m = 0; m < M; ++m)
                axpy4(a + m * K + k, b + m * N + n0, out + k * N + n0, out + (k + 1) * N + n0, out + (k + 2) * N + n0,
                      out + (k + 3) * N + n0, nb);
        for (; k < K; ++k)
            for (std::size_t m = 0; m < M; ++m) axpy(a[m * K + k], b + m * N + n0, out + k * N + n0, nb);
    }
}

/// out[M x K] += a[M x N] * b[K x N]^T, blocked over N.
template <class T>
void gemm_nt(T* out, const T* a, const T* b, std::size_t M, std::size_t K, std::size_t N) {
    constexpr std::size_t lanes = 16;
    for (std::size_t n0 = 0; n0 < N; n0 += kVoxelBlock) {
        const std::size_t nb = std::min(kVoxelBlock, N - n0);
        for (std::size_t m = 0; m < M; ++m) {
            const T* x = a + m * N + n0;
            std::size_t k = 0;
            for (; k + 4 <= K; k += 4) {
                const T* y0 = b + k * N + n0;
                const T* y1 = y0 + N;
                const T* y2 = y1 + N;
                const T* y3 = y2 + N;
                T acc[4][lanes] = {};
                std::size_t i = 0;
                for (; i + lanes <= nb; i += lanes)
                    for (std::size_t j = 0; j < lanes; ++j) {
                        const T v = x[i + j];
                        acc[0][j] += v * y0[i + j];
                        acc[1][j] += v * y1[i + j];
                        acc[2][j] += v * y2[i + j];
                        acc[3][j] += v * y3[i + j];
                    }
                for (std::size_t j = 0; i < nb; ++i, ++j) {
                    acc[0][j] += x[i] * y0[i];
                    acc[1][j] += x[i] * y1[i];
                    acc[2][j] += x[i] * y2[i];
                    acc[3][j] += x[i] * y3[i];
                }
                for (std::size_t r = 0; r < 4; ++r) {
                    T sum = T(0);
                    for (std::size_t j = 0; j < lanes; ++j) sum += acc[r][j];
                    out[m * K + k + r] += sum;
                }
            }
            for (; k < K; ++k) out[m * K + k] += dot(x, b + k * N + n0, nb);
        }
    }
}

}  // namespace u2net::kernels
