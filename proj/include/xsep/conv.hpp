#pragma once

#include <algorithm>
#include <memory>
#include <string>
#include <vector>

#include "xsep/gemm.hpp"
#include "xsep/parallel.hpp"
#include "xsep/tensor.hpp"

namespace xsep {

enum class Padding { Same, Valid };

enum class Activation { None, ReLU, ELU };

inline const char* to_string(Padding p) { return p == Padding::Same ? "same" : "valid"; }
inline const char* to_string(Activation a) {
    switch (a) {
        case Activation::ReLU: return "relu";
        case Activation::ELU: return "elu";
        default: return "none";
    }
}

struct ConvGeometry {
    int kh = 1, kw = 1;
    int sh = 1, sw = 1;
    Padding pad = Padding::Valid;

    int out_dim(int d, int k, int s) const {
        if (d < 1 || k < 1 || s < 1) throw GeometryError("ConvGeometry: dims must be >= 1");
        if (pad == Padding::Same) return (d + s - 1) / s;
        if (d < k)
            throw GeometryError("ConvGeometry: valid padding needs input >= kernel, got " +
                                std::to_string(d) + " < " + std::to_string(k));
        return (d - k) / s + 1;
    }

    int out_h(int h) const { return out_dim(h, kh, sh); }
    int out_w(int w) const { return out_dim(w, kw, sw); }

    // Same padding: total = max((out-1)*s + k - d, 0), floor(total/2) before
    // and the remainder after, per axis. Bit-exact rule so residual branches
    // reach identical shapes.
    int pad_before_h(int h) const { return pad_total(h, kh, sh) / 2; }
    int pad_before_w(int w) const { return pad_total(w, kw, sw) / 2; }

    int pad_total(int d, int k, int s) const {
        if (pad == Padding::Valid) return 0;
        const int out = (d + s - 1) / s;
        const int t = (out - 1) * s + k - d;
        return t > 0 ? t : 0;
    }
};

template <typename T>
struct ConvGrads {
    Tensor4<T> grad_input;
    Tensor4<T> grad_kernel;
};

namespace detail {

// Reusable per-thread scratch; kernels fully overwrite what they take, so the
// buffers are never cleared. Slots keep nested users (im2col + fold + grad
// matrices) from aliasing.
template <typename T>
T* scratch(int slot, std::size_t count) {
    static thread_local std::unique_ptr<T[]> buffers[4];
    static thread_local std::size_t capacity[4] = {0, 0, 0, 0};
    if (capacity[slot] < count) {
        buffers[slot] = std::make_unique_for_overwrite<T[]>(count);
        capacity[slot] = count;
    }
    return buffers[slot].get();
}

template <typename T>
void check_conv_args(const Tensor4<T>& x, const Tensor4<T>& kernel, const ConvGeometry& geo) {
    if (kernel.c() != x.c())
        throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.c()) +
                         " input channels, tensor has " + std::to_string(x.c()));
    if (kernel.h() != geo.kh || kernel.w() != geo.kw)
        throw ShapeError("conv2d: kernel dims disagree with geometry");
}

}  // namespace detail

// Direct cross-correlation (no kernel flip). Slow by construction; this is
// the oracle every fast path is checked against.
template <typename T>
Tensor4<T> conv2d_naive(const Tensor4<T>& x, const Tensor4<T>& kernel, const ConvGeometry& geo) {
    detail::check_conv_args(x, kernel, geo);
    const int n = x.n(), cin = x.c(), h = x.h(), w = x.w();
    const int cout = kernel.n();
    const int oh = geo.out_h(h), ow = geo.out_w(w);
    const int pb_h = geo.pad_before_h(h), pb_w = geo.pad_before_w(w);

    Tensor4<T> y(n, cout, oh, ow);
    parallel_for(static_cast<std::size_t>(n) * cout, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t t = lo; t < hi; ++t) {
            const int i = static_cast<int>(t) / cout;
            const int o = static_cast<int>(t) % cout;
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    double acc = 0.0;
                    for (int j = 0; j < cin; ++j) {
                        for (int ky = 0; ky < geo.kh; ++ky) {
                            const int yy = oy * geo.sh - pb_h + ky;
                            if (yy < 0 || yy >= h) continue;
                            for (int kx = 0; kx < geo.kw; ++kx) {
                                const int xx = ox * geo.sw - pb_w + kx;
                                if (xx < 0 || xx >= w) continue;
                                acc += static_cast<double>(x.at(i, j, yy, xx)) *
                                       static_cast<double>(kernel.at(o, j, ky, kx));
                            }
                        }
                    }
                    y.at(i, o, oy, ox) = static_cast<T>(acc);
                }
            }
        }
    });
    return y;
}

template <typename T>
ConvGrads<T> conv2d_backward_naive(const Tensor4<T>& x, const Tensor4<T>& kernel,
                                   const ConvGeometry& geo, const Tensor4<T>& grad_out) {
    detail::check_conv_args(x, kernel, geo);
    const int n = x.n(), cin = x.c(), h = x.h(), w = x.w();
    const int cout = kernel.n();
    const int oh = geo.out_h(h), ow = geo.out_w(w);
    if (grad_out.dims() != Dims4{n, cout, oh, ow})
        throw ShapeError("conv2d_backward: grad_out dims " + grad_out.dims().str() +
                         " do not match forward output");
    const int pb_h = geo.pad_before_h(h), pb_w = geo.pad_before_w(w);

    ConvGrads<T> g{Tensor4<T>(x.dims()), Tensor4<T>(kernel.dims())};

    // grad_kernel: correlate grad_out with input patches; one thread per
    // output channel so accumulation over the batch keeps a fixed order.
    parallel_for(static_cast<std::size_t>(cout), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t o = lo; o < hi; ++o) {
            for (int j = 0; j < cin; ++j) {
                for (int ky = 0; ky < geo.kh; ++ky) {
                    for (int kx = 0; kx < geo.kw; ++kx) {
                        double acc = 0.0;
                        for (int i = 0; i < n; ++i) {
                            for (int oy = 0; oy < oh; ++oy) {
                                const int yy = oy * geo.sh - pb_h + ky;
                                if (yy < 0 || yy >= h) continue;
                                for (int ox = 0; ox < ow; ++ox) {
                                    const int xx = ox * geo.sw - pb_w + kx;
                                    if (xx < 0 || xx >= w) continue;
                                    acc += static_cast<double>(
                                               grad_out.at(i, static_cast<int>(o), oy, ox)) *
                                           static_cast<double>(x.at(i, j, yy, xx));
                                }
                            }
                        }
                        g.grad_kernel.at(static_cast<int>(o), j, ky, kx) = static_cast<T>(acc);
                    }
                }
            }
        }
    });

    // grad_input via the transposed-convolution relation, gather form.
    parallel_for(static_cast<std::size_t>(n) * cin, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t t = lo; t < hi; ++t) {
            const int i = static_cast<int>(t) / cin;
            const int j = static_cast<int>(t) % cin;
            for (int y = 0; y < h; ++y) {
                for (int xw = 0; xw < w; ++xw) {
                    double acc = 0.0;
                    for (int ky = 0; ky < geo.kh; ++ky) {
                        const int num_y = y + pb_h - ky;
                        if (num_y < 0 || num_y % geo.sh != 0) continue;
                        const int oy = num_y / geo.sh;
                        if (oy >= oh) continue;
                        for (int kx = 0; kx < geo.kw; ++kx) {
                            const int num_x = xw + pb_w - kx;
                            if (num_x < 0 || num_x % geo.sw != 0) continue;
                            const int ox = num_x / geo.sw;
                            if (ox >= ow) continue;
                            for (int o = 0; o < cout; ++o)
                                acc += static_cast<double>(kernel.at(o, j, ky, kx)) *
                                       static_cast<double>(grad_out.at(i, o, oy, ox));
                        }
                    }
                    g.grad_input.at(i, j, y, xw) = static_cast<T>(acc);
                }
            }
        }
    });
    return g;
}

namespace detail {

template <typename T>
bool is_plain_pointwise(const Tensor4<T>& x, const ConvGeometry& geo) {
    return geo.kh == 1 && geo.kw == 1 && geo.sh == 1 && geo.sw == 1 &&
           geo.pad_total(x.h(), 1, 1) == 0 && geo.pad_total(x.w(), 1, 1) == 0;
}

// Patch matrix, (cin*kh*kw) rows by (n*oh*ow) columns; row k = (j, ky, kx),
// column = n*oh*ow-folded output position. Every cell is written. Filled per
// batch slab into caller-provided storage.
template <typename T>
void im2col(const Tensor4<T>& x, const ConvGeometry& geo, int oh, int ow, T* col) {
    const int n = x.n(), cin = x.c(), h = x.h(), w = x.w();
    const std::size_t S = static_cast<std::size_t>(oh) * ow;
    const std::size_t NS = static_cast<std::size_t>(n) * S;
    const int pb_h = geo.pad_before_h(h), pb_w = geo.pad_before_w(w);

    if (is_plain_pointwise(x, geo)) {
        // 1x1 stride 1: the patch matrix is the batch-folded input.
        parallel_for(static_cast<std::size_t>(n), [&](std::size_t lo, std::size_t hi) {
            for (std::size_t i = lo; i < hi; ++i)
                for (int j = 0; j < cin; ++j)
                    std::copy_n(x.plane(static_cast<int>(i), j), S,
                                col + static_cast<std::size_t>(j) * NS + i * S);
        });
        return;
    }

    parallel_for(static_cast<std::size_t>(n), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            for (int j = 0; j < cin; ++j) {
                const T* src = x.plane(static_cast<int>(i), j);
                for (int ky = 0; ky < geo.kh; ++ky) {
                    for (int kx = 0; kx < geo.kw; ++kx) {
                        const std::size_t k =
                            (static_cast<std::size_t>(j) * geo.kh + ky) * geo.kw + kx;
                        T* dst = col + k * NS + i * S;
                        for (int oy = 0; oy < oh; ++oy) {
                            const int yy = oy * geo.sh - pb_h + ky;
                            if (yy < 0 || yy >= h) {
                                for (int ox = 0; ox < ow; ++ox, ++dst) *dst = T(0);
                                continue;
                            }
                            const T* row = src + static_cast<std::size_t>(yy) * w;
                            if (geo.sw == 1) {
                                const int lo_x = std::max(0, pb_w - kx);
                                const int hi_x = std::min(ow, w + pb_w - kx);
                                for (int ox = 0; ox < lo_x; ++ox, ++dst) *dst = T(0);
                                for (int ox = lo_x; ox < hi_x; ++ox, ++dst)
                                    *dst = row[ox - pb_w + kx];
                                for (int ox = hi_x; ox < ow; ++ox, ++dst) *dst = T(0);
                            } else {
                                for (int ox = 0; ox < ow; ++ox, ++dst) {
                                    const int xx = ox * geo.sw - pb_w + kx;
                                    *dst = (xx >= 0 && xx < w) ? row[xx] : T(0);
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

// Scatter-add of a patch-matrix gradient back onto the input.
template <typename T>
void col2im_add(const T* col, const ConvGeometry& geo, int oh, int ow, Tensor4<T>& gx) {
    const int n = gx.n(), cin = gx.c(), h = gx.h(), w = gx.w();
    const std::size_t S = static_cast<std::size_t>(oh) * ow;
    const std::size_t NS = static_cast<std::size_t>(n) * S;
    const int pb_h = geo.pad_before_h(h), pb_w = geo.pad_before_w(w);

    if (is_plain_pointwise(gx, geo)) {
        parallel_for(static_cast<std::size_t>(n), [&](std::size_t lo, std::size_t hi) {
            for (std::size_t i = lo; i < hi; ++i)
                for (int j = 0; j < cin; ++j) {
                    T* dst = gx.plane(static_cast<int>(i), j);
                    const T* src = col + static_cast<std::size_t>(j) * NS + i * S;
                    for (std::size_t s = 0; s < S; ++s) dst[s] += src[s];
                }
        });
        return;
    }

    parallel_for(static_cast<std::size_t>(n), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
            for (int j = 0; j < cin; ++j) {
                T* dst = gx.plane(static_cast<int>(i), j);
                for (int ky = 0; ky < geo.kh; ++ky) {
                    for (int kx = 0; kx < geo.kw; ++kx) {
                        const std::size_t k =
                            (static_cast<std::size_t>(j) * geo.kh + ky) * geo.kw + kx;
                        const T* src = col + k * NS + i * S;
                        for (int oy = 0; oy < oh; ++oy) {
                            const int yy = oy * geo.sh - pb_h + ky;
                            if (yy < 0 || yy >= h) {
                                src += ow;
                                continue;
                            }
                            T* row = dst + static_cast<std::size_t>(yy) * w;
                            if (geo.sw == 1) {
                                const int lo_x = std::max(0, pb_w - kx);
                                const int hi_x = std::min(ow, w + pb_w - kx);
                                src += lo_x;
                                for (int ox = lo_x; ox < hi_x; ++ox, ++src)
                                    row[ox - pb_w + kx] += *src;
                                src += ow - hi_x;
                            } else {
                                for (int ox = 0; ox < ow; ++ox, ++src) {
                                    const int xx = ox * geo.sw - pb_w + kx;
                                    if (xx >= 0 && xx < w) row[xx] += *src;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

}  // namespace detail

// Patch-matrix + GEMM path; numerically equal to conv2d_naive within float
// accumulation noise.
template <typename T>
Tensor4<T> conv2d_im2col(const Tensor4<T>& x, const Tensor4<T>& kernel, const ConvGeometry& geo) {
    detail::check_conv_args(x, kernel, geo);
    const int n = x.n(), h = x.h(), w = x.w();
    const int cout = kernel.n();
    const int oh = geo.out_h(h), ow = geo.out_w(w);
    const std::size_t S = static_cast<std::size_t>(oh) * ow;
    const std::size_t NS = static_cast<std::size_t>(n) * S;
    const std::size_t K = static_cast<std::size_t>(x.c()) * geo.kh * geo.kw;

    T* col = detail::scratch<T>(0, K * NS);
    detail::im2col(x, geo, oh, ow, col);

    T* out_mat = detail::scratch<T>(1, static_cast<std::size_t>(cout) * NS);
    gemm_nn(static_cast<std::size_t>(cout), NS, K, kernel.data(), col, out_mat);

    Tensor4<T> y = Tensor4<T>::uninit(Dims4{n, cout, oh, ow});
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i)
            for (int o = 0; o < cout; ++o)
                std::copy_n(out_mat + o * NS + i * S, S, y.plane(static_cast<int>(i), o));
    });
    return y;
}

template <typename T>
ConvGrads<T> conv2d_backward_im2col(const Tensor4<T>& x, const Tensor4<T>& kernel,
                                    const ConvGeometry& geo, const Tensor4<T>& grad_out) {
    detail::check_conv_args(x, kernel, geo);
    const int n = x.n(), h = x.h(), w = x.w();
    const int cout = kernel.n();
    const int oh = geo.out_h(h), ow = geo.out_w(w);
    if (grad_out.dims() != Dims4{n, cout, oh, ow})
        throw ShapeError("conv2d_backward: grad_out dims " + grad_out.dims().str() +
                         " do not match forward output");
    const std::size_t S = static_cast<std::size_t>(oh) * ow;
    const std::size_t NS = static_cast<std::size_t>(n) * S;
    const std::size_t K = static_cast<std::size_t>(x.c()) * geo.kh * geo.kw;

    // Fold grad_out into a (cout x NS) matrix.
    T* go_mat = detail::scratch<T>(1, static_cast<std::size_t>(cout) * NS);
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i)
            for (int o = 0; o < cout; ++o)
                std::copy_n(grad_out.plane(static_cast<int>(i), o), S, go_mat + o * NS + i * S);
    });

    T* col = detail::scratch<T>(0, K * NS);
    detail::im2col(x, geo, oh, ow, col);

    ConvGrads<T> g{Tensor4<T>(x.dims()), Tensor4<T>(kernel.dims())};
    gemm_nt(static_cast<std::size_t>(cout), K, NS, go_mat, col, g.grad_kernel.data());

    // Transposed kernel copy keeps the grad-input GEMM reads contiguous.
    T* kt = detail::scratch<T>(3, K * static_cast<std::size_t>(cout));
    for (int o = 0; o < cout; ++o)
        for (std::size_t k = 0; k < K; ++k)
            kt[k * static_cast<std::size_t>(cout) + o] = kernel.data()[o * K + k];
    T* gcol = detail::scratch<T>(2, K * NS);
    gemm_nn(K, NS, static_cast<std::size_t>(cout), kt, go_mat, gcol);
    detail::col2im_add(gcol, geo, oh, ow, g.grad_input);
    return g;
}

// Fast path used by layers.
template <typename T>
Tensor4<T> conv2d(const Tensor4<T>& x, const Tensor4<T>& kernel, const ConvGeometry& geo) {
    return conv2d_im2col(x, kernel, geo);
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor4<T>& x, const Tensor4<T>& kernel,
                             const ConvGeometry& geo, const Tensor4<T>& grad_out) {
    return conv2d_backward_im2col(x, kernel, geo, grad_out);
}

namespace detail {

// 3x3 stride-1 stencil over one plane: one fused pass per (row, ky) with the
// two border columns handled separately.
template <typename T>
void dw3x3_fwd_plane(const T* src, const T* k9, T* dst, int h, int w, int oh, int ow, int pb_h,
                     int pb_w) {
    const int x_lo = std::min(pb_w, ow);
    const int x_hi = std::max(std::min(ow, w + pb_w - 2), x_lo);
    for (int oy = 0; oy < oh; ++oy) {
        T* drow = dst + static_cast<std::size_t>(oy) * ow;
        for (int ox = 0; ox < ow; ++ox) drow[ox] = T(0);
        for (int ky = 0; ky < 3; ++ky) {
            const int yy = oy - pb_h + ky;
            if (yy < 0 || yy >= h) continue;
            const T* srow = src + static_cast<std::size_t>(yy) * w;
            const T k0 = k9[ky * 3], k1 = k9[ky * 3 + 1], k2 = k9[ky * 3 + 2];
            for (int ox = x_lo; ox < x_hi; ++ox) {
                const int xb = ox - pb_w;
                drow[ox] += k0 * srow[xb] + k1 * srow[xb + 1] + k2 * srow[xb + 2];
            }
            for (int ox = 0; ox < x_lo; ++ox) {
                T acc = T(0);
                for (int kx = 0; kx < 3; ++kx) {
                    const int xx = ox - pb_w + kx;
                    if (xx >= 0 && xx < w) acc += k9[ky * 3 + kx] * srow[xx];
                }
                drow[ox] += acc;
            }
            for (int ox = x_hi; ox < ow; ++ox) {
                T acc = T(0);
                for (int kx = 0; kx < 3; ++kx) {
                    const int xx = ox - pb_w + kx;
                    if (xx >= 0 && xx < w) acc += k9[ky * 3 + kx] * srow[xx];
                }
                drow[ox] += acc;
            }
        }
    }
}

// Transposed form: accumulate grad_out through the flipped stencil.
template <typename T>
void dw3x3_bwd_input_plane(const T* go, const T* k9, T* gx, int h, int w, int oh, int ow,
                           int pb_h, int pb_w) {
    const int x_lo = std::min(std::max(0, 2 - pb_w), w);
    const int x_hi = std::max(std::min(w, ow - pb_w), x_lo);
    for (int y = 0; y < h; ++y) {
        T* grow_x = gx + static_cast<std::size_t>(y) * w;
        for (int ky = 0; ky < 3; ++ky) {
            const int oy = y + pb_h - ky;
            if (oy < 0 || oy >= oh) continue;
            const T* grow = go + static_cast<std::size_t>(oy) * ow;
            const T k0 = k9[ky * 3], k1 = k9[ky * 3 + 1], k2 = k9[ky * 3 + 2];
            for (int x = x_lo; x < x_hi; ++x) {
                const int xb = x + pb_w - 2;
                grow_x[x] += k2 * grow[xb] + k1 * grow[xb + 1] + k0 * grow[xb + 2];
            }
            for (int x = 0; x < x_lo; ++x) {
                T acc = T(0);
                for (int kx = 0; kx < 3; ++kx) {
                    const int ox = x + pb_w - kx;
                    if (ox >= 0 && ox < ow) acc += k9[ky * 3 + kx] * grow[ox];
                }
                grow_x[x] += acc;
            }
            for (int x = x_hi; x < w; ++x) {
                T acc = T(0);
                for (int kx = 0; kx < 3; ++kx) {
                    const int ox = x + pb_w - kx;
                    if (ox >= 0 && ox < ow) acc += k9[ky * 3 + kx] * grow[ox];
                }
                grow_x[x] += acc;
            }
        }
    }
}

// Nine shifted-window reductions in one pass per (row, ky).
template <typename T>
void dw3x3_bwd_kernel_plane(const T* src, const T* go, double* acc9, int h, int w, int oh,
                            int ow, int pb_h, int pb_w) {
    const int x_lo = std::min(pb_w, ow);
    const int x_hi = std::max(std::min(ow, w + pb_w - 2), x_lo);
    for (int oy = 0; oy < oh; ++oy) {
        const T* grow = go + static_cast<std::size_t>(oy) * ow;
        for (int ky = 0; ky < 3; ++ky) {
            const int yy = oy - pb_h + ky;
            if (yy < 0 || yy >= h) continue;
            const T* srow = src + static_cast<std::size_t>(yy) * w;
            T a0 = T(0), a1 = T(0), a2 = T(0);
            for (int ox = x_lo; ox < x_hi; ++ox) {
                const int xb = ox - pb_w;
                const T g = grow[ox];
                a0 += g * srow[xb];
                a1 += g * srow[xb + 1];
                a2 += g * srow[xb + 2];
            }
            double b0 = a0, b1 = a1, b2 = a2;
            for (int ox = 0; ox < x_lo; ++ox) {
                const double g = grow[ox];
                for (int kx = 0; kx < 3; ++kx) {
                    const int xx = ox - pb_w + kx;
                    if (xx < 0 || xx >= w) continue;
                    const double v = g * static_cast<double>(srow[xx]);
                    if (kx == 0) b0 += v;
                    else if (kx == 1) b1 += v;
                    else b2 += v;
                }
            }
            for (int ox = x_hi; ox < ow; ++ox) {
                const double g = grow[ox];
                for (int kx = 0; kx < 3; ++kx) {
                    const int xx = ox - pb_w + kx;
                    if (xx < 0 || xx >= w) continue;
                    const double v = g * static_cast<double>(srow[xx]);
                    if (kx == 0) b0 += v;
                    else if (kx == 1) b1 += v;
                    else b2 += v;
                }
            }
            acc9[ky * 3 + 0] += b0;
            acc9[ky * 3 + 1] += b1;
            acc9[ky * 3 + 2] += b2;
        }
    }
}

}  // namespace detail

// Spatial convolution performed independently per input channel. Filter plane
// j*multiplier + m convolves input channel j; no cross-channel mixing. The
// kernel tensor is (1, cin*multiplier, kh, kw).
template <typename T>
Tensor4<T> depthwise_conv2d(const Tensor4<T>& x, const Tensor4<T>& kernel,
                            const ConvGeometry& geo, int multiplier) {
    if (multiplier < 1) throw ParameterError("depthwise_conv2d: multiplier must be >= 1");
    if (kernel.n() != 1 || kernel.c() != x.c() * multiplier)
        throw ShapeError("depthwise_conv2d: kernel must be (1, cin*multiplier, kh, kw)");
    if (kernel.h() != geo.kh || kernel.w() != geo.kw)
        throw ShapeError("depthwise_conv2d: kernel dims disagree with geometry");
    const int n = x.n(), h = x.h(), w = x.w();
    const int cout = x.c() * multiplier;
    const int oh = geo.out_h(h), ow = geo.out_w(w);
    const int pb_h = geo.pad_before_h(h), pb_w = geo.pad_before_w(w);
    const bool stencil = geo.kh == 3 && geo.kw == 3 && geo.sh == 1 && geo.sw == 1;

    Tensor4<T> y = Tensor4<T>::uninit(Dims4{n, cout, oh, ow});
    parallel_for(static_cast<std::size_t>(n) * cout, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t t = lo; t < hi; ++t) {
            const int i = static_cast<int>(t) / cout;
            const int f = static_cast<int>(t) % cout;
            const int j = f / multiplier;
            const T* src = x.plane(i, j);
            const T* kp = kernel.plane(0, f);
            T* dst = y.plane(i, f);
            if (stencil) {
                detail::dw3x3_fwd_plane(src, kp, dst, h, w, oh, ow, pb_h, pb_w);
                continue;
            }
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    T acc = T(0);
                    for (int ky = 0; ky < geo.kh; ++ky) {
                        const int yy = oy * geo.sh - pb_h + ky;
                        if (yy < 0 || yy >= h) continue;
                        const T* row = src + static_cast<std::size_t>(yy) * w;
                        const T* krow = kp + static_cast<std::size_t>(ky) * geo.kw;
                        for (int kx = 0; kx < geo.kw; ++kx) {
                            const int xx = ox * geo.sw - pb_w + kx;
                            if (xx < 0 || xx >= w) continue;
                            acc += row[xx] * krow[kx];
                        }
                    }
                    dst[static_cast<std::size_t>(oy) * ow + ox] = acc;
                }
            }
        }
    });
    return y;
}

template <typename T>
ConvGrads<T> depthwise_conv2d_backward(const Tensor4<T>& x, const Tensor4<T>& kernel,
                                       const ConvGeometry& geo, int multiplier,
                                       const Tensor4<T>& grad_out) {
    if (multiplier < 1) throw ParameterError("depthwise_conv2d: multiplier must be >= 1");
    const int n = x.n(), cin = x.c(), h = x.h(), w = x.w();
    const int cout = cin * multiplier;
    const int oh = geo.out_h(h), ow = geo.out_w(w);
    if (grad_out.dims() != Dims4{n, cout, oh, ow})
        throw ShapeError("depthwise_conv2d_backward: grad_out dims mismatch");
    const int pb_h = geo.pad_before_h(h), pb_w = geo.pad_before_w(w);
    const bool stencil = geo.kh == 3 && geo.kw == 3 && geo.sh == 1 && geo.sw == 1;

    ConvGrads<T> g{Tensor4<T>(x.dims()), Tensor4<T>(kernel.dims())};

    parallel_for(static_cast<std::size_t>(cout), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t f = lo; f < hi; ++f) {
            const int j = static_cast<int>(f) / multiplier;
            if (stencil) {
                double acc9[9] = {0, 0, 0, 0, 0, 0, 0, 0, 0};
                for (int i = 0; i < n; ++i)
                    detail::dw3x3_bwd_kernel_plane(x.plane(i, j),
                                                   grad_out.plane(i, static_cast<int>(f)), acc9,
                                                   h, w, oh, ow, pb_h, pb_w);
                for (int k = 0; k < 9; ++k)
                    g.grad_kernel.plane(0, static_cast<int>(f))[k] = static_cast<T>(acc9[k]);
                continue;
            }
            for (int ky = 0; ky < geo.kh; ++ky) {
                for (int kx = 0; kx < geo.kw; ++kx) {
                    double acc = 0.0;
                    for (int i = 0; i < n; ++i) {
                        const T* src = x.plane(i, j);
                        const T* go = grad_out.plane(i, static_cast<int>(f));
                        for (int oy = 0; oy < oh; ++oy) {
                            const int yy = oy * geo.sh - pb_h + ky;
                            if (yy < 0 || yy >= h) continue;
                            for (int ox = 0; ox < ow; ++ox) {
                                const int xx = ox * geo.sw - pb_w + kx;
                                if (xx < 0 || xx >= w) continue;
                                acc += static_cast<double>(go[static_cast<std::size_t>(oy) * ow +
                                                              ox]) *
                                       static_cast<double>(src[static_cast<std::size_t>(yy) * w +
                                                               xx]);
                            }
                        }
                    }
                    g.grad_kernel.at(0, static_cast<int>(f), ky, kx) = static_cast<T>(acc);
                }
            }
        }
    });

    parallel_for(static_cast<std::size_t>(n) * cin, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t t = lo; t < hi; ++t) {
            const int i = static_cast<int>(t) / cin;
            const int j = static_cast<int>(t) % cin;
            T* dst = g.grad_input.plane(i, j);
            if (stencil) {
                for (int m = 0; m < multiplier; ++m) {
                    const int f = j * multiplier + m;
                    detail::dw3x3_bwd_input_plane(grad_out.plane(i, f), kernel.plane(0, f), dst,
                                                  h, w, oh, ow, pb_h, pb_w);
                }
                continue;
            }
            for (int y = 0; y < h; ++y) {
                for (int xw = 0; xw < w; ++xw) {
                    double acc = 0.0;
                    for (int m = 0; m < multiplier; ++m) {
                        const int f = j * multiplier + m;
                        const T* go = grad_out.plane(i, f);
                        for (int ky = 0; ky < geo.kh; ++ky) {
                            const int num_y = y + pb_h - ky;
                            if (num_y < 0 || num_y % geo.sh != 0) continue;
                            const int oy = num_y / geo.sh;
                            if (oy >= oh) continue;
                            for (int kx = 0; kx < geo.kw; ++kx) {
                                const int num_x = xw + pb_w - kx;
                                if (num_x < 0 || num_x % geo.sw != 0) continue;
                                const int ox = num_x / geo.sw;
                                if (ox >= ow) continue;
                                acc += static_cast<double>(kernel.at(0, f, ky, kx)) *
                                       static_cast<double>(
                                           go[static_cast<std::size_t>(oy) * ow + ox]);
                            }
                        }
                    }
                    dst[static_cast<std::size_t>(y) * w + xw] = static_cast<T>(acc);
                }
            }
        }
    });
    return g;
}

// ---- depthwise separable convolution: depthwise, optional activation,
// ---- then pointwise. Default has no intermediate non-linearity.

template <typename T>
struct SeparableForward {
    Tensor4<T> out;
    Tensor4<T> dw_out;  // pre-activation depthwise output, kept for backward
};

template <typename T>
Tensor4<T> apply_activation(Activation act, const Tensor4<T>& x) {
    switch (act) {
        case Activation::ReLU: return relu(x);
        case Activation::ELU: return elu(x);
        default: return x;
    }
}

template <typename T>
Tensor4<T> activation_backward(Activation act, const Tensor4<T>& x, const Tensor4<T>& grad_out) {
    switch (act) {
        case Activation::ReLU: return relu_backward(x, grad_out);
        case Activation::ELU: return elu_backward(x, grad_out);
        default: return grad_out;
    }
}

template <typename T>
SeparableForward<T> separable_conv2d_fwd(const Tensor4<T>& x, const Tensor4<T>& dw_kernel,
                                         const Tensor4<T>& pw_kernel, const ConvGeometry& geo,
                                         int multiplier, Activation intermediate) {
    if (pw_kernel.c() != x.c() * multiplier || pw_kernel.h() != 1 || pw_kernel.w() != 1)
        throw ShapeError("separable_conv2d: pointwise kernel must be (cout, cin*mult, 1, 1)");
    SeparableForward<T> r;
    r.dw_out = depthwise_conv2d(x, dw_kernel, geo, multiplier);
    const ConvGeometry pw_geo{1, 1, 1, 1, Padding::Valid};
    if (intermediate == Activation::None) {
        r.out = conv2d_im2col(r.dw_out, pw_kernel, pw_geo);
    } else {
        const Tensor4<T> mid = apply_activation(intermediate, r.dw_out);
        r.out = conv2d_im2col(mid, pw_kernel, pw_geo);
    }
    return r;
}

template <typename T>
Tensor4<T> separable_conv2d(const Tensor4<T>& x, const Tensor4<T>& dw_kernel,
                            const Tensor4<T>& pw_kernel, const ConvGeometry& geo,
                            int multiplier = 1, Activation intermediate = Activation::None) {
    return separable_conv2d_fwd(x, dw_kernel, pw_kernel, geo, multiplier, intermediate).out;
}

template <typename T>
struct SeparableGrads {
    Tensor4<T> grad_input;
    Tensor4<T> grad_dw_kernel;
    Tensor4<T> grad_pw_kernel;
};

template <typename T>
SeparableGrads<T> separable_conv2d_backward(const Tensor4<T>& x, const Tensor4<T>& dw_kernel,
                                            const Tensor4<T>& pw_kernel, const ConvGeometry& geo,
                                            int multiplier, Activation intermediate,
                                            const Tensor4<T>& dw_out,
                                            const Tensor4<T>& grad_out) {
    const ConvGeometry pw_geo{1, 1, 1, 1, Padding::Valid};
    if (intermediate == Activation::None) {
        auto pw = conv2d_backward_im2col(dw_out, pw_kernel, pw_geo, grad_out);
        auto dw = depthwise_conv2d_backward(x, dw_kernel, geo, multiplier, pw.grad_input);
        return SeparableGrads<T>{std::move(dw.grad_input), std::move(dw.grad_kernel),
                                 std::move(pw.grad_kernel)};
    }
    const Tensor4<T> mid = apply_activation(intermediate, dw_out);
    auto pw = conv2d_backward_im2col(mid, pw_kernel, pw_geo, grad_out);
    const Tensor4<T> grad_mid = activation_backward(intermediate, dw_out, pw.grad_input);
    auto dw = depthwise_conv2d_backward(x, dw_kernel, geo, multiplier, grad_mid);
    return SeparableGrads<T>{std::move(dw.grad_input), std::move(dw.grad_kernel),
                             std::move(pw.grad_kernel)};
}

// ---- grouped spatial convolution over contiguous channel segments, the
// ---- spatial half of the reformulated Inception module.

template <typename T>
Tensor4<T> grouped_spatial_conv(const Tensor4<T>& x, const std::vector<Tensor4<T>>& seg_kernels,
                                const ConvGeometry& geo) {
    int total_in = 0, total_out = 0;
    for (const auto& k : seg_kernels) {
        total_in += k.c();
        total_out += k.n();
    }
    if (total_in != x.c())
        throw ShapeError("grouped_spatial_conv: segment input channels sum to " +
                         std::to_string(total_in) + ", tensor has " + std::to_string(x.c()));
    const int oh = geo.out_h(x.h()), ow = geo.out_w(x.w());
    Tensor4<T> y(x.n(), total_out, oh, ow);
    int c_in = 0, c_out = 0;
    for (const auto& k : seg_kernels) {
        const Tensor4<T> xs = channel_slice(x, c_in, c_in + k.c());
        channel_assign(y, c_out, conv2d_im2col(xs, k, geo));
        c_in += k.c();
        c_out += k.n();
    }
    return y;
}

template <typename T>
struct GroupedGrads {
    Tensor4<T> grad_input;
    std::vector<Tensor4<T>> grad_kernels;
};

template <typename T>
GroupedGrads<T> grouped_spatial_conv_backward(const Tensor4<T>& x,
                                              const std::vector<Tensor4<T>>& seg_kernels,
                                              const ConvGeometry& geo,
                                              const Tensor4<T>& grad_out) {
    GroupedGrads<T> g;
    g.grad_input = Tensor4<T>(x.dims());
    int c_in = 0, c_out = 0;
    for (const auto& k : seg_kernels) {
        const Tensor4<T> xs = channel_slice(x, c_in, c_in + k.c());
        const Tensor4<T> gs = channel_slice(grad_out, c_out, c_out + k.n());
        auto seg = conv2d_backward_im2col(xs, k, geo, gs);
        channel_assign(g.grad_input, c_in, seg.grad_input);
        g.grad_kernels.push_back(std::move(seg.grad_kernel));
        c_in += k.c();
        c_out += k.n();
    }
    return g;
}

// ---- segment-spectrum convolution: 1x1 projection to M channels, then g
// ---- independent spatial convolutions on contiguous equal segments. g = 1
// ---- recovers a regular convolution preceded by a 1x1; g = M recovers the
// ---- pointwise-then-depthwise "extreme" module.

template <typename T>
struct SpectrumParams {
    Tensor4<T> pointwise;                 // (M, cin, 1, 1)
    std::vector<Tensor4<T>> seg_kernels;  // g blocks of (M/g, M/g, kh, kw)
};

inline void check_segments(int segments, int m) {
    if (segments < 1 || m % segments != 0)
        throw ParameterError("segment_spectrum_conv: segments (" + std::to_string(segments) +
                             ") must divide channel count (" + std::to_string(m) + ")");
}

template <typename T>
Tensor4<T> segment_spectrum_conv(const Tensor4<T>& x, const SpectrumParams<T>& params,
                                 const ConvGeometry& geo) {
    const int m = params.pointwise.n();
    check_segments(static_cast<int>(params.seg_kernels.size()), m);
    const Tensor4<T> projected =
        conv2d_im2col(x, params.pointwise, ConvGeometry{1, 1, 1, 1, Padding::Valid});
    return grouped_spatial_conv(projected, params.seg_kernels, geo);
}

}  // namespace xsep
