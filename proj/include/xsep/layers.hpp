#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "xsep/conv.hpp"
#include "xsep/parallel.hpp"
#include "xsep/rng.hpp"
#include "xsep/tensor.hpp"

namespace xsep {

enum class Mode { Train, Infer };

// ---- batch normalization over (n, h, w) per channel ----

template <typename T>
struct BatchNormState {
    Tensor4<T> gamma, beta;              // learnable scale/shift, (1, c, 1, 1)
    Tensor4<T> running_mean, running_var;  // non-learnable EMA stats
    double epsilon = 1e-3;
    double momentum = 0.99;

    explicit BatchNormState(int channels = 1)
        : gamma(1, channels, 1, 1, T(1)),
          beta(1, channels, 1, 1, T(0)),
          running_mean(1, channels, 1, 1, T(0)),
          running_var(1, channels, 1, 1, T(1)) {}

    int channels() const { return gamma.c(); }
};

// Caches what backward needs; per-channel stats are kept in double.
template <typename T>
struct BatchNormCache {
    Tensor4<T> x_hat;
    std::vector<double> inv_std;
    std::size_t count_per_channel = 0;
};

// Train mode normalizes with batch statistics (biased variance) and updates
// the running stats by EMA with the same batch statistics; Infer mode uses
// the running stats and touches nothing.
template <typename T>
Tensor4<T> batch_norm_forward(const Tensor4<T>& x, BatchNormState<T>& state, Mode mode,
                              BatchNormCache<T>* cache = nullptr) {
    const int n = x.n(), c = x.c(), h = x.h(), w = x.w();
    if (c != state.channels())
        throw ShapeError("batch_norm: state has " + std::to_string(state.channels()) +
                         " channels, input has " + std::to_string(c));
    const std::size_t m = static_cast<std::size_t>(n) * h * w;
    const std::size_t plane = static_cast<std::size_t>(h) * w;

    Tensor4<T> y = Tensor4<T>::uninit(x.dims());
    if (mode == Mode::Infer) {
        parallel_for(static_cast<std::size_t>(c), [&](std::size_t lo, std::size_t hi) {
            for (std::size_t j = lo; j < hi; ++j) {
                const double mu = static_cast<double>(state.running_mean[j]);
                const double inv =
                    1.0 / std::sqrt(static_cast<double>(state.running_var[j]) + state.epsilon);
                const double g = static_cast<double>(state.gamma[j]);
                const double b = static_cast<double>(state.beta[j]);
                for (int i = 0; i < n; ++i) {
                    const T* src = x.plane(i, static_cast<int>(j));
                    T* dst = y.plane(i, static_cast<int>(j));
                    for (std::size_t s = 0; s < plane; ++s)
                        dst[s] = static_cast<T>((static_cast<double>(src[s]) - mu) * inv * g + b);
                }
            }
        });
        return y;
    }

    if (m == 1)
        throw DataError("batch_norm: train mode needs more than one value per channel");

    if (cache) {
        cache->x_hat = Tensor4<T>::uninit(x.dims());
        cache->inv_std.assign(static_cast<std::size_t>(c), 0.0);
        cache->count_per_channel = m;
    }

    parallel_for(static_cast<std::size_t>(c), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t j = lo; j < hi; ++j) {
            // One fused pass; E[x^2] - mu^2 in double has headroom to spare
            // for unit-scale activations.
            double sum = 0.0, sum_sq = 0.0;
            for (int i = 0; i < n; ++i) {
                const T* src = x.plane(i, static_cast<int>(j));
                for (std::size_t s = 0; s < plane; ++s) {
                    const double v = static_cast<double>(src[s]);
                    sum += v;
                    sum_sq += v * v;
                }
            }
            const double mu = sum / static_cast<double>(m);
            const double var = std::max(0.0, sum_sq / static_cast<double>(m) - mu * mu);
            const double inv = 1.0 / std::sqrt(var + state.epsilon);
            const double g = static_cast<double>(state.gamma[j]);
            const double b = static_cast<double>(state.beta[j]);
            for (int i = 0; i < n; ++i) {
                const T* src = x.plane(i, static_cast<int>(j));
                T* dst = y.plane(i, static_cast<int>(j));
                T* xh = cache ? cache->x_hat.plane(i, static_cast<int>(j)) : nullptr;
                for (std::size_t s = 0; s < plane; ++s) {
                    const double xhat = (static_cast<double>(src[s]) - mu) * inv;
                    if (xh) xh[s] = static_cast<T>(xhat);
                    dst[s] = static_cast<T>(xhat * g + b);
                }
            }
            if (cache) cache->inv_std[j] = inv;
            state.running_mean[j] = static_cast<T>(state.momentum *
                                                       static_cast<double>(state.running_mean[j]) +
                                                   (1.0 - state.momentum) * mu);
            state.running_var[j] = static_cast<T>(state.momentum *
                                                      static_cast<double>(state.running_var[j]) +
                                                  (1.0 - state.momentum) * var);
        }
    });
    return y;
}

template <typename T>
struct BatchNormGrads {
    Tensor4<T> grad_input;
    Tensor4<T> grad_gamma, grad_beta;
};

template <typename T>
BatchNormGrads<T> batch_norm_backward(const BatchNormState<T>& state,
                                      const BatchNormCache<T>& cache,
                                      const Tensor4<T>& grad_out) {
    const int n = grad_out.n(), c = grad_out.c(), h = grad_out.h(), w = grad_out.w();
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const double m = static_cast<double>(cache.count_per_channel);

    BatchNormGrads<T> g{Tensor4<T>::uninit(grad_out.dims()), Tensor4<T>(1, c, 1, 1),
                        Tensor4<T>(1, c, 1, 1)};
    parallel_for(static_cast<std::size_t>(c), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t j = lo; j < hi; ++j) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int i = 0; i < n; ++i) {
                const T* go = grad_out.plane(i, static_cast<int>(j));
                const T* xh = cache.x_hat.plane(i, static_cast<int>(j));
                for (std::size_t s = 0; s < plane; ++s) {
                    sum_dy += static_cast<double>(go[s]);
                    sum_dy_xhat += static_cast<double>(go[s]) * static_cast<double>(xh[s]);
                }
            }
            g.grad_beta[j] = static_cast<T>(sum_dy);
            g.grad_gamma[j] = static_cast<T>(sum_dy_xhat);
            const double scale =
                static_cast<double>(state.gamma[j]) * cache.inv_std[j] / m;
            for (int i = 0; i < n; ++i) {
                const T* go = grad_out.plane(i, static_cast<int>(j));
                const T* xh = cache.x_hat.plane(i, static_cast<int>(j));
                T* gi = g.grad_input.plane(i, static_cast<int>(j));
                for (std::size_t s = 0; s < plane; ++s)
                    gi[s] = static_cast<T>(scale * (m * static_cast<double>(go[s]) - sum_dy -
                                                    static_cast<double>(xh[s]) * sum_dy_xhat));
            }
        }
    });
    return g;
}

// ---- max pooling; Same padding is filled with -inf so it never wins ----

template <typename T>
struct MaxPoolCache {
    std::vector<std::int32_t> argmax;  // flat input offset per output element
};

template <typename T>
Tensor4<T> max_pool(const Tensor4<T>& x, const ConvGeometry& geo,
                    MaxPoolCache<T>* cache = nullptr) {
    const int n = x.n(), c = x.c(), h = x.h(), w = x.w();
    const int oh = geo.out_h(h), ow = geo.out_w(w);
    const int pb_h = geo.pad_before_h(h), pb_w = geo.pad_before_w(w);

    Tensor4<T> y = Tensor4<T>::uninit(Dims4{n, c, oh, ow});
    if (cache) cache->argmax.resize(y.size());
    parallel_for(static_cast<std::size_t>(n) * c, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t t = lo; t < hi; ++t) {
            const int i = static_cast<int>(t) / c;
            const int j = static_cast<int>(t) % c;
            const T* src = x.plane(i, j);
            T* dst = y.plane(i, j);
            std::int32_t* am = cache ? cache->argmax.data() + t * oh * ow : nullptr;
            for (int oy = 0; oy < oh; ++oy) {
                // Window bounds hoisted; -inf padding means clamping is
                // equivalent and padding never wins.
                const int y0 = std::max(0, oy * geo.sh - pb_h);
                const int y1 = std::min(h, oy * geo.sh - pb_h + geo.kh);
                for (int ox = 0; ox < ow; ++ox) {
                    const int x0 = std::max(0, ox * geo.sw - pb_w);
                    const int x1 = std::min(w, ox * geo.sw - pb_w + geo.kw);
                    T best = -std::numeric_limits<T>::infinity();
                    int best_off = -1;  // first maximum in scan order wins ties
                    for (int yy = y0; yy < y1; ++yy) {
                        const T* row = src + static_cast<std::size_t>(yy) * w;
                        for (int xx = x0; xx < x1; ++xx) {
                            if (row[xx] > best) {
                                best = row[xx];
                                best_off = yy * w + xx;
                            }
                        }
                    }
                    dst[static_cast<std::size_t>(oy) * ow + ox] = best;
                    if (am) am[static_cast<std::size_t>(oy) * ow + ox] = best_off;
                }
            }
        }
    });
    return y;
}

template <typename T>
Tensor4<T> max_pool_backward(const Dims4& input_dims, const ConvGeometry& /*geo*/,
                             const MaxPoolCache<T>& cache, const Tensor4<T>& grad_out) {
    Tensor4<T> gx(input_dims);
    const int c = input_dims.c;
    const std::size_t in_plane = static_cast<std::size_t>(input_dims.h) * input_dims.w;
    const std::size_t out_plane = static_cast<std::size_t>(grad_out.h()) * grad_out.w();
    parallel_for(static_cast<std::size_t>(input_dims.n) * c,
                 [&](std::size_t lo, std::size_t hi) {
                     for (std::size_t t = lo; t < hi; ++t) {
                         const int i = static_cast<int>(t) / c;
                         const int j = static_cast<int>(t) % c;
                         const T* go = grad_out.plane(i, j);
                         T* gi = gx.plane(i, j);
                         const std::int32_t* am = cache.argmax.data() + t * out_plane;
                         for (std::size_t s = 0; s < out_plane; ++s)
                             if (am[s] >= 0 && static_cast<std::size_t>(am[s]) < in_plane)
                                 gi[am[s]] += go[s];
                     }
                 });
    return gx;
}

// ---- global average pooling to (n, c, 1, 1) ----

template <typename T>
Tensor4<T> global_avg_pool(const Tensor4<T>& x) {
    Tensor4<T> y(x.n(), x.c(), 1, 1);
    const std::size_t plane = static_cast<std::size_t>(x.h()) * x.w();
    for (int i = 0; i < x.n(); ++i) {
        for (int j = 0; j < x.c(); ++j) {
            double acc = 0.0;
            const T* src = x.plane(i, j);
            for (std::size_t s = 0; s < plane; ++s) acc += static_cast<double>(src[s]);
            y.at(i, j, 0, 0) = static_cast<T>(acc / static_cast<double>(plane));
        }
    }
    return y;
}

template <typename T>
Tensor4<T> global_avg_pool_backward(const Dims4& input_dims, const Tensor4<T>& grad_out) {
    Tensor4<T> gx(input_dims);
    const std::size_t plane = static_cast<std::size_t>(input_dims.h) * input_dims.w;
    for (int i = 0; i < input_dims.n; ++i) {
        for (int j = 0; j < input_dims.c; ++j) {
            const T g = static_cast<T>(static_cast<double>(grad_out.at(i, j, 0, 0)) /
                                       static_cast<double>(plane));
            T* dst = gx.plane(i, j);
            for (std::size_t s = 0; s < plane; ++s) dst[s] = g;
        }
    }
    return gx;
}

// ---- inverted dropout: survivors scaled by 1/(1-rate), inference is identity

template <typename T>
struct DropoutCache {
    std::vector<std::uint8_t> keep;
    double scale = 1.0;
};

template <typename T>
Tensor4<T> dropout(const Tensor4<T>& x, double rate, Rng& rng, Mode mode,
                   DropoutCache<T>* cache = nullptr) {
    if (rate < 0.0 || rate >= 1.0)
        throw ParameterError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
    if (mode == Mode::Infer || rate == 0.0) {
        if (cache) {
            cache->keep.assign(x.size(), 1);
            cache->scale = 1.0;
        }
        return x;
    }
    const double scale = 1.0 / (1.0 - rate);
    Tensor4<T> y(x.dims());
    if (cache) {
        cache->keep.assign(x.size(), 0);
        cache->scale = scale;
    }
    for (std::size_t k = 0; k < x.size(); ++k) {
        if (rng.next_double() >= rate) {
            y[k] = static_cast<T>(static_cast<double>(x[k]) * scale);
            if (cache) cache->keep[k] = 1;
        }
    }
    return y;
}

template <typename T>
Tensor4<T> dropout_backward(const DropoutCache<T>& cache, const Tensor4<T>& grad_out) {
    Tensor4<T> gx(grad_out.dims());
    for (std::size_t k = 0; k < grad_out.size(); ++k)
        gx[k] = cache.keep[k]
                    ? static_cast<T>(static_cast<double>(grad_out[k]) * cache.scale)
                    : T(0);
    return gx;
}

// ---- dense layer on flattened (n, c*h*w) inputs ----

template <typename T>
Tensor4<T> dense_forward(const Tensor4<T>& x, const Tensor4<T>& weight, const Tensor4<T>& bias) {
    const int in = x.c() * x.h() * x.w();
    const int out = weight.n();
    if (weight.c() * weight.h() * weight.w() != in)
        throw ShapeError("dense: weight expects " +
                         std::to_string(weight.c() * weight.h() * weight.w()) +
                         " inputs, got " + std::to_string(in));
    if (bias.size() != static_cast<std::size_t>(out))
        throw ShapeError("dense: bias size mismatch");
    Tensor4<T> y(x.n(), out, 1, 1);
    gemm_nt(static_cast<std::size_t>(x.n()), static_cast<std::size_t>(out),
            static_cast<std::size_t>(in), x.data(), weight.data(), y.data());
    for (int i = 0; i < x.n(); ++i)
        for (int o = 0; o < out; ++o) y.at(i, o, 0, 0) += bias[static_cast<std::size_t>(o)];
    return y;
}

template <typename T>
struct DenseGrads {
    Tensor4<T> grad_input;
    Tensor4<T> grad_weight, grad_bias;
};

template <typename T>
DenseGrads<T> dense_backward(const Tensor4<T>& x, const Tensor4<T>& weight,
                             const Tensor4<T>& grad_out) {
    const std::size_t n = static_cast<std::size_t>(x.n());
    const std::size_t in = static_cast<std::size_t>(x.c()) * x.h() * x.w();
    const std::size_t out = static_cast<std::size_t>(weight.n());
    DenseGrads<T> g{Tensor4<T>(x.dims()), Tensor4<T>(weight.dims()),
                    Tensor4<T>(1, static_cast<int>(out), 1, 1)};
    // gW[o][k] = sum_i gy[i][o] * x[i][k]
    gemm_tn(out, in, n, grad_out.data(), x.data(), g.grad_weight.data());
    // gx[i][k] = sum_o gy[i][o] * W[o][k]
    gemm_nn(n, in, out, grad_out.data(), weight.data(), g.grad_input.data());
    for (std::size_t o = 0; o < out; ++o) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(grad_out[i * out + o]);
        g.grad_bias[o] = static_cast<T>(acc);
    }
    return g;
}

// ---- losses; both reduce by mean over the batch ----

template <typename T>
struct LossResult {
    double loss = 0.0;
    Tensor4<T> grad_logits;
};

template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor4<T>& logits, const std::vector<int>& labels) {
    const int n = logits.n();
    const int k = logits.c() * logits.h() * logits.w();
    if (labels.size() != static_cast<std::size_t>(n))
        throw DataError("softmax_cross_entropy: label count mismatch");
    LossResult<T> r;
    r.grad_logits = Tensor4<T>(logits.dims());
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const int label = labels[static_cast<std::size_t>(i)];
        if (label < 0 || label >= k)
            throw DataError("softmax_cross_entropy: label " + std::to_string(label) +
                            " out of range for " + std::to_string(k) + " classes");
        const T* row = logits.data() + static_cast<std::size_t>(i) * k;
        double mx = static_cast<double>(row[0]);
        for (int j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double z = 0.0;
        for (int j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
        total += std::log(z) - (static_cast<double>(row[label]) - mx);
        T* grow = r.grad_logits.data() + static_cast<std::size_t>(i) * k;
        for (int j = 0; j < k; ++j) {
            const double p = std::exp(static_cast<double>(row[j]) - mx) / z;
            grow[j] = static_cast<T>((p - (j == label ? 1.0 : 0.0)) / n);
        }
    }
    r.loss = total / n;
    return r;
}

// Multi-label objective: per example, binary cross-entropy with logits summed
// over classes; mean over the batch.
template <typename T>
LossResult<T> sigmoid_cross_entropy(const Tensor4<T>& logits,
                                    const std::vector<std::uint8_t>& multi_hot) {
    const int n = logits.n();
    const int k = logits.c() * logits.h() * logits.w();
    if (multi_hot.size() != static_cast<std::size_t>(n) * k)
        throw DataError("sigmoid_cross_entropy: multi-hot size mismatch");
    LossResult<T> r;
    r.grad_logits = Tensor4<T>(logits.dims());
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const T* row = logits.data() + static_cast<std::size_t>(i) * k;
        T* grow = r.grad_logits.data() + static_cast<std::size_t>(i) * k;
        for (int j = 0; j < k; ++j) {
            const double z = static_cast<double>(row[j]);
            const double t = multi_hot[static_cast<std::size_t>(i) * k + j] ? 1.0 : 0.0;
            // max(z,0) - z*t + log(1 + exp(-|z|)) is the stable form.
            total += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
            const double sig = 1.0 / (1.0 + std::exp(-z));
            grow[j] = static_cast<T>((sig - t) / n);
        }
    }
    r.loss = total / n;
    return r;
}

}  // namespace xsep
