#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "xsep/errors.hpp"
#include "xsep/rng.hpp"

namespace xsep {

namespace detail {

// Allocator whose default-construct is a no-op for trivial types, so buffers
// that kernels fully overwrite skip the zero fill.
template <typename T>
struct UninitAlloc : std::allocator<T> {
    template <typename U>
    struct rebind {
        using other = UninitAlloc<U>;
    };
    template <typename U, typename... Args>
    void construct(U* p, Args&&... args) {
        if constexpr (sizeof...(Args) == 0)
            ::new (static_cast<void*>(p)) U;
        else
            ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};

}  // namespace detail

struct Dims4 {
    int n = 0, c = 0, h = 0, w = 0;

    bool operator==(const Dims4&) const = default;

    std::size_t count() const {
        return static_cast<std::size_t>(n) * c * static_cast<std::size_t>(h) * w;
    }

    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) +
               "," + std::to_string(w) + ")";
    }
};

// Dense rank-4 tensor, row-major in (batch, channel, row, col) order.
// Element (i,j,y,x) lives at offset ((i*c + j)*h + y)*w + x.
template <typename T>
class Tensor4 {
public:
    Tensor4() = default;

    Tensor4(int n, int c, int h, int w, T value = T(0)) : dims_{n, c, h, w} {
        if (n < 1 || c < 1 || h < 1 || w < 1)
            throw ShapeError("Tensor4: all dims must be >= 1, got " + dims_.str());
        constexpr std::size_t kMaxElems = std::size_t(1) << 33;
        const std::size_t count = static_cast<std::size_t>(n) * static_cast<std::size_t>(c) *
                                  static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
        if (count / static_cast<std::size_t>(n) / static_cast<std::size_t>(c) !=
                static_cast<std::size_t>(h) * static_cast<std::size_t>(w) ||
            count > kMaxElems)
            throw SizeError("Tensor4: size overflow for dims " + dims_.str());
        data_.assign(count, value);
    }

    explicit Tensor4(const Dims4& d, T value = T(0)) : Tensor4(d.n, d.c, d.h, d.w, value) {}

    // Skips the zero fill; only for outputs every element of which the caller
    // writes before any read.
    static Tensor4 uninit(const Dims4& d) {
        Tensor4 t(d, T(0), 0);
        return t;
    }

    const Dims4& dims() const { return dims_; }
    int n() const { return dims_.n; }
    int c() const { return dims_.c; }
    int h() const { return dims_.h; }
    int w() const { return dims_.w; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& at(int i, int j, int y, int x) { return data_[offset(i, j, y, x)]; }
    const T& at(int i, int j, int y, int x) const { return data_[offset(i, j, y, x)]; }

    T& operator[](std::size_t k) { return data_[k]; }
    const T& operator[](std::size_t k) const { return data_[k]; }

    std::size_t offset(int i, int j, int y, int x) const {
        return ((static_cast<std::size_t>(i) * dims_.c + j) * dims_.h + y) * dims_.w + x;
    }

    // Pointer to the (i,j) spatial plane of h*w contiguous elements.
    T* plane(int i, int j) { return data_.data() + offset(i, j, 0, 0); }
    const T* plane(int i, int j) const { return data_.data() + offset(i, j, 0, 0); }

    void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

    template <typename U>
    Tensor4<U> cast() const {
        Tensor4<U> out(dims_.n, dims_.c, dims_.h, dims_.w);
        for (std::size_t k = 0; k < data_.size(); ++k) out[k] = static_cast<U>(data_[k]);
        return out;
    }

private:
    Tensor4(const Dims4& d, T, int) : dims_(d) {
        if (d.n < 1 || d.c < 1 || d.h < 1 || d.w < 1)
            throw ShapeError("Tensor4: all dims must be >= 1, got " + dims_.str());
        constexpr std::size_t kMaxElems = std::size_t(1) << 33;
        const std::size_t count = d.count();
        if (count / static_cast<std::size_t>(d.n) / static_cast<std::size_t>(d.c) !=
                static_cast<std::size_t>(d.h) * static_cast<std::size_t>(d.w) ||
            count > kMaxElems)
            throw SizeError("Tensor4: size overflow for dims " + dims_.str());
        data_.resize(count);
    }

    Dims4 dims_;
    std::vector<T, detail::UninitAlloc<T>> data_;
};

template <typename T>
Tensor4<T> zeros(const Dims4& d) {
    return Tensor4<T>(d, T(0));
}

template <typename T>
Tensor4<T> ones(const Dims4& d) {
    return Tensor4<T>(d, T(1));
}

template <typename T>
Tensor4<T> full(const Dims4& d, T value) {
    return Tensor4<T>(d, value);
}

template <typename T>
void check_same_dims(const Tensor4<T>& a, const Tensor4<T>& b, const char* what) {
    if (!(a.dims() == b.dims()))
        throw ShapeError(std::string(what) + ": dims mismatch " + a.dims().str() + " vs " +
                         b.dims().str());
}

template <typename T>
Tensor4<T> add(const Tensor4<T>& a, const Tensor4<T>& b) {
    check_same_dims(a, b, "add");
    Tensor4<T> out = Tensor4<T>::uninit(a.dims());
    for (std::size_t k = 0; k < a.size(); ++k) out[k] = a[k] + b[k];
    return out;
}

template <typename T>
void add_inplace(Tensor4<T>& a, const Tensor4<T>& b) {
    check_same_dims(a, b, "add_inplace");
    for (std::size_t k = 0; k < a.size(); ++k) a[k] += b[k];
}

template <typename T>
Tensor4<T> sub(const Tensor4<T>& a, const Tensor4<T>& b) {
    check_same_dims(a, b, "sub");
    Tensor4<T> out = Tensor4<T>::uninit(a.dims());
    for (std::size_t k = 0; k < a.size(); ++k) out[k] = a[k] - b[k];
    return out;
}

template <typename T>
Tensor4<T> mul_scalar(const Tensor4<T>& a, T s) {
    Tensor4<T> out = Tensor4<T>::uninit(a.dims());
    for (std::size_t k = 0; k < a.size(); ++k) out[k] = a[k] * s;
    return out;
}

template <typename T>
Tensor4<T> relu(const Tensor4<T>& a) {
    Tensor4<T> out = Tensor4<T>::uninit(a.dims());
    for (std::size_t k = 0; k < a.size(); ++k) out[k] = a[k] > T(0) ? a[k] : T(0);
    return out;
}

// d relu(x)/dx evaluated on the forward input.
template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& x, const Tensor4<T>& grad_out) {
    check_same_dims(x, grad_out, "relu_backward");
    Tensor4<T> out = Tensor4<T>::uninit(x.dims());
    for (std::size_t k = 0; k < x.size(); ++k) out[k] = x[k] > T(0) ? grad_out[k] : T(0);
    return out;
}

// ELU with alpha = 1: x for x >= 0, exp(x) - 1 otherwise.
template <typename T>
Tensor4<T> elu(const Tensor4<T>& a) {
    Tensor4<T> out = Tensor4<T>::uninit(a.dims());
    for (std::size_t k = 0; k < a.size(); ++k)
        out[k] = a[k] >= T(0) ? a[k] : T(std::exp(static_cast<double>(a[k])) - 1.0);
    return out;
}

template <typename T>
Tensor4<T> elu_backward(const Tensor4<T>& x, const Tensor4<T>& grad_out) {
    check_same_dims(x, grad_out, "elu_backward");
    Tensor4<T> out = Tensor4<T>::uninit(x.dims());
    for (std::size_t k = 0; k < x.size(); ++k)
        out[k] = x[k] >= T(0)
                     ? grad_out[k]
                     : T(static_cast<double>(grad_out[k]) * std::exp(static_cast<double>(x[k])));
    return out;
}

// Sequential accumulation in double, in element order. Fixed so that threaded
// callers reproduce the single-threaded value bit for bit.
template <typename T>
double sum(const Tensor4<T>& a) {
    double acc = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) acc += static_cast<double>(a[k]);
    return acc;
}

template <typename T>
double mean(const Tensor4<T>& a) {
    return sum(a) / static_cast<double>(a.size());
}

// Per-example argmax over the channel axis; ties go to the lower class index.
template <typename T>
std::vector<int> argmax_class(const Tensor4<T>& logits) {
    std::vector<int> out(static_cast<std::size_t>(logits.n()));
    const int klass = logits.c() * logits.h() * logits.w();
    for (int i = 0; i < logits.n(); ++i) {
        const T* row = logits.data() + static_cast<std::size_t>(i) * klass;
        int best = 0;
        for (int j = 1; j < klass; ++j)
            if (row[j] > row[best]) best = j;
        out[static_cast<std::size_t>(i)] = best;
    }
    return out;
}

// Copy of channels [c0, c1) across the whole batch.
template <typename T>
Tensor4<T> channel_slice(const Tensor4<T>& x, int c0, int c1) {
    if (c0 < 0 || c1 <= c0 || c1 > x.c())
        throw ShapeError("channel_slice: bad range [" + std::to_string(c0) + "," +
                         std::to_string(c1) + ") for c=" + std::to_string(x.c()));
    Tensor4<T> out(x.n(), c1 - c0, x.h(), x.w());
    const std::size_t plane = static_cast<std::size_t>(x.h()) * x.w();
    for (int i = 0; i < x.n(); ++i)
        std::copy_n(x.plane(i, c0), static_cast<std::size_t>(c1 - c0) * plane,
                    out.plane(i, 0));
    return out;
}

// Writes src into dst at channel offset c0 (shapes must agree elsewhere).
template <typename T>
void channel_assign(Tensor4<T>& dst, int c0, const Tensor4<T>& src) {
    if (src.n() != dst.n() || src.h() != dst.h() || src.w() != dst.w() ||
        c0 + src.c() > dst.c())
        throw ShapeError("channel_assign: dims mismatch " + dst.dims().str() + " <- " +
                         src.dims().str() + " at c" + std::to_string(c0));
    const std::size_t plane = static_cast<std::size_t>(dst.h()) * dst.w();
    for (int i = 0; i < src.n(); ++i)
        std::copy_n(src.plane(i, 0), static_cast<std::size_t>(src.c()) * plane,
                    dst.plane(i, c0));
}

template <typename T>
Tensor4<T> glorot_uniform(const Dims4& d, int fan_in, int fan_out, Rng& rng) {
    if (fan_in < 1 || fan_out < 1) throw ParameterError("glorot_uniform: fans must be >= 1");
    const double limit = std::sqrt(6.0 / (static_cast<double>(fan_in) + fan_out));
    Tensor4<T> out(d);
    for (std::size_t k = 0; k < out.size(); ++k)
        out[k] = static_cast<T>(rng.uniform(-limit, limit));
    return out;
}

template <typename T>
Tensor4<T> random_uniform(const Dims4& d, double lo, double hi, Rng& rng) {
    Tensor4<T> out(d);
    for (std::size_t k = 0; k < out.size(); ++k) out[k] = static_cast<T>(rng.uniform(lo, hi));
    return out;
}

}  // namespace xsep
