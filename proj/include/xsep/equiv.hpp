#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "xsep/arch.hpp"
#include "xsep/model.hpp"

namespace xsep {

template <typename T>
double max_abs(const Tensor4<T>& t) {
    double m = 0.0;
    for (std::size_t k = 0; k < t.size(); ++k)
        m = std::max(m, std::abs(static_cast<double>(t[k])));
    return m;
}

// max |a - b| / max |a|; the global max-norm form every tolerance in the test
// suites uses.
template <typename T>
double relative_deviation(const Tensor4<T>& a, const Tensor4<T>& b) {
    check_same_dims(a, b, "relative_deviation");
    double diff = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k)
        diff = std::max(diff, std::abs(static_cast<double>(a[k]) - static_cast<double>(b[k])));
    const double scale = max_abs(a);
    return scale > 0.0 ? diff / scale : diff;
}

// Copies tower weights into the reformulated model: 1x1 kernels stack along
// the output-channel axis, tower spatial kernels become the per-segment
// blocks.
template <typename T>
void map_inception_weights(const ParamStore<T>& tower, ParamStore<T>& reform,
                           const std::vector<int>& widths) {
    const std::size_t g = widths.size();
    if (tower.size() != 2 * g || reform.size() != 1 + g)
        throw ParameterError("map_inception_weights: unexpected parameter layout");
    Tensor4<T>& stacked = *reform[0].value;
    std::size_t row_offset = 0;
    for (std::size_t t = 0; t < g; ++t) {
        const Tensor4<T>& pw = *tower[2 * t].value;       // (w_t, cin, 1, 1)
        const Tensor4<T>& spatial = *tower[2 * t + 1].value;  // (w_t, w_t, kh, kw)
        std::copy_n(pw.data(), pw.size(), stacked.data() + row_offset);
        row_offset += pw.size();
        Tensor4<T>& seg = *reform[1 + t].value;
        if (seg.size() != spatial.size())
            throw ParameterError("map_inception_weights: segment size mismatch");
        std::copy_n(spatial.data(), spatial.size(), seg.data());
    }
}

// One randomized tower-vs-reformulation instance: build both forms, map
// weights across, run both on the same input.
template <typename T>
double inception_reformulation_deviation(std::uint64_t seed) {
    Rng rng(seed);
    const int g = 1 + static_cast<int>(rng.next_below(4));
    std::vector<int> widths;
    for (int t = 0; t < g; ++t) widths.push_back(1 + static_cast<int>(rng.next_below(8)));
    const int cin = 1 + static_cast<int>(rng.next_below(8));
    const int h = 4 + static_cast<int>(rng.next_below(9));
    const int w = 4 + static_cast<int>(rng.next_below(9));
    const int n = 1 + static_cast<int>(rng.next_below(2));

    const ArchSpec tower_spec = build_simplified_inception(cin, widths, h, w);
    const ArchSpec reform_spec = reformulate_inception(tower_spec);
    Model<T> tower(tower_spec, rng.next_u64());
    Model<T> reform(reform_spec, rng.next_u64());
    map_inception_weights(tower.params(), reform.params(), widths);

    const Tensor4<T> x = random_uniform<T>(Dims4{n, cin, h, w}, -1.0, 1.0, rng);
    Rng unused(0);
    const Tensor4<T> ya = tower.forward(x, Mode::Infer, unused);
    const Tensor4<T> yb = reform.forward(x, Mode::Infer, unused);
    return relative_deviation(ya, yb);
}

struct SpectrumDeviation {
    double single_segment = 0.0;  // g = 1 vs 1x1 then a full convolution
    double per_channel = 0.0;     // g = M vs pointwise then depthwise
};

// Spectrum endpoints on one randomized instance, checked against
// independently-written compositions (naive convolution and the dedicated
// depthwise kernel).
template <typename T>
SpectrumDeviation spectrum_endpoint_deviation(std::uint64_t seed) {
    Rng rng(seed);
    const int cin = 1 + static_cast<int>(rng.next_below(6));
    const int m = 2 + static_cast<int>(rng.next_below(11));
    const int h = 4 + static_cast<int>(rng.next_below(7));
    const int w = 4 + static_cast<int>(rng.next_below(7));
    const int n = 1 + static_cast<int>(rng.next_below(2));
    ConvGeometry geo{3, 3, 1, 1, rng.next_below(2) ? Padding::Same : Padding::Valid};

    const Tensor4<T> x = random_uniform<T>(Dims4{n, cin, h, w}, -1.0, 1.0, rng);
    const Tensor4<T> pw = random_uniform<T>(Dims4{m, cin, 1, 1}, -1.0, 1.0, rng);
    const ConvGeometry pw_geo{1, 1, 1, 1, Padding::Valid};

    SpectrumDeviation result;
    {
        SpectrumParams<T> params;
        params.pointwise = pw;
        params.seg_kernels.push_back(random_uniform<T>(Dims4{m, m, 3, 3}, -1.0, 1.0, rng));
        const Tensor4<T> a = segment_spectrum_conv(x, params, geo);
        const Tensor4<T> b = conv2d_naive(conv2d_naive(x, pw, pw_geo), params.seg_kernels[0], geo);
        result.single_segment = relative_deviation(b, a);
    }
    {
        SpectrumParams<T> params;
        params.pointwise = pw;
        Tensor4<T> dw_kernel(1, m, 3, 3);
        for (int j = 0; j < m; ++j) {
            params.seg_kernels.push_back(random_uniform<T>(Dims4{1, 1, 3, 3}, -1.0, 1.0, rng));
            std::copy_n(params.seg_kernels.back().data(), 9, dw_kernel.plane(0, j));
        }
        const Tensor4<T> a = segment_spectrum_conv(x, params, geo);
        const Tensor4<T> b = depthwise_conv2d(conv2d_naive(x, pw, pw_geo), dw_kernel, geo, 1);
        result.per_channel = relative_deviation(b, a);
    }
    return result;
}

// The pointwise-then-depthwise module as an ArchSpec against the spectrum op
// at g = M.
template <typename T>
double extreme_inception_deviation(std::uint64_t seed) {
    Rng rng(seed);
    const int cin = 1 + static_cast<int>(rng.next_below(6));
    const int m = 1 + static_cast<int>(rng.next_below(10));
    const int h = 4 + static_cast<int>(rng.next_below(6));
    const int w = 4 + static_cast<int>(rng.next_below(6));

    const ArchSpec spec = build_extreme_inception(cin, m, h, w);
    Model<T> model(spec, rng.next_u64());

    SpectrumParams<T> params;
    params.pointwise = *model.params()[0].value;
    const Tensor4<T>& dw = *model.params()[1].value;
    for (int j = 0; j < m; ++j) {
        Tensor4<T> seg(1, 1, 3, 3);
        std::copy_n(dw.plane(0, j), 9, seg.data());
        params.seg_kernels.push_back(std::move(seg));
    }

    const Tensor4<T> x = random_uniform<T>(Dims4{1, cin, h, w}, -1.0, 1.0, rng);
    Rng unused(0);
    const Tensor4<T> a = model.forward(x, Mode::Infer, unused);
    const Tensor4<T> b =
        segment_spectrum_conv(x, params, ConvGeometry{3, 3, 1, 1, Padding::Same});
    return relative_deviation(a, b);
}

}  // namespace xsep
