#include <doctest.h>

#include <cmath>
#include <vector>

#include "test_util.hpp"
#include "xsep/conv.hpp"
#include "xsep/gradcheck.hpp"

using namespace xsep;

namespace {

Tensor4<float> identity_1x1_kernel(int channels) {
    Tensor4<float> k(channels, channels, 1, 1);
    for (int o = 0; o < channels; ++o) k.at(o, o, 0, 0) = 1.0f;
    return k;
}

Tensor4<float> center_one_depthwise(int channels) {
    Tensor4<float> k(1, channels, 3, 3);
    for (int j = 0; j < channels; ++j) k.at(0, j, 1, 1) = 1.0f;
    return k;
}

}  // namespace

TEST_CASE("naive conv: 1x1 identity mixing returns the input") {
    Rng rng(1);
    const auto x = testutil::rand_tensor<float>(rng, 2, 3, 5, 5);
    const auto y = conv2d_naive(x, identity_1x1_kernel(3), ConvGeometry{1, 1, 1, 1, Padding::Valid});
    CHECK(testutil::rel_dev(x, y) == 0.0);
}

TEST_CASE("naive conv: all-ones 3x3 kernel on constant input") {
    const auto x = full<float>({1, 1, 6, 6}, 2.5f);
    const auto k = ones<float>({1, 1, 3, 3});
    const auto y = conv2d_naive(x, k, ConvGeometry{3, 3, 1, 1, Padding::Valid});
    REQUIRE(y.dims() == Dims4{1, 1, 4, 4});
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(9.0f * 2.5f));
}

TEST_CASE("naive conv: strided valid shape arithmetic") {
    Rng rng(2);
    const auto x = testutil::rand_tensor<float>(rng, 2, 3, 5, 5);
    const auto k = testutil::rand_tensor<float>(rng, 8, 3, 3, 3);
    const auto y = conv2d_naive(x, k, ConvGeometry{3, 3, 2, 2, Padding::Valid});
    CHECK(y.dims() == Dims4{2, 8, 2, 2});
}

TEST_CASE("conv errors: channel mismatch and empty geometry") {
    Rng rng(3);
    const auto x = testutil::rand_tensor<float>(rng, 1, 3, 5, 5);
    const auto k = testutil::rand_tensor<float>(rng, 4, 2, 3, 3);
    CHECK_THROWS_AS(conv2d_naive(x, k, ConvGeometry{3, 3, 1, 1, Padding::Valid}), ShapeError);
    const auto k2 = testutil::rand_tensor<float>(rng, 4, 3, 7, 7);
    CHECK_THROWS_AS(conv2d_naive(x, k2, ConvGeometry{7, 7, 1, 1, Padding::Valid}),
                    GeometryError);
}

TEST_CASE("im2col path equals the naive oracle across the geometry grid") {
    Rng rng(4);
    for (int stride : {1, 2}) {
        for (Padding pad : {Padding::Same, Padding::Valid}) {
            for (int k : {1, 3, 5}) {
                const auto x = testutil::rand_tensor<float>(rng, 2, 4, 8, 8);
                const auto kernel = testutil::rand_tensor<float>(rng, 6, 4, k, k);
                const ConvGeometry geo{k, k, stride, stride, pad};
                const auto a = conv2d_naive(x, kernel, geo);
                const auto b = conv2d_im2col(x, kernel, geo);
                CHECK(testutil::rel_dev(a, b) < 1e-5);

                const auto gout = testutil::rand_tensor<float>(
                    rng, a.n(), a.c(), a.h(), a.w());
                const auto ga = conv2d_backward_naive(x, kernel, geo, gout);
                const auto gb = conv2d_backward_im2col(x, kernel, geo, gout);
                CHECK(testutil::rel_dev(ga.grad_input, gb.grad_input) < 1e-5);
                CHECK(testutil::rel_dev(ga.grad_kernel, gb.grad_kernel) < 1e-5);
            }
        }
    }
}

TEST_CASE("zero kernel gives zero output") {
    Rng rng(5);
    const auto x = testutil::rand_tensor<float>(rng, 1, 3, 6, 6);
    const auto k = zeros<float>({4, 3, 3, 3});
    const auto y = conv2d_im2col(x, k, ConvGeometry{3, 3, 1, 1, Padding::Same});
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == 0.0f);
}

TEST_CASE("1x1 conv equals per-pixel channel mixing") {
    Rng rng(6);
    const auto x = testutil::rand_tensor<float>(rng, 2, 3, 4, 4);
    const auto k = testutil::rand_tensor<float>(rng, 5, 3, 1, 1);
    const auto y = conv2d_im2col(x, k, ConvGeometry{1, 1, 1, 1, Padding::Valid});
    // Independent oracle: direct matrix product at every pixel.
    Tensor4<float> expected(2, 5, 4, 4);
    for (int i = 0; i < 2; ++i)
        for (int o = 0; o < 5; ++o)
            for (int yy = 0; yy < 4; ++yy)
                for (int xx = 0; xx < 4; ++xx) {
                    double acc = 0.0;
                    for (int j = 0; j < 3; ++j)
                        acc += static_cast<double>(k.at(o, j, 0, 0)) * x.at(i, j, yy, xx);
                    expected.at(i, o, yy, xx) = static_cast<float>(acc);
                }
    CHECK(testutil::rel_dev(expected, y) < 1e-6);
}

TEST_CASE("depthwise conv: per-channel identity filters") {
    Rng rng(7);
    const auto x = testutil::rand_tensor<float>(rng, 2, 3, 5, 5);
    const auto y = depthwise_conv2d(x, center_one_depthwise(3),
                                    ConvGeometry{3, 3, 1, 1, Padding::Same}, 1);
    CHECK(testutil::rel_dev(x, y) == 0.0);
}

TEST_CASE("depthwise conv equals slice-and-conv oracle") {
    Rng rng(8);
    const auto x = testutil::rand_tensor<float>(rng, 2, 4, 7, 7);
    const auto k = testutil::rand_tensor<float>(rng, 1, 4, 3, 3);
    for (Padding pad : {Padding::Same, Padding::Valid}) {
        for (int stride : {1, 2}) {
            const ConvGeometry geo{3, 3, stride, stride, pad};
            const auto y = depthwise_conv2d(x, k, geo, 1);
            for (int j = 0; j < 4; ++j) {
                const auto xs = channel_slice(x, j, j + 1);
                Tensor4<float> kj(1, 1, 3, 3);
                std::copy_n(k.plane(0, j), 9, kj.data());
                const auto yj = conv2d_naive(xs, kj, geo);
                const auto ys = channel_slice(y, j, j + 1);
                CHECK(testutil::rel_dev(yj, ys) < 1e-5);
            }
        }
    }
}

TEST_CASE("depthwise conv: multiplier shapes and errors") {
    Rng rng(9);
    const auto x = testutil::rand_tensor<float>(rng, 1, 3, 6, 6);
    const auto k = testutil::rand_tensor<float>(rng, 1, 6, 3, 3);
    const auto y = depthwise_conv2d(x, k, ConvGeometry{3, 3, 1, 1, Padding::Valid}, 2);
    CHECK(y.dims() == Dims4{1, 6, 4, 4});
    CHECK_THROWS_AS(depthwise_conv2d(x, k, ConvGeometry{3, 3, 1, 1, Padding::Valid}, 0),
                    ParameterError);
}

TEST_CASE("separable conv: composed identity") {
    Rng rng(10);
    const auto x = testutil::rand_tensor<float>(rng, 1, 3, 5, 5);
    const auto y = separable_conv2d(x, center_one_depthwise(3), identity_1x1_kernel(3),
                                    ConvGeometry{3, 3, 1, 1, Padding::Same});
    CHECK(testutil::rel_dev(x, y) == 0.0);
}

TEST_CASE("separable conv equals depthwise-then-pointwise composition") {
    Rng rng(11);
    const auto x = testutil::rand_tensor<float>(rng, 2, 3, 6, 6);
    const auto dw = testutil::rand_tensor<float>(rng, 1, 3, 3, 3);
    const auto pw = testutil::rand_tensor<float>(rng, 5, 3, 1, 1);
    const ConvGeometry geo{3, 3, 1, 1, Padding::Same};
    const auto fused = separable_conv2d(x, dw, pw, geo, 1, Activation::None);
    const auto mid = depthwise_conv2d(x, dw, geo, 1);
    const auto staged = conv2d_naive(mid, pw, ConvGeometry{1, 1, 1, 1, Padding::Valid});
    CHECK(testutil::rel_dev(staged, fused) < 1e-5);
}

TEST_CASE("separable conv intermediate activations change the result") {
    Rng rng(12);
    const auto x = testutil::rand_tensor<float>(rng, 1, 3, 5, 5);
    const auto dw = testutil::rand_tensor<float>(rng, 1, 3, 3, 3);
    const auto pw = testutil::rand_tensor<float>(rng, 4, 3, 1, 1);
    const ConvGeometry geo{3, 3, 1, 1, Padding::Same};
    const auto none = separable_conv2d(x, dw, pw, geo, 1, Activation::None);
    const auto with_relu = separable_conv2d(x, dw, pw, geo, 1, Activation::ReLU);
    const auto with_elu = separable_conv2d(x, dw, pw, geo, 1, Activation::ELU);
    CHECK(testutil::rel_dev(none, with_relu) > 1e-3);
    CHECK(testutil::rel_dev(with_relu, with_elu) > 1e-6);
    // ReLU variant equals activating the depthwise output explicitly.
    const auto staged = conv2d_naive(relu(depthwise_conv2d(x, dw, geo, 1)), pw,
                                     ConvGeometry{1, 1, 1, 1, Padding::Valid});
    CHECK(testutil::rel_dev(staged, with_relu) < 1e-5);
}

TEST_CASE("spectrum conv endpoints match independent compositions") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const auto dev = spectrum_endpoint_deviation<float>(seed);
        CHECK(dev.single_segment < 1e-5);
        CHECK(dev.per_channel < 1e-5);
    }
}

TEST_CASE("spectrum conv rejects non-dividing segment counts") {
    Rng rng(13);
    SpectrumParams<float> params;
    params.pointwise = testutil::rand_tensor<float>(rng, 8, 3, 1, 1);
    for (int i = 0; i < 3; ++i)
        params.seg_kernels.push_back(testutil::rand_tensor<float>(rng, 2, 2, 3, 3));
    const auto x = testutil::rand_tensor<float>(rng, 1, 3, 5, 5);
    CHECK_THROWS_AS(segment_spectrum_conv(x, params, ConvGeometry{3, 3, 1, 1, Padding::Same}),
                    ParameterError);
}

TEST_CASE("backward: zero grad_out gives zero gradients") {
    Rng rng(14);
    const auto x = testutil::rand_tensor<float>(rng, 1, 2, 5, 5);
    const auto k = testutil::rand_tensor<float>(rng, 3, 2, 3, 3);
    const ConvGeometry geo{3, 3, 1, 1, Padding::Same};
    const auto gout = zeros<float>({1, 3, 5, 5});
    const auto g = conv2d_backward_im2col(x, k, geo, gout);
    for (std::size_t i = 0; i < g.grad_input.size(); ++i) CHECK(g.grad_input[i] == 0.0f);
    for (std::size_t i = 0; i < g.grad_kernel.size(); ++i) CHECK(g.grad_kernel[i] == 0.0f);
}

TEST_CASE("depthwise grad_kernel for a channel ignores the other channels") {
    Rng rng(15);
    const auto x = testutil::rand_tensor<float>(rng, 2, 3, 6, 6);
    const auto k = testutil::rand_tensor<float>(rng, 1, 3, 3, 3);
    const ConvGeometry geo{3, 3, 1, 1, Padding::Same};
    const auto gout = testutil::rand_tensor<float>(rng, 2, 3, 6, 6);
    const auto g_full = depthwise_conv2d_backward(x, k, geo, 1, gout);

    Tensor4<float> x_masked = x;
    for (int i = 0; i < 2; ++i) {
        for (int j = 0; j < 3; ++j) {
            if (j == 1) continue;
            float* p = x_masked.plane(i, j);
            for (int s = 0; s < 36; ++s) p[s] = 0.0f;
        }
    }
    const auto g_masked = depthwise_conv2d_backward(x_masked, k, geo, 1, gout);
    for (int t = 0; t < 9; ++t)
        CHECK(g_full.grad_kernel.plane(0, 1)[t] ==
              doctest::Approx(g_masked.grad_kernel.plane(0, 1)[t]));
}

TEST_CASE("linearity of the activation-free forward maps") {
    Rng rng(16);
    const auto x = testutil::rand_tensor<float>(rng, 1, 3, 6, 6);
    const auto y = testutil::rand_tensor<float>(rng, 1, 3, 6, 6);
    const auto k = testutil::rand_tensor<float>(rng, 4, 3, 3, 3);
    const ConvGeometry geo{3, 3, 1, 1, Padding::Same};
    const float a = 1.7f, b = -0.6f;
    const auto mix = add(mul_scalar(x, a), mul_scalar(y, b));
    const auto lhs = conv2d_im2col(mix, k, geo);
    const auto rhs = add(mul_scalar(conv2d_im2col(x, k, geo), a),
                         mul_scalar(conv2d_im2col(y, k, geo), b));
    CHECK(testutil::rel_dev(lhs, rhs) < 1e-5);

    const auto dwk = testutil::rand_tensor<float>(rng, 1, 3, 3, 3);
    const auto pwk = testutil::rand_tensor<float>(rng, 4, 3, 1, 1);
    const auto lhs2 = separable_conv2d(mix, dwk, pwk, geo);
    const auto rhs2 = add(mul_scalar(separable_conv2d(x, dwk, pwk, geo), a),
                          mul_scalar(separable_conv2d(y, dwk, pwk, geo), b));
    CHECK(testutil::rel_dev(lhs2, rhs2) < 1e-5);
}

TEST_CASE("same/valid shape law over random geometries") {
    Rng rng(17);
    for (int trial = 0; trial < 100; ++trial) {
        const int h = 1 + static_cast<int>(rng.next_below(20));
        const int k = 1 + static_cast<int>(rng.next_below(5));
        const int s = 1 + static_cast<int>(rng.next_below(3));
        ConvGeometry same{k, k, s, s, Padding::Same};
        CHECK(same.out_dim(h, k, s) == (h + s - 1) / s);
        if (h >= k) {
            ConvGeometry valid{k, k, s, s, Padding::Valid};
            CHECK(valid.out_dim(h, k, s) == (h - k) / s + 1);
        }
    }
}

TEST_CASE("f32/f64 conv paths agree within 1e-5 relative") {
    Rng rng(18);
    const auto xf = testutil::rand_tensor<float>(rng, 2, 8, 8, 8, -10.0, 10.0);
    const auto kf = testutil::rand_tensor<float>(rng, 6, 8, 3, 3, -1.0, 1.0);
    const ConvGeometry geo{3, 3, 1, 1, Padding::Same};
    const auto yf = conv2d_im2col(xf, kf, geo);
    const auto yd = conv2d_im2col(xf.cast<double>(), kf.cast<double>(), geo);
    CHECK(testutil::rel_dev(yd, yf.cast<double>()) < 1e-5);
}

TEST_CASE("finite differences confirm every conv backward") {
    for (std::uint64_t seed : {3ull, 11ull}) {
        for (const auto& check : run_gradcheck_suite("conv", seed)) {
            INFO(check.layer, " seed ", seed, " worst ", check.result.max_rel_err);
            CHECK(check.result.max_rel_err < 1e-4);
        }
        for (const auto& check : run_gradcheck_suite("sepconv", seed)) {
            INFO(check.layer, " seed ", seed, " worst ", check.result.max_rel_err);
            CHECK(check.result.max_rel_err < 1e-4);
        }
    }
}

TEST_CASE("gradcheck flags a corrupted backward") {
    Rng rng(19);
    auto x = testutil::rand_tensor<double>(rng, 1, 2, 4, 4);
    auto k = testutil::rand_tensor<double>(rng, 2, 2, 3, 3);
    const ConvGeometry geo{3, 3, 1, 1, Padding::Same};
    GradCheckSystem sys;
    sys.tensors = {&x, &k};
    sys.names = {"x", "k"};
    sys.forward = [&] { return conv2d_im2col(x, k, geo); };
    sys.backward = [&](const Tensor4<double>& g) {
        auto grads = conv2d_backward_im2col(x, k, geo, g);
        grads.grad_kernel[0] += 0.5;  // deliberate corruption
        return std::vector<Tensor4<double>>{std::move(grads.grad_input),
                                            std::move(grads.grad_kernel)};
    };
    Rng check_rng(20);
    const auto result = grad_check(sys, check_rng);
    CHECK(result.max_rel_err > 1e-4);
}
