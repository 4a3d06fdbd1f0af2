#include "xsep/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "xsep/conv.hpp"
#include "xsep/layers.hpp"
#include "xsep/model.hpp"

namespace xsep {

namespace {

double project(const Tensor4<double>& projection, const Tensor4<double>& y) {
    double acc = 0.0;
    for (std::size_t k = 0; k < y.size(); ++k) acc += projection[k] * y[k];
    return acc;
}

}  // namespace

GradCheckResult grad_check(GradCheckSystem& system, Rng& rng, double step,
                           std::size_t max_checks_per_tensor) {
    const Tensor4<double> y0 = system.forward();
    Tensor4<double> projection(y0.dims());
    for (std::size_t k = 0; k < projection.size(); ++k)
        projection[k] = rng.next_below(2) ? 1.0 : -1.0;

    const std::vector<Tensor4<double>> analytic = system.backward(projection);
    if (analytic.size() != system.tensors.size())
        throw ParameterError("grad_check: backward returned wrong gradient count");

    GradCheckResult result;
    for (std::size_t t = 0; t < system.tensors.size(); ++t) {
        Tensor4<double>& tensor = *system.tensors[t];
        const std::size_t count = tensor.size();
        const std::size_t checks = std::min(count, max_checks_per_tensor);
        for (std::size_t c = 0; c < checks; ++c) {
            // Spread sampled indices across the tensor deterministically.
            const std::size_t k =
                checks == count ? c : (c * count) / checks + rng.next_below(count / checks);
            const double saved = tensor[k];
            tensor[k] = saved + step;
            const double up = project(projection, system.forward());
            tensor[k] = saved - step;
            const double down = project(projection, system.forward());
            tensor[k] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double a = analytic[t][k];
            const double rel =
                std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-3});
            if (rel > result.max_rel_err) {
                result.max_rel_err = rel;
                result.worst_tensor = system.names[t];
                result.worst_index = k;
            }
        }
    }
    return result;
}

namespace {

Tensor4<double> rand_t(Rng& rng, int n, int c, int h, int w, double lo = -1.0, double hi = 1.0) {
    return random_uniform<double>(Dims4{n, c, h, w}, lo, hi, rng);
}

LayerCheck check_conv(Rng& rng, bool naive_path) {
    const int n = 1 + static_cast<int>(rng.next_below(2));
    const int cin = 1 + static_cast<int>(rng.next_below(3));
    const int cout = 1 + static_cast<int>(rng.next_below(4));
    const int hw = 4 + static_cast<int>(rng.next_below(3));
    const int k = 1 + 2 * static_cast<int>(rng.next_below(2));
    ConvGeometry geo{k, k, 1 + static_cast<int>(rng.next_below(2)), 1,
                     rng.next_below(2) ? Padding::Same : Padding::Valid};
    geo.sw = geo.sh;

    auto x = rand_t(rng, n, cin, hw, hw);
    auto kernel = rand_t(rng, cout, cin, k, k);
    GradCheckSystem sys;
    sys.tensors = {&x, &kernel};
    sys.names = {"conv.x", "conv.kernel"};
    sys.forward = [&] {
        return naive_path ? conv2d_naive(x, kernel, geo) : conv2d_im2col(x, kernel, geo);
    };
    sys.backward = [&](const Tensor4<double>& g) {
        auto grads = naive_path ? conv2d_backward_naive(x, kernel, geo, g)
                                : conv2d_backward_im2col(x, kernel, geo, g);
        return std::vector<Tensor4<double>>{std::move(grads.grad_input),
                                            std::move(grads.grad_kernel)};
    };
    return {naive_path ? "conv-naive" : "conv-im2col", grad_check(sys, rng)};
}

LayerCheck check_depthwise(Rng& rng) {
    const int n = 1 + static_cast<int>(rng.next_below(2));
    const int cin = 1 + static_cast<int>(rng.next_below(3));
    const int mult = 1 + static_cast<int>(rng.next_below(2));
    const int hw = 5 + static_cast<int>(rng.next_below(2));
    ConvGeometry geo{3, 3, 1 + static_cast<int>(rng.next_below(2)), 1,
                     rng.next_below(2) ? Padding::Same : Padding::Valid};
    geo.sw = geo.sh;

    auto x = rand_t(rng, n, cin, hw, hw);
    auto kernel = rand_t(rng, 1, cin * mult, 3, 3);
    GradCheckSystem sys;
    sys.tensors = {&x, &kernel};
    sys.names = {"depthwise.x", "depthwise.kernel"};
    sys.forward = [&] { return depthwise_conv2d(x, kernel, geo, mult); };
    sys.backward = [&](const Tensor4<double>& g) {
        auto grads = depthwise_conv2d_backward(x, kernel, geo, mult, g);
        return std::vector<Tensor4<double>>{std::move(grads.grad_input),
                                            std::move(grads.grad_kernel)};
    };
    return {"depthwise", grad_check(sys, rng)};
}

LayerCheck check_sepconv(Rng& rng, Activation act) {
    const int n = 1 + static_cast<int>(rng.next_below(2));
    const int cin = 1 + static_cast<int>(rng.next_below(3));
    const int cout = 1 + static_cast<int>(rng.next_below(4));
    const int hw = 5;
    ConvGeometry geo{3, 3, 1, 1, Padding::Same};

    auto x = rand_t(rng, n, cin, hw, hw);
    auto dw = rand_t(rng, 1, cin, 3, 3);
    auto pw = rand_t(rng, cout, cin, 1, 1);
    GradCheckSystem sys;
    sys.tensors = {&x, &dw, &pw};
    sys.names = {"sepconv.x", "sepconv.dw", "sepconv.pw"};
    sys.forward = [&] { return separable_conv2d(x, dw, pw, geo, 1, act); };
    sys.backward = [&](const Tensor4<double>& g) {
        auto fwd = separable_conv2d_fwd(x, dw, pw, geo, 1, act);
        auto grads = separable_conv2d_backward(x, dw, pw, geo, 1, act, fwd.dw_out, g);
        return std::vector<Tensor4<double>>{std::move(grads.grad_input),
                                            std::move(grads.grad_dw_kernel),
                                            std::move(grads.grad_pw_kernel)};
    };
    std::string name = std::string("sepconv-") + to_string(act);
    return {std::move(name), grad_check(sys, rng)};
}

LayerCheck check_spectrum(Rng& rng) {
    const int n = 1;
    const int cin = 2 + static_cast<int>(rng.next_below(2));
    const int g = 1 + static_cast<int>(rng.next_below(3));
    const int seg = 1 + static_cast<int>(rng.next_below(2));
    const int m = g * seg;
    const int hw = 5;
    ConvGeometry geo{3, 3, 1, 1, Padding::Same};

    auto x = rand_t(rng, n, cin, hw, hw);
    SpectrumParams<double> params;
    params.pointwise = rand_t(rng, m, cin, 1, 1);
    for (int i = 0; i < g; ++i) params.seg_kernels.push_back(rand_t(rng, seg, seg, 3, 3));

    GradCheckSystem sys;
    sys.tensors = {&x, &params.pointwise};
    sys.names = {"spectrum.x", "spectrum.pw"};
    for (int i = 0; i < g; ++i) {
        sys.tensors.push_back(&params.seg_kernels[static_cast<std::size_t>(i)]);
        sys.names.push_back("spectrum.seg" + std::to_string(i));
    }
    const ConvGeometry pw_geo{1, 1, 1, 1, Padding::Valid};
    sys.forward = [&] { return segment_spectrum_conv(x, params, geo); };
    sys.backward = [&](const Tensor4<double>& g_out) {
        const Tensor4<double> projected = conv2d_im2col(x, params.pointwise, pw_geo);
        auto gg = grouped_spatial_conv_backward(projected, params.seg_kernels, geo, g_out);
        auto gp = conv2d_backward_im2col(x, params.pointwise, pw_geo, gg.grad_input);
        std::vector<Tensor4<double>> grads;
        grads.push_back(std::move(gp.grad_input));
        grads.push_back(std::move(gp.grad_kernel));
        for (auto& gk : gg.grad_kernels) grads.push_back(std::move(gk));
        return grads;
    };
    return {"spectrum", grad_check(sys, rng)};
}

LayerCheck check_bn(Rng& rng) {
    const int n = 3, c = 3, hw = 4;
    auto x = rand_t(rng, n, c, hw, hw);
    BatchNormState<double> state(c);
    for (std::size_t k = 0; k < state.gamma.size(); ++k) {
        state.gamma[k] = rng.uniform(0.5, 1.5);
        state.beta[k] = rng.uniform(-0.5, 0.5);
    }
    GradCheckSystem sys;
    sys.tensors = {&x, &state.gamma, &state.beta};
    sys.names = {"bn.x", "bn.gamma", "bn.beta"};
    BatchNormCache<double> cache;
    sys.forward = [&] {
        BatchNormState<double> scratch = state;  // keep running stats untouched
        return batch_norm_forward(x, scratch, Mode::Train, &cache);
    };
    sys.backward = [&](const Tensor4<double>& g) {
        auto grads = batch_norm_backward(state, cache, g);
        return std::vector<Tensor4<double>>{std::move(grads.grad_input),
                                            std::move(grads.grad_gamma),
                                            std::move(grads.grad_beta)};
    };
    return {"bn", grad_check(sys, rng)};
}

LayerCheck check_dense(Rng& rng) {
    const int n = 4, in = 6, out = 5;
    auto x = rand_t(rng, n, in, 1, 1);
    auto weight = rand_t(rng, out, in, 1, 1);
    auto bias = rand_t(rng, 1, out, 1, 1, -0.2, 0.2);
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng.next_below(out)));

    // Composite through softmax cross-entropy; the output is the scalar loss.
    GradCheckSystem sys;
    sys.tensors = {&x, &weight, &bias};
    sys.names = {"dense.x", "dense.w", "dense.b"};
    sys.forward = [&] {
        auto logits = dense_forward(x, weight, bias);
        auto loss = softmax_cross_entropy(logits, labels);
        Tensor4<double> y(1, 1, 1, 1);
        y[0] = loss.loss;
        return y;
    };
    sys.backward = [&](const Tensor4<double>& g) {
        auto logits = dense_forward(x, weight, bias);
        auto loss = softmax_cross_entropy(logits, labels);
        Tensor4<double> scaled = mul_scalar(loss.grad_logits, g[0]);
        auto grads = dense_backward(x, weight, scaled);
        return std::vector<Tensor4<double>>{std::move(grads.grad_input),
                                            std::move(grads.grad_weight),
                                            std::move(grads.grad_bias)};
    };
    return {"dense+ce", grad_check(sys, rng)};
}

LayerCheck check_maxpool(Rng& rng) {
    const int n = 2, c = 2, hw = 6;
    // Distinct, well-separated values keep the argmax stable under the
    // finite-difference step.
    Tensor4<double> x(n, c, hw, hw);
    std::vector<std::size_t> order(x.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    for (std::size_t k = order.size(); k > 1; --k)
        std::swap(order[k - 1], order[rng.next_below(k)]);
    for (std::size_t k = 0; k < x.size(); ++k)
        x[k] = 0.01 * static_cast<double>(order[k]) + rng.uniform(0.0, 0.001);

    const ConvGeometry geo{3, 3, 2, 2, Padding::Same};
    MaxPoolCache<double> cache;
    GradCheckSystem sys;
    sys.tensors = {&x};
    sys.names = {"maxpool.x"};
    sys.forward = [&] { return max_pool(x, geo, &cache); };
    sys.backward = [&](const Tensor4<double>& g) {
        max_pool(x, geo, &cache);
        return std::vector<Tensor4<double>>{max_pool_backward(x.dims(), geo, cache, g)};
    };
    return {"maxpool", grad_check(sys, rng)};
}

LayerCheck check_gap(Rng& rng) {
    auto x = rand_t(rng, 2, 3, 4, 4);
    GradCheckSystem sys;
    sys.tensors = {&x};
    sys.names = {"gap.x"};
    sys.forward = [&] { return global_avg_pool(x); };
    sys.backward = [&](const Tensor4<double>& g) {
        return std::vector<Tensor4<double>>{global_avg_pool_backward(x.dims(), g)};
    };
    return {"gap", grad_check(sys, rng)};
}

LayerCheck check_dropout(Rng& rng) {
    auto x = rand_t(rng, 2, 3, 4, 4);
    const std::uint64_t mask_seed = rng.next_u64();
    DropoutCache<double> cache;
    GradCheckSystem sys;
    sys.tensors = {&x};
    sys.names = {"dropout.x"};
    // The mask must be identical across re-evaluations, so the rng is re-seeded.
    sys.forward = [&] {
        Rng mask_rng(mask_seed);
        return dropout(x, 0.4, mask_rng, Mode::Train, &cache);
    };
    sys.backward = [&](const Tensor4<double>& g) {
        Rng mask_rng(mask_seed);
        dropout(x, 0.4, mask_rng, Mode::Train, &cache);
        return std::vector<Tensor4<double>>{dropout_backward(cache, g)};
    };
    return {"dropout", grad_check(sys, rng)};
}

// A two-module residual model driven through the graph executor, checking
// the input gradient through both the body and the projection path.
LayerCheck check_residual(Rng& rng) {
    ArchSpec spec;
    spec.input = Shape3{3, 6, 6};
    Node res;
    res.kind = NodeKind::Residual;
    Node sep;
    sep.kind = NodeKind::SepConv;
    sep.out_channels = 4;
    sep.kh = sep.kw = 3;
    sep.pad = Padding::Same;
    sep.sh = sep.sw = 1;
    res.body.push_back(sep);
    Node body_bn;
    body_bn.kind = NodeKind::BatchNorm;
    res.body.push_back(body_bn);
    Node proj;
    proj.kind = NodeKind::Conv;
    proj.out_channels = 4;
    proj.kh = proj.kw = 1;
    proj.pad = Padding::Same;
    res.shortcut.push_back(proj);
    Node sc_bn;
    sc_bn.kind = NodeKind::BatchNorm;
    res.shortcut.push_back(sc_bn);
    spec.nodes.push_back(std::move(res));
    validate(spec);

    Model<double> model(spec, rng.next_u64());
    auto x = rand_t(rng, 2, 3, 6, 6);
    Rng unused(0);
    GradCheckSystem sys;
    sys.tensors = {&x};
    sys.names = {"residual.x"};
    for (auto& p : model.params()) {
        if (!p.trainable) continue;
        sys.tensors.push_back(p.value);
        sys.names.push_back(p.name);
    }
    sys.forward = [&] { return model.forward(x, Mode::Train, unused); };
    sys.backward = [&](const Tensor4<double>& g) {
        model.forward(x, Mode::Train, unused);
        std::vector<Tensor4<double>> grads;
        grads.push_back(model.backward(g));
        for (auto& p : model.params())
            if (p.trainable) grads.push_back(*p.grad);
        return grads;
    };
    return {"residual", grad_check(sys, rng, 1e-5, 40)};
}

}  // namespace

std::vector<LayerCheck> run_gradcheck_suite(const std::string& layer_class, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<LayerCheck> checks;
    const bool all = layer_class == "all";
    if (all || layer_class == "conv") {
        checks.push_back(check_conv(rng, true));
        checks.push_back(check_conv(rng, false));
        checks.push_back(check_depthwise(rng));
        checks.push_back(check_spectrum(rng));
    }
    if (all || layer_class == "sepconv") {
        checks.push_back(check_sepconv(rng, Activation::None));
        checks.push_back(check_sepconv(rng, Activation::ReLU));
        checks.push_back(check_sepconv(rng, Activation::ELU));
    }
    if (all || layer_class == "bn") checks.push_back(check_bn(rng));
    if (all || layer_class == "dense") checks.push_back(check_dense(rng));
    if (all || layer_class == "pool") {
        checks.push_back(check_maxpool(rng));
        checks.push_back(check_gap(rng));
    }
    if (all) {
        checks.push_back(check_dropout(rng));
        checks.push_back(check_residual(rng));
    }
    if (checks.empty())
        throw ParameterError("gradcheck: unknown layer class '" + layer_class + "'");
    return checks;
}

}  // namespace xsep
