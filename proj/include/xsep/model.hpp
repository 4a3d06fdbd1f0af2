#pragma once

#include <memory>
#include <string>
#include <vector>

#include "xsep/graph.hpp"
#include "xsep/layers.hpp"

namespace xsep {

template <typename T>
struct ParamRef {
    std::string name;
    Tensor4<T>* value = nullptr;
    Tensor4<T>* grad = nullptr;  // null for non-trainables
    bool trainable = true;
};

template <typename T>
using ParamStore = std::vector<ParamRef<T>>;

template <typename T>
std::size_t trainable_count(const ParamStore<T>& store) {
    std::size_t count = 0;
    for (const auto& p : store)
        if (p.trainable) count += p.value->size();
    return count;
}

template <typename T>
std::size_t non_trainable_count(const ParamStore<T>& store) {
    std::size_t count = 0;
    for (const auto& p : store)
        if (!p.trainable) count += p.value->size();
    return count;
}

// ---- runtime layers -------------------------------------------------------

template <typename T>
class Layer {
public:
    virtual ~Layer() = default;
    virtual Tensor4<T> forward(const Tensor4<T>& x, Mode mode, Rng& rng) = 0;
    virtual Tensor4<T> backward(const Tensor4<T>& grad_out) = 0;
    virtual void collect(ParamStore<T>& /*store*/) {}
};

namespace detail {

// Glorot fans: regular/pointwise kernels use cin*kh*kw in, cout*kh*kw out;
// depthwise planes act on one channel so both fans are kh*kw.
template <typename T>
Tensor4<T> init_conv_kernel(const Dims4& dims, Rng& rng) {
    const int fan_in = dims.c * dims.h * dims.w;
    const int fan_out = dims.n * dims.h * dims.w;
    return glorot_uniform<T>(dims, fan_in, fan_out, rng);
}

template <typename T>
Tensor4<T> init_depthwise_kernel(const Dims4& dims, Rng& rng) {
    const int fan = dims.h * dims.w;
    return glorot_uniform<T>(dims, fan, fan, rng);
}

}  // namespace detail

template <typename T>
class ConvLayer final : public Layer<T> {
public:
    ConvLayer(const Node& node, Rng& rng)
        : node_(node),
          kernel_(detail::init_conv_kernel<T>(
              Dims4{node.out_channels, node.in_shape.c, node.kh, node.kw}, rng)),
          grad_kernel_(Dims4{node.out_channels, node.in_shape.c, node.kh, node.kw}) {}

    Tensor4<T> forward(const Tensor4<T>& x, Mode, Rng&) override {
        input_ = x;
        return conv2d_im2col(x, kernel_, node_.geometry());
    }

    Tensor4<T> backward(const Tensor4<T>& grad_out) override {
        auto g = conv2d_backward_im2col(input_, kernel_, node_.geometry(), grad_out);
        grad_kernel_ = std::move(g.grad_kernel);
        return std::move(g.grad_input);
    }

    void collect(ParamStore<T>& store) override {
        store.push_back({node_.name + ".kernel", &kernel_, &grad_kernel_, true});
    }

private:
    Node node_;
    Tensor4<T> kernel_, grad_kernel_, input_;
};

template <typename T>
class DepthwiseLayer final : public Layer<T> {
public:
    DepthwiseLayer(const Node& node, Rng& rng)
        : node_(node),
          kernel_(detail::init_depthwise_kernel<T>(
              Dims4{1, node.in_shape.c * node.multiplier, node.kh, node.kw}, rng)),
          grad_kernel_(kernel_.dims()) {}

    Tensor4<T> forward(const Tensor4<T>& x, Mode, Rng&) override {
        input_ = x;
        return depthwise_conv2d(x, kernel_, node_.geometry(), node_.multiplier);
    }

    Tensor4<T> backward(const Tensor4<T>& grad_out) override {
        auto g = depthwise_conv2d_backward(input_, kernel_, node_.geometry(), node_.multiplier,
                                           grad_out);
        grad_kernel_ = std::move(g.grad_kernel);
        return std::move(g.grad_input);
    }

    void collect(ParamStore<T>& store) override {
        store.push_back({node_.name + ".kernel", &kernel_, &grad_kernel_, true});
    }

private:
    Node node_;
    Tensor4<T> kernel_, grad_kernel_, input_;
};

template <typename T>
class SepConvLayer final : public Layer<T> {
public:
    SepConvLayer(const Node& node, Rng& rng)
        : node_(node),
          dw_kernel_(detail::init_depthwise_kernel<T>(
              Dims4{1, node.in_shape.c * node.multiplier, node.kh, node.kw}, rng)),
          pw_kernel_(detail::init_conv_kernel<T>(
              Dims4{node.out_channels, node.in_shape.c * node.multiplier, 1, 1}, rng)),
          grad_dw_(dw_kernel_.dims()),
          grad_pw_(pw_kernel_.dims()) {}

    Tensor4<T> forward(const Tensor4<T>& x, Mode, Rng&) override {
        input_ = x;
        auto r = separable_conv2d_fwd(x, dw_kernel_, pw_kernel_, node_.geometry(),
                                      node_.multiplier, node_.intermediate);
        dw_out_ = std::move(r.dw_out);
        return std::move(r.out);
    }

    Tensor4<T> backward(const Tensor4<T>& grad_out) override {
        auto g = separable_conv2d_backward(input_, dw_kernel_, pw_kernel_, node_.geometry(),
                                           node_.multiplier, node_.intermediate, dw_out_,
                                           grad_out);
        grad_dw_ = std::move(g.grad_dw_kernel);
        grad_pw_ = std::move(g.grad_pw_kernel);
        return std::move(g.grad_input);
    }

    void collect(ParamStore<T>& store) override {
        store.push_back({node_.name + ".dw", &dw_kernel_, &grad_dw_, true});
        store.push_back({node_.name + ".pw", &pw_kernel_, &grad_pw_, true});
    }

private:
    Node node_;
    Tensor4<T> dw_kernel_, pw_kernel_, grad_dw_, grad_pw_;
    Tensor4<T> input_, dw_out_;
};

template <typename T>
class SpectrumConvLayer final : public Layer<T> {
public:
    SpectrumConvLayer(const Node& node, Rng& rng) : node_(node) {
        const int m = node.out_channels;
        const int seg = m / node.segments;
        pointwise_ = detail::init_conv_kernel<T>(Dims4{m, node.in_shape.c, 1, 1}, rng);
        grad_pointwise_ = Tensor4<T>(pointwise_.dims());
        for (int i = 0; i < node.segments; ++i) {
            seg_kernels_.push_back(
                detail::init_conv_kernel<T>(Dims4{seg, seg, node.kh, node.kw}, rng));
            grad_segs_.emplace_back(seg_kernels_.back().dims());
        }
    }

    Tensor4<T> forward(const Tensor4<T>& x, Mode, Rng&) override {
        input_ = x;
        projected_ = conv2d_im2col(x, pointwise_, ConvGeometry{1, 1, 1, 1, Padding::Valid});
        return grouped_spatial_conv(projected_, seg_kernels_, node_.geometry());
    }

    Tensor4<T> backward(const Tensor4<T>& grad_out) override {
        auto gg = grouped_spatial_conv_backward(projected_, seg_kernels_, node_.geometry(),
                                                grad_out);
        for (std::size_t i = 0; i < grad_segs_.size(); ++i)
            grad_segs_[i] = std::move(gg.grad_kernels[i]);
        auto gp = conv2d_backward_im2col(input_, pointwise_,
                                         ConvGeometry{1, 1, 1, 1, Padding::Valid},
                                         gg.grad_input);
        grad_pointwise_ = std::move(gp.grad_kernel);
        return std::move(gp.grad_input);
    }

    void collect(ParamStore<T>& store) override {
        store.push_back({node_.name + ".pw", &pointwise_, &grad_pointwise_, true});
        for (std::size_t i = 0; i < seg_kernels_.size(); ++i)
            store.push_back({node_.name + ".seg" + std::to_string(i), &seg_kernels_[i],
                             &grad_segs_[i], true});
    }

private:
    Node node_;
    Tensor4<T> pointwise_, grad_pointwise_;
    std::vector<Tensor4<T>> seg_kernels_, grad_segs_;
    Tensor4<T> input_, projected_;
};

template <typename T>
class GroupedConvLayer final : public Layer<T> {
public:
    GroupedConvLayer(const Node& node, Rng& rng) : node_(node) {
        for (int t : node.widths) {
            seg_kernels_.push_back(detail::init_conv_kernel<T>(Dims4{t, t, node.kh, node.kw}, rng));
            grad_segs_.emplace_back(seg_kernels_.back().dims());
        }
    }

    Tensor4<T> forward(const Tensor4<T>& x, Mode, Rng&) override {
        input_ = x;
        return grouped_spatial_conv(x, seg_kernels_, node_.geometry());
    }

    Tensor4<T> backward(const Tensor4<T>& grad_out) override {
        auto g = grouped_spatial_conv_backward(input_, seg_kernels_, node_.geometry(), grad_out);
        for (std::size_t i = 0; i < grad_segs_.size(); ++i)
            grad_segs_[i] = std::move(g.grad_kernels[i]);
        return std::move(g.grad_input);
    }

    void collect(ParamStore<T>& store) override {
        for (std::size_t i = 0; i < seg_kernels_.size(); ++i)
            store.push_back({node_.name + ".seg" + std::to_string(i), &seg_kernels_[i],
                             &grad_segs_[i], true});
    }

private:
    Node node_;
    std::vector<Tensor4<T>> seg_kernels_, grad_segs_;
    Tensor4<T> input_;
};

// Parallel 1x1-then-kxk towers with concatenated outputs (the simplified
// Inception form).
template <typename T>
class TowersLayer final : public Layer<T> {
public:
    TowersLayer(const Node& node, Rng& rng) : node_(node) {
        for (int t : node.widths) {
            pointwise_.push_back(
                detail::init_conv_kernel<T>(Dims4{t, node.in_shape.c, 1, 1}, rng));
            spatial_.push_back(detail::init_conv_kernel<T>(Dims4{t, t, node.kh, node.kw}, rng));
            grad_pw_.emplace_back(pointwise_.back().dims());
            grad_sp_.emplace_back(spatial_.back().dims());
        }
    }

    Tensor4<T> forward(const Tensor4<T>& x, Mode, Rng&) override {
        input_ = x;
        mids_.clear();
        const ConvGeometry pw_geo{1, 1, 1, 1, Padding::Valid};
        Tensor4<T> out(x.n(), node_.out_shape.c, node_.out_shape.h, node_.out_shape.w);
        int c0 = 0;
        for (std::size_t t = 0; t < pointwise_.size(); ++t) {
            mids_.push_back(conv2d_im2col(x, pointwise_[t], pw_geo));
            const Tensor4<T> y = conv2d_im2col(mids_.back(), spatial_[t], node_.geometry());
            channel_assign(out, c0, y);
            c0 += y.c();
        }
        return out;
    }

    Tensor4<T> backward(const Tensor4<T>& grad_out) override {
        const ConvGeometry pw_geo{1, 1, 1, 1, Padding::Valid};
        Tensor4<T> gx(input_.dims());
        int c0 = 0;
        for (std::size_t t = 0; t < pointwise_.size(); ++t) {
            const int width = node_.widths[t];
            const Tensor4<T> gseg = channel_slice(grad_out, c0, c0 + width);
            auto gs = conv2d_backward_im2col(mids_[t], spatial_[t], node_.geometry(), gseg);
            grad_sp_[t] = std::move(gs.grad_kernel);
            auto gp = conv2d_backward_im2col(input_, pointwise_[t], pw_geo, gs.grad_input);
            grad_pw_[t] = std::move(gp.grad_kernel);
            add_inplace(gx, gp.grad_input);
            c0 += width;
        }
        return gx;
    }

    void collect(ParamStore<T>& store) override {
        for (std::size_t t = 0; t < pointwise_.size(); ++t) {
            store.push_back({node_.name + ".t" + std::to_string(t) + ".pw", &pointwise_[t],
                             &grad_pw_[t], true});
            store.push_back({node_.name + ".t" + std::to_string(t) + ".k", &spatial_[t],
                             &grad_sp_[t], true});
        }
    }

private:
    Node node_;
    std::vector<Tensor4<T>> pointwise_, spatial_, grad_pw_, grad_sp_;
    Tensor4<T> input_;
    std::vector<Tensor4<T>> mids_;
};

template <typename T>
class BatchNormLayer final : public Layer<T> {
public:
    explicit BatchNormLayer(const Node& node)
        : node_(node),
          state_(node.in_shape.c),
          grad_gamma_(1, node.in_shape.c, 1, 1),
          grad_beta_(1, node.in_shape.c, 1, 1) {}

    Tensor4<T> forward(const Tensor4<T>& x, Mode mode, Rng&) override {
        return batch_norm_forward(x, state_, mode, mode == Mode::Train ? &cache_ : nullptr);
    }

    Tensor4<T> backward(const Tensor4<T>& grad_out) override {
        auto g = batch_norm_backward(state_, cache_, grad_out);
        grad_gamma_ = std::move(g.grad_gamma);
        grad_beta_ = std::move(g.grad_beta);
        return std::move(g.grad_input);
    }

    void collect(ParamStore<T>& store) override {
        store.push_back({node_.name + ".gamma", &state_.gamma, &grad_gamma_, true});
        store.push_back({node_.name + ".beta", &state_.beta, &grad_beta_, true});
        store.push_back({node_.name + ".rmean", &state_.running_mean, nullptr, false});
        store.push_back({node_.name + ".rvar", &state_.running_var, nullptr, false});
    }

    BatchNormState<T>& state() { return state_; }

private:
    Node node_;
    BatchNormState<T> state_;
    BatchNormCache<T> cache_;
    Tensor4<T> grad_gamma_, grad_beta_;
};

template <typename T>
class ActivationLayer final : public Layer<T> {
public:
    explicit ActivationLayer(const Node& node)
        : act_(node.kind == NodeKind::ReLU ? Activation::ReLU : Activation::ELU) {}

    Tensor4<T> forward(const Tensor4<T>& x, Mode, Rng&) override {
        input_ = x;
        return apply_activation(act_, x);
    }

    Tensor4<T> backward(const Tensor4<T>& grad_out) override {
        return activation_backward(act_, input_, grad_out);
    }

private:
    Activation act_;
    Tensor4<T> input_;
};

template <typename T>
class MaxPoolLayer final : public Layer<T> {
public:
    explicit MaxPoolLayer(const Node& node) : node_(node) {}

    Tensor4<T> forward(const Tensor4<T>& x, Mode, Rng&) override {
        in_dims_ = x.dims();
        return max_pool(x, node_.geometry(), &cache_);
    }

    Tensor4<T> backward(const Tensor4<T>& grad_out) override {
        return max_pool_backward(in_dims_, node_.geometry(), cache_, grad_out);
    }

private:
    Node node_;
    Dims4 in_dims_;
    MaxPoolCache<T> cache_;
};

template <typename T>
class GlobalAvgPoolLayer final : public Layer<T> {
public:
    Tensor4<T> forward(const Tensor4<T>& x, Mode, Rng&) override {
        in_dims_ = x.dims();
        return global_avg_pool(x);
    }

    Tensor4<T> backward(const Tensor4<T>& grad_out) override {
        return global_avg_pool_backward(in_dims_, grad_out);
    }

private:
    Dims4 in_dims_;
};

template <typename T>
class DropoutLayer final : public Layer<T> {
public:
    explicit DropoutLayer(const Node& node) : rate_(node.rate) {}

    Tensor4<T> forward(const Tensor4<T>& x, Mode mode, Rng& rng) override {
        return dropout(x, rate_, rng, mode, &cache_);
    }

    Tensor4<T> backward(const Tensor4<T>& grad_out) override {
        return dropout_backward(cache_, grad_out);
    }

private:
    double rate_;
    DropoutCache<T> cache_;
};

template <typename T>
class DenseLayer final : public Layer<T> {
public:
    DenseLayer(const Node& node, Rng& rng) : node_(node) {
        const int in = node.in_shape.c * node.in_shape.h * node.in_shape.w;
        weight_ = glorot_uniform<T>(Dims4{node.units, in, 1, 1}, in, node.units, rng);
        bias_ = Tensor4<T>(1, node.units, 1, 1, T(0));
        grad_weight_ = Tensor4<T>(weight_.dims());
        grad_bias_ = Tensor4<T>(bias_.dims());
    }

    Tensor4<T> forward(const Tensor4<T>& x, Mode, Rng&) override {
        input_ = x;
        return dense_forward(x, weight_, bias_);
    }

    Tensor4<T> backward(const Tensor4<T>& grad_out) override {
        auto g = dense_backward(input_, weight_, grad_out);
        grad_weight_ = std::move(g.grad_weight);
        grad_bias_ = std::move(g.grad_bias);
        return std::move(g.grad_input);
    }

    void collect(ParamStore<T>& store) override {
        store.push_back({node_.name + ".w", &weight_, &grad_weight_, true});
        store.push_back({node_.name + ".b", &bias_, &grad_bias_, true});
    }

private:
    Node node_;
    Tensor4<T> weight_, bias_, grad_weight_, grad_bias_, input_;
};

template <typename T>
std::unique_ptr<Layer<T>> make_layer(const Node& node, Rng& rng);

template <typename T>
class ResidualLayer final : public Layer<T> {
public:
    ResidualLayer(const Node& node, Rng& rng) {
        for (const Node& child : node.body) body_.push_back(make_layer<T>(child, rng));
        for (const Node& child : node.shortcut) shortcut_.push_back(make_layer<T>(child, rng));
    }

    Tensor4<T> forward(const Tensor4<T>& x, Mode mode, Rng& rng) override {
        Tensor4<T> b = x;
        for (auto& layer : body_) b = layer->forward(b, mode, rng);
        if (shortcut_.empty()) return add(b, x);
        Tensor4<T> s = x;
        for (auto& layer : shortcut_) s = layer->forward(s, mode, rng);
        return add(b, s);
    }

    Tensor4<T> backward(const Tensor4<T>& grad_out) override {
        Tensor4<T> gb = grad_out;
        for (auto it = body_.rbegin(); it != body_.rend(); ++it) gb = (*it)->backward(gb);
        if (shortcut_.empty()) return add(gb, grad_out);
        Tensor4<T> gs = grad_out;
        for (auto it = shortcut_.rbegin(); it != shortcut_.rend(); ++it)
            gs = (*it)->backward(gs);
        return add(gb, gs);
    }

    void collect(ParamStore<T>& store) override {
        for (auto& layer : body_) layer->collect(store);
        for (auto& layer : shortcut_) layer->collect(store);
    }

private:
    std::vector<std::unique_ptr<Layer<T>>> body_, shortcut_;
};

template <typename T>
std::unique_ptr<Layer<T>> make_layer(const Node& node, Rng& rng) {
    switch (node.kind) {
        case NodeKind::Conv: return std::make_unique<ConvLayer<T>>(node, rng);
        case NodeKind::DepthwiseConv: return std::make_unique<DepthwiseLayer<T>>(node, rng);
        case NodeKind::SepConv: return std::make_unique<SepConvLayer<T>>(node, rng);
        case NodeKind::SpectrumConv: return std::make_unique<SpectrumConvLayer<T>>(node, rng);
        case NodeKind::GroupedConv: return std::make_unique<GroupedConvLayer<T>>(node, rng);
        case NodeKind::InceptionTowers: return std::make_unique<TowersLayer<T>>(node, rng);
        case NodeKind::BatchNorm: return std::make_unique<BatchNormLayer<T>>(node);
        case NodeKind::ReLU:
        case NodeKind::ELU: return std::make_unique<ActivationLayer<T>>(node);
        case NodeKind::MaxPool: return std::make_unique<MaxPoolLayer<T>>(node);
        case NodeKind::GlobalAvgPool: return std::make_unique<GlobalAvgPoolLayer<T>>();
        case NodeKind::Dropout: return std::make_unique<DropoutLayer<T>>(node);
        case NodeKind::Dense: return std::make_unique<DenseLayer<T>>(node, rng);
        case NodeKind::Residual: return std::make_unique<ResidualLayer<T>>(node, rng);
    }
    throw ParameterError("make_layer: unknown node kind");
}

// Instantiates a validated ArchSpec with freshly initialized parameters.
// Parameter creation order equals registration order, so a given seed always
// produces the same weights.
template <typename T>
class Model {
public:
    Model(const ArchSpec& spec, std::uint64_t seed) : spec_(spec) {
        if (!spec.validated) throw ParameterError("Model: spec must be validated first");
        Rng rng(seed);
        for (const Node& node : spec.nodes) layers_.push_back(make_layer<T>(node, rng));
        for (auto& layer : layers_) layer->collect(store_);
    }

    Tensor4<T> forward(const Tensor4<T>& x, Mode mode, Rng& rng) {
        if (x.c() != spec_.input.c || x.h() != spec_.input.h || x.w() != spec_.input.w)
            throw ShapeError("Model: input " + x.dims().str() + " does not match arch input " +
                             spec_.input.str());
        Tensor4<T> y = x;
        for (auto& layer : layers_) y = layer->forward(y, mode, rng);
        return y;
    }

    Tensor4<T> backward(const Tensor4<T>& grad_out) {
        Tensor4<T> g = grad_out;
        for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
        return g;
    }

    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }
    const ArchSpec& spec() const { return spec_; }

private:
    ArchSpec spec_;
    std::vector<std::unique_ptr<Layer<T>>> layers_;
    ParamStore<T> store_;
};

}  // namespace xsep
