#include "xsep/arch.hpp"

#include <functional>
#include <numeric>
#include <string>

#include "xsep/errors.hpp"

namespace xsep {

namespace {

Node conv_node(int module, int out, int k, int stride, Padding pad) {
    Node n;
    n.kind = NodeKind::Conv;
    n.module_id = module;
    n.out_channels = out;
    n.kh = n.kw = k;
    n.sh = n.sw = stride;
    n.pad = pad;
    return n;
}

Node sepconv_node(int module, int out, Activation intermediate) {
    Node n;
    n.kind = NodeKind::SepConv;
    n.module_id = module;
    n.out_channels = out;
    n.kh = n.kw = 3;
    n.sh = n.sw = 1;
    n.pad = Padding::Same;
    n.multiplier = 1;
    n.intermediate = intermediate;
    return n;
}

Node simple_node(NodeKind kind, int module) {
    Node n;
    n.kind = kind;
    n.module_id = module;
    return n;
}

Node maxpool_node(int module, Padding pad) {
    Node n;
    n.kind = NodeKind::MaxPool;
    n.module_id = module;
    n.kh = n.kw = 3;
    n.sh = n.sw = 2;
    n.pad = pad;
    return n;
}

Node dense_node(int module, int units) {
    Node n;
    n.kind = NodeKind::Dense;
    n.module_id = module;
    n.units = units;
    return n;
}

// Appends a residual module, or its body inline when residuals are disabled.
void push_module(std::vector<Node>& nodes, bool residuals, std::vector<Node> body,
                 std::vector<Node> shortcut, int module) {
    if (!residuals) {
        for (auto& n : body) nodes.push_back(std::move(n));
        return;
    }
    Node res;
    res.kind = NodeKind::Residual;
    res.module_id = module;
    res.body = std::move(body);
    res.shortcut = std::move(shortcut);
    nodes.push_back(std::move(res));
}

int scaled(int width, int divisor) {
    if (divisor < 1 || width % divisor != 0)
        throw ParameterError("build_xception: width divisor " + std::to_string(divisor) +
                             " must divide " + std::to_string(width));
    return width / divisor;
}

}  // namespace

ArchSpec build_xception(const XceptionOptions& options) {
    const int d = options.width_divisor;
    if (options.middle_repeats < 0)
        throw ParameterError("build_xception: middle_repeats must be >= 0");
    if (options.num_classes < 1)
        throw ParameterError("build_xception: num_classes must be >= 1");
    const Activation ia = options.intermediate;

    ArchSpec spec;
    spec.input = options.input;
    spec.num_classes = options.num_classes;
    spec.task = options.task;

    int module = 0;

    // Entry flow: two strict convolutions, then three downsampling modules.
    spec.nodes.push_back(conv_node(module, scaled(32, d), 3, 2, Padding::Valid));
    spec.nodes.push_back(simple_node(NodeKind::BatchNorm, module));
    spec.nodes.push_back(simple_node(NodeKind::ReLU, module));
    spec.nodes.push_back(conv_node(module, scaled(64, d), 3, 1, Padding::Valid));
    spec.nodes.push_back(simple_node(NodeKind::BatchNorm, module));
    spec.nodes.push_back(simple_node(NodeKind::ReLU, module));
    ++module;

    const int entry_widths[3] = {scaled(128, d), scaled(256, d), scaled(728, d)};
    for (int b = 0; b < 3; ++b) {
        const int width = entry_widths[b];
        std::vector<Node> body;
        if (b > 0) body.push_back(simple_node(NodeKind::ReLU, module));
        body.push_back(sepconv_node(module, width, ia));
        body.push_back(simple_node(NodeKind::BatchNorm, module));
        body.push_back(simple_node(NodeKind::ReLU, module));
        body.push_back(sepconv_node(module, width, ia));
        body.push_back(simple_node(NodeKind::BatchNorm, module));
        body.push_back(maxpool_node(module, Padding::Same));
        std::vector<Node> shortcut{conv_node(module, width, 1, 2, Padding::Same),
                                   simple_node(NodeKind::BatchNorm, module)};
        push_module(spec.nodes, options.residuals, std::move(body), std::move(shortcut), module);
        ++module;
    }

    // Middle flow: identity-shortcut modules of three sepconvs.
    const int mid_width = scaled(728, d);
    for (int r = 0; r < options.middle_repeats; ++r) {
        std::vector<Node> body;
        for (int i = 0; i < 3; ++i) {
            body.push_back(simple_node(NodeKind::ReLU, module));
            body.push_back(sepconv_node(module, mid_width, ia));
            body.push_back(simple_node(NodeKind::BatchNorm, module));
        }
        push_module(spec.nodes, options.residuals, std::move(body), {}, module);
        ++module;
    }

    // Exit flow: one more downsampling module, then the widening tail.
    {
        std::vector<Node> body;
        body.push_back(simple_node(NodeKind::ReLU, module));
        body.push_back(sepconv_node(module, scaled(728, d), ia));
        body.push_back(simple_node(NodeKind::BatchNorm, module));
        body.push_back(simple_node(NodeKind::ReLU, module));
        body.push_back(sepconv_node(module, scaled(1024, d), ia));
        body.push_back(simple_node(NodeKind::BatchNorm, module));
        body.push_back(maxpool_node(module, Padding::Same));
        std::vector<Node> shortcut{conv_node(module, scaled(1024, d), 1, 2, Padding::Same),
                                   simple_node(NodeKind::BatchNorm, module)};
        push_module(spec.nodes, options.residuals, std::move(body), std::move(shortcut), module);
        ++module;
    }
    spec.nodes.push_back(sepconv_node(module, scaled(1536, d), ia));
    spec.nodes.push_back(simple_node(NodeKind::BatchNorm, module));
    spec.nodes.push_back(simple_node(NodeKind::ReLU, module));
    spec.nodes.push_back(sepconv_node(module, scaled(2048, d), ia));
    spec.nodes.push_back(simple_node(NodeKind::BatchNorm, module));
    spec.nodes.push_back(simple_node(NodeKind::ReLU, module));

    // Head, outside the feature-extraction module count (module id -1).
    spec.nodes.push_back(simple_node(NodeKind::GlobalAvgPool, -1));
    for (int width : options.fc_widths) {
        spec.nodes.push_back(dense_node(-1, width));
        spec.nodes.push_back(simple_node(NodeKind::ReLU, -1));
    }
    Node drop = simple_node(NodeKind::Dropout, -1);
    drop.rate = 0.5;
    spec.nodes.push_back(std::move(drop));
    spec.nodes.push_back(dense_node(-1, options.num_classes));

    validate(spec);
    return spec;
}

XceptionOptions toy_xception_options(int num_classes, int hw) {
    XceptionOptions o;
    o.input = Shape3{3, hw, hw};
    o.num_classes = num_classes;
    o.width_divisor = 4;
    o.middle_repeats = 2;
    return o;
}

ArchSpec build_simplified_inception(int in_channels, const std::vector<int>& tower_widths,
                                    int h, int w) {
    if (tower_widths.empty())
        throw ParameterError("build_simplified_inception: need at least one tower");
    ArchSpec spec;
    spec.input = Shape3{in_channels, h, w};
    Node towers;
    towers.kind = NodeKind::InceptionTowers;
    towers.widths = tower_widths;
    towers.kh = towers.kw = 3;
    towers.sh = towers.sw = 1;
    towers.pad = Padding::Same;
    spec.nodes.push_back(std::move(towers));
    validate(spec);
    return spec;
}

ArchSpec reformulate_inception(const ArchSpec& tower_spec) {
    if (tower_spec.nodes.size() != 1 ||
        tower_spec.nodes[0].kind != NodeKind::InceptionTowers)
        throw ParameterError("reformulate_inception: expected a single towers node");
    const Node& towers = tower_spec.nodes[0];
    const int total = std::accumulate(towers.widths.begin(), towers.widths.end(), 0);

    ArchSpec spec;
    spec.input = tower_spec.input;
    spec.num_classes = tower_spec.num_classes;
    spec.task = tower_spec.task;
    spec.nodes.push_back(conv_node(0, total, 1, 1, Padding::Same));
    Node grouped;
    grouped.kind = NodeKind::GroupedConv;
    grouped.widths = towers.widths;
    grouped.kh = towers.kh;
    grouped.kw = towers.kw;
    grouped.sh = towers.sh;
    grouped.sw = towers.sw;
    grouped.pad = towers.pad;
    spec.nodes.push_back(std::move(grouped));
    validate(spec);
    return spec;
}

ArchSpec build_extreme_inception(int in_channels, int out_channels, int h, int w) {
    if (out_channels < 1)
        throw ParameterError("build_extreme_inception: out_channels must be >= 1");
    ArchSpec spec;
    spec.input = Shape3{in_channels, h, w};
    spec.nodes.push_back(conv_node(0, out_channels, 1, 1, Padding::Same));
    Node dw;
    dw.kind = NodeKind::DepthwiseConv;
    dw.multiplier = 1;
    dw.kh = dw.kw = 3;
    dw.sh = dw.sw = 1;
    dw.pad = Padding::Same;
    spec.nodes.push_back(std::move(dw));
    validate(spec);
    return spec;
}

ArchSpec build_sepconv_vgg(const std::vector<int>& widths, Shape3 input, int num_classes) {
    if (widths.empty()) throw ParameterError("build_sepconv_vgg: widths must be non-empty");
    if (num_classes < 1) throw ParameterError("build_sepconv_vgg: num_classes must be >= 1");
    ArchSpec spec;
    spec.input = input;
    spec.num_classes = num_classes;
    int module = 0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
        spec.nodes.push_back(sepconv_node(module, widths[i], Activation::None));
        spec.nodes.push_back(simple_node(NodeKind::BatchNorm, module));
        spec.nodes.push_back(simple_node(NodeKind::ReLU, module));
        if (i % 2 == 1) {
            // Valid pooling shrinks hard; long stacks on small inputs are
            // rejected by shape validation.
            spec.nodes.push_back(maxpool_node(module, Padding::Valid));
            ++module;
        }
    }
    spec.nodes.push_back(simple_node(NodeKind::GlobalAvgPool, -1));
    spec.nodes.push_back(dense_node(-1, num_classes));
    validate(spec);
    return spec;
}

namespace {

void accumulate_costs(const Node& node, CostReport& report) {
    const Shape3& in = node.in_shape;
    const Shape3& out = node.out_shape;
    const std::size_t out_hw = static_cast<std::size_t>(out.h) * out.w;
    const std::size_t in_hw = static_cast<std::size_t>(in.h) * in.w;
    const std::size_t khw = static_cast<std::size_t>(node.kh) * node.kw;

    switch (node.kind) {
        case NodeKind::Conv: {
            const std::size_t k = static_cast<std::size_t>(node.out_channels) * in.c * khw;
            report.trainable_params += k;
            report.macs_per_example += out_hw * k;
            break;
        }
        case NodeKind::DepthwiseConv: {
            const std::size_t k = static_cast<std::size_t>(in.c) * node.multiplier * khw;
            report.trainable_params += k;
            report.macs_per_example += out_hw * k;
            break;
        }
        case NodeKind::SepConv: {
            const std::size_t mid = static_cast<std::size_t>(in.c) * node.multiplier;
            const std::size_t dw = mid * khw;
            const std::size_t pw = mid * node.out_channels;
            report.trainable_params += dw + pw;
            report.macs_per_example += out_hw * (dw + pw);
            break;
        }
        case NodeKind::SpectrumConv: {
            const std::size_t m = static_cast<std::size_t>(node.out_channels);
            const std::size_t seg = m / node.segments;
            const std::size_t pw = m * in.c;
            const std::size_t spatial = static_cast<std::size_t>(node.segments) * seg * seg * khw;
            report.trainable_params += pw + spatial;
            report.macs_per_example += in_hw * pw + out_hw * spatial;
            break;
        }
        case NodeKind::GroupedConv: {
            std::size_t spatial = 0;
            for (int t : node.widths) spatial += static_cast<std::size_t>(t) * t * khw;
            report.trainable_params += spatial;
            report.macs_per_example += out_hw * spatial;
            break;
        }
        case NodeKind::InceptionTowers: {
            for (int t : node.widths) {
                const std::size_t pw = static_cast<std::size_t>(t) * in.c;
                const std::size_t spatial = static_cast<std::size_t>(t) * t * khw;
                report.trainable_params += pw + spatial;
                report.macs_per_example += in_hw * pw + out_hw * spatial;
            }
            break;
        }
        case NodeKind::BatchNorm:
            report.trainable_params += 2 * static_cast<std::size_t>(in.c);
            report.non_trainable_params += 2 * static_cast<std::size_t>(in.c);
            break;
        case NodeKind::Dense: {
            const std::size_t in_count = static_cast<std::size_t>(in.c) * in.h * in.w;
            report.trainable_params += static_cast<std::size_t>(node.units) * in_count +
                                       static_cast<std::size_t>(node.units);
            report.macs_per_example += static_cast<std::size_t>(node.units) * in_count;
            break;
        }
        case NodeKind::Residual:
            for (const Node& child : node.body) accumulate_costs(child, report);
            for (const Node& child : node.shortcut) accumulate_costs(child, report);
            break;
        default:
            break;
    }
    const std::size_t act = static_cast<std::size_t>(out.c) * out_hw;
    report.activation_peak = std::max(report.activation_peak, act);
}

}  // namespace

CostReport report_costs(const ArchSpec& spec) {
    if (!spec.validated) throw ParameterError("report_costs: spec must be validated");
    CostReport report;
    report.activation_peak =
        static_cast<std::size_t>(spec.input.c) * spec.input.h * spec.input.w;
    for (const Node& node : spec.nodes) accumulate_costs(node, report);
    return report;
}

CostReport count_params(const ArchSpec& spec) { return report_costs(spec); }

CostReport node_costs(const Node& node, Shape3 input) {
    ArchSpec spec;
    spec.input = input;
    spec.nodes.push_back(node);
    validate(spec);
    return report_costs(spec);
}

}  // namespace xsep
