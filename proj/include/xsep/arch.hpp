#pragma once

#include <cstddef>
#include <vector>

#include "xsep/graph.hpp"

namespace xsep {

struct CostReport {
    std::size_t trainable_params = 0;
    std::size_t non_trainable_params = 0;
    std::size_t macs_per_example = 0;
    std::size_t activation_peak = 0;  // largest single activation, batch of one
};

struct XceptionOptions {
    Shape3 input{3, 299, 299};
    int num_classes = 1000;
    bool residuals = true;
    Activation intermediate = Activation::None;
    std::vector<int> fc_widths;  // inserted between pooling and the classifier
    TaskKind task = TaskKind::SingleLabel;

    // Desk-scale knobs; 1/8 keep the published architecture.
    int width_divisor = 1;
    int middle_repeats = 8;
};

// Entry flow, middle flow repeated, exit flow, then pooling / optional FC /
// dropout / classifier. Defaults reproduce the published network exactly.
ArchSpec build_xception(const XceptionOptions& options = {});

// The 1/4-width, two-middle-module variant used for desk-scale training.
XceptionOptions toy_xception_options(int num_classes = 10, int hw = 32);

// Parallel towers of 1x1-then-3x3 convolutions with concatenated outputs.
ArchSpec build_simplified_inception(int in_channels, const std::vector<int>& tower_widths,
                                    int h = 8, int w = 8);

// Single stacked 1x1 convolution followed by per-segment spatial convolutions;
// numerically identical to the tower form once weights are mapped across.
ArchSpec reformulate_inception(const ArchSpec& tower_spec);

// 1x1 projection followed by a depthwise 3x3, multiplier 1.
ArchSpec build_extreme_inception(int in_channels, int out_channels, int h = 8, int w = 8);

// Plain stack of sepconv+BN+ReLU blocks, pooling (valid) after every second
// block, global average pooling and a classifier. No residuals.
ArchSpec build_sepconv_vgg(const std::vector<int>& widths, Shape3 input, int num_classes);

CostReport report_costs(const ArchSpec& spec);
CostReport count_params(const ArchSpec& spec);

// Cost of a single node placed at the given input shape (used by bench).
CostReport node_costs(const Node& node, Shape3 input);

}  // namespace xsep
