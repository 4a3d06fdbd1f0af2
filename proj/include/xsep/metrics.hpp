#pragma once

#include <cstdint>
#include <vector>

#include "xsep/tensor.hpp"

namespace xsep {

struct MetricReport {
    double top1 = -1.0;  // negative = not applicable to the task
    double top5 = -1.0;
    double weighted_map100 = -1.0;
    double mean_loss = -1.0;
    std::uint64_t step = 0;
    std::uint64_t epoch = 0;
    double lr = 0.0;
    double wallclock_s = 0.0;
};

// Fraction of examples whose true label is among the k largest logits; ties
// resolve toward the lower class index.
double topk_accuracy(const Tensor4<float>& logits, const std::vector<int>& labels, int k);

// Class-centric weighted MAP@k: per class with at least one positive, images
// are ranked by that class's score (ties toward the lower image index), AP is
// averaged precision at each true-positive rank within the top k, normalized
// by min(positives, k); classes combine as sum(w*AP)/sum(w). Empty weights
// mean uniform.
double weighted_map_at_k(const Tensor4<float>& scores, const std::vector<std::uint8_t>& multi_hot,
                         const std::vector<double>& class_weights, int k = 100);

}  // namespace xsep
