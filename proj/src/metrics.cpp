#include "xsep/metrics.hpp"

#include <algorithm>
#include <numeric>

#include "xsep/errors.hpp"

namespace xsep {

double topk_accuracy(const Tensor4<float>& logits, const std::vector<int>& labels, int k) {
    const int n = logits.n();
    const int num_classes = logits.c() * logits.h() * logits.w();
    if (k < 1 || k > num_classes)
        throw ParameterError("topk_accuracy: k must be in [1, num_classes]");
    if (labels.size() != static_cast<std::size_t>(n))
        throw DataError("topk_accuracy: label count mismatch");

    int hits = 0;
    for (int i = 0; i < n; ++i) {
        const int label = labels[static_cast<std::size_t>(i)];
        if (label < 0 || label >= num_classes)
            throw DataError("topk_accuracy: label out of range");
        const float* row = logits.data() + static_cast<std::size_t>(i) * num_classes;
        const float target = row[label];
        // Rank of the true class under the tie rule, without sorting.
        int ahead = 0;
        for (int c = 0; c < num_classes; ++c) {
            if (row[c] > target || (row[c] == target && c < label)) ++ahead;
        }
        if (ahead < k) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
}

double weighted_map_at_k(const Tensor4<float>& scores, const std::vector<std::uint8_t>& multi_hot,
                         const std::vector<double>& class_weights, int k) {
    const int n = scores.n();
    const int num_classes = scores.c() * scores.h() * scores.w();
    if (k < 1) throw ParameterError("weighted_map_at_k: k must be >= 1");
    if (multi_hot.size() != static_cast<std::size_t>(n) * num_classes)
        throw DataError("weighted_map_at_k: multi-hot size mismatch");
    if (!class_weights.empty() && class_weights.size() != static_cast<std::size_t>(num_classes))
        throw ConfigError("weighted_map_at_k: weight vector size mismatch");

    std::vector<int> order(static_cast<std::size_t>(n));
    double weighted_sum = 0.0, weight_total = 0.0;
    for (int c = 0; c < num_classes; ++c) {
        int positives = 0;
        for (int i = 0; i < n; ++i)
            positives += multi_hot[static_cast<std::size_t>(i) * num_classes + c] ? 1 : 0;
        if (positives == 0) continue;

        const double weight = class_weights.empty() ? 1.0 : class_weights[c];
        if (weight <= 0.0)
            throw ConfigError("weighted_map_at_k: class " + std::to_string(c) +
                              " has positives but weight " + std::to_string(weight));

        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            const float sa = scores[static_cast<std::size_t>(a) * num_classes + c];
            const float sb = scores[static_cast<std::size_t>(b) * num_classes + c];
            if (sa != sb) return sa > sb;
            return a < b;
        });

        const int depth = std::min(k, n);
        int hits = 0;
        double precision_sum = 0.0;
        for (int r = 0; r < depth; ++r) {
            if (multi_hot[static_cast<std::size_t>(order[static_cast<std::size_t>(r)]) *
                              num_classes +
                          c]) {
                ++hits;
                precision_sum += static_cast<double>(hits) / static_cast<double>(r + 1);
            }
        }
        const double ap = precision_sum / static_cast<double>(std::min(positives, k));
        weighted_sum += weight * ap;
        weight_total += weight;
    }
    if (weight_total == 0.0) throw DataError("weighted_map_at_k: no class has a positive");
    return weighted_sum / weight_total;
}

}  // namespace xsep
