#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xsep/graph.hpp"
#include "xsep/tensor.hpp"

namespace xsep {

// Images plus either single-label indices or a multi-hot matrix, immutable
// after load. Class weights feed the weighted MAP metric.
struct Dataset {
    Tensor4<float> images;
    TaskKind task = TaskKind::SingleLabel;
    int num_classes = 0;
    std::vector<int> labels;                // single-label
    std::vector<std::uint8_t> multi_hot;    // multi-label, count x num_classes
    std::vector<double> class_weights;      // optional; empty = uniform

    int count() const { return images.n(); }
    void check() const;
};

// XLBL: magic "XLBL", u8 version=1, u8 mode (0 = single, 1 = multi-hot),
// u32 count, u32 num_classes, then count u32 indices or count*num_classes
// u8 cells (one byte per class, row-major).
void write_labels(const std::string& path, const Dataset& dataset);
void read_labels(const std::string& path, Dataset& dataset);

Dataset load_dataset(const std::string& image_path, const std::string& label_path);
void save_dataset(const std::string& image_path, const std::string& label_path,
                  const Dataset& dataset);

// Class-conditional oriented gratings plus noise; every class gets a distinct
// frequency/orientation pair, fully determined by the seed.
Dataset synth_dataset(int num_classes, int count, int hw, std::uint64_t seed);

// Two-column text: `class_index weight` per line.
std::vector<double> load_class_weights(const std::string& path, int num_classes);

// Deterministic per-epoch shuffle; the same seed gives the same order and
// different epochs give different permutations.
std::vector<int> epoch_order(int count, std::uint64_t seed, std::uint64_t epoch);

struct Batch {
    Tensor4<float> images;
    std::vector<int> labels;
    std::vector<std::uint8_t> multi_hot;
};

// Examples [start, start+size) of the given order; the final short batch is
// whatever remains.
Batch gather_batch(const Dataset& dataset, const std::vector<int>& order, int start, int size);

}  // namespace xsep
