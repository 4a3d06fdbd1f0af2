#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xsep/arch.hpp"
#include "xsep/optim.hpp"

namespace xsep {

// Run configuration parsed from the `[section] key = value` file format.
// Parsing is strict: unknown sections or keys are fatal.
struct TrainConfig {
    // [arch]
    std::string preset = "xception-toy";  // xception | xception-toy | sepconv-vgg | file
    std::string arch_file;
    int classes = 10;
    Shape3 input{3, 32, 32};
    int width_divisor = 4;
    int middle_repeats = 2;
    bool residuals = true;
    Activation intermediate = Activation::None;
    std::vector<int> fc;
    TaskKind task = TaskKind::SingleLabel;
    std::vector<int> vgg_widths;

    // [optim]
    OptimConfig optim;

    // [data]
    std::string source = "synth";  // synth | files
    int n_train = 12800;
    int n_val = 1280;
    int hw = 32;
    std::uint64_t data_seed = 7;
    std::string train_images, train_labels, val_images, val_labels;
    std::string class_weights_file;

    // [run]
    std::uint64_t steps = 3000;
    int batch_size = 64;
    std::uint64_t eval_every = 200;
    std::uint64_t seed = 7;
    int threads = 1;
    std::string profile_csv = "profile.csv";
    std::string checkpoint = "model.ckpt";
    std::string resume;

    void check() const;
};

TrainConfig parse_config(const std::string& text);
TrainConfig load_config_file(const std::string& path);

// Materializes the [arch] section into a validated spec.
ArchSpec build_arch_from_config(const TrainConfig& config);

}  // namespace xsep
