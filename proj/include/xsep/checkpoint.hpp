#pragma once

#include <cstdint>
#include <string>

#include "xsep/model.hpp"
#include "xsep/optim.hpp"

namespace xsep {

struct TrainCounters {
    std::uint64_t step = 0;
    std::uint64_t samples_seen = 0;
    std::uint64_t epoch = 0;
};

// Self-contained checkpoint: the serialized architecture, the counters, and
// every named tensor (parameters, running stats, optimizer buffers, Polyak
// shadow) as concatenated XTSR blocks behind a text index. Save -> load ->
// save is byte-identical.
void save_checkpoint(const std::string& path, const Model<float>& model,
                     const OptimState<float>* optim, const TrainCounters& counters);

// Restores tensors by name into an already-built model (and optimizer state
// when present in both). Shape or name mismatches are format errors.
TrainCounters load_checkpoint(const std::string& path, Model<float>& model,
                              OptimState<float>* optim);

// Reads only the embedded architecture text.
std::string checkpoint_arch_text(const std::string& path);

}  // namespace xsep
