#pragma once

#include <string>
#include <vector>

#include "xsep/checkpoint.hpp"
#include "xsep/config.hpp"
#include "xsep/data.hpp"
#include "xsep/metrics.hpp"
#include "xsep/model.hpp"

namespace xsep {

struct TrainResult {
    MetricReport final_eval;
    std::vector<double> epoch_mean_losses;  // one entry per completed data pass
    double final_train_top1 = -1.0;         // Infer-mode accuracy on the train split
    std::string profile_path;
    std::string checkpoint_path;
};

// Profile CSV columns, one row per evaluation:
// step,epoch,lr,train_loss,train_top1,val_top1,val_top5,val_wmap100,wallclock_s
extern const char* const kProfileHeader;

// Full training run driven by a config: builds the arch, data and optimizer,
// executes batches, evaluates on the Polyak shadow every eval_every steps,
// appends profile rows, checkpoints at every evaluation and at the end.
// Aborts (throwing) on non-finite loss, leaving the last checkpoint in place.
TrainResult train(const TrainConfig& config);

// Metrics over a whole split with the model's current weights, Infer mode.
// Never touches BN running statistics.
MetricReport evaluate_split(Model<float>& model, const Dataset& dataset, int batch_size = 128);

// Rebuilds the model a checkpoint was saved from and evaluates it on the
// given dataset, using the stored Polyak shadow when present.
MetricReport evaluate_checkpoint(const std::string& checkpoint_path, const Dataset& dataset,
                                 int batch_size = 128);

struct AblationOutcome {
    std::string variant;
    TrainResult result;
};

// Runs the named variants (baseline | no-residuals | relu | elu) with an
// identical seed and config, writing one profile CSV per variant into
// out_dir. Each variant's spec is diffed against the baseline spec to prove
// it changes only the named option.
std::vector<AblationOutcome> ablation_run(const TrainConfig& base,
                                          const std::vector<std::string>& variants,
                                          const std::string& out_dir);

// Checksum of the non-trainable entries (running statistics), used to assert
// evaluation does not mutate them.
double non_trainable_checksum(const ParamStore<float>& params);

}  // namespace xsep
