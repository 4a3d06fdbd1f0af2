#include "xsep/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "xsep/errors.hpp"
#include "xsep/parallel.hpp"

namespace xsep {

const char* const kProfileHeader =
    "step,epoch,lr,train_loss,train_top1,val_top1,val_top5,val_wmap100,wallclock_s";

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

std::string metric_field(double v) { return v < 0.0 ? "" : fmt(v); }

Dataset make_split(const TrainConfig& config, bool train_split) {
    if (config.source == "synth") {
        const std::uint64_t seed =
            train_split ? config.data_seed : Rng::mix(config.data_seed, 0x5A17);
        return synth_dataset(config.classes, train_split ? config.n_train : config.n_val,
                             config.hw, seed);
    }
    Dataset dataset = load_dataset(train_split ? config.train_images : config.val_images,
                                   train_split ? config.train_labels : config.val_labels);
    if (!config.class_weights_file.empty())
        dataset.class_weights = load_class_weights(config.class_weights_file,
                                                   dataset.num_classes);
    return dataset;
}

LossResult<float> batch_loss(const Tensor4<float>& logits, const Batch& batch, TaskKind task) {
    return task == TaskKind::SingleLabel ? softmax_cross_entropy(logits, batch.labels)
                                         : sigmoid_cross_entropy(logits, batch.multi_hot);
}

}  // namespace

double non_trainable_checksum(const ParamStore<float>& params) {
    double acc = 0.0;
    for (const auto& p : params) {
        if (p.trainable) continue;
        for (std::size_t k = 0; k < p.value->size(); ++k)
            acc += static_cast<double>((*p.value)[k]) * static_cast<double>((k % 97) + 1);
    }
    return acc;
}

MetricReport evaluate_split(Model<float>& model, const Dataset& dataset, int batch_size) {
    dataset.check();
    MetricReport report;
    Rng unused(0);
    std::vector<int> order(static_cast<std::size_t>(dataset.count()));
    for (int i = 0; i < dataset.count(); ++i) order[static_cast<std::size_t>(i)] = i;

    const int classes = dataset.num_classes;
    Tensor4<float> all_scores;
    if (dataset.task == TaskKind::MultiLabel)
        all_scores = Tensor4<float>(dataset.count(), classes, 1, 1);

    double loss_sum = 0.0;
    long correct1 = 0, correct5 = 0;
    const int k5 = std::min(5, classes);
    for (int start = 0; start < dataset.count(); start += batch_size) {
        Batch batch = gather_batch(dataset, order, start, batch_size);
        Tensor4<float> logits = model.forward(batch.images, Mode::Infer, unused);
        LossResult<float> loss = batch_loss(logits, batch, dataset.task);
        loss_sum += loss.loss * batch.images.n();
        if (dataset.task == TaskKind::SingleLabel) {
            correct1 += static_cast<long>(topk_accuracy(logits, batch.labels, 1) *
                                              batch.images.n() + 0.5);
            correct5 += static_cast<long>(topk_accuracy(logits, batch.labels, k5) *
                                              batch.images.n() + 0.5);
        } else {
            for (int b = 0; b < batch.images.n(); ++b)
                std::copy_n(logits.data() + static_cast<std::size_t>(b) * classes, classes,
                            all_scores.data() + static_cast<std::size_t>(start + b) * classes);
        }
    }
    report.mean_loss = loss_sum / dataset.count();
    if (dataset.task == TaskKind::SingleLabel) {
        report.top1 = static_cast<double>(correct1) / dataset.count();
        report.top5 = static_cast<double>(correct5) / dataset.count();
    } else {
        report.weighted_map100 =
            weighted_map_at_k(all_scores, dataset.multi_hot, dataset.class_weights, 100);
    }
    return report;
}

TrainResult train(const TrainConfig& config) {
    config.check();
    set_num_threads(config.threads);

    ArchSpec spec = build_arch_from_config(config);
    Dataset train_set = make_split(config, true);
    Dataset val_set = make_split(config, false);
    train_set.check();
    val_set.check();
    if (train_set.num_classes != config.classes || val_set.num_classes != config.classes)
        throw ConfigError("train: dataset classes do not match the model head");
    if (train_set.task != config.task)
        throw ConfigError("train: dataset task does not match the configured task");

    Model<float> model(spec, config.seed);
    OptimState<float> state = OptimState<float>::init(config.optim, model.params());
    TrainCounters counters;
    if (!config.resume.empty()) counters = load_checkpoint(config.resume, model, &state);

    Rng dropout_rng(Rng::mix(config.seed, 0xD801));
    const auto t0 = std::chrono::steady_clock::now();
    auto wallclock = [&] {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    std::ofstream csv(config.profile_csv);
    if (!csv) throw ConfigError("train: cannot open " + config.profile_csv + " for writing");
    csv << kProfileHeader << '\n';
    csv.flush();

    TrainResult result;
    result.profile_path = config.profile_csv;
    result.checkpoint_path = config.checkpoint;

    // Initial state on disk, so an abort at any step leaves a usable
    // last-good checkpoint behind.
    save_checkpoint(config.checkpoint, model, &state, counters);

    const int n_train = train_set.count();
    std::vector<int> order = epoch_order(n_train, config.seed, counters.epoch);
    int pos = 0;

    double window_loss = 0.0, window_correct = 0.0;
    long window_examples = 0;
    double epoch_loss = 0.0;
    long epoch_examples = 0;
    double lr = lr_at(config.optim, counters.epoch, counters.samples_seen);
    MetricReport last_eval;

    auto run_eval = [&](std::uint64_t step) {
        const double before = non_trainable_checksum(model.params());
        MetricReport eval;
        {
            PolyakSwapGuard<float> guard(model.params(), state, config.optim.polyak);
            eval = evaluate_split(model, val_set);
        }
        const double after = non_trainable_checksum(model.params());
        if (before != after)
            throw DataError("train: evaluation mutated batch-norm running statistics");
        eval.step = step;
        eval.epoch = counters.epoch;
        eval.lr = lr;
        eval.wallclock_s = wallclock();
        last_eval = eval;

        const bool single = config.task == TaskKind::SingleLabel;
        csv << step << ',' << counters.epoch << ',' << fmt(lr) << ','
            << (window_examples ? fmt(window_loss / window_examples) : "") << ','
            << (single && window_examples ? fmt(window_correct / window_examples) : "") << ','
            << metric_field(eval.top1) << ',' << metric_field(eval.top5) << ','
            << metric_field(eval.weighted_map100) << ',' << fmt(eval.wallclock_s) << '\n';
        csv.flush();
        window_loss = window_correct = 0.0;
        window_examples = 0;
    };

    for (std::uint64_t s = 1; s <= config.steps; ++s) {
        if (pos >= n_train) {
            result.epoch_mean_losses.push_back(epoch_loss / epoch_examples);
            epoch_loss = 0.0;
            epoch_examples = 0;
            ++counters.epoch;
            order = epoch_order(n_train, config.seed, counters.epoch);
            pos = 0;
        }
        Batch batch = gather_batch(train_set, order, pos, config.batch_size);
        pos += batch.images.n();

        lr = lr_at(config.optim, counters.epoch, counters.samples_seen);
        Tensor4<float> logits = model.forward(batch.images, Mode::Train, dropout_rng);
        LossResult<float> loss = batch_loss(logits, batch, config.task);
        if (!std::isfinite(loss.loss))
            throw DataError("train: non-finite loss at step " + std::to_string(s) +
                            "; last checkpoint retained at " + config.checkpoint);
        model.backward(loss.grad_logits);
        optimizer_step(config.optim, model.params(), state, lr);

        counters.step += 1;
        counters.samples_seen += static_cast<std::uint64_t>(batch.images.n());

        const double batch_examples = batch.images.n();
        window_loss += loss.loss * batch_examples;
        epoch_loss += loss.loss * batch_examples;
        window_examples += batch.images.n();
        epoch_examples += batch.images.n();
        if (config.task == TaskKind::SingleLabel) {
            const auto predicted = argmax_class(logits);
            for (std::size_t b = 0; b < predicted.size(); ++b)
                if (predicted[b] == batch.labels[b]) window_correct += 1.0;
        }

        if (s % config.eval_every == 0 || s == config.steps) {
            run_eval(counters.step);
            save_checkpoint(config.checkpoint, model, &state, counters);
        }
    }

    if (epoch_examples > 0)
        result.epoch_mean_losses.push_back(epoch_loss / epoch_examples);

    save_checkpoint(config.checkpoint, model, &state, counters);
    if (config.steps == 0) {
        result.final_eval = MetricReport{};
        return result;
    }

    {
        PolyakSwapGuard<float> guard(model.params(), state, config.optim.polyak);
        if (config.task == TaskKind::SingleLabel)
            result.final_train_top1 = evaluate_split(model, train_set).top1;
    }
    result.final_eval = last_eval;
    return result;
}

MetricReport evaluate_checkpoint(const std::string& checkpoint_path, const Dataset& dataset,
                                 int batch_size) {
    const std::string arch_text = checkpoint_arch_text(checkpoint_path);
    ArchSpec spec = parse_arch(arch_text);
    Model<float> model(spec, 0);

    // Optimizer buffers are restored purely so the Polyak shadow is available.
    OptimConfig probe;
    probe.kind = OptimKind::Sgd;
    probe.polyak = true;
    OptimState<float> state = OptimState<float>::init(probe, model.params());
    bool have_state = true;
    try {
        load_checkpoint(checkpoint_path, model, &state);
    } catch (const FormatError&) {
        have_state = false;
        load_checkpoint(checkpoint_path, model, nullptr);
        state.polyak_shadow.clear();
    }
    PolyakSwapGuard<float> guard(model.params(), state, have_state);
    return evaluate_split(model, dataset, batch_size);
}

namespace {

// Node lines without the leading index, with shortcut chains and residual
// markers optionally dropped.
std::vector<std::string> structural_lines(const ArchSpec& spec, bool strip_residual) {
    std::istringstream in(serialize(spec));
    std::vector<std::string> lines;
    std::string line;
    bool first = true;
    int shortcut_depth = 0;
    while (std::getline(in, line)) {
        if (first) {
            first = false;
            lines.push_back(line);
            continue;
        }
        const auto space = line.find(' ');
        std::string body = line.substr(space + 1);
        const std::string kind = body.substr(0, body.find(' '));
        if (strip_residual) {
            if (kind == "res_shortcut") {
                ++shortcut_depth;
                continue;
            }
            if (kind == "res_end") {
                if (shortcut_depth > 0) --shortcut_depth;
                continue;
            }
            if (kind == "res") continue;
            if (shortcut_depth > 0) continue;
        }
        lines.push_back(std::move(body));
    }
    return lines;
}

void assert_variant_shape(const ArchSpec& base, const ArchSpec& variant,
                          const std::string& name) {
    if (name == "no-residuals") {
        if (structural_lines(base, true) != structural_lines(variant, false))
            throw ConfigError("ablation: " + name + " changed more than the shortcuts");
        return;
    }
    const auto a = structural_lines(base, false);
    const auto b = structural_lines(variant, false);
    if (a.size() != b.size())
        throw ConfigError("ablation: " + name + " changed the node count");
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] == b[i]) continue;
        // Only the intermediate-activation field may differ.
        std::string sa = a[i], sb = b[i];
        const auto cut = [](std::string& s) {
            const auto p = s.find(" ia=");
            if (p == std::string::npos) return false;
            const auto end = s.find(' ', p + 1 + 3);
            s.erase(p, (end == std::string::npos ? s.size() : end) - p);
            return true;
        };
        if (!cut(sa) || !cut(sb) || sa != sb)
            throw ConfigError("ablation: " + name + " changed line: " + a[i] + " -> " + b[i]);
    }
    const CostReport ca = report_costs(base), cb = report_costs(variant);
    if (ca.trainable_params != cb.trainable_params)
        throw ConfigError("ablation: " + name + " changed the parameter count");
}

}  // namespace

std::vector<AblationOutcome> ablation_run(const TrainConfig& base,
                                          const std::vector<std::string>& variants,
                                          const std::string& out_dir) {
    const ArchSpec base_spec = build_arch_from_config(base);
    std::vector<AblationOutcome> outcomes;
    for (const std::string& variant : variants) {
        TrainConfig config = base;
        if (variant == "baseline") {
        } else if (variant == "no-residuals") {
            config.residuals = false;
        } else if (variant == "relu") {
            config.intermediate = Activation::ReLU;
        } else if (variant == "elu") {
            config.intermediate = Activation::ELU;
        } else {
            throw ConfigError("ablation: unknown variant '" + variant + "'");
        }
        if (variant != "baseline")
            assert_variant_shape(base_spec, build_arch_from_config(config), variant);
        config.profile_csv = out_dir + "/" + variant + ".csv";
        config.checkpoint = out_dir + "/" + variant + ".ckpt";
        outcomes.push_back({variant, train(config)});
    }
    return outcomes;
}

}  // namespace xsep
