// Acceptance suite: one pass/fail line per criterion, nonzero exit on any
// failure. Heavier end-to-end checks (training smoke, ablations) run last.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "xsep/arch.hpp"
#include "xsep/config.hpp"
#include "xsep/data.hpp"
#include "xsep/equiv.hpp"
#include "xsep/gradcheck.hpp"
#include "xsep/metrics.hpp"
#include "xsep/train.hpp"

using namespace xsep;

namespace {

int g_failures = 0;

class Criterion {
public:
    Criterion(int id, const char* name, double budget_s)
        : id_(id), name_(name), budget_s_(budget_s),
          start_(std::chrono::steady_clock::now()) {}

    void expect(bool ok, const std::string& what) {
        if (!ok) {
            failed_details_ += (failed_details_.empty() ? "" : "; ") + what;
        }
    }

    ~Criterion() {
        const double elapsed =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        bool ok = failed_details_.empty();
        std::string detail = failed_details_;
        if (elapsed >= budget_s_) {
            ok = false;
            detail += (detail.empty() ? "" : "; ") + std::string("over time budget");
        }
        std::printf("%s  %2d. %-28s (%.2f s / %.0f s)%s%s\n", ok ? "PASS" : "FAIL", id_, name_,
                    elapsed, budget_s_, detail.empty() ? "" : "  -- ", detail.c_str());
        std::fflush(stdout);
        if (!ok) ++g_failures;
    }

private:
    int id_;
    const char* name_;
    double budget_s_;
    std::chrono::steady_clock::time_point start_;
    std::string failed_details_;
};

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), {});
}

std::string strip_wallclock(const std::string& csv) {
    std::istringstream in(csv);
    std::string line, out;
    while (std::getline(in, line)) {
        out += line.substr(0, line.rfind(','));
        out += '\n';
    }
    return out;
}

// First profile row whose train_loss column is at or below the threshold.
long steps_to_loss(const std::string& csv_path, double threshold) {
    std::ifstream in(csv_path);
    std::string line;
    std::getline(in, line);  // header
    while (std::getline(in, line)) {
        std::istringstream row(line);
        std::string step_field, skip, loss_field;
        std::getline(row, step_field, ',');
        std::getline(row, skip, ',');
        std::getline(row, skip, ',');
        std::getline(row, loss_field, ',');
        if (!loss_field.empty() && std::strtod(loss_field.c_str(), nullptr) <= threshold)
            return std::strtol(step_field.c_str(), nullptr, 10);
    }
    return -1;
}

void criterion_1_parameter_count() {
    Criterion c(1, "exact parameter count", 1.0);
    const auto t0 = std::chrono::steady_clock::now();
    const int status = std::system(XSEP_CLI_PATH " params --arch xception > xsep_acc_params.txt");
    const double cli_elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    c.expect(WEXITSTATUS(status) == 0, "params exited nonzero");
    c.expect(cli_elapsed < 1.0, "CLI run exceeded 1 s");
    const std::string out = read_file("xsep_acc_params.txt");
    std::remove("xsep_acc_params.txt");
    c.expect(out.find("trainable_params=22855952\n") != std::string::npos,
             "count line missing or wrong: " + out.substr(0, out.find('\n')));
    c.expect(report_costs(build_xception()).trainable_params == 22855952u,
             "library count disagrees");
}

void criterion_2_structure() {
    Criterion c(2, "structural counts", 5.0);
    const ArchSpec spec = build_xception();
    c.expect(conv_layer_count(spec) == 36, "conv layer count != 36");
    c.expect(module_count(spec) == 14, "module count != 14");
    c.expect(residual_connection_count(spec) == 12, "residual connections != 12");
}

void criterion_3_inception_reformulation() {
    Criterion c(3, "inception reformulation", 10.0);
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed)
        worst = std::max(worst, inception_reformulation_deviation<float>(seed));
    char buf[64];
    std::snprintf(buf, sizeof(buf), "max deviation %.3e", worst);
    c.expect(worst < 1e-5, buf);
}

void criterion_4_spectrum_endpoints() {
    Criterion c(4, "spectrum endpoints", 10.0);
    double worst = 0.0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        const auto dev = spectrum_endpoint_deviation<float>(seed);
        worst = std::max({worst, dev.single_segment, dev.per_channel});
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), "max deviation %.3e", worst);
    c.expect(worst < 1e-5, buf);
}

void criterion_5_gradients() {
    Criterion c(5, "gradient correctness", 60.0);
    for (std::uint64_t seed : {3ull, 7ull}) {
        for (const auto& check : run_gradcheck_suite("all", seed)) {
            char buf[96];
            std::snprintf(buf, sizeof(buf), "%s seed %llu err %.3e", check.layer.c_str(),
                          static_cast<unsigned long long>(seed), check.result.max_rel_err);
            c.expect(check.result.max_rel_err < 1e-4, buf);
        }
    }
}

void criterion_6_kernel_paths() {
    Criterion c(6, "im2col vs naive kernels", 30.0);
    Rng rng(61);
    double worst = 0.0;
    for (int stride : {1, 2}) {
        for (Padding pad : {Padding::Same, Padding::Valid}) {
            for (int k : {1, 3, 5}) {
                const auto x = random_uniform<float>(Dims4{2, 5, 9, 9}, -1.0, 1.0, rng);
                const auto kernel =
                    random_uniform<float>(Dims4{7, 5, k, k}, -1.0, 1.0, rng);
                const ConvGeometry geo{k, k, stride, stride, pad};
                const auto a = conv2d_naive(x, kernel, geo);
                const auto b = conv2d_im2col(x, kernel, geo);
                worst = std::max(worst, relative_deviation(a, b));
                const auto gout =
                    random_uniform<float>(a.dims(), -1.0, 1.0, rng);
                const auto ga = conv2d_backward_naive(x, kernel, geo, gout);
                const auto gb = conv2d_backward_im2col(x, kernel, geo, gout);
                worst = std::max(worst, relative_deviation(ga.grad_input, gb.grad_input));
                worst = std::max(worst, relative_deviation(ga.grad_kernel, gb.grad_kernel));
            }
        }
    }
    char buf[64];
    std::snprintf(buf, sizeof(buf), "max deviation %.3e", worst);
    c.expect(worst < 1e-5, buf);
}

void criterion_7_metric_oracles() {
    Criterion c(7, "metric oracles", 5.0);
    Rng rng(71);
    // top-k against sorting.
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 60;
        const int classes = 2 + static_cast<int>(rng.next_below(12));
        const auto logits = random_uniform<float>(Dims4{n, classes, 1, 1}, -1.0, 1.0, rng);
        std::vector<int> labels;
        for (int i = 0; i < n; ++i)
            labels.push_back(static_cast<int>(rng.next_below(classes)));
        const int k = 1 + static_cast<int>(rng.next_below(classes));
        int hits = 0;
        for (int i = 0; i < n; ++i) {
            const float* row = logits.data() + static_cast<std::size_t>(i) * classes;
            std::vector<int> order(classes);
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
                if (row[a] != row[b]) return row[a] > row[b];
                return a < b;
            });
            for (int r = 0; r < k; ++r)
                if (order[static_cast<std::size_t>(r)] == labels[static_cast<std::size_t>(i)])
                    ++hits;
        }
        if (topk_accuracy(logits, labels, k) != static_cast<double>(hits) / n) {
            c.expect(false, "top-k disagrees with the sort oracle");
            break;
        }
    }
    // weighted MAP against the definition.
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 20, classes = 5;
        const auto scores = random_uniform<float>(Dims4{n, classes, 1, 1}, 0.0, 1.0, rng);
        std::vector<std::uint8_t> hot(static_cast<std::size_t>(n) * classes);
        bool any = false;
        for (auto& h : hot) {
            h = rng.next_below(3) == 0 ? 1 : 0;
            any |= h != 0;
        }
        if (!any) hot[0] = 1;
        std::vector<double> weights;
        for (int cl = 0; cl < classes; ++cl) weights.push_back(rng.uniform(0.5, 2.0));

        double weighted_sum = 0.0, weight_total = 0.0;
        for (int cl = 0; cl < classes; ++cl) {
            std::vector<int> order(n);
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
                const float sa = scores[static_cast<std::size_t>(a) * classes + cl];
                const float sb = scores[static_cast<std::size_t>(b) * classes + cl];
                if (sa != sb) return sa > sb;
                return a < b;
            });
            int positives = 0;
            for (int i = 0; i < n; ++i)
                positives += hot[static_cast<std::size_t>(i) * classes + cl];
            if (positives == 0) continue;
            int seen = 0;
            double precision_sum = 0.0;
            for (int r = 0; r < std::min(100, n); ++r) {
                if (hot[static_cast<std::size_t>(order[static_cast<std::size_t>(r)]) * classes +
                        cl]) {
                    ++seen;
                    precision_sum += static_cast<double>(seen) / (r + 1);
                }
            }
            weighted_sum += weights[static_cast<std::size_t>(cl)] * precision_sum /
                            std::min(positives, 100);
            weight_total += weights[static_cast<std::size_t>(cl)];
        }
        const double got = weighted_map_at_k(scores, hot, weights, 100);
        if (std::abs(got - weighted_sum / weight_total) > 1e-9) {
            c.expect(false, "weighted MAP disagrees with the definitional oracle");
            break;
        }
    }
    // The fixed weighted-mean fixture.
    Tensor4<float> scores(4, 2, 1, 1);
    scores.at(0, 0, 0, 0) = 0.9f;
    scores.at(1, 0, 0, 0) = 0.5f;
    scores.at(2, 0, 0, 0) = 0.4f;
    scores.at(3, 0, 0, 0) = 0.3f;
    scores.at(1, 1, 0, 0) = 0.9f;
    scores.at(0, 1, 0, 0) = 0.8f;
    scores.at(2, 1, 0, 0) = 0.7f;
    scores.at(3, 1, 0, 0) = 0.6f;
    const std::vector<std::uint8_t> hot = {1, 1, 0, 0, 0, 0, 0, 1};
    c.expect(weighted_map_at_k(scores, hot, {1.0, 3.0}, 100) == 0.625,
             "weighted-mean fixture != 0.625");
}

void criterion_8_optimizer_fixtures() {
    Criterion c(8, "optimizer and schedule", 1.0);
    OptimConfig imagenet;
    imagenet.lr0 = 0.045;
    imagenet.decay_factor = 0.94;
    imagenet.decay_every = 2;
    imagenet.schedule = ScheduleKind::StepEveryEpochs;
    c.expect(lr_at(imagenet, 0, 0) == 0.045, "epoch 0 lr");
    c.expect(lr_at(imagenet, 1, 0) == 0.045, "epoch 1 lr");
    c.expect(std::abs(lr_at(imagenet, 4, 0) - 0.045 * 0.94 * 0.94) < 1e-15, "epoch 4 lr");
    OptimConfig jft;
    jft.lr0 = 0.001;
    jft.decay_factor = 0.9;
    jft.decay_every = 3000000;
    jft.schedule = ScheduleKind::StepEverySamples;
    c.expect(std::abs(lr_at(jft, 0, 6000000) - 0.001 * 0.9 * 0.9) < 1e-18, "6M-sample lr");
    c.expect(std::abs(lr_at(jft, 0, 6000000) - 0.00081) < 1e-18, "0.00081 fixture");

    Tensor4<double> w(1, 1, 1, 1, 1.0), g(1, 1, 1, 1, 0.5), v(1, 1, 1, 1, 0.0);
    sgd_momentum_step(w, g, v, 0.1, 0.9, 0.0);
    c.expect(v[0] == -0.05 && w[0] == 0.95, "sgd single-step fixture");

    Tensor4<double> w2(1, 1, 1, 1, 1.0), g2(1, 1, 1, 1, 1.0), v2(1, 1, 1, 1, 0.0),
        s2(1, 1, 1, 1, 0.0);
    rmsprop_step(w2, g2, v2, s2, 0.001, 0.0, 0.9, 1e-7, 0.0);
    c.expect(std::abs(s2[0] - 0.1) < 1e-16, "rmsprop accumulator fixture");
    c.expect(w2[0] == 1.0 - 0.001 * 1.0 / std::sqrt(s2[0] + 1e-7), "rmsprop step fixture");

    Tensor4<double> shadow(1, 1, 1, 1, 0.0), param(1, 1, 1, 1, 1.0);
    polyak_update(shadow, param, 0.9);
    polyak_update(shadow, param, 0.9);
    c.expect(std::abs(shadow[0] - 0.19) < 1e-15, "polyak two-step fixture");
}

TrainConfig smoke_config() {
    TrainConfig config = load_config_file(std::string(XSEP_CONFIG_DIR) + "/toy_xception.cfg");
    config.profile_csv = "xsep_acc_smoke.csv";
    config.checkpoint = "xsep_acc_smoke.ckpt";
    return config;
}

void criterion_9_training_smoke() {
    Criterion c(9, "toy-scale training smoke", 900.0);
    const TrainConfig config = smoke_config();
    c.expect(config.steps == 3000 && config.batch_size == 64 && config.seed == 7,
             "preset must pin steps=3000 batch=64 seed=7");
    const TrainResult result = train(config);
    char buf[96];
    std::snprintf(buf, sizeof(buf), "train top1 %.4f", result.final_train_top1);
    c.expect(result.final_train_top1 >= 0.9, buf);
    c.expect(!result.epoch_mean_losses.empty(), "no epoch losses recorded");
    for (std::size_t e = 1; e < result.epoch_mean_losses.size(); ++e) {
        std::snprintf(buf, sizeof(buf), "epoch %zu mean %.6g !< epoch %zu mean %.6g", e,
                      result.epoch_mean_losses[e], e - 1, result.epoch_mean_losses[e - 1]);
        c.expect(result.epoch_mean_losses[e] < result.epoch_mean_losses[e - 1], buf);
    }
    std::remove("xsep_acc_smoke.csv");
    std::remove("xsep_acc_smoke.ckpt");
}

void criterion_10_ablations() {
    Criterion c(10, "ablation determinism", 1800.0);
    // Reduced but structurally faithful budget for the determinism and
    // directional checks.
    TrainConfig base = smoke_config();
    base.input = Shape3{3, 16, 16};
    base.hw = 16;
    base.n_train = 1600;
    base.n_val = 320;
    base.steps = 200;
    base.batch_size = 32;
    base.eval_every = 10;
    base.threads = 1;
    base.optim.lr0 = 0.02;

    const std::vector<std::string> variants = {"baseline", "no-residuals", "relu", "elu"};
    ablation_run(base, variants, ".");
    std::vector<std::string> first_csvs;
    for (const auto& name : variants)
        first_csvs.push_back(strip_wallclock(read_file("./" + name + ".csv")));

    ablation_run(base, variants, ".");
    for (std::size_t i = 0; i < variants.size(); ++i)
        c.expect(strip_wallclock(read_file("./" + variants[i] + ".csv")) == first_csvs[i],
                 variants[i] + " profile not bit-identical across invocations");

    // Activation variants keep the baseline parameter count.
    const std::size_t base_params =
        report_costs(build_arch_from_config(base)).trainable_params;
    for (const char* name : {"relu", "elu"}) {
        TrainConfig variant = base;
        variant.intermediate =
            std::string(name) == "relu" ? Activation::ReLU : Activation::ELU;
        c.expect(report_costs(build_arch_from_config(variant)).trainable_params == base_params,
                 std::string(name) + " changed the parameter count");
    }

    // Directional echo of the residual-connection figure, frozen after the
    // first measurement on this seed/budget: baseline crossed loss 1.0 at
    // step 20, the residual-free variant at step 50.
    const double loss_threshold = 1.0;
    const long baseline_steps = steps_to_loss("./baseline.csv", loss_threshold);
    const long nores_steps = steps_to_loss("./no-residuals.csv", loss_threshold);
    char buf[128];
    std::snprintf(buf, sizeof(buf), "baseline %ld steps vs residual-free %ld", baseline_steps,
                  nores_steps);
    c.expect(baseline_steps > 0, "baseline never reached the loss threshold");
    c.expect(baseline_steps <= 30, std::string("baseline regressed: ") + buf);
    c.expect(nores_steps < 0 || baseline_steps < nores_steps, buf);

    for (const auto& name : variants) {
        std::remove(("./" + name + ".csv").c_str());
        std::remove(("./" + name + ".ckpt").c_str());
    }
}

void criterion_11_persistence() {
    Criterion c(11, "persistence round-trips", 10.0);
    TrainConfig config = smoke_config();
    config.input = Shape3{3, 16, 16};
    config.hw = 16;
    config.n_train = 256;
    config.n_val = 96;
    config.steps = 6;
    config.batch_size = 32;
    config.eval_every = 3;
    config.threads = 1;
    config.profile_csv = "xsep_acc_p.csv";
    config.checkpoint = "xsep_acc_p.ckpt";
    train(config);

    const Dataset val =
        synth_dataset(config.classes, config.n_val, config.hw, Rng::mix(config.data_seed, 0x5A17));
    const MetricReport before = evaluate_checkpoint(config.checkpoint, val);

    // save -> load -> save byte identity.
    ArchSpec spec = build_arch_from_config(config);
    Model<float> model(spec, 1);
    OptimState<float> state = OptimState<float>::init(config.optim, model.params());
    const TrainCounters counters = load_checkpoint(config.checkpoint, model, &state);
    save_checkpoint("xsep_acc_p2.ckpt", model, &state, counters);
    c.expect(read_file("xsep_acc_p.ckpt") == read_file("xsep_acc_p2.ckpt"),
             "checkpoint save-load-save not byte-identical");

    const MetricReport after = evaluate_checkpoint("xsep_acc_p2.ckpt", val);
    c.expect(before.top1 == after.top1 && before.top5 == after.top5 &&
                 before.mean_loss == after.mean_loss,
             "reloaded evaluation differs");

    // XTSR / XLBL byte round-trips.
    const Dataset data = synth_dataset(5, 17, 8, 13);
    save_dataset("xsep_acc_img.xtsr", "xsep_acc_lbl.xlbl", data);
    const Dataset back = load_dataset("xsep_acc_img.xtsr", "xsep_acc_lbl.xlbl");
    save_dataset("xsep_acc_img2.xtsr", "xsep_acc_lbl2.xlbl", back);
    c.expect(read_file("xsep_acc_img.xtsr") == read_file("xsep_acc_img2.xtsr"),
             "XTSR round-trip not byte-identical");
    c.expect(read_file("xsep_acc_lbl.xlbl") == read_file("xsep_acc_lbl2.xlbl"),
             "XLBL round-trip not byte-identical");

    for (const char* f : {"xsep_acc_p.csv", "xsep_acc_p.ckpt", "xsep_acc_p2.ckpt",
                          "xsep_acc_img.xtsr", "xsep_acc_lbl.xlbl", "xsep_acc_img2.xtsr",
                          "xsep_acc_lbl2.xlbl"})
        std::remove(f);
}

}  // namespace

int main() {
    std::printf("acceptance criteria\n");
    criterion_1_parameter_count();
    criterion_2_structure();
    criterion_3_inception_reformulation();
    criterion_4_spectrum_endpoints();
    criterion_5_gradients();
    criterion_6_kernel_paths();
    criterion_7_metric_oracles();
    criterion_8_optimizer_fixtures();
    criterion_11_persistence();
    criterion_9_training_smoke();
    criterion_10_ablations();
    if (g_failures == 0) {
        std::printf("all criteria passed\n");
        return 0;
    }
    std::printf("%d criteria FAILED\n", g_failures);
    return 1;
}
