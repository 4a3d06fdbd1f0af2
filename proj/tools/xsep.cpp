// xsep: parameter counting, equivalence checks, gradient checks, training,
// evaluation and kernel benchmarks for the depthwise-separable conv stack.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "xsep/arch.hpp"
#include "xsep/config.hpp"
#include "xsep/data.hpp"
#include "xsep/equiv.hpp"
#include "xsep/errors.hpp"
#include "xsep/gradcheck.hpp"
#include "xsep/parallel.hpp"
#include "xsep/train.hpp"

#include <json.hpp>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;

int resolve_threads(int flag_value) {
    if (flag_value > 0) return flag_value;
    if (const char* env = std::getenv("XSEP_THREADS")) {
        const int parsed = std::atoi(env);
        if (parsed > 0) return parsed;
    }
    return 1;
}

struct ParamsArgs {
    std::string arch = "xception";
    int classes = 1000;
    std::string fc;
    bool no_residuals = false;
    bool json = false;
};

xsep::ArchSpec resolve_arch(const ParamsArgs& args) {
    std::vector<int> fc_widths;
    if (!args.fc.empty()) {
        std::istringstream in(args.fc);
        std::string part;
        while (std::getline(in, part, ',')) fc_widths.push_back(std::stoi(part));
    }
    if (args.arch == "xception" || args.arch == "xception-toy") {
        xsep::XceptionOptions options;
        if (args.arch == "xception-toy") options = xsep::toy_xception_options();
        options.num_classes = args.classes;
        options.residuals = !args.no_residuals;
        options.fc_widths = fc_widths;
        return xsep::build_xception(options);
    }
    // Anything else is an arch file path.
    return xsep::load_arch_file(args.arch);
}

int cmd_params(const ParamsArgs& args) {
    xsep::ArchSpec spec;
    try {
        spec = resolve_arch(args);
    } catch (const std::exception& e) {
        std::cerr << "params: cannot resolve arch '" << args.arch << "': " << e.what() << '\n';
        return kExitUsage;
    }
    const xsep::CostReport report = xsep::report_costs(spec);
    if (args.json) {
        nlohmann::json j;
        j["arch"] = args.arch;
        j["trainable_params"] = report.trainable_params;
        j["non_trainable_params"] = report.non_trainable_params;
        j["macs_per_example"] = report.macs_per_example;
        j["activation_peak"] = report.activation_peak;
        j["conv_layers"] = xsep::conv_layer_count(spec);
        j["modules"] = xsep::module_count(spec);
        j["residual_connections"] = xsep::residual_connection_count(spec);
        std::cout << j.dump(2) << '\n';
        return kExitOk;
    }
    std::cout << "trainable_params=" << report.trainable_params << '\n'
              << "non_trainable_params=" << report.non_trainable_params << '\n'
              << "macs_per_example=" << report.macs_per_example << '\n'
              << "activation_peak=" << report.activation_peak << '\n'
              << "conv_layers=" << xsep::conv_layer_count(spec) << '\n'
              << "modules=" << xsep::module_count(spec) << '\n'
              << "residual_connections=" << xsep::residual_connection_count(spec) << '\n';
    return kExitOk;
}

int cmd_equiv(const std::string& check, std::uint64_t seed, double tol, int instances) {
    double worst = 0.0;
    for (int i = 0; i < instances; ++i) {
        const std::uint64_t instance_seed = xsep::Rng::mix(seed, static_cast<std::uint64_t>(i));
        if (check == "inception-reformulation") {
            worst = std::max(worst,
                             xsep::inception_reformulation_deviation<float>(instance_seed));
        } else {
            const auto dev = xsep::spectrum_endpoint_deviation<float>(instance_seed);
            worst = std::max({worst, dev.single_segment, dev.per_channel});
        }
    }
    std::printf("check=%s instances=%d max_relative_deviation=%.3e tol=%.3e\n", check.c_str(),
                instances, worst, tol);
    if (worst >= tol) {
        std::printf("FAILED (seed %llu)\n", static_cast<unsigned long long>(seed));
        return kExitCheckFailed;
    }
    return kExitOk;
}

int cmd_gradcheck(const std::string& layer, std::uint64_t seed) {
    const auto checks = xsep::run_gradcheck_suite(layer, seed);
    bool ok = true;
    for (const auto& check : checks) {
        std::printf("%-14s worst_rel_err=%.3e (%s[%zu])\n", check.layer.c_str(),
                    check.result.max_rel_err, check.result.worst_tensor.c_str(),
                    check.result.worst_index);
        if (!(check.result.max_rel_err < 1e-4)) ok = false;
    }
    if (!ok) std::printf("FAILED: gradient mismatch above 1e-4\n");
    return ok ? kExitOk : kExitCheckFailed;
}

int cmd_train(const std::string& config_path) {
    xsep::TrainConfig config = xsep::load_config_file(config_path);
    const xsep::TrainResult result = xsep::train(config);
    std::printf("profile=%s checkpoint=%s\n", result.profile_path.c_str(),
                result.checkpoint_path.c_str());
    if (result.final_eval.top1 >= 0.0)
        std::printf("final val_top1=%.4f val_top5=%.4f\n", result.final_eval.top1,
                    result.final_eval.top5);
    if (result.final_eval.weighted_map100 >= 0.0)
        std::printf("final val_wmap100=%.6f\n", result.final_eval.weighted_map100);
    if (result.final_train_top1 >= 0.0)
        std::printf("final train_top1=%.4f\n", result.final_train_top1);
    if (!result.epoch_mean_losses.empty()) {
        std::printf("epoch_mean_losses=");
        for (std::size_t e = 0; e < result.epoch_mean_losses.size(); ++e)
            std::printf("%s%.9g", e ? "," : "", result.epoch_mean_losses[e]);
        std::printf("\n");
    }
    return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& images,
             const std::string& labels, const std::string& weights_file) {
    xsep::Dataset dataset = xsep::load_dataset(images, labels);
    if (!weights_file.empty())
        dataset.class_weights = xsep::load_class_weights(weights_file, dataset.num_classes);
    const xsep::MetricReport report = xsep::evaluate_checkpoint(checkpoint, dataset);
    std::printf("mean_loss=%.9g\n", report.mean_loss);
    if (report.top1 >= 0.0)
        std::printf("top1=%.9g\ntop5=%.9g\n", report.top1, report.top5);
    if (report.weighted_map100 >= 0.0)
        std::printf("wmap100=%.9g\n", report.weighted_map100);
    return kExitOk;
}

int cmd_bench(const std::string& op, const std::string& shape_text, int cout_channels,
              int iters, int kernel, int stride) {
    std::vector<int> dims;
    {
        std::istringstream in(shape_text);
        std::string part;
        while (std::getline(in, part, ',')) dims.push_back(std::stoi(part));
    }
    if (dims.size() != 4)
        throw xsep::ParameterError("bench: --shape needs n,c,h,w");
    const xsep::Dims4 d{dims[0], dims[1], dims[2], dims[3]};

    xsep::Node node;
    node.kind = op == "conv" ? xsep::NodeKind::Conv : xsep::NodeKind::SepConv;
    node.out_channels = cout_channels;
    node.kh = node.kw = kernel;
    node.sh = node.sw = stride;
    node.pad = xsep::Padding::Same;
    const xsep::CostReport costs = xsep::node_costs(node, xsep::Shape3{d.c, d.h, d.w});
    const std::size_t macs = costs.macs_per_example * static_cast<std::size_t>(d.n);

    xsep::Rng rng(1);
    const auto x = xsep::random_uniform<float>(d, -1.0, 1.0, rng);
    const xsep::ConvGeometry geo{kernel, kernel, stride, stride, xsep::Padding::Same};

    xsep::Tensor4<float> conv_kernel, dw_kernel, pw_kernel;
    if (op == "conv") {
        conv_kernel = xsep::random_uniform<float>(
            xsep::Dims4{cout_channels, d.c, kernel, kernel}, -1.0, 1.0, rng);
    } else {
        dw_kernel = xsep::random_uniform<float>(xsep::Dims4{1, d.c, kernel, kernel}, -1.0, 1.0,
                                                rng);
        pw_kernel =
            xsep::random_uniform<float>(xsep::Dims4{cout_channels, d.c, 1, 1}, -1.0, 1.0, rng);
    }

    auto time_loop = [&](bool with_backward) {
        const auto t0 = std::chrono::steady_clock::now();
        for (int i = 0; i < iters; ++i) {
            if (op == "conv") {
                auto y = xsep::conv2d_im2col(x, conv_kernel, geo);
                if (with_backward) xsep::conv2d_backward_im2col(x, conv_kernel, geo, y);
            } else {
                auto fwd = xsep::separable_conv2d_fwd(x, dw_kernel, pw_kernel, geo, 1,
                                                      xsep::Activation::None);
                if (with_backward)
                    xsep::separable_conv2d_backward(x, dw_kernel, pw_kernel, geo, 1,
                                                    xsep::Activation::None, fwd.dw_out, fwd.out);
            }
        }
        const auto t1 = std::chrono::steady_clock::now();
        return std::chrono::duration<double>(t1 - t0).count() / iters;
    };

    const double fwd_s = time_loop(false);
    const double fwdbwd_s = time_loop(true);
    std::printf("op,shape,cout,kernel,stride,iters,fwd_ms,fwdbwd_ms,macs,macs_per_s\n");
    std::printf("%s,\"%s\",%d,%d,%d,%d,%.3f,%.3f,%zu,%.3e\n", op.c_str(), shape_text.c_str(),
                cout_channels, kernel, stride, iters, fwd_s * 1e3, fwdbwd_s * 1e3, macs,
                static_cast<double>(macs) / fwd_s);
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Depthwise separable convolution kernels, architectures and training"};
    app.name("xsep");
    app.require_subcommand(1);
    int threads_flag = 0;
    app.add_option("--threads", threads_flag,
                   "Kernel threads (default: XSEP_THREADS env or 1)");

    ParamsArgs params_args;
    auto* params = app.add_subcommand("params", "Report parameter counts and costs");
    params->add_option("--arch", params_args.arch, "xception | xception-toy | arch file path");
    params->add_option("--classes", params_args.classes, "Classifier width");
    params->add_option("--fc", params_args.fc, "Comma-separated FC widths before the classifier");
    params->add_flag("--no-residuals", params_args.no_residuals, "Drop residual connections");
    params->add_flag("--json", params_args.json, "Emit JSON instead of key=value lines");

    std::string equiv_check = "inception-reformulation";
    std::uint64_t equiv_seed = 1;
    double equiv_tol = 1e-5;
    int equiv_instances = 20;
    auto* equiv = app.add_subcommand("equiv", "Numerical equivalence checks");
    equiv->add_option("--check", equiv_check, "inception-reformulation | spectrum-endpoints")
        ->check(CLI::IsMember({"inception-reformulation", "spectrum-endpoints"}));
    equiv->add_option("--seed", equiv_seed, "Base seed for randomized instances");
    equiv->add_option("--tol", equiv_tol, "Max allowed relative deviation");
    equiv->add_option("--instances", equiv_instances, "Randomized instances to run");

    std::string grad_layer = "all";
    std::uint64_t grad_seed = 3;
    auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks (f64)");
    grad->add_option("--layer", grad_layer, "all | conv | sepconv | bn | dense | pool")
        ->check(CLI::IsMember({"all", "conv", "sepconv", "bn", "dense", "pool"}));
    grad->add_option("--seed", grad_seed, "Seed for randomized instances");

    std::string train_config;
    auto* train = app.add_subcommand("train", "Train from a config file");
    train->add_option("--config", train_config, "key = value config file")->required();

    std::string eval_checkpoint, eval_images, eval_labels, eval_weights;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    eval->add_option("--checkpoint", eval_checkpoint, "Checkpoint file")->required();
    eval->add_option("--images", eval_images, "XTSR image file")->required();
    eval->add_option("--labels", eval_labels, "XLBL label file")->required();
    eval->add_option("--class-weights", eval_weights, "Two-column class weight file");

    std::string bench_op = "sepconv", bench_shape = "1,64,32,32";
    int bench_cout = 128, bench_iters = 10, bench_kernel = 3, bench_stride = 1;
    auto* bench = app.add_subcommand("bench", "Time conv kernels and report MACs");
    bench->add_option("--op", bench_op, "conv | sepconv")
        ->check(CLI::IsMember({"conv", "sepconv"}));
    bench->add_option("--shape", bench_shape, "Input shape n,c,h,w");
    bench->add_option("--cout", bench_cout, "Output channels");
    bench->add_option("--iters", bench_iters, "Iterations to average over");
    bench->add_option("--kernel", bench_kernel, "Square kernel size");
    bench->add_option("--stride", bench_stride, "Stride");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    xsep::set_num_threads(resolve_threads(threads_flag));

    try {
        if (params->parsed()) return cmd_params(params_args);
        if (equiv->parsed()) {
            if (equiv_tol <= 0.0) {
                std::cerr << "equiv: --tol must be > 0\n";
                return kExitUsage;
            }
            if (equiv_instances < 1) {
                std::cerr << "equiv: --instances must be >= 1\n";
                return kExitUsage;
            }
            return cmd_equiv(equiv_check, equiv_seed, equiv_tol, equiv_instances);
        }
        if (grad->parsed()) return cmd_gradcheck(grad_layer, grad_seed);
        if (train->parsed()) return cmd_train(train_config);
        if (eval->parsed())
            return cmd_eval(eval_checkpoint, eval_images, eval_labels, eval_weights);
        if (bench->parsed()) {
            if (bench_iters < 1) {
                std::cerr << "bench: --iters must be >= 1\n";
                return kExitUsage;
            }
            return cmd_bench(bench_op, bench_shape, bench_cout, bench_iters, bench_kernel,
                             bench_stride);
        }
    } catch (const xsep::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const xsep::FormatError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const xsep::ParameterError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitCheckFailed;
    }
    return kExitUsage;
}
