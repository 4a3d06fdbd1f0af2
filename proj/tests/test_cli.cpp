#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>

#include "xsep/arch.hpp"
#include "xsep/data.hpp"

namespace {

struct RunResult {
    int exit_code = -1;
    std::string output;
};

// Runs the CLI binary with stdout+stderr captured.
RunResult run_cli(const std::string& args) {
    const std::string out_path = "xsep_cli_out.tmp";
    const std::string cmd = std::string(XSEP_CLI_PATH) + " " + args + " > " + out_path + " 2>&1";
    const int status = std::system(cmd.c_str());
    RunResult result;
    result.exit_code = WEXITSTATUS(status);
    std::ifstream in(out_path, std::ios::binary);
    result.output = std::string((std::istreambuf_iterator<char>(in)), {});
    in.close();
    std::remove(out_path.c_str());
    return result;
}

bool contains(const std::string& haystack, const std::string& needle) {
    return haystack.find(needle) != std::string::npos;
}

std::string golden(const std::string& name) {
    std::ifstream in(std::string(XSEP_GOLDEN_DIR) + "/" + name, std::ios::binary);
    REQUIRE(in);
    return std::string((std::istreambuf_iterator<char>(in)), {});
}

}  // namespace

TEST_CASE("params reports the exact trainable count") {
    const auto r = run_cli("params --arch xception");
    CHECK(r.exit_code == 0);
    CHECK(contains(r.output, "trainable_params=22855952"));
    CHECK(contains(r.output, "conv_layers=36"));
    CHECK(contains(r.output, "modules=14"));
    CHECK(contains(r.output, "residual_connections=12"));
}

TEST_CASE("params --no-residuals drops exactly the projection parameters") {
    const auto r = run_cli("params --arch xception --no-residuals");
    CHECK(r.exit_code == 0);
    const std::size_t kernels = 64u * 128 + 128u * 256 + 256u * 728 + 728u * 1024;
    const std::size_t bn = 2u * (128 + 256 + 728 + 1024);
    std::ostringstream expected;
    expected << "trainable_params=" << (22855952u - kernels - bn);
    CHECK(contains(r.output, expected.str()));
}

TEST_CASE("params --json emits machine-readable output") {
    const auto r = run_cli("params --arch xception --json");
    CHECK(r.exit_code == 0);
    CHECK(contains(r.output, "\"trainable_params\": 22855952"));
}

TEST_CASE("params on an unknown arch exits 2") {
    const auto r = run_cli("params --arch does-not-exist");
    CHECK(r.exit_code == 2);
}

TEST_CASE("params accepts an arch file") {
    const std::string path = "xsep_cli_arch.txt";
    {
        std::ofstream out(path);
        out << xsep::serialize(xsep::build_sepconv_vgg({8, 8}, {3, 16, 16}, 4));
    }
    const auto r = run_cli("params --arch " + path);
    CHECK(r.exit_code == 0);
    const auto report = xsep::report_costs(xsep::build_sepconv_vgg({8, 8}, {3, 16, 16}, 4));
    CHECK(contains(r.output, "trainable_params=" + std::to_string(report.trainable_params)));
    std::remove(path.c_str());
}

TEST_CASE("equiv checks pass at 1e-5 and respect exit codes") {
    const auto a = run_cli("equiv --check inception-reformulation --seed 1 --tol 1e-5");
    CHECK(a.exit_code == 0);
    const auto b = run_cli("equiv --check spectrum-endpoints --seed 1 --tol 1e-5");
    CHECK(b.exit_code == 0);
    // An absurd tolerance makes the check fail with exit 1 and echoes the seed.
    const auto c = run_cli("equiv --check spectrum-endpoints --seed 4 --tol 1e-12");
    CHECK(c.exit_code == 1);
    CHECK(contains(c.output, "seed 4"));
    // Invalid tolerance is a usage error.
    const auto d = run_cli("equiv --check spectrum-endpoints --tol 0");
    CHECK(d.exit_code == 2);
    const auto e = run_cli("equiv --check bogus-check");
    CHECK(e.exit_code == 2);
}

TEST_CASE("gradcheck passes, is deterministic, and validates flags") {
    const auto a = run_cli("gradcheck --layer all --seed 3");
    CHECK(a.exit_code == 0);
    const auto b = run_cli("gradcheck --layer all --seed 3");
    CHECK(b.output == a.output);
    const auto c = run_cli("gradcheck --layer bn --seed 5");
    CHECK(c.exit_code == 0);
    const auto d = run_cli("gradcheck --layer warp");
    CHECK(d.exit_code == 2);
}

TEST_CASE("train and eval round-trip through the CLI") {
    const std::string cfg_path = "xsep_cli_train.cfg";
    {
        std::ofstream out(cfg_path);
        out << "[arch]\npreset = sepconv-vgg\nvgg_widths = 8\ninput = 3,12,12\nclasses = 3\n"
            << "[optim]\nlearning_rate = 0.05\n"
            << "[data]\nsource = synth\nn_train = 96\nn_val = 48\nhw = 12\ndata_seed = 4\n"
            << "[run]\nsteps = 9\nbatch_size = 32\neval_every = 3\nseed = 2\nthreads = 1\n"
            << "profile_csv = xsep_cli_profile.csv\ncheckpoint = xsep_cli_model.ckpt\n";
    }
    const auto r = run_cli("train --config " + cfg_path);
    CHECK(r.exit_code == 0);
    {
        std::ifstream csv("xsep_cli_profile.csv");
        REQUIRE(csv);
        std::string header;
        std::getline(csv, header);
        CHECK(header ==
              "step,epoch,lr,train_loss,train_top1,val_top1,val_top5,val_wmap100,wallclock_s");
    }

    // eval on the fresh checkpoint reproduces the final profile row's metrics.
    const xsep::Dataset val = xsep::synth_dataset(3, 48, 12, xsep::Rng::mix(4, 0x5A17));
    xsep::save_dataset("xsep_cli_val.xtsr", "xsep_cli_val.xlbl", val);
    const auto ev = run_cli(
        "eval --checkpoint xsep_cli_model.ckpt --images xsep_cli_val.xtsr --labels "
        "xsep_cli_val.xlbl");
    CHECK(ev.exit_code == 0);

    std::ifstream csv("xsep_cli_profile.csv");
    std::string line, last;
    while (std::getline(csv, line)) last = line;
    std::istringstream row(last);
    std::string field;
    for (int i = 0; i < 6; ++i) std::getline(row, field, ',');
    CHECK(contains(ev.output, "top1=" + field));

    for (const char* f : {"xsep_cli_train.cfg", "xsep_cli_profile.csv", "xsep_cli_model.ckpt",
                          "xsep_cli_val.xtsr", "xsep_cli_val.xlbl"})
        std::remove(f);
}

TEST_CASE("train rejects bad configs with exit 2") {
    const std::string cfg_path = "xsep_cli_bad.cfg";
    {
        std::ofstream out(cfg_path);
        out << "[optim]\nlearning_rate = -1\n";
    }
    CHECK(run_cli("train --config " + cfg_path).exit_code == 2);
    {
        std::ofstream out(cfg_path);
        out << "[run]\nbananas = 7\n";
    }
    CHECK(run_cli("train --config " + cfg_path).exit_code == 2);
    CHECK(run_cli("train --config no_such_file.cfg").exit_code == 2);
    std::remove(cfg_path.c_str());
}

TEST_CASE("bench reports MACs that match the cost model") {
    const auto r = run_cli("bench --op sepconv --shape 2,16,19,19 --cout 32 --iters 1");
    CHECK(r.exit_code == 0);
    xsep::Node sep;
    sep.kind = xsep::NodeKind::SepConv;
    sep.out_channels = 32;
    const auto costs = xsep::node_costs(sep, xsep::Shape3{16, 19, 19});
    const std::size_t macs = costs.macs_per_example * 2;
    CHECK(contains(r.output, "," + std::to_string(macs) + ","));

    // Iteration count never changes the MAC figure.
    const auto r3 = run_cli("bench --op sepconv --shape 2,16,19,19 --cout 32 --iters 3");
    CHECK(contains(r3.output, "," + std::to_string(macs) + ","));

    CHECK(run_cli("bench --op conv --shape 1,2 --cout 4").exit_code == 2);
    CHECK(run_cli("bench --op conv --shape 1,2,8,8 --cout 4 --iters 0").exit_code == 2);
}

TEST_CASE("help text matches the golden copies") {
    CHECK(run_cli("--help").output == golden("help_root.txt"));
    CHECK(run_cli("params --help").output == golden("help_params.txt"));
    CHECK(run_cli("equiv --help").output == golden("help_equiv.txt"));
    CHECK(run_cli("gradcheck --help").output == golden("help_gradcheck.txt"));
    CHECK(run_cli("train --help").output == golden("help_train.txt"));
    CHECK(run_cli("eval --help").output == golden("help_eval.txt"));
    CHECK(run_cli("bench --help").output == golden("help_bench.txt"));
}

TEST_CASE("unknown subcommands and flags are usage errors") {
    CHECK(run_cli("frobnicate").exit_code == 2);
    CHECK(run_cli("params --warp 9").exit_code == 2);
}
