#pragma once

#include <functional>
#include <string>
#include <vector>

#include "xsep/rng.hpp"
#include "xsep/tensor.hpp"

namespace xsep {

// One differentiable system under test. `forward` must re-run the whole
// computation from the tensors' current values; `backward` receives the
// output projection and must return one gradient per checked tensor, in
// order. All checks run in f64.
struct GradCheckSystem {
    std::function<Tensor4<double>()> forward;
    std::vector<Tensor4<double>*> tensors;
    std::vector<std::string> names;
    std::function<std::vector<Tensor4<double>>(const Tensor4<double>&)> backward;
};

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst_tensor;
    std::size_t worst_index = 0;
};

// Central finite differences with the given step against the analytic
// gradients of a random +/-1 projection of the output. Relative error uses
// max(|analytic|, |numeric|, 1e-3) as denominator: real backward bugs produce
// errors on the scale of the gradient itself, far above the f64 difference
// noise this floor absorbs.
GradCheckResult grad_check(GradCheckSystem& system, Rng& rng, double step = 1e-5,
                           std::size_t max_checks_per_tensor = 200);

struct LayerCheck {
    std::string layer;
    GradCheckResult result;
};

// Prebuilt randomized instances per layer family. Families: conv, sepconv,
// bn, dense, pool. "all" additionally covers depthwise, spectrum, dropout and
// a residual block end to end.
std::vector<LayerCheck> run_gradcheck_suite(const std::string& layer_class, std::uint64_t seed);

}  // namespace xsep
