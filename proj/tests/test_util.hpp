#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "xsep/equiv.hpp"
#include "xsep/tensor.hpp"

namespace testutil {

// Max-norm relative deviation, re-exported for readability in asserts.
template <typename T>
double rel_dev(const xsep::Tensor4<T>& reference, const xsep::Tensor4<T>& candidate) {
    return xsep::relative_deviation(reference, candidate);
}

template <typename T>
xsep::Tensor4<T> rand_tensor(xsep::Rng& rng, int n, int c, int h, int w, double lo = -1.0,
                             double hi = 1.0) {
    return xsep::random_uniform<T>(xsep::Dims4{n, c, h, w}, lo, hi, rng);
}

}  // namespace testutil
