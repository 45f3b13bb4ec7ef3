#pragma once

#include <functional>
#include <string>
#include <vector>

#include "losa/tensor.hpp"

namespace losa {

// Builds a scalar objective from the given inputs; called repeatedly under
// perturbation, so it must be a pure function of the input values.
using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckResult {
    std::string name;
    double max_rel_err = 0.0;
    bool ok = false;
};

// Central finite differences vs reverse-mode gradients for every element of
// every input. rel_err = |ad - fd| / max(1, |ad|, |fd|).
GradCheckResult check_gradients(const std::string& name, const ScalarFn& fn, std::vector<Tensor> inputs,
                                double eps = 1e-5, double tol = 1e-5);

// Seeded random instances of every differentiable op. When
// `include_broken_fixture` is set, a deliberately wrong backward rule is added
// so callers can verify the checker catches it.
std::vector<GradCheckResult> run_op_gradcheck_suite(std::uint64_t seed, bool include_broken_fixture = false);

}  // namespace losa
