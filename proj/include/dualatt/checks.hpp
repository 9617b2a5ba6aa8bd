#pragma once
// Gradient and invariant suites behind `dualatt check`.

#include <functional>
#include <string>
#include <vector>

#include "dualatt/config.hpp"
#include "dualatt/gradcheck.hpp"

namespace dualatt {

struct CheckLine {
    std::string scope;
    std::string name;
    double worst = 0.0;  // worst relative error or invariant violation
    double tolerance = 0.0;
    bool pass = false;
    std::string detail;
};

struct CheckOptions {
    std::size_t seeds = 5;
    double step = 1e-6;
    double tolerance = 1e-4;
    // Seeds whose unperturbed forward comes within margin_factor * step of a
    // kink or tie are skipped.
    double margin_factor = 10.0;
};

struct CheckReport {
    std::vector<CheckLine> lines;
    bool passed() const;
};

std::vector<std::string> check_scopes();  // all, tensor, ila, fgda, supervision, toydet

// Throws ConfigError for an unknown scope. `progress` is called once per line.
CheckReport run_checks(const std::string& scope, const CheckOptions& options = {},
                       const std::function<void(const CheckLine&)>& progress = {});

// Gradient check repeated over seeds, skipping seeds that sit near a kink.
// `make` builds a fresh fixture for a seed and returns the builder plus the
// parameters to perturb.
struct GradFixture {
    GraphBuilder builder;
    std::vector<Tensor*> params;
    // Parameters whose exact gradient is zero (a bias feeding batchnorm).
    // Central differences only see roundoff there, so they are checked for a
    // vanishing analytic gradient instead.
    std::vector<Tensor*> zero_grad_params;
    std::vector<std::shared_ptr<Tensor>> owned;
    std::shared_ptr<void> keep_alive;
};

struct SeededGradResult {
    double worst = 0.0;
    std::size_t seeds_used = 0;
    std::size_t seeds_skipped = 0;
    std::size_t checked = 0;
    std::size_t worst_param = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    double zero_grad_worst = 0.0;  // largest |analytic| over zero_grad_params
    double worst_roundoff = 0.0;   // roundoff noise on the worst element's numeric derivative
};

SeededGradResult seeded_grad_check(const std::function<GradFixture(std::uint64_t)>& make, const CheckOptions& options);

// The micro-detector used for end-to-end gradient checks: one level of
// stride 2 on an 8x8 input, width 4, N = 3, A = 2.
DetectorConfig micro_detector_config();

}  // namespace dualatt
