#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mocha/params.hpp"
#include "mocha/tape.hpp"

namespace mocha {

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  // Inputs with at most this many scalars are checked coordinate by coordinate;
  // larger ones use random probe directions.
  std::size_t max_coordinates = 256;
  std::size_t probes = 64;
  std::uint64_t seed = 1;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  std::size_t checks = 0;
  bool probe_mode = false;
};

// Builds a scalar from the inputs recorded on the given tape.
using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;

// Compares reverse-mode gradients with central differences
// rel_err = |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8), taken as 0 when the difference is
// below the quotient's rounding resolution 1024*eps*max(1,|f+|,|f-|)/(2h).
GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs, const GradCheckOptions& opt = {});

// Same, over every tensor of a ParamStore followed by the extra inputs.
using ParamScalarFn = std::function<Var(Binding&, std::span<const Var> extra)>;
GradCheckReport grad_check_params(const ParamStore& store, const ParamScalarFn& f,
                                  const std::vector<Tensor>& extra, const GradCheckOptions& opt = {});

}  // namespace mocha
