#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mocha/gradcheck.hpp"

// Block-by-block finite-difference verification of every trainable component.
namespace mocha {

struct SuiteRow {
  std::string block;
  double tol = 0.0;
  double h = 0.0;
  GradCheckReport report;
  double seconds = 0.0;
};

// Seeded tiny configurations; blocks are checked at 1e-4, the full model at 1e-3.
// Inputs of blocks that take a phase are redrawn until every spectral bin has
// amplitude above 0.1 and stays 0.1 away from the negative real axis, where arg() jumps
// (near either, the curvature of the phase swamps the central difference).
std::vector<SuiteRow> run_gradient_suite(std::uint64_t seed = 1);

}  // namespace mocha
