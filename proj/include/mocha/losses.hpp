#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mocha/stad.hpp"
#include "mocha/tape.hpp"
#include "mocha/tensor.hpp"

namespace mocha::losses {

struct LossWeights {
  double perceptual = 0.01;  // λ1
  double pd = 1.0;           // λ2
  double mp = 1.0;           // λ3
  double mc = 0.5;           // λ4
  void validate() const;
};

// Means divide by the full element count (channels included).
Var l1_loss(Var pred, Var target);
// sqrt(mean((pred - target)^2)); the gradient at a perfect match is taken as 0.
Var l2_mean(Var pred, Var target);

Var pd_loss(Var i_m_rgb, Var gt_rgb);
Var mc_loss(Var i_cf_raw, Var i_pm_raw, Var i_raw);

struct GroupingParams {
  std::size_t patch = 8;
  std::size_t stride = 4;
  std::size_t k = 8;        // patches per group, >= 2
  std::size_t search = 16;  // candidates lie within ±search/2 of the reference
  std::size_t max_groups = 64;
  void validate() const;
};

struct PatchGroup {
  std::vector<std::pair<std::size_t, std::size_t>> coords;  // top-left (y, x); coords[0] is the reference
};

struct PatchGroupSet {
  std::size_t patch = 0, channels = 0;
  std::vector<PatchGroup> groups;
  // Column j of group g is the patch at groups[g].coords[j], vectorized (dy, dx, c) row-major.
  Tensor matrix(const Tensor& img, std::size_t g) const;
  // Flat gather indices into an [H,W,C] image producing [G, n, K].
  std::vector<std::int64_t> gather_index(std::size_t width) const;
};

// Non-local grouping of an [H,W,C] image. Candidates are ordered by
// (distance, reference first, y, x) and the first K are kept.
PatchGroupSet group_patches(const Tensor& img, const GroupingParams& gp = {});

struct Svd {
  std::vector<double> sigma;  // descending, >= 0
  Tensor u;                   // [n, K]; column i is zero when sigma[i] == 0
  Tensor v;                   // [K, K]
};

// One-sided (Hestenes) cyclic Jacobi on the columns of an [n,K] matrix.
Svd svd_jacobi(const Tensor& m, double tol = 1e-12, int max_sweeps = 100);
std::vector<double> singular_values(const Tensor& m);

struct WnnmParams {
  double c_w = 1.0;
  double eps = 1e-6;
};

using GroupWeights = std::vector<std::vector<double>>;
// w_i = C_w √K / (σ_i + ε) for every group of a [G,n,K] tensor.
GroupWeights wnnm_weights(const Tensor& groups, const WnnmParams& wp = {});
// Σ_g Σ_i w_i σ_i / G. The weights are treated as constants for the gradient
// (dL/dM_g = Σ_i w_i u_i v_iᵀ / G); pass `frozen` to evaluate with given weights.
Var weighted_nuclear_norm(Var groups, const WnnmParams& wp = {}, const GroupWeights* frozen = nullptr);
// Groups each frame of [T,H,W,C] on its own values, then averages over frames.
Var mp_loss(Var i_pm_raw, const GroupingParams& gp = {}, const WnnmParams& wp = {});

inline constexpr std::uint64_t kPerceptualSeed = 0xC0FFEE;
// Frozen stride-2 conv3x3+GeLU pyramid (widths 8/16/32/64); l2_mean of the last features.
Var perceptual_surrogate(Var pred_rgb, const Tensor& gt_rgb, std::uint64_t seed = kPerceptualSeed);

struct Targets {
  Tensor gt_rgb;      // centre frame [2H,2W,3]
  Tensor gt_rgb_all;  // [T,2H,2W,3], used by the PD term
  Tensor i_raw;       // model input [T,H,W,4], used by the MC term
};

struct LossReport {
  Var total;
  std::vector<std::pair<std::string, double>> terms;  // weighted contributions
};

LossReport stage_losses(const stad::ForwardResult& out, const Targets& targets, int stage,
                        const LossWeights& w = {}, const GroupingParams& gp = {}, const WnnmParams& wp = {});

}  // namespace mocha::losses
