#pragma once

#include <span>
#include <utility>

#include "mocha/tensor.hpp"

// Moiré statistics: inter-channel colour correlation, per-patch moiré prior,
// temporal amplitude variation, amplitude/phase swap.
namespace mocha::analysis {

// Mean Pearson r over (R,G), (G,B), (R,B), pooled over every pixel of an [H,W,3] image.
// A constant channel raises DegenerateInputError.
double color_correlation(const Tensor& img);
double normalized_cc(const Tensor& img, const Tensor& gt);

// Packed RGGB [H,W,4] -> [H,W,3] as (R, mean of the two G, B).
Tensor raw_to_rgb3(const Tensor& packed);

// Hasler-Süsstrunk colourfulness divided by its upper bound 1.3*sqrt(2) on [0,1] inputs.
double colorfulness(const Tensor& patch);
// Fraction of luma |F|^2 (DC included in the total) outside the band |fy| < H/4, |fx| < W/4.
double hf_energy(const Tensor& patch);

struct PriorReport {
  Tensor per_patch;  // [rows, cols]
  double mean = 0.0;
  double variance = 0.0;  // population variance
};
// prior = colorfulness + hf_energy for each full patch; border remainders dropped.
PriorReport moire_prior(const Tensor& img, std::size_t patch = 128);

struct TemporalReport {
  Tensor per_pair;  // [T-1]
  double mean = 0.0;
  double variance = 0.0;
};
// Sum over bins and channels of | |F(x_{t+1})| - |F(x_t)| | for every adjacent pair of a [T,H,W,C] clip.
TemporalReport temporal_stats(const Tensor& clip);

// (amp(b) with phase(a), amp(a) with phase(b)), per channel.
std::pair<Tensor, Tensor> amp_phase_swap(const Tensor& a, const Tensor& b);

// Mean and population variance.
std::pair<double, double> mean_variance(std::span<const double> v);

}  // namespace mocha::analysis
