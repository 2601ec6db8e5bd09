#include "mocha/analysis.hpp"

#include <cmath>
#include <string>
#include <tuple>

#include "mocha/errors.hpp"
#include "mocha/fft.hpp"

namespace mocha::analysis {

namespace {

void require_rgb(const Tensor& t, const char* what) {
  if (t.rank() != 3 || t.dim(2) != 3)
    throw DimensionError(std::string(what) + ": expected [H,W,3], got " + shape_str(t.shape()));
}

double pearson(const Tensor& img, int a, int b) {
  const std::size_t n = img.size() / 3;
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += img[3 * i + a];
    mb += img[3 * i + b];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double da = img[3 * i + a] - ma, db = img[3 * i + b] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0 || sbb <= 0) throw DegenerateInputError("color_correlation: channel with zero variance");
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

std::pair<double, double> mean_variance(std::span<const double> v) {
  if (v.empty()) return {0.0, 0.0};
  double m = 0;
  for (double x : v) m += x;
  m /= v.size();
  double var = 0;
  for (double x : v) var += (x - m) * (x - m);
  return {m, var / v.size()};
}

double color_correlation(const Tensor& img) {
  require_rgb(img, "color_correlation");
  return (pearson(img, 0, 1) + pearson(img, 1, 2) + pearson(img, 0, 2)) / 3.0;
}

double normalized_cc(const Tensor& img, const Tensor& gt) {
  const double g = color_correlation(gt);
  if (g == 0.0) throw DegenerateInputError("normalized_cc: reference correlation is zero");
  return color_correlation(img) / g;
}

Tensor raw_to_rgb3(const Tensor& packed) {
  if (packed.rank() != 3 || packed.dim(2) != 4) throw DimensionError("raw_to_rgb3: expected [H,W,4]");
  const std::size_t n = packed.dim(0) * packed.dim(1);
  Tensor out({packed.dim(0), packed.dim(1), 3});
  for (std::size_t i = 0; i < n; ++i) {
    out[3 * i] = packed[4 * i];
    out[3 * i + 1] = 0.5 * (packed[4 * i + 1] + packed[4 * i + 2]);
    out[3 * i + 2] = packed[4 * i + 3];
  }
  return out;
}

double colorfulness(const Tensor& patch) {
  require_rgb(patch, "colorfulness");
  const std::size_t n = patch.size() / 3;
  std::vector<double> rg(n), yb(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = patch[3 * i], g = patch[3 * i + 1], b = patch[3 * i + 2];
    rg[i] = r - g;
    yb[i] = 0.5 * (r + g) - b;
  }
  const auto [mrg, vrg] = mean_variance(rg);
  const auto [myb, vyb] = mean_variance(yb);
  const double m = std::sqrt(vrg + vyb) + 0.3 * std::sqrt(mrg * mrg + myb * myb);
  return m / (1.3 * std::sqrt(2.0));
}

double hf_energy(const Tensor& patch) {
  require_rgb(patch, "hf_energy");
  const std::size_t H = patch.dim(0), W = patch.dim(1);
  Tensor luma({H, W});
  for (std::size_t i = 0; i < H * W; ++i)
    luma[i] = 0.299 * patch[3 * i] + 0.587 * patch[3 * i + 1] + 0.114 * patch[3 * i + 2];
  const ComplexSpectrum s = fft2(luma);
  auto signed_freq = [](std::size_t k, std::size_t n) {
    return k <= n / 2 ? static_cast<double>(k) : static_cast<double>(k) - static_cast<double>(n);
  };
  double total = 0, high = 0;
  for (std::size_t u = 0; u < H; ++u)
    for (std::size_t v = 0; v < W; ++v) {
      const double e = s.re[u * W + v] * s.re[u * W + v] + s.im[u * W + v] * s.im[u * W + v];
      total += e;
      if (!(std::abs(signed_freq(u, H)) < H / 4.0 && std::abs(signed_freq(v, W)) < W / 4.0)) high += e;
    }
  return total > 0 ? high / total : 0.0;
}

PriorReport moire_prior(const Tensor& img, std::size_t patch) {
  require_rgb(img, "moire_prior");
  if (patch == 0 || img.dim(0) < patch || img.dim(1) < patch)
    throw DimensionError("moire_prior: image smaller than one " + std::to_string(patch) + "x" +
                         std::to_string(patch) + " patch");
  const std::size_t rows = img.dim(0) / patch, cols = img.dim(1) / patch, W = img.dim(1);
  PriorReport rep;
  rep.per_patch = Tensor({rows, cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      Tensor p({patch, patch, 3});
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x)
          for (std::size_t ch = 0; ch < 3; ++ch)
            p[(y * patch + x) * 3 + ch] = img[((r * patch + y) * W + c * patch + x) * 3 + ch];
      rep.per_patch[r * cols + c] = colorfulness(p) + hf_energy(p);
    }
  std::tie(rep.mean, rep.variance) = mean_variance(rep.per_patch.data());
  return rep;
}

TemporalReport temporal_stats(const Tensor& clip) {
  if (clip.rank() != 4) throw DimensionError("temporal_stats: expected [T,H,W,C]");
  const std::size_t T = clip.dim(0);
  if (T < 2) throw DimensionError("temporal_stats: need at least two frames");
  const Tensor amp = fft2(clip).amplitude();
  const std::size_t n = amp.size() / T;
  TemporalReport rep;
  rep.per_pair = Tensor({T - 1});
  for (std::size_t t = 0; t + 1 < T; ++t) {
    double acc = 0;
    for (std::size_t i = 0; i < n; ++i) acc += std::abs(amp[(t + 1) * n + i] - amp[t * n + i]);
    rep.per_pair[t] = acc;
  }
  std::tie(rep.mean, rep.variance) = mean_variance(rep.per_pair.data());
  return rep;
}

std::pair<Tensor, Tensor> amp_phase_swap(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("amp_phase_swap: shape mismatch");
  const ComplexSpectrum fa = fft2(a), fb = fft2(b);
  const Tensor amp_a = fa.amplitude(), amp_b = fb.amplitude();
  const Tensor ph_a = fa.phase(), ph_b = fb.phase();
  auto rebuild = [](const Tensor& amp, const Tensor& ph) {
    const ComplexSpectrum z = ifft2(ComplexSpectrum::from_polar(amp, ph));
    // Mixed spectra are not exactly Hermitian; the imaginary residue must be
    // negligible relative to the signal.
    if (max_abs(z.im) > 1e-9 * std::max(1.0, max_abs(z.re)))
      throw NumericalError("amp_phase_swap: imaginary residue " + std::to_string(max_abs(z.im)));
    return z.re;
  };
  return {rebuild(amp_b, ph_a), rebuild(amp_a, ph_b)};
}

}  // namespace mocha::analysis
