#pragma once

#include <complex>
#include <span>

#include "mocha/tensor.hpp"

namespace mocha {

// Real/imaginary pair produced by fft2; both parts share one shape.
struct ComplexSpectrum {
  Tensor re;
  Tensor im;

  ComplexSpectrum() = default;
  ComplexSpectrum(Tensor re_part, Tensor im_part);

  const Shape& shape() const { return re.shape(); }
  Tensor amplitude() const;
  // atan2(im, re) in (-pi, pi]; a zero imaginary part is treated as +0.
  Tensor phase() const;
  static ComplexSpectrum from_polar(const Tensor& amplitude, const Tensor& phase);
};

enum class FftPath {
  kAuto,    // radix-2 for power-of-two extents, direct DFT otherwise
  kDirect,  // O(N^2) direct DFT; the correctness oracle
};

bool is_power_of_two(std::size_t n);

// Unnormalized transform in place; inverse uses exp(+i...) without the 1/N factor.
void fft1d(std::span<std::complex<double>> data, bool inverse, FftPath path = FftPath::kAuto);

// Spatial axes: (0,1) for rank 2, otherwise the two axes before the last
// (layout [..., H, W, C]). Every leading index and channel is transformed
// independently. Forward is unnormalized, inverse is scaled by 1/(H*W).
ComplexSpectrum fft2(const Tensor& x, FftPath path = FftPath::kAuto);
ComplexSpectrum fft2(const ComplexSpectrum& x, FftPath path = FftPath::kAuto);
ComplexSpectrum ifft2(const ComplexSpectrum& s, FftPath path = FftPath::kAuto);
// Real part of ifft2.
Tensor ifft2_real(const ComplexSpectrum& s, FftPath path = FftPath::kAuto);

// Decomposition of a tensor into (batch, H, W, channels) for the spatial-axis rule above.
struct SpatialLayout {
  std::size_t batch = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t channels = 1;
};
SpatialLayout spatial_layout(const Shape& shape);

}  // namespace mocha
