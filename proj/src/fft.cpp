#include "mocha/fft.hpp"

#include <cmath>
#include <numbers>
#include <vector>

#include "mocha/errors.hpp"
#include "mocha/parallel.hpp"

namespace mocha {

using cd = std::complex<double>;

ComplexSpectrum::ComplexSpectrum(Tensor re_part, Tensor im_part) : re(std::move(re_part)), im(std::move(im_part)) {
  if (re.shape() != im.shape()) {
    throw DimensionError("spectrum parts differ in shape: " + shape_str(re.shape()) + " vs " + shape_str(im.shape()));
  }
}

Tensor ComplexSpectrum::amplitude() const {
  Tensor a(re.shape());
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::hypot(re[i], im[i]);
  return a;
}

Tensor ComplexSpectrum::phase() const {
  Tensor p(re.shape());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::atan2(im[i] + 0.0, re[i]);
  return p;
}

ComplexSpectrum ComplexSpectrum::from_polar(const Tensor& amplitude, const Tensor& phase) {
  if (amplitude.shape() != phase.shape()) throw DimensionError("from_polar shape mismatch");
  Tensor re(amplitude.shape()), im(amplitude.shape());
  for (std::size_t i = 0; i < re.size(); ++i) {
    re[i] = amplitude[i] * std::cos(phase[i]);
    im[i] = amplitude[i] * std::sin(phase[i]);
  }
  return {std::move(re), std::move(im)};
}

bool is_power_of_two(std::size_t n) { return n && !(n & (n - 1)); }

namespace {

// exp(sign*2*pi*i*k/n), exact at quarter turns so self-conjugate bins of real input stay real.
cd unit_root(std::size_t k, std::size_t n, double sign) {
  k %= n;
  if ((4 * k) % n == 0) {
    switch (4 * k / n) {
      case 0: return {1.0, 0.0};
      case 1: return {0.0, sign};
      case 2: return {-1.0, 0.0};
      default: return {0.0, -sign};
    }
  }
  const double angle = sign * 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
  return {std::cos(angle), std::sin(angle)};
}

void direct_dft(std::span<cd> data, bool inverse) {
  const std::size_t n = data.size();
  std::vector<cd> out(n);
  const double sign = inverse ? 1.0 : -1.0;
  for (std::size_t k = 0; k < n; ++k) {
    cd acc{0.0, 0.0};
    for (std::size_t j = 0; j < n; ++j) {
      acc += data[j] * unit_root(k * j, n, sign);
    }
    out[k] = acc;
  }
  std::copy(out.begin(), out.end(), data.begin());
}

void radix2(std::span<cd> data, bool inverse) {
  const std::size_t n = data.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(data[i], data[j]);
  }
  const double sign = inverse ? 1.0 : -1.0;
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2;
    std::vector<cd> twiddle(half);
    for (std::size_t k = 0; k < half; ++k) twiddle[k] = unit_root(k, len, sign);
    for (std::size_t start = 0; start < n; start += len) {
      for (std::size_t k = 0; k < half; ++k) {
        cd u = data[start + k];
        cd v = data[start + k + half] * twiddle[k];
        data[start + k] = u + v;
        data[start + k + half] = u - v;
      }
    }
  }
}

ComplexSpectrum transform2(const Tensor& re_in, const Tensor* im_in, bool inverse, FftPath path) {
  const SpatialLayout L = spatial_layout(re_in.shape());
  Tensor re_out(re_in.shape()), im_out(re_in.shape());
  const std::size_t H = L.height, W = L.width, C = L.channels;
  const double norm = inverse ? 1.0 / static_cast<double>(H * W) : 1.0;
  parallel_for(L.batch * C, [&](std::size_t job) {
    const std::size_t b = job / C, c = job % C;
    std::vector<cd> buf(H * W);
    std::vector<cd> col(H);
    auto idx = [&](std::size_t y, std::size_t x) { return ((b * H + y) * W + x) * C + c; };
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        buf[y * W + x] = cd(re_in[idx(y, x)], im_in ? (*im_in)[idx(y, x)] : 0.0);
    for (std::size_t y = 0; y < H; ++y) fft1d(std::span<cd>(buf.data() + y * W, W), inverse, path);
    for (std::size_t x = 0; x < W; ++x) {
      for (std::size_t y = 0; y < H; ++y) col[y] = buf[y * W + x];
      fft1d(col, inverse, path);
      for (std::size_t y = 0; y < H; ++y) buf[y * W + x] = col[y];
    }
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        re_out[idx(y, x)] = buf[y * W + x].real() * norm;
        im_out[idx(y, x)] = buf[y * W + x].imag() * norm;
      }
    // Real input: DC/Nyquist bins are their own conjugates, hence exactly real.
    if (!im_in && !inverse)
      for (std::size_t y = 0; y < H; y += (H % 2 == 0 && H > 1 ? H / 2 : H))
        for (std::size_t x = 0; x < W; x += (W % 2 == 0 && W > 1 ? W / 2 : W)) im_out[idx(y, x)] = 0.0;
  });
  return {std::move(re_out), std::move(im_out)};
}

}  // namespace

void fft1d(std::span<cd> data, bool inverse, FftPath path) {
  if (data.size() <= 1) return;
  if (path == FftPath::kAuto && is_power_of_two(data.size())) {
    radix2(data, inverse);
  } else {
    direct_dft(data, inverse);
  }
}

SpatialLayout spatial_layout(const Shape& shape) {
  SpatialLayout L;
  if (shape.size() == 2) {
    L.height = shape[0];
    L.width = shape[1];
    return L;
  }
  if (shape.size() < 2) throw DimensionError("fft2 needs rank >= 2, got " + shape_str(shape));
  const std::size_t r = shape.size();
  L.height = shape[r - 3];
  L.width = shape[r - 2];
  L.channels = shape[r - 1];
  for (std::size_t i = 0; i + 3 < r; ++i) L.batch *= shape[i];
  return L;
}

ComplexSpectrum fft2(const Tensor& x, FftPath path) { return transform2(x, nullptr, false, path); }

ComplexSpectrum fft2(const ComplexSpectrum& x, FftPath path) { return transform2(x.re, &x.im, false, path); }

ComplexSpectrum ifft2(const ComplexSpectrum& s, FftPath path) { return transform2(s.re, &s.im, true, path); }

Tensor ifft2_real(const ComplexSpectrum& s, FftPath path) { return ifft2(s, path).re; }

}  // namespace mocha
