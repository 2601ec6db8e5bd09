#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <complex>
#include <numbers>

#include "mocha/fft.hpp"
#include "mocha/rng.hpp"

using namespace mocha;

namespace {

Tensor random_tensor(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(std::move(s));
  for (auto& v : t.vec()) v = rng.uniform(-1.0, 1.0);
  return t;
}

// Literal double sum over both axes; shares no code with the library.
ComplexSpectrum brute_force_dft2(const Tensor& x) {
  const std::size_t H = x.dim(0), W = x.dim(1);
  Tensor re({H, W}), im({H, W});
  for (std::size_t u = 0; u < H; ++u)
    for (std::size_t v = 0; v < W; ++v) {
      std::complex<double> acc = 0;
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) {
          const double ang = -2.0 * std::numbers::pi * (double(u * y) / H + double(v * xx) / W);
          acc += x.at({y, xx}) * std::polar(1.0, ang);
        }
      re.at({u, v}) = acc.real();
      im.at({u, v}) = acc.imag();
    }
  return {re, im};
}

double rel_diff(const Tensor& a, const Tensor& b) { return max_abs_diff(a, b) / std::max(1.0, max_abs(b)); }

}  // namespace

TEST_CASE("constant image has only a DC component") {
  const double c = 0.3;
  ComplexSpectrum s = fft2(Tensor({8, 4}, c));
  for (std::size_t i = 0; i < s.re.size(); ++i) {
    if (i == 0) {
      CHECK(s.re[0] == doctest::Approx(c * 32));
    } else {
      CHECK(std::abs(s.re[i]) < 1e-12);
    }
    CHECK(std::abs(s.im[i]) < 1e-12);
  }
}

TEST_CASE("roundtrip and Parseval") {
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{4, 4}, {8, 16}, {16, 16}, {7, 5}, {12, 6}}) {
    Tensor x = random_tensor({h, w}, h * 31 + w);
    ComplexSpectrum s = fft2(x);
    Tensor back = ifft2_real(s);
    CHECK(max_abs_diff(back, x) / max_abs(x) <= 1e-9);
    CHECK(max_abs(ifft2(s).im) <= 1e-12);
    double lhs = 0, rhs = 0;
    for (double v : x.data()) lhs += v * v;
    for (std::size_t i = 0; i < s.re.size(); ++i) rhs += s.re[i] * s.re[i] + s.im[i] * s.im[i];
    rhs /= static_cast<double>(h * w);
    CHECK(std::abs(lhs - rhs) / lhs <= 1e-8);
  }
}

TEST_CASE("radix-2 path agrees with the direct DFT oracle") {
  for (std::size_t n : {4u, 8u, 16u}) {
    Tensor x = random_tensor({n, n}, n);
    ComplexSpectrum fast = fft2(x, FftPath::kAuto);
    ComplexSpectrum direct = fft2(x, FftPath::kDirect);
    ComplexSpectrum brute = brute_force_dft2(x);
    CHECK(rel_diff(fast.re, direct.re) <= 1e-9);
    CHECK(rel_diff(fast.im, direct.im) <= 1e-9);
    CHECK(rel_diff(fast.re, brute.re) <= 1e-9);
    CHECK(rel_diff(fast.im, brute.im) <= 1e-9);
  }
}

TEST_CASE("non power-of-two sizes match the brute-force sum") {
  Tensor x = random_tensor({7, 6}, 3);
  ComplexSpectrum s = fft2(x);
  ComplexSpectrum brute = brute_force_dft2(x);
  CHECK(rel_diff(s.re, brute.re) <= 1e-9);
  CHECK(rel_diff(s.im, brute.im) <= 1e-9);
}

TEST_CASE("higher-rank input transforms each frame and channel independently") {
  Tensor x = random_tensor({2, 4, 8, 3}, 17);
  ComplexSpectrum s = fft2(x);
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t c = 0; c < 3; ++c) {
      Tensor plane({4, 8});
      for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t xx = 0; xx < 8; ++xx) plane.at({y, xx}) = x.at({t, y, xx, c});
      ComplexSpectrum p = brute_force_dft2(plane);
      for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t xx = 0; xx < 8; ++xx) {
          CHECK(std::abs(s.re.at({t, y, xx, c}) - p.re.at({y, xx})) < 1e-10);
          CHECK(std::abs(s.im.at({t, y, xx, c}) - p.im.at({y, xx})) < 1e-10);
        }
    }
}

TEST_CASE("polar roundtrip") {
  ComplexSpectrum s = fft2(random_tensor({8, 8, 2}, 5));
  ComplexSpectrum back = ComplexSpectrum::from_polar(s.amplitude(), s.phase());
  CHECK(max_abs_diff(back.re, s.re) < 1e-12);
  CHECK(max_abs_diff(back.im, s.im) < 1e-12);
  const Tensor amp = s.amplitude();
  for (double a : amp.data()) CHECK(a >= 0.0);
}
