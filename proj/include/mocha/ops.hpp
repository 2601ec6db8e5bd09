#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "mocha/tape.hpp"

// Differentiable primitives. Feature maps use channel-last layout
// [B, H, W, C]; "batch" is any leading frame or window axis.
namespace mocha::ops {

// Elementwise, equal shapes.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double s);
Var add_scalar(Var x, double s);
// x times a single-element Var.
Var scale_by(Var x, Var s);
// bias of shape [C] added along the last axis.
Var add_bias(Var x, Var bias);
// Per-(batch, channel) gate: g holds B*C values, e.g. shape [B,1,1,C].
Var gate(Var x, Var g);

Var sum(Var x);
Var mean(Var x);

Var square(Var x);
Var abs(Var x);
Var sqrt(Var x);
// 1/sqrt(x); x must be positive.
Var rsqrt(Var x);
Var exp(Var x);
Var cos(Var x);
Var sin(Var x);

// Exact erf form: 0.5 x (1 + erf(x / sqrt 2)).
Var gelu(Var x);
Var relu(Var x);
Var sigmoid(Var x);
// Max-subtracted softmax over the last axis.
Var softmax(Var x);

enum class Activation { kGelu, kRelu, kSigmoid, kSoftmax };
Var activation(Var x, Activation kind);

// Pointwise (1x1) convolution: contraction of the last axis with w [C_in, C_out].
Var linear(Var x, Var w, Var bias = {});

struct ConvOptions {
  std::size_t dilation = 1;
  std::size_t stride = 1;
};

// Cross-correlation (no kernel flip) with "same" zero padding of
// dilation*(k-1)/2 per side. x [B,H,W,C_in], w [kh,kw,C_in,C_out], odd kh/kw.
// With stride s the output extent is ceil(H/s).
Var conv2d(Var x, Var w, Var bias = {}, ConvOptions opt = {});
// Depthwise variant, w [kh,kw,C]; C_out == C_in.
Var depthwise_conv2d(Var x, Var w, Var bias = {}, std::size_t dilation = 1);

// Normalizes over the last axis, then applies gamma/beta of shape [C].
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

// a [B,m,k] x b [B,k,n] -> [B,m,n]. Summation over k in ascending order.
Var bmm(Var a, Var b);
// a [m,k] x b [k,n] -> [m,n].
Var matmul(Var a, Var b);

Var reshape(Var x, Shape shape);
// out[i] = index[i] < 0 ? 0 : x[index[i]]; backward scatter-adds in ascending i.
Var gather(Var x, std::vector<std::int64_t> index, Shape out_shape);
Var permute(Var x, const std::vector<std::size_t>& axes);
Var concat_last(std::span<const Var> parts);
Var concat_last(std::initializer_list<Var> parts);
Var slice_last(Var x, std::size_t begin, std::size_t count);
Var slice_axis0(Var x, std::size_t begin, std::size_t count);

// [.., H, W, r*r*C] -> [.., rH, rW, C]. Channel k = (i*r + j)*C + c moves to
// spatial offset (i, j) within the r x r output cell.
Var pixel_shuffle(Var x, std::size_t r);
Var pixel_unshuffle(Var x, std::size_t r);
std::vector<std::int64_t> pixel_shuffle_index(const Shape& in_shape, std::size_t r, Shape& out_shape);

// [.., H, W, C] -> [.., 1, 1, C] mean over the spatial axes.
Var global_avg_pool(Var x);

// Spatial 2-D DFT on the axes chosen by spatial_layout. Adjoints are the
// conjugate-transposed transforms.
std::pair<Var, Var> fft2(Var x);
// Real part of the normalized inverse transform.
Var ifft2_real(Var re, Var im);
Var amplitude(Var re, Var im);
// atan2(im, re); the adjoint uses re^2 + im^2 + kPhaseEps as denominator.
Var phase(Var re, Var im);
inline constexpr double kPhaseEps = 1e-8;

}  // namespace mocha::ops
