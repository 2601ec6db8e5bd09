#include "mocha/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "mocha/errors.hpp"
#include "mocha/fft.hpp"
#include "mocha/parallel.hpp"

namespace mocha::ops {

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename F, typename D>
Var unary(const char* name, Var x, F f, D df) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  return x.tape().record(name, std::move(y), {x}, [x, df](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(x);
    Tensor dx(xv.shape());
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = g[i] * df(xv[i]);
    t.accumulate(x, dx);
  });
}

std::size_t last_dim(const Var& x) { return x.shape().back(); }

}  // namespace

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  return a.tape().record("add", std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return a.tape().record("sub", std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g);
    if (t.needs_grad(b)) {
      Tensor ng = g;
      for (auto& v : ng.vec()) v = -v;
      t.accumulate(b, ng);
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return a.tape().record("mul", std::move(y), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.needs_grad(a)) {
      Tensor da = g;
      for (std::size_t i = 0; i < da.size(); ++i) da[i] *= t.value(b)[i];
      t.accumulate(a, da);
    }
    if (t.needs_grad(b)) {
      Tensor db = g;
      for (std::size_t i = 0; i < db.size(); ++i) db[i] *= t.value(a)[i];
      t.accumulate(b, db);
    }
  });
}

Var scale(Var x, double s) {
  Tensor y = x.value();
  for (auto& v : y.vec()) v *= s;
  return x.tape().record("scale", std::move(y), {x}, [x, s](Tape& t, const Tensor& g) {
    Tensor dx = g;
    for (auto& v : dx.vec()) v *= s;
    t.accumulate(x, dx);
  });
}

Var add_scalar(Var x, double s) {
  Tensor y = x.value();
  for (auto& v : y.vec()) v += s;
  return x.tape().record("add_scalar", std::move(y), {x}, [x](Tape& t, const Tensor& g) { t.accumulate(x, g); });
}

Var scale_by(Var x, Var s) {
  if (s.value().size() != 1) throw DimensionError("scale_by expects a single-element scale");
  const double sv = s.value()[0];
  Tensor y = x.value();
  for (auto& v : y.vec()) v *= sv;
  return x.tape().record("scale_by", std::move(y), {x, s}, [x, s](Tape& t, const Tensor& g) {
    if (t.needs_grad(x)) {
      Tensor dx = g;
      const double sv = t.value(s)[0];
      for (auto& v : dx.vec()) v *= sv;
      t.accumulate(x, dx);
    }
    if (t.needs_grad(s)) {
      double acc = 0.0;
      const Tensor& xv = t.value(x);
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
      t.accumulate(s, Tensor(t.value(s).shape(), acc));
    }
  });
}

Var add_bias(Var x, Var bias) {
  const std::size_t C = last_dim(x);
  if (bias.value().size() != C) {
    throw DimensionError("add_bias: bias has " + std::to_string(bias.value().size()) + " values for " +
                         std::to_string(C) + " channels");
  }
  Tensor y = x.value();
  const Tensor& b = bias.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i % C];
  return x.tape().record("add_bias", std::move(y), {x, bias}, [x, bias, C](Tape& t, const Tensor& g) {
    t.accumulate(x, g);
    if (t.needs_grad(bias)) {
      Tensor db(t.value(bias).shape());
      for (std::size_t i = 0; i < g.size(); ++i) db[i % C] += g[i];
      t.accumulate(bias, db);
    }
  });
}

Var gate(Var x, Var g_in) {
  const Shape s = x.shape();
  const std::size_t C = s.back();
  const std::size_t B = s.size() >= 4 ? std::accumulate(s.begin(), s.end() - 3, std::size_t{1}, std::multiplies<>()) : 1;
  if (g_in.value().size() != B * C) {
    throw DimensionError("gate: expected " + std::to_string(B * C) + " gate values for input " + shape_str(s));
  }
  const std::size_t per_batch = x.value().size() / B;
  Tensor y = x.value();
  const Tensor& gv = g_in.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= gv[(i / per_batch) * C + i % C];
  return x.tape().record("gate", std::move(y), {x, g_in}, [x, g_in, C, per_batch](Tape& t, const Tensor& g) {
    const Tensor& gv = t.value(g_in);
    const Tensor& xv = t.value(x);
    if (t.needs_grad(x)) {
      Tensor dx = g;
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= gv[(i / per_batch) * C + i % C];
      t.accumulate(x, dx);
    }
    if (t.needs_grad(g_in)) {
      Tensor dg(gv.shape());
      for (std::size_t i = 0; i < g.size(); ++i) dg[(i / per_batch) * C + i % C] += g[i] * xv[i];
      t.accumulate(g_in, dg);
    }
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape().record("sum", Tensor::scalar(s), {x}, [x](Tape& t, const Tensor& g) {
    t.accumulate(x, Tensor(t.value(x).shape(), g[0]));
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var square(Var x) {
  return unary("square", x, [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}

Var abs(Var x) {
  return unary("abs", x, [](double v) { return std::abs(v); },
               [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var sqrt(Var x) {
  return unary("sqrt", x, [](double v) { return std::sqrt(v); },
               [](double v) { return v > 0.0 ? 0.5 / std::sqrt(v) : 0.0; });
}

Var rsqrt(Var x) {
  for (double v : x.value().vec())
    if (!(v > 0.0)) throw NumericalError("rsqrt of a non-positive value");
  return unary("rsqrt", x, [](double v) { return 1.0 / std::sqrt(v); },
               [](double v) { return -0.5 / (v * std::sqrt(v)); });
}

Var exp(Var x) {
  return unary("exp", x, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}

Var cos(Var x) {
  return unary("cos", x, [](double v) { return std::cos(v); }, [](double v) { return -std::sin(v); });
}

Var sin(Var x) {
  return unary("sin", x, [](double v) { return std::sin(v); }, [](double v) { return std::cos(v); });
}

Var gelu(Var x) {
  return unary(
      "gelu", x, [](double v) { return 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)); },
      [](double v) {
        const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + v * pdf;
      });
}

Var relu(Var x) {
  return unary("relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var x) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = 1.0 / (1.0 + std::exp(-xv[i]));
  Tensor saved = y;
  return x.tape().record("sigmoid", std::move(y), {x}, [x, saved](Tape& t, const Tensor& g) {
    Tensor dx = g;
    for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= saved[i] * (1.0 - saved[i]);
    t.accumulate(x, dx);
  });
}

Var softmax(Var x) {
  const std::size_t n = last_dim(x);
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t row = 0; row < xv.size() / n; ++row) {
    const std::size_t o = row * n;
    double m = xv[o];
    for (std::size_t j = 1; j < n; ++j) m = std::max(m, xv[o + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[o + j] = std::exp(xv[o + j] - m);
      z += y[o + j];
    }
    for (std::size_t j = 0; j < n; ++j) y[o + j] /= z;
  }
  Tensor saved = y;
  return x.tape().record("softmax", std::move(y), {x}, [x, saved, n](Tape& t, const Tensor& g) {
    Tensor dx(saved.shape());
    for (std::size_t row = 0; row < saved.size() / n; ++row) {
      const std::size_t o = row * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[o + j] * saved[o + j];
      for (std::size_t j = 0; j < n; ++j) dx[o + j] = saved[o + j] * (g[o + j] - dot);
    }
    t.accumulate(x, dx);
  });
}

Var activation(Var x, Activation kind) {
  switch (kind) {
    case Activation::kGelu: return gelu(x);
    case Activation::kRelu: return relu(x);
    case Activation::kSigmoid: return sigmoid(x);
    case Activation::kSoftmax: return softmax(x);
  }
  throw UsageError("unknown activation");
}

Var linear(Var x, Var w, Var bias) {
  const Shape ws = w.shape();
  if (ws.size() != 2) throw DimensionError("linear: weight must be [C_in, C_out], got " + shape_str(ws));
  const std::size_t cin = ws[0], cout = ws[1];
  if (last_dim(x) != cin) {
    throw DimensionError("linear: input channels " + std::to_string(last_dim(x)) + " != weight rows " +
                         std::to_string(cin));
  }
  const std::size_t rows = x.value().size() / cin;
  Shape out_shape = x.shape();
  out_shape.back() = cout;
  Tensor y(out_shape);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  parallel_for(rows, [&](std::size_t r) {
    double* out = &y[r * cout];
    for (std::size_t i = 0; i < cin; ++i) {
      const double a = xv[r * cin + i];
      const double* wr = &wv[i * cout];
      for (std::size_t o = 0; o < cout; ++o) out[o] += a * wr[o];
    }
  });
  Var out = x.tape().record("linear", std::move(y), {x, w}, [x, w, rows, cin, cout](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(x);
    const Tensor& wv = t.value(w);
    if (t.needs_grad(x)) {
      Tensor dx(xv.shape());
      parallel_for(rows, [&](std::size_t r) {
        for (std::size_t i = 0; i < cin; ++i) {
          double acc = 0.0;
          for (std::size_t o = 0; o < cout; ++o) acc += g[r * cout + o] * wv[i * cout + o];
          dx[r * cin + i] = acc;
        }
      });
      t.accumulate(x, dx);
    }
    if (t.needs_grad(w)) {
      Tensor dw(wv.shape());
      parallel_for(cin, [&](std::size_t i) {
        for (std::size_t r = 0; r < rows; ++r) {
          const double a = xv[r * cin + i];
          for (std::size_t o = 0; o < cout; ++o) dw[i * cout + o] += a * g[r * cout + o];
        }
      });
      t.accumulate(w, dw);
    }
  });
  return bias.valid() ? add_bias(out, bias) : out;
}

namespace {

struct ConvGeom {
  std::size_t B, H, W, cin, cout, kh, kw, dil, stride, pad_h, pad_w, Ho, Wo;
};

ConvGeom conv_geom(const Shape& xs, std::size_t kh, std::size_t kw, std::size_t cin, std::size_t cout,
                   std::size_t dil, std::size_t stride, const char* op) {
  if (xs.size() != 4) throw DimensionError(std::string(op) + ": input must be [B,H,W,C], got " + shape_str(xs));
  if (dil < 1 || stride < 1) throw DimensionError(std::string(op) + ": dilation and stride must be >= 1");
  if (kh % 2 == 0 || kw % 2 == 0) throw DimensionError(std::string(op) + ": kernel extents must be odd");
  if (xs[3] != cin) {
    throw DimensionError(std::string(op) + ": input has " + std::to_string(xs[3]) + " channels, kernel expects " +
                         std::to_string(cin));
  }
  ConvGeom g{xs[0], xs[1], xs[2], cin, cout, kh, kw, dil, stride, dil * (kh - 1) / 2, dil * (kw - 1) / 2, 0, 0};
  if (dil * (kh - 1) + 1 > g.H + 2 * g.pad_h || dil * (kw - 1) + 1 > g.W + 2 * g.pad_w) {
    throw DimensionError(std::string(op) + ": kernel larger than padded input");
  }
  g.Ho = (g.H + stride - 1) / stride;
  g.Wo = (g.W + stride - 1) / stride;
  return g;
}

// Input coordinate for output o and tap k, or -1 when it falls in the padding.
inline std::ptrdiff_t tap(std::size_t o, std::size_t k, const ConvGeom& g, std::size_t pad, std::size_t extent) {
  std::ptrdiff_t p = static_cast<std::ptrdiff_t>(o * g.stride + k * g.dil) - static_cast<std::ptrdiff_t>(pad);
  return (p < 0 || p >= static_cast<std::ptrdiff_t>(extent)) ? -1 : p;
}

}  // namespace

Var conv2d(Var x, Var w, Var bias, ConvOptions opt) {
  const Shape ws = w.shape();
  if (ws.size() != 4) throw DimensionError("conv2d: weight must be [kh,kw,C_in,C_out], got " + shape_str(ws));
  const ConvGeom G = conv_geom(x.shape(), ws[0], ws[1], ws[2], ws[3], opt.dilation, opt.stride, "conv2d");
  Tensor y(Shape{G.B, G.Ho, G.Wo, G.cout});
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  parallel_for(G.B * G.Ho, [&](std::size_t job) {
    const std::size_t b = job / G.Ho, oy = job % G.Ho;
    for (std::size_t ox = 0; ox < G.Wo; ++ox) {
      double* out = &y[((b * G.Ho + oy) * G.Wo + ox) * G.cout];
      for (std::size_t ky = 0; ky < G.kh; ++ky) {
        auto iy = tap(oy, ky, G, G.pad_h, G.H);
        if (iy < 0) continue;
        for (std::size_t kx = 0; kx < G.kw; ++kx) {
          auto ix = tap(ox, kx, G, G.pad_w, G.W);
          if (ix < 0) continue;
          const double* in = &xv[((b * G.H + iy) * G.W + ix) * G.cin];
          const double* wk = &wv[(ky * G.kw + kx) * G.cin * G.cout];
          for (std::size_t ci = 0; ci < G.cin; ++ci) {
            const double a = in[ci];
            const double* wr = wk + ci * G.cout;
            for (std::size_t co = 0; co < G.cout; ++co) out[co] += a * wr[co];
          }
        }
      }
    }
  });
  Var out = x.tape().record("conv2d", std::move(y), {x, w}, [x, w, G](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(x);
    const Tensor& wv = t.value(w);
    if (t.needs_grad(x)) {
      Tensor dx(xv.shape());
      parallel_for(G.B, [&](std::size_t b) {
        for (std::size_t oy = 0; oy < G.Ho; ++oy)
          for (std::size_t ox = 0; ox < G.Wo; ++ox) {
            const double* go = &g[((b * G.Ho + oy) * G.Wo + ox) * G.cout];
            for (std::size_t ky = 0; ky < G.kh; ++ky) {
              auto iy = tap(oy, ky, G, G.pad_h, G.H);
              if (iy < 0) continue;
              for (std::size_t kx = 0; kx < G.kw; ++kx) {
                auto ix = tap(ox, kx, G, G.pad_w, G.W);
                if (ix < 0) continue;
                double* din = &dx[((b * G.H + iy) * G.W + ix) * G.cin];
                const double* wk = &wv[(ky * G.kw + kx) * G.cin * G.cout];
                for (std::size_t ci = 0; ci < G.cin; ++ci) {
                  double acc = 0.0;
                  const double* wr = wk + ci * G.cout;
                  for (std::size_t co = 0; co < G.cout; ++co) acc += go[co] * wr[co];
                  din[ci] += acc;
                }
              }
            }
          }
      });
      t.accumulate(x, dx);
    }
    if (t.needs_grad(w)) {
      // One partial per batch item, reduced in batch order.
      std::vector<Tensor> partial(G.B, Tensor(wv.shape()));
      parallel_for(G.B, [&](std::size_t b) {
        Tensor& dw = partial[b];
        for (std::size_t oy = 0; oy < G.Ho; ++oy)
          for (std::size_t ox = 0; ox < G.Wo; ++ox) {
            const double* go = &g[((b * G.Ho + oy) * G.Wo + ox) * G.cout];
            for (std::size_t ky = 0; ky < G.kh; ++ky) {
              auto iy = tap(oy, ky, G, G.pad_h, G.H);
              if (iy < 0) continue;
              for (std::size_t kx = 0; kx < G.kw; ++kx) {
                auto ix = tap(ox, kx, G, G.pad_w, G.W);
                if (ix < 0) continue;
                const double* in = &xv[((b * G.H + iy) * G.W + ix) * G.cin];
                double* dwk = &dw[(ky * G.kw + kx) * G.cin * G.cout];
                for (std::size_t ci = 0; ci < G.cin; ++ci) {
                  const double a = in[ci];
                  double* dwr = dwk + ci * G.cout;
                  for (std::size_t co = 0; co < G.cout; ++co) dwr[co] += a * go[co];
                }
              }
            }
          }
      });
      Tensor dw(wv.shape());
      for (const auto& p : partial)
        for (std::size_t i = 0; i < dw.size(); ++i) dw[i] += p[i];
      t.accumulate(w, dw);
    }
  });
  return bias.valid() ? add_bias(out, bias) : out;
}

Var depthwise_conv2d(Var x, Var w, Var bias, std::size_t dilation) {
  const Shape ws = w.shape();
  if (ws.size() != 3) throw DimensionError("depthwise_conv2d: weight must be [kh,kw,C], got " + shape_str(ws));
  const ConvGeom G = conv_geom(x.shape(), ws[0], ws[1], ws[2], ws[2], dilation, 1, "depthwise_conv2d");
  const std::size_t C = G.cin;
  Tensor y(x.shape());
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  parallel_for(G.B * G.H, [&](std::size_t job) {
    const std::size_t b = job / G.H, oy = job % G.H;
    for (std::size_t ox = 0; ox < G.W; ++ox) {
      double* out = &y[((b * G.H + oy) * G.W + ox) * C];
      for (std::size_t ky = 0; ky < G.kh; ++ky) {
        auto iy = tap(oy, ky, G, G.pad_h, G.H);
        if (iy < 0) continue;
        for (std::size_t kx = 0; kx < G.kw; ++kx) {
          auto ix = tap(ox, kx, G, G.pad_w, G.W);
          if (ix < 0) continue;
          const double* in = &xv[((b * G.H + iy) * G.W + ix) * C];
          const double* wk = &wv[(ky * G.kw + kx) * C];
          for (std::size_t c = 0; c < C; ++c) out[c] += in[c] * wk[c];
        }
      }
    }
  });
  Var out = x.tape().record("depthwise_conv2d", std::move(y), {x, w}, [x, w, G](Tape& t, const Tensor& g) {
    const std::size_t C = G.cin;
    const Tensor& xv = t.value(x);
    const Tensor& wv = t.value(w);
    const bool need_x = t.needs_grad(x), need_w = t.needs_grad(w);
    Tensor dx = need_x ? Tensor(xv.shape()) : Tensor();
    std::vector<Tensor> partial(need_w ? G.B : 0, Tensor(wv.shape()));
    parallel_for(G.B, [&](std::size_t b) {
      for (std::size_t oy = 0; oy < G.H; ++oy)
        for (std::size_t ox = 0; ox < G.W; ++ox) {
          const double* go = &g[((b * G.H + oy) * G.W + ox) * C];
          for (std::size_t ky = 0; ky < G.kh; ++ky) {
            auto iy = tap(oy, ky, G, G.pad_h, G.H);
            if (iy < 0) continue;
            for (std::size_t kx = 0; kx < G.kw; ++kx) {
              auto ix = tap(ox, kx, G, G.pad_w, G.W);
              if (ix < 0) continue;
              const std::size_t in_off = ((b * G.H + iy) * G.W + ix) * C;
              const std::size_t w_off = (ky * G.kw + kx) * C;
              for (std::size_t c = 0; c < C; ++c) {
                if (need_x) dx[in_off + c] += go[c] * wv[w_off + c];
                if (need_w) partial[b][w_off + c] += go[c] * xv[in_off + c];
              }
            }
          }
        }
    });
    if (need_x) t.accumulate(x, dx);
    if (need_w) {
      Tensor dw(wv.shape());
      for (const auto& p : partial)
        for (std::size_t i = 0; i < dw.size(); ++i) dw[i] += p[i];
      t.accumulate(w, dw);
    }
  });
  return bias.valid() ? add_bias(out, bias) : out;
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const std::size_t C = last_dim(x);
  if (gamma.value().size() != C || beta.value().size() != C) {
    throw DimensionError("layer_norm: gamma/beta must have " + std::to_string(C) + " values");
  }
  if (!(eps > 0.0)) throw UsageError("layer_norm: eps must be positive");
  const Tensor& xv = x.value();
  const std::size_t rows = xv.size() / C;
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = &xv[r * C];
    double mu = 0.0;
    for (std::size_t c = 0; c < C; ++c) mu += in[c];
    mu /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) var += (in[c] - mu) * (in[c] - mu);
    var /= static_cast<double>(C);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < C; ++c) xhat[r * C + c] = (in[c] - mu) * inv_std[r];
  }
  Tensor y = xhat;
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = y[i] * gv[i % C] + bv[i % C];
  return x.tape().record(
      "layer_norm", std::move(y), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), C, rows](Tape& t, const Tensor& g) {
        const Tensor& gv = t.value(gamma);
        if (t.needs_grad(x)) {
          Tensor dx(xhat.shape());
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
              const double d = g[r * C + c] * gv[c];
              mean_d += d;
              mean_dx += d * xhat[r * C + c];
            }
            mean_d /= static_cast<double>(C);
            mean_dx /= static_cast<double>(C);
            for (std::size_t c = 0; c < C; ++c) {
              const double d = g[r * C + c] * gv[c];
              dx[r * C + c] = inv_std[r] * (d - mean_d - xhat[r * C + c] * mean_dx);
            }
          }
          t.accumulate(x, dx);
        }
        if (t.needs_grad(gamma) || t.needs_grad(beta)) {
          Tensor dg(t.value(gamma).shape()), db(t.value(beta).shape());
          for (std::size_t i = 0; i < g.size(); ++i) {
            dg[i % C] += g[i] * xhat[i];
            db[i % C] += g[i];
          }
          t.accumulate(gamma, dg);
          t.accumulate(beta, db);
        }
      });
}

Var bmm(Var a, Var b) {
  const Shape as = a.shape();
  const Shape bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[1]) {
    throw DimensionError("bmm: incompatible shapes " + shape_str(as) + " x " + shape_str(bs));
  }
  const std::size_t B = as[0], m = as[1], k = as[2], n = bs[2];
  Tensor y(Shape{B, m, n});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  parallel_for(B * m, [&](std::size_t job) {
    const std::size_t bi = job / m, i = job % m;
    double* out = &y[(bi * m + i) * n];
    for (std::size_t p = 0; p < k; ++p) {
      const double s = av[(bi * m + i) * k + p];
      const double* br = &bv[(bi * k + p) * n];
      for (std::size_t j = 0; j < n; ++j) out[j] += s * br[j];
    }
  });
  return a.tape().record("bmm", std::move(y), {a, b}, [a, b, B, m, k, n](Tape& t, const Tensor& g) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    if (t.needs_grad(a)) {
      Tensor da(av.shape());
      parallel_for(B * m, [&](std::size_t job) {
        const std::size_t bi = job / m, i = job % m;
        const double* gr = &g[(bi * m + i) * n];
        for (std::size_t p = 0; p < k; ++p) {
          const double* br = &bv[(bi * k + p) * n];
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += gr[j] * br[j];
          da[(bi * m + i) * k + p] = acc;
        }
      });
      t.accumulate(a, da);
    }
    if (t.needs_grad(b)) {
      Tensor db(bv.shape());
      parallel_for(B * k, [&](std::size_t job) {
        const std::size_t bi = job / k, p = job % k;
        double* out = &db[(bi * k + p) * n];
        for (std::size_t i = 0; i < m; ++i) {
          const double s = av[(bi * m + i) * k + p];
          const double* gr = &g[(bi * m + i) * n];
          for (std::size_t j = 0; j < n; ++j) out[j] += s * gr[j];
        }
      });
      t.accumulate(b, db);
    }
  });
}

Var matmul(Var a, Var b) {
  const Shape as = a.shape();
  const Shape bs = b.shape();
  if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(as) + " x " + shape_str(bs));
  }
  Var r = bmm(reshape(a, {1, as[0], as[1]}), reshape(b, {1, bs[0], bs[1]}));
  return reshape(r, {as[0], bs[1]});
}

Var reshape(Var x, Shape shape) {
  Tensor y = x.value().reshaped(std::move(shape));
  return x.tape().record("reshape", std::move(y), {x}, [x](Tape& t, const Tensor& g) {
    t.accumulate(x, g.reshaped(t.value(x).shape()));
  });
}

Var gather(Var x, std::vector<std::int64_t> index, Shape out_shape) {
  if (shape_size(out_shape) != index.size()) throw DimensionError("gather: index count does not match output shape");
  const Tensor& xv = x.value();
  Tensor y(out_shape);
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto src = index[i];
    if (src >= static_cast<std::int64_t>(xv.size())) throw DimensionError("gather: index out of range");
    if (src >= 0) y[i] = xv[static_cast<std::size_t>(src)];
  }
  return x.tape().record("gather", std::move(y), {x}, [x, index = std::move(index)](Tape& t, const Tensor& g) {
    Tensor dx(t.value(x).shape());
    for (std::size_t i = 0; i < index.size(); ++i)
      if (index[i] >= 0) dx[static_cast<std::size_t>(index[i])] += g[i];
    t.accumulate(x, dx);
  });
}

Var permute(Var x, const std::vector<std::size_t>& axes) {
  const Shape s = x.shape();
  if (axes.size() != s.size()) throw DimensionError("permute: axis count mismatch");
  Shape out(s.size());
  std::vector<std::size_t> in_stride(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) in_stride[i - 1] = in_stride[i] * s[i];
  for (std::size_t i = 0; i < axes.size(); ++i) out[i] = s.at(axes[i]);
  std::vector<std::int64_t> index(x.value().size());
  std::vector<std::size_t> ctr(s.size(), 0);
  for (std::size_t i = 0; i < index.size(); ++i) {
    std::size_t src = 0;
    for (std::size_t d = 0; d < s.size(); ++d) src += ctr[d] * in_stride[axes[d]];
    index[i] = static_cast<std::int64_t>(src);
    for (std::size_t d = s.size(); d-- > 0;) {
      if (++ctr[d] < out[d]) break;
      ctr[d] = 0;
    }
  }
  return gather(x, std::move(index), std::move(out));
}

Var concat_last(std::span<const Var> parts) {
  if (parts.empty()) throw UsageError("concat_last: no inputs");
  Shape lead = parts[0].shape();
  lead.pop_back();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    Shape l = p.shape();
    widths.push_back(l.back());
    total += l.back();
    l.pop_back();
    if (l != lead) throw DimensionError("concat_last: leading shapes differ");
  }
  const std::size_t rows = shape_size(lead);
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor y(out_shape);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < widths[k]; ++c) y[r * total + off + c] = pv[r * widths[k] + c];
    off += widths[k];
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape().record("concat_last", std::move(y), parts, [inputs, widths, rows, total](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      if (t.needs_grad(inputs[k])) {
        Tensor d(t.value(inputs[k]).shape());
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < widths[k]; ++c) d[r * widths[k] + c] = g[r * total + off + c];
        t.accumulate(inputs[k], d);
      }
      off += widths[k];
    }
  });
}

Var concat_last(std::initializer_list<Var> parts) {
  return concat_last(std::span<const Var>(parts.begin(), parts.size()));
}

Var slice_last(Var x, std::size_t begin, std::size_t count) {
  const std::size_t C = last_dim(x);
  if (count == 0 || begin + count > C) throw DimensionError("slice_last: range out of bounds");
  const std::size_t rows = x.value().size() / C;
  Shape out = x.shape();
  out.back() = count;
  std::vector<std::int64_t> index(rows * count);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < count; ++c) index[r * count + c] = static_cast<std::int64_t>(r * C + begin + c);
  return gather(x, std::move(index), std::move(out));
}

Var slice_axis0(Var x, std::size_t begin, std::size_t count) {
  const Shape s = x.shape();
  if (count == 0 || begin + count > s[0]) throw DimensionError("slice_axis0: range out of bounds");
  const std::size_t inner = x.value().size() / s[0];
  Shape out = s;
  out[0] = count;
  std::vector<std::int64_t> index(count * inner);
  std::iota(index.begin(), index.end(), static_cast<std::int64_t>(begin * inner));
  return gather(x, std::move(index), std::move(out));
}

std::vector<std::int64_t> pixel_shuffle_index(const Shape& s, std::size_t r, Shape& out_shape) {
  if (s.size() < 3) throw DimensionError("pixel_shuffle: input must be [..,H,W,C]");
  const std::size_t rank = s.size();
  const std::size_t H = s[rank - 3], W = s[rank - 2], Cin = s[rank - 1];
  if (r == 0 || Cin % (r * r) != 0) {
    throw DimensionError("pixel_shuffle: channels " + std::to_string(Cin) + " not divisible by r^2");
  }
  const std::size_t C = Cin / (r * r);
  std::size_t B = 1;
  for (std::size_t i = 0; i + 3 < rank; ++i) B *= s[i];
  out_shape = s;
  out_shape[rank - 3] = H * r;
  out_shape[rank - 2] = W * r;
  out_shape[rank - 1] = C;
  std::vector<std::int64_t> index(shape_size(out_shape));
  const std::size_t Ho = H * r, Wo = W * r;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t oy = 0; oy < Ho; ++oy)
      for (std::size_t ox = 0; ox < Wo; ++ox)
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t y = oy / r, i = oy % r, x = ox / r, j = ox % r;
          const std::size_t k = (i * r + j) * C + c;
          index[((b * Ho + oy) * Wo + ox) * C + c] = static_cast<std::int64_t>(((b * H + y) * W + x) * Cin + k);
        }
  return index;
}

Var pixel_shuffle(Var x, std::size_t r) {
  Shape out;
  auto index = pixel_shuffle_index(x.shape(), r, out);
  return gather(x, std::move(index), std::move(out));
}

Var pixel_unshuffle(Var x, std::size_t r) {
  const Shape s = x.shape();
  if (s.size() < 3) throw DimensionError("pixel_unshuffle: input must be [..,H,W,C]");
  const std::size_t rank = s.size();
  if (r == 0 || s[rank - 3] % r || s[rank - 2] % r) throw DimensionError("pixel_unshuffle: extents not divisible by r");
  Shape in = s;
  in[rank - 3] /= r;
  in[rank - 2] /= r;
  in[rank - 1] *= r * r;
  Shape check;
  auto fwd = pixel_shuffle_index(in, r, check);
  // The shuffle is a permutation; invert it.
  std::vector<std::int64_t> index(fwd.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) index[static_cast<std::size_t>(fwd[i])] = static_cast<std::int64_t>(i);
  return gather(x, std::move(index), std::move(in));
}

Var global_avg_pool(Var x) {
  const SpatialLayout L = spatial_layout(x.shape());
  if (x.shape().size() < 3) throw DimensionError("global_avg_pool: input must be [..,H,W,C]");
  Shape out = x.shape();
  out[out.size() - 3] = 1;
  out[out.size() - 2] = 1;
  const std::size_t HW = L.height * L.width, C = L.channels;
  const Tensor& xv = x.value();
  Tensor y(out);
  for (std::size_t b = 0; b < L.batch; ++b) {
    for (std::size_t p = 0; p < HW; ++p)
      for (std::size_t c = 0; c < C; ++c) y[b * C + c] += xv[(b * HW + p) * C + c];
    for (std::size_t c = 0; c < C; ++c) y[b * C + c] /= static_cast<double>(HW);
  }
  return x.tape().record("global_avg_pool", std::move(y), {x}, [x, L](Tape& t, const Tensor& g) {
    const std::size_t HW = L.height * L.width, C = L.channels;
    Tensor dx(t.value(x).shape());
    for (std::size_t b = 0; b < L.batch; ++b)
      for (std::size_t p = 0; p < HW; ++p)
        for (std::size_t c = 0; c < C; ++c) dx[(b * HW + p) * C + c] = g[b * C + c] / static_cast<double>(HW);
    t.accumulate(x, dx);
  });
}

std::pair<Var, Var> fft2(Var x) {
  ComplexSpectrum s = mocha::fft2(x.value());
  const SpatialLayout L = spatial_layout(x.shape());
  const double hw = static_cast<double>(L.height * L.width);
  Tensor zeros(x.shape());
  Var re = x.tape().record("fft2_re", std::move(s.re), {x}, [x, hw, zeros](Tape& t, const Tensor& g) {
    Tensor dx = mocha::ifft2_real(ComplexSpectrum(g, zeros));
    for (auto& v : dx.vec()) v *= hw;
    t.accumulate(x, dx);
  });
  Var im = x.tape().record("fft2_im", std::move(s.im), {x}, [x, hw, zeros](Tape& t, const Tensor& g) {
    Tensor dx = mocha::ifft2_real(ComplexSpectrum(zeros, g));
    for (auto& v : dx.vec()) v *= hw;
    t.accumulate(x, dx);
  });
  return {re, im};
}

Var ifft2_real(Var re, Var im) {
  require_same_shape(re, im, "ifft2_real");
  Tensor y = mocha::ifft2_real(ComplexSpectrum(re.value(), im.value()));
  const SpatialLayout L = spatial_layout(re.shape());
  const double inv_hw = 1.0 / static_cast<double>(L.height * L.width);
  return re.tape().record("ifft2_real", std::move(y), {re, im}, [re, im, inv_hw](Tape& t, const Tensor& g) {
    ComplexSpectrum s = mocha::fft2(g);
    for (auto& v : s.re.vec()) v *= inv_hw;
    for (auto& v : s.im.vec()) v *= inv_hw;
    t.accumulate(re, s.re);
    t.accumulate(im, s.im);
  });
}

Var amplitude(Var re, Var im) {
  require_same_shape(re, im, "amplitude");
  Tensor a = ComplexSpectrum(re.value(), im.value()).amplitude();
  Tensor saved = a;
  return re.tape().record("amplitude", std::move(a), {re, im}, [re, im, saved](Tape& t, const Tensor& g) {
    const Tensor& rv = t.value(re);
    const Tensor& iv = t.value(im);
    Tensor dre(rv.shape()), dim(rv.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (saved[i] == 0.0) continue;
      dre[i] = g[i] * rv[i] / saved[i];
      dim[i] = g[i] * iv[i] / saved[i];
    }
    t.accumulate(re, dre);
    t.accumulate(im, dim);
  });
}

Var phase(Var re, Var im) {
  require_same_shape(re, im, "phase");
  Tensor p = ComplexSpectrum(re.value(), im.value()).phase();
  return re.tape().record("phase", std::move(p), {re, im}, [re, im](Tape& t, const Tensor& g) {
    const Tensor& rv = t.value(re);
    const Tensor& iv = t.value(im);
    Tensor dre(rv.shape()), dim(rv.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double denom = rv[i] * rv[i] + iv[i] * iv[i] + kPhaseEps;
      dre[i] = -g[i] * iv[i] / denom;
      dim[i] = g[i] * rv[i] / denom;
    }
    t.accumulate(re, dre);
    t.accumulate(im, dim);
  });
}

}  // namespace mocha::ops
