#include "mocha/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "mocha/errors.hpp"
#include "mocha/parallel.hpp"

namespace mocha::synth {

namespace {

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

std::size_t reflect101(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto last = static_cast<std::ptrdiff_t>(n) - 1;
  while (i < 0 || i > last) i = i < 0 ? -i : 2 * last - i;
  return static_cast<std::size_t>(i);
}

// Maps subsample (a, b) of sensor pixel (i, j) into field cells.
struct PoseMap {
  double c, s, step, fy0, fx0, my, mx, ty, tx, ky, kx;
  PoseMap(const CapturePose& pose, std::size_t mh, std::size_t mw, double field_h, double field_w, double cell_per_px)
      : c(std::cos(pose.rotation)),
        s(std::sin(pose.rotation)),
        step(cell_per_px / pose.scale),
        fy0(field_h / 2),
        fx0(field_w / 2),
        my(mh / 2.0),
        mx(mw / 2.0),
        ty(pose.ty),
        tx(pose.tx),
        ky(pose.tilt_y / my),
        kx(pose.tilt_x / mx) {}
  void operator()(double sy, double sx, double& py, double& px) const {
    const double dy = sy - my + ty, dx = sx - mx + tx;
    const double local = step * (1.0 + ky * (sy - my) + kx * (sx - mx));
    py = fy0 + local * (c * dy - s * dx);
    px = fx0 + local * (s * dy + c * dx);
  }
};

std::size_t cell(double p, std::size_t extent) {
  const double f = std::floor(p);
  if (f < 0 || f >= static_cast<double>(extent))
    throw ConfigError("capture: sampled region leaves the screen field (coordinate " + std::to_string(p) + ")");
  return static_cast<std::size_t>(f);
}

void require_rgb(const Tensor& t, const char* what) {
  if (t.rank() != 3 || t.dim(2) != 3) throw DimensionError(std::string(what) + ": expected [H,W,3], got " + shape_str(t.shape()));
}

}  // namespace

void CapturePose::validate() const {
  if (!(scale > 0.5 && scale < 2.0)) throw ConfigError("pose scale must lie in (0.5, 2.0)");
  if (!(std::abs(rotation) <= 0.1)) throw ConfigError("pose rotation must satisfy |r| <= 0.1 rad");
  if (!std::isfinite(tx) || !std::isfinite(ty)) throw ConfigError("pose translation must be finite");
  if (!(std::abs(tilt_y) < 0.25 && std::abs(tilt_x) < 0.25)) throw ConfigError("pose tilt must satisfy |k| < 0.25");
}

Tensor render_screen(const Tensor& content, std::size_t pitch) {
  require_rgb(content, "render_screen");
  if (pitch < 2) throw ConfigError("render_screen: pitch must be >= 2");
  const std::size_t H = content.dim(0), W = content.dim(1), FH = H * pitch, FW = W * pitch;
  // Coverage of stripe third ch by cell column q: overlap of [q/p, (q+1)/p) with [ch/3, (ch+1)/3), in cell widths.
  std::vector<std::array<double, 3>> cover(pitch);
  for (std::size_t q = 0; q < pitch; ++q)
    for (int ch = 0; ch < 3; ++ch) {
      const double lo = std::max(double(q) / pitch, ch / 3.0), hi = std::min(double(q + 1) / pitch, (ch + 1) / 3.0);
      cover[q][ch] = std::max(0.0, hi - lo) * pitch;
    }
  Tensor field({FH, FW, 3});
  double* f = field.data().data();
  for (std::size_t y = 0; y < FH; ++y)
    for (std::size_t x = 0; x < FW; ++x) {
      const double* px = &content[((y / pitch) * W + x / pitch) * 3];
      for (int ch = 0; ch < 3; ++ch) f[(y * FW + x) * 3 + ch] = px[ch] * cover[x % pitch][ch];
    }
  return field;
}

Tensor capture_cfa(const Tensor& field, const CapturePose& pose, std::size_t mh, std::size_t mw, std::size_t pitch,
                   std::size_t subsamples, const std::array<double, 3>& wb_gains) {
  require_rgb(field, "capture_cfa");
  pose.validate();
  if (subsamples == 0) throw ConfigError("capture_cfa: subsamples must be positive");
  const std::size_t FH = field.dim(0), FW = field.dim(1);
  const PoseMap map(pose, mh, mw, FH, FW, static_cast<double>(pitch));
  Tensor mosaic({mh, mw});
  const double norm = 3.0 / static_cast<double>(subsamples * subsamples);
  parallel_for(mh, [&](std::size_t i) {
    for (std::size_t j = 0; j < mw; ++j) {
      const int ch = cfa_color(i, j);
      double acc = 0.0;
      for (std::size_t a = 0; a < subsamples; ++a)
        for (std::size_t b = 0; b < subsamples; ++b) {
          double py, px;
          map(i + (a + 0.5) / subsamples, j + (b + 0.5) / subsamples, py, px);
          acc += field[(cell(py, FH) * FW + cell(px, FW)) * 3 + ch];
        }
      mosaic[i * mw + j] = clamp01(acc * norm / wb_gains[ch]);
    }
  });
  return mosaic;
}

Tensor capture_clean(const Tensor& content, const CapturePose& pose, std::size_t mh, std::size_t mw,
                     std::size_t pitch, std::size_t subsamples) {
  require_rgb(content, "capture_clean");
  pose.validate();
  const std::size_t H = content.dim(0), W = content.dim(1);
  // Identical sample positions as capture_cfa, expressed in field cells then reduced to content pixels.
  const PoseMap map(pose, mh, mw, double(H * pitch), double(W * pitch), static_cast<double>(pitch));
  Tensor out({mh, mw, 3});
  const double norm = 1.0 / static_cast<double>(subsamples * subsamples);
  parallel_for(mh, [&](std::size_t i) {
    for (std::size_t j = 0; j < mw; ++j) {
      double acc[3] = {0, 0, 0};
      for (std::size_t a = 0; a < subsamples; ++a)
        for (std::size_t b = 0; b < subsamples; ++b) {
          double py, px;
          map(i + (a + 0.5) / subsamples, j + (b + 0.5) / subsamples, py, px);
          const std::size_t cy = cell(py, H * pitch) / pitch, cx = cell(px, W * pitch) / pitch;
          for (int ch = 0; ch < 3; ++ch) acc[ch] += content[(cy * W + cx) * 3 + ch];
        }
      for (int ch = 0; ch < 3; ++ch) out[(i * mw + j) * 3 + ch] = acc[ch] * norm;
    }
  });
  return out;
}

double gamma_encode(double linear) { return std::pow(std::max(linear, 0.0), 1.0 / 2.2); }
double gamma_decode(double encoded) { return std::pow(std::max(encoded, 0.0), 2.2); }

Tensor demosaic_bilinear(const Tensor& bayer) {
  if (bayer.rank() != 2) throw DimensionError("demosaic: expected a [H,W] mosaic");
  const std::size_t H = bayer.dim(0), W = bayer.dim(1);
  static constexpr double k[3] = {1.0, 2.0, 1.0};
  Tensor rgb({H, W, 3});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const int own = cfa_color(y, x);
      double num[3] = {0, 0, 0}, den[3] = {0, 0, 0};
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const std::size_t yy = reflect101(std::ptrdiff_t(y) + dy, H), xx = reflect101(std::ptrdiff_t(x) + dx, W);
          const int c = cfa_color(yy, xx);
          const double w = k[dy + 1] * k[dx + 1];
          num[c] += w * bayer[yy * W + xx];
          den[c] += w;
        }
      for (int c = 0; c < 3; ++c)
        rgb[(y * W + x) * 3 + c] = c == own ? bayer[y * W + x] : (den[c] > 0 ? num[c] / den[c] : 0.0);
    }
  return rgb;
}

Tensor isp_pipeline(const Tensor& bayer, const IspParams& isp) {
  if (bayer.rank() != 2) throw DimensionError("isp_pipeline: expected a [H,W] mosaic");
  const std::size_t H = bayer.dim(0), W = bayer.dim(1);
  Tensor balanced = bayer;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) balanced[y * W + x] *= isp.wb_gains[cfa_color(y, x)];
  Tensor rgb = demosaic_bilinear(balanced);
  Tensor out({H, W, 3});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = rgb[(y * W + x) * 3 + c];
        double sharpened = v;
        if (isp.sharpen != 0.0) {
          double blur = 0.0;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx)
              blur += rgb[(reflect101(std::ptrdiff_t(y) + dy, H) * W + reflect101(std::ptrdiff_t(x) + dx, W)) * 3 + c];
          sharpened = v + isp.sharpen * (v - blur / 9.0);
        }
        out[(y * W + x) * 3 + c] = clamp01(gamma_encode(clamp01(sharpened)));
      }
  return out;
}

Tensor pack_rggb(const Tensor& bayer) {
  if (bayer.rank() == 3) {
    std::vector<Tensor> frames;
    for (std::size_t t = 0; t < bayer.dim(0); ++t) frames.push_back(pack_rggb(frame(bayer, t)));
    return stack_frames(frames);
  }
  if (bayer.rank() != 2 || bayer.dim(0) % 2 || bayer.dim(1) % 2)
    throw DimensionError("pack_rggb: expected a mosaic with even extents, got " + shape_str(bayer.shape()));
  const std::size_t H = bayer.dim(0) / 2, W = bayer.dim(1) / 2, W2 = bayer.dim(1);
  Tensor out({H, W, 4});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      double* o = &out[(y * W + x) * 4];
      o[0] = bayer[(2 * y) * W2 + 2 * x];
      o[1] = bayer[(2 * y) * W2 + 2 * x + 1];
      o[2] = bayer[(2 * y + 1) * W2 + 2 * x];
      o[3] = bayer[(2 * y + 1) * W2 + 2 * x + 1];
    }
  return out;
}

Tensor unpack_rggb(const Tensor& packed) {
  if (packed.rank() == 4) {
    std::vector<Tensor> frames;
    for (std::size_t t = 0; t < packed.dim(0); ++t) frames.push_back(unpack_rggb(frame(packed, t)));
    return stack_frames(frames);
  }
  if (packed.rank() != 3 || packed.dim(2) != 4) throw DimensionError("unpack_rggb: expected [H,W,4]");
  const std::size_t H = packed.dim(0), W = packed.dim(1), W2 = 2 * W;
  Tensor out({2 * H, 2 * W});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      const double* p = &packed[(y * W + x) * 4];
      out[(2 * y) * W2 + 2 * x] = p[0];
      out[(2 * y) * W2 + 2 * x + 1] = p[1];
      out[(2 * y + 1) * W2 + 2 * x] = p[2];
      out[(2 * y + 1) * W2 + 2 * x + 1] = p[3];
    }
  return out;
}

Tensor remosaic(const Tensor& rgb) {
  require_rgb(rgb, "remosaic");
  const std::size_t H = rgb.dim(0), W = rgb.dim(1);
  Tensor out({H, W});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) out[y * W + x] = rgb[(y * W + x) * 3 + cfa_color(y, x)];
  return out;
}

Tensor generate_content(Rng& rng, std::size_t h, std::size_t w) {
  constexpr double kChroma = 0.1;
  Tensor img({h, w, 3});
  // Base: two-colour linear gradient.
  // Shared luminance ends with mild per-channel chroma: screen content is mostly near-neutral.
  const double l0 = rng.uniform(0.2, 0.8), l1 = rng.uniform(0.2, 0.8);
  double c0[3], c1[3];
  for (int c = 0; c < 3; ++c) {
    c0[c] = l0 + rng.uniform(-kChroma, kChroma);
    c1[c] = l1 + rng.uniform(-kChroma, kChroma);
  }
  const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi), ca = std::cos(ang), sa = std::sin(ang);
  // Value-noise octaves on coarse lattices, bilinearly interpolated; shared luma plus a weak chroma tint.
  struct Octave {
    std::size_t cell;
    std::size_t gh, gw;
    std::vector<double> v;
    double amp;
  };
  std::vector<Octave> octaves;
  double amp = 0.25;
  for (std::size_t cellsz : {32u, 16u, 8u}) {
    Octave o{cellsz, h / cellsz + 2, w / cellsz + 2, {}, amp};
    o.v.resize(o.gh * o.gw);
    for (auto& v : o.v) v = rng.uniform(-1.0, 1.0);
    octaves.push_back(std::move(o));
    amp *= 0.5;
  }
  double tint[3];
  for (double& t : tint) t = rng.uniform(1.0 - kChroma, 1.0 + kChroma);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double u = ((double(y) / h - 0.5) * ca + (double(x) / w - 0.5) * sa) + 0.5;
      double n = 0.0;
      for (const auto& o : octaves) {
        const double fy = double(y) / o.cell, fx = double(x) / o.cell;
        const std::size_t iy = std::size_t(fy), ix = std::size_t(fx);
        const double ry = fy - iy, rx = fx - ix;
        auto g = [&](std::size_t a, std::size_t b) { return o.v[a * o.gw + b]; };
        n += o.amp * ((1 - ry) * ((1 - rx) * g(iy, ix) + rx * g(iy, ix + 1)) +
                      ry * ((1 - rx) * g(iy + 1, ix) + rx * g(iy + 1, ix + 1)));
      }
      for (int c = 0; c < 3; ++c) img[(y * w + x) * 3 + c] = c0[c] + (c1[c] - c0[c]) * u + n * tint[c];
    }
  // Glyph-like dark bars, as in rows of text.
  const std::size_t glyphs = (h * w) / 400 + 4;
  for (std::size_t g = 0; g < glyphs; ++g) {
    const std::size_t gh = 2 + rng.index(6), gw = 1 + rng.index(4);
    const std::size_t y0 = rng.index(h), x0 = rng.index(w);
    const double ink = rng.uniform(0.05, 0.3);
    for (std::size_t y = y0; y < std::min(h, y0 + gh); ++y)
      for (std::size_t x = x0; x < std::min(w, x0 + gw); ++x)
        for (int c = 0; c < 3; ++c) img[(y * w + x) * 3 + c] = ink;
  }
  for (auto& v : img.vec()) v = std::clamp(v, 0.05, 0.95);
  return img;
}

std::vector<CapturePose> jitter_trajectory(Rng& rng, const SynthConfig& cfg) {
  const double scale = cfg.scale_lo == cfg.scale_hi ? cfg.scale_lo : rng.uniform(cfg.scale_lo, cfg.scale_hi);
  const double tilt_y = cfg.tilt * rng.uniform(-1.0, 1.0), tilt_x = cfg.tilt * rng.uniform(-1.0, 1.0);
  std::vector<CapturePose> poses(cfg.frames);
  for (auto& p : poses) {
    p.tilt_y = tilt_y;
    p.tilt_x = tilt_x;
    p.scale = scale * (1.0 + cfg.scale_jitter * rng.uniform(-1.0, 1.0));
    p.ty = cfg.translation_jitter * rng.uniform(-1.0, 1.0);
    p.tx = cfg.translation_jitter * rng.uniform(-1.0, 1.0);
    p.rotation = cfg.rotation_jitter * rng.uniform(-1.0, 1.0);
  }
  return poses;
}

std::array<std::size_t, 2> content_extent(const SynthConfig& cfg) {
  const double mh = 2.0 * cfg.raw_h, mw = 2.0 * cfg.raw_w;
  const double c = 1.0, s = std::sin(cfg.rotation_jitter);
  const double t = cfg.translation_jitter * std::sqrt(2.0);
  auto margin = [&](double own, double other) {
    const double half = ((own / 2) * c + (other / 2) * s + t) / (cfg.scale_lo * (1.0 - cfg.scale_jitter)) * (1.0 + 2.0 * cfg.tilt);
    return static_cast<std::size_t>(std::ceil(std::max(0.0, half - own / 2))) + 1;
  };
  return {static_cast<std::size_t>(mh) + 2 * margin(mh, mw), static_cast<std::size_t>(mw) + 2 * margin(mw, mh)};
}

Tensor frame(const Tensor& clip, std::size_t t) {
  if (clip.rank() < 2 || t >= clip.dim(0)) throw DimensionError("frame: index out of range");
  Shape s(clip.shape().begin() + 1, clip.shape().end());
  const std::size_t n = shape_size(s);
  return Tensor(s, std::vector<double>(clip.vec().begin() + t * n, clip.vec().begin() + (t + 1) * n));
}

Tensor stack_frames(const std::vector<Tensor>& frames) {
  if (frames.empty()) throw DimensionError("stack_frames: no frames");
  Shape s = frames[0].shape();
  std::vector<double> data;
  data.reserve(frames.size() * frames[0].size());
  for (const auto& f : frames) {
    if (f.shape() != s) throw DimensionError("stack_frames: frame shapes differ");
    data.insert(data.end(), f.vec().begin(), f.vec().end());
  }
  s.insert(s.begin(), frames.size());
  return Tensor(s, std::move(data));
}

VideoClipPair make_clip_pair(const Tensor& content, const std::vector<CapturePose>& poses, const SynthConfig& cfg,
                             std::uint64_t seed) {
  require_rgb(content, "make_clip_pair");
  if (poses.size() < 3) throw ConfigError("make_clip_pair: at least 3 frames required");
  const std::size_t mh = 2 * cfg.raw_h, mw = 2 * cfg.raw_w;
  const Tensor field = render_screen(content, cfg.pitch);
  std::vector<Tensor> clean, moire_rgb, moire_raw, pseudo;
  for (const auto& pose : poses) {
    Tensor mosaic = capture_cfa(field, pose, mh, mw, cfg.pitch, cfg.subsamples, cfg.isp.wb_gains);
    moire_rgb.push_back(isp_pipeline(mosaic, cfg.isp));
    moire_raw.push_back(pack_rggb(mosaic));
    Tensor srgb = capture_clean(content, pose, mh, mw, cfg.pitch, cfg.subsamples);
    for (auto& v : srgb.vec()) v = clamp01(gamma_encode(v));
    // Pseudo ground-truth RAW: undo gamma, re-sample the Bayer pattern, undo white balance.
    Tensor lin = srgb;
    for (auto& v : lin.vec()) v = gamma_decode(v);
    Tensor m = remosaic(lin);
    for (std::size_t y = 0; y < mh; ++y)
      for (std::size_t x = 0; x < mw; ++x) m[y * mw + x] = clamp01(m[y * mw + x] / cfg.isp.wb_gains[cfa_color(y, x)]);
    pseudo.push_back(pack_rggb(m));
    clean.push_back(std::move(srgb));
  }
  VideoClipPair pair{stack_frames(clean), stack_frames(moire_rgb), stack_frames(moire_raw), stack_frames(pseudo), {}};
  pair.meta = {seed, cfg.pitch, content.dim(0), content.dim(1), poses};
  return pair;
}

VideoClipPair synth_clip(const SynthConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  const auto [h, w] = content_extent(cfg);
  Tensor content = generate_content(rng, h, w);
  auto poses = jitter_trajectory(rng, cfg);
  return make_clip_pair(content, poses, cfg, seed);
}

}  // namespace mocha::synth
