#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "mocha/rng.hpp"
#include "mocha/tensor.hpp"

// Screen-subpixel x Bayer-CFA aliasing simulator and a small ISP.
namespace mocha::synth {

// Camera pose relative to the screen. Translation is in sensor pixels,
// scale is the screen/camera sampling-pitch ratio.
struct CapturePose {
  double ty = 0.0;
  double tx = 0.0;
  double rotation = 0.0;
  double scale = 1.0;
  // Keystone: local scale grows linearly by (1 + tilt_y*v + tilt_x*u), u,v in [-1,1] across the sensor.
  double tilt_y = 0.0;
  double tilt_x = 0.0;

  void validate() const;  // scale in (0.5, 2), |rotation| <= 0.1
  friend bool operator==(const CapturePose&, const CapturePose&) = default;
};

struct IspParams {
  std::array<double, 3> wb_gains{2.0, 1.0, 1.6};
  double sharpen = 0.5;
};

struct SynthConfig {
  std::size_t raw_h = 32;  // packed RAW extents; mosaic and sRGB are 2x
  std::size_t raw_w = 32;
  std::size_t frames = 3;
  std::size_t pitch = 3;       // field cells per screen pixel
  std::size_t subsamples = 12;  // point samples per sensor pixel and axis
  double scale_lo = 0.8;
  double scale_hi = 0.95;
  double translation_jitter = 1.0;  // uniform in [-j, j] sensor px
  double rotation_jitter = 0.01;    // uniform in [-r, r] rad
  double scale_jitter = 0.02;       // per-frame relative scale change in [-s, s]
  double tilt = 0.05;               // per-clip keystone magnitude in [-k, k] per axis
  IspParams isp;
};

struct ClipMeta {
  std::uint64_t seed = 0;
  std::size_t pitch = 0;
  std::size_t content_h = 0;
  std::size_t content_w = 0;
  std::vector<CapturePose> poses;
};

struct VideoClipPair {
  Tensor clean_rgb;         // [T,2H,2W,3]
  Tensor moire_rgb;         // [T,2H,2W,3]
  Tensor moire_raw;         // [T,H,W,4]
  Tensor pseudo_clean_raw;  // [T,H,W,4]
  ClipMeta meta;
};

// Content [Hs,Ws,3] -> field [Hs*p, Ws*p, 3]; each pixel becomes p x p cells,
// with R, G, B emitted from vertical stripe thirds (fractional coverage for p % 3 != 0).
Tensor render_screen(const Tensor& content, std::size_t pitch);

// RGGB colour index of mosaic site (y, x): 0 R, 1 G, 2 B.
inline int cfa_color(std::size_t y, std::size_t x) { return static_cast<int>((y & 1) + (x & 1)); }

// Samples the posed field through an RGGB mosaic [mh, mw]. Each sensor pixel
// averages subsamples^2 point samples in a box the size of one camera pixel;
// values are multiplied by 3 / wb_gain and clamped to [0,1].
Tensor capture_cfa(const Tensor& field, const CapturePose& pose, std::size_t mh, std::size_t mw, std::size_t pitch,
                   std::size_t subsamples, const std::array<double, 3>& wb_gains);

// Linear RGB [mh,mw,3] seen through the same footprints, without the subpixel structure.
Tensor capture_clean(const Tensor& content, const CapturePose& pose, std::size_t mh, std::size_t mw,
                     std::size_t pitch, std::size_t subsamples);

// White balance, bilinear demosaic, 3x3 unsharp mask, clamp, gamma 1/2.2, clamp.
Tensor isp_pipeline(const Tensor& bayer, const IspParams& isp = {});
Tensor demosaic_bilinear(const Tensor& bayer);

double gamma_encode(double linear);
double gamma_decode(double encoded);

// [2H,2W] <-> [H,W,4] with channels R, G(r-row), G(b-row), B. Also accepts a leading frame axis.
Tensor pack_rggb(const Tensor& bayer);
Tensor unpack_rggb(const Tensor& packed);
// [2H,2W,3] -> [2H,2W] keeping the CFA colour of each site.
Tensor remosaic(const Tensor& rgb);

// Procedural screen content: smooth gradients, noise octaves and glyph-like bars, in [0.05, 0.95].
Tensor generate_content(Rng& rng, std::size_t h, std::size_t w);

// Hand-held trajectory: one scale per clip, per-frame translation and rotation jitter.
std::vector<CapturePose> jitter_trajectory(Rng& rng, const SynthConfig& cfg);

// Content extents (h, w) that cover every pose in the configured ranges.
std::array<std::size_t, 2> content_extent(const SynthConfig& cfg);

VideoClipPair make_clip_pair(const Tensor& content, const std::vector<CapturePose>& poses, const SynthConfig& cfg,
                             std::uint64_t seed);

// Content and trajectory both drawn from seed.
VideoClipPair synth_clip(const SynthConfig& cfg, std::uint64_t seed);

// Frame t of a [T, ...] tensor.
Tensor frame(const Tensor& clip, std::size_t t);
Tensor stack_frames(const std::vector<Tensor>& frames);

}  // namespace mocha::synth
