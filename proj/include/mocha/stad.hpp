#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mocha/dmad.hpp"
#include "mocha/params.hpp"
#include "mocha/tape.hpp"

// Spatio-temporal adaptive demoiréing (3-D window attention, Fourier channel
// attention, window frequency block) and the complete network.
namespace mocha::stad {

// Token layout of a (t, k, k) window partition over a [T,H,W,C] tensor.
// The input is zero-padded to multiples of the window, then cyclically rolled
// by -shift; window n, token l reads padded voxel (q + shift) mod padded_extent.
struct WindowGrid {
  Shape in_shape;
  std::size_t wt = 1, wk = 1;
  std::size_t pt = 0, ph = 0, pw = 0;  // padded extents
  std::size_t st = 0, sh = 0, sw = 0;  // shift
  std::size_t windows = 0, tokens = 0;
  std::vector<std::int64_t> source;  // per (window, token): flat voxel index in x, -1 for padding
  std::vector<int> region;           // per (window, token): cyclic-shift region label

  // Additive mask [windows*heads, tokens, tokens]: -1e9 on padded keys and across regions.
  Tensor attention_mask(std::size_t heads) const;
  bool has_padding() const;
};

WindowGrid make_window_grid(const Shape& x_shape, std::size_t wt, std::size_t wk, bool shifted);
// [T,H,W,C] -> [windows, tokens, C].
Var window_partition(Var x, const WindowGrid& grid);
// [windows, tokens, C] -> [T,H,W,C]; padded tokens are dropped.
Var window_unpartition(Var windows, const WindowGrid& grid);

struct StadConfig {
  std::size_t channels = 16;
  std::size_t n_r = 4;
  std::size_t n_s = 5;
  std::size_t window_t = 2;
  std::size_t window_k = 7;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
  void validate() const;
};

std::size_t fca_hidden(std::size_t channels);

void init_mhwa(ParamInit p, std::size_t c);
Var mhwa(const ParamView& p, Var windows, std::size_t heads, const Tensor* mask = nullptr);

void init_fca(ParamInit p, std::size_t c);
Var fca(const ParamView& p, Var x);

void init_sfb(ParamInit p, const StadConfig& cfg);
Var sfb_forward(const ParamView& p, Var x, const StadConfig& cfg, bool shifted);

void init_arb(ParamInit p, std::size_t c);
Var arb(const ParamView& p, Var amp);  // [N,k,k,C]
void init_prb(ParamInit p, std::size_t c);
Var prb(const ParamView& p, Var phase);  // [N,k,k,C]

void init_wfb(ParamInit p, std::size_t c);
// x + ifft(ARB(|F|) e^{i PRB(arg F)}) over spatial k x k windows.
Var wfb(const ParamView& p, Var x, std::size_t k);
Var wfb_core(const ParamView& p, Var x, std::size_t k);

void init_rhatb(ParamInit p, const StadConfig& cfg);
Var rhatb(const ParamView& p, Var x, const StadConfig& cfg);

void init_stad(ParamInit p, const StadConfig& cfg);
Var stad_forward(const ParamView& p, Var f_ma, const StadConfig& cfg);

// Number of sfb_forward calls on this thread since the last reset.
std::size_t sfb_call_count();
void reset_sfb_call_count();

// Smallest distance of any WFB spectral bin from where arg() is discontinuous (the origin,
// or the negative real axis for bins that are not exactly real) on this thread since the last reset.
double wfb_phase_margin();
void reset_wfb_phase_margin();

struct ModelConfig {
  std::size_t channels = 16;
  std::size_t n_m = 4;
  std::size_t dmad_heads = 1;
  std::size_t n_r = 4;
  std::size_t n_s = 5;
  std::size_t window_t = 2;
  std::size_t window_k = 7;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;

  dmad::DmadConfig dmad() const { return {n_m, channels, dmad_heads}; }
  StadConfig stad() const { return {channels, n_r, n_s, window_t, window_k, heads, mlp_ratio}; }
  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Image head: conv3x3 -> conv3x3 to 12 channels -> pixel shuffle x2. [N,H,W,C] -> [N,2H,2W,3].
void init_eib(ParamInit p, std::size_t c);
Var eib(const ParamView& p, Var x);

// Parameter groups: "sfe.", "dmad.", "stad.", "eib.".
ParamStore init_model(const ModelConfig& cfg, std::uint64_t seed);

struct ForwardResult {
  Var rgb;  // [2H,2W,3]
  Var f0;   // [3,H,W,C]
  std::optional<dmad::DmadOutput> dmad;
};

// i_raw [3,H,W,4] packed RGGB frames -> centre sRGB frame. Stage 1 bypasses DMAD.
ForwardResult mocha_forward(Binding& binding, Var i_raw, int stage, const ModelConfig& cfg);

// Op kinds that would indicate explicit alignment (warping/offset sampling).
const std::vector<std::string>& alignment_op_kinds();

}  // namespace mocha::stad
