#include "mocha/stad.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mocha/errors.hpp"
#include "mocha/layers.hpp"
#include "mocha/ops.hpp"

namespace mocha::stad {

using layers::conv;
using layers::dwconv;
using layers::pconv;

namespace {

thread_local std::size_t g_sfb_calls = 0;
thread_local double g_phase_margin = std::numeric_limits<double>::infinity();

// Last layer of every residual branch (and the image head) starts 10x smaller so the
// un-normalized residual stack does not amplify features at initialization.
constexpr double kResidualGain = 0.1;

std::size_t round_up(std::size_t n, std::size_t m) { return (n + m - 1) / m * m; }

// Swin-style region label of rolled coordinate q along one axis.
int region_label(std::size_t q, std::size_t extent, std::size_t window, std::size_t shift) {
  if (shift == 0) return 0;
  if (q < extent - window) return 0;
  return q < extent - shift ? 1 : 2;
}

void require_video(const Shape& s, const char* what) {
  if (s.size() != 4) throw DimensionError(std::string(what) + ": expected [T,H,W,C], got " + shape_str(s));
}

}  // namespace

WindowGrid make_window_grid(const Shape& s, std::size_t wt, std::size_t wk, bool shifted) {
  require_video(s, "window_partition");
  const std::size_t T = s[0], H = s[1], W = s[2];
  if (wt == 0 || wk == 0 || wt > T || wk > H || wk > W)
    throw DimensionError("window (" + std::to_string(wt) + "," + std::to_string(wk) + "," + std::to_string(wk) +
                         ") larger than input " + shape_str(s));
  WindowGrid g;
  g.in_shape = s;
  g.wt = wt;
  g.wk = wk;
  g.pt = round_up(T, wt);
  g.ph = round_up(H, wk);
  g.pw = round_up(W, wk);
  if (shifted) {
    g.st = wt / 2;
    g.sh = wk / 2;
    g.sw = wk / 2;
  }
  const std::size_t nt = g.pt / wt, nh = g.ph / wk, nw = g.pw / wk;
  g.windows = nt * nh * nw;
  g.tokens = wt * wk * wk;
  g.source.resize(g.windows * g.tokens);
  g.region.resize(g.windows * g.tokens);
  for (std::size_t n = 0; n < g.windows; ++n) {
    const std::size_t a = n / (nh * nw), b = (n / nw) % nh, c = n % nw;
    for (std::size_t l = 0; l < g.tokens; ++l) {
      const std::size_t qt = a * wt + l / (wk * wk), qh = b * wk + (l / wk) % wk, qw = c * wk + l % wk;
      const std::size_t t = (qt + g.st) % g.pt, h = (qh + g.sh) % g.ph, w = (qw + g.sw) % g.pw;
      const std::size_t i = n * g.tokens + l;
      g.source[i] = (t < T && h < H && w < W) ? static_cast<std::int64_t>((t * H + h) * W + w) : -1;
      g.region[i] = region_label(qt, g.pt, wt, g.st) * 9 + region_label(qh, g.ph, wk, g.sh) * 3 +
                    region_label(qw, g.pw, wk, g.sw);
    }
  }
  return g;
}

bool WindowGrid::has_padding() const {
  return std::any_of(source.begin(), source.end(), [](std::int64_t v) { return v < 0; });
}

Tensor WindowGrid::attention_mask(std::size_t heads) const {
  Tensor m({windows * heads, tokens, tokens});
  for (std::size_t n = 0; n < windows; ++n)
    for (std::size_t i = 0; i < tokens; ++i)
      for (std::size_t j = 0; j < tokens; ++j) {
        const std::size_t qi = n * tokens + i, kj = n * tokens + j;
        const bool blocked = source[kj] < 0 || region[qi] != region[kj];
        if (!blocked) continue;
        for (std::size_t h = 0; h < heads; ++h) m[((n * heads + h) * tokens + i) * tokens + j] = -1e9;
      }
  return m;
}

Var window_partition(Var x, const WindowGrid& g) {
  if (x.shape() != g.in_shape) throw DimensionError("window_partition: input does not match the grid");
  const std::size_t C = g.in_shape[3];
  std::vector<std::int64_t> index(g.source.size() * C);
  for (std::size_t i = 0; i < g.source.size(); ++i)
    for (std::size_t c = 0; c < C; ++c)
      index[i * C + c] = g.source[i] < 0 ? -1 : g.source[i] * static_cast<std::int64_t>(C) + static_cast<std::int64_t>(c);
  return ops::gather(x, std::move(index), {g.windows, g.tokens, C});
}

Var window_unpartition(Var windows, const WindowGrid& g) {
  const std::size_t C = g.in_shape[3];
  if (windows.shape() != Shape{g.windows, g.tokens, C}) throw DimensionError("window_unpartition: shape mismatch");
  const std::size_t voxels = g.in_shape[0] * g.in_shape[1] * g.in_shape[2];
  std::vector<std::int64_t> slot(voxels, -1);
  for (std::size_t i = 0; i < g.source.size(); ++i)
    if (g.source[i] >= 0) slot[static_cast<std::size_t>(g.source[i])] = static_cast<std::int64_t>(i);
  std::vector<std::int64_t> index(voxels * C);
  for (std::size_t v = 0; v < voxels; ++v)
    for (std::size_t c = 0; c < C; ++c) index[v * C + c] = slot[v] * static_cast<std::int64_t>(C) + static_cast<std::int64_t>(c);
  return ops::gather(windows, std::move(index), g.in_shape);
}

void StadConfig::validate() const {
  if (channels == 0 || heads == 0 || channels % heads) throw ConfigError("stad: channels must be divisible by heads");
  if (n_r == 0 || n_s == 0) throw ConfigError("stad: n_r and n_s must be >= 1");
  if (window_t == 0 || window_k == 0) throw ConfigError("stad: window extents must be positive");
  if (mlp_ratio == 0) throw ConfigError("stad: mlp_ratio must be >= 1");
}

void ModelConfig::validate() const {
  dmad().validate();
  stad().validate();
}

std::size_t fca_hidden(std::size_t channels) { return std::max<std::size_t>(1, channels / 4); }

void init_mhwa(ParamInit p, std::size_t c) {
  p.linear("qkv", c, 3 * c);
  p.linear("proj", c, c, kResidualGain);
}

Var mhwa(const ParamView& p, Var windows, std::size_t heads, const Tensor* mask) {
  const Shape s = windows.shape();
  if (s.size() != 3 || heads == 0 || s[2] % heads) throw DimensionError("mhwa: expected [N,L,C] with C % heads == 0");
  const std::size_t N = s[0], L = s[1], C = s[2], c = C / heads;
  Var qkv = pconv(p, "qkv", windows);                       // [N,L,3C]
  qkv = ops::reshape(qkv, {N, L, 3, heads, c});
  qkv = ops::permute(qkv, {2, 0, 3, 1, 4});                 // [3,N,h,L,c]
  qkv = ops::reshape(qkv, {3 * N * heads, L, c});
  Var q = ops::slice_axis0(qkv, 0, N * heads);
  Var k = ops::slice_axis0(qkv, N * heads, N * heads);
  Var v = ops::slice_axis0(qkv, 2 * N * heads, N * heads);
  Var scores = ops::scale(ops::bmm(q, ops::permute(k, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(c)));
  if (mask) scores = ops::add(scores, scores.tape().constant(*mask));
  Var out = ops::bmm(ops::softmax(scores), v);              // [N*h,L,c]
  out = ops::permute(ops::reshape(out, {N, heads, L, c}), {0, 2, 1, 3});
  return pconv(p, "proj", ops::reshape(out, {N, L, C}));
}

void init_fca(ParamInit p, std::size_t c) {
  p.linear("fc1", 2 * c, fca_hidden(c));
  p.linear("fc2", fca_hidden(c), c);
}

Var fca(const ParamView& p, Var x) {
  require_video(x.shape(), "fca");
  auto [re, im] = ops::fft2(x);
  Var pooled = ops::global_avg_pool(ops::concat_last({re, im}));  // [T,1,1,2C]
  Var w = pconv(p, "fc2", ops::relu(pconv(p, "fc1", pooled)));
  return ops::gate(x, w);
}

void init_sfb(ParamInit p, const StadConfig& cfg) {
  const std::size_t c = cfg.channels;
  p.layer_norm("ln1", c);
  init_mhwa(p.sub("attn"), c);
  init_fca(p.sub("fca"), c);
  p.constant("lambda_ca", {1}, 1.0);
  p.layer_norm("ln2", c);
  p.linear("mlp1", c, cfg.mlp_ratio * c);
  p.linear("mlp2", cfg.mlp_ratio * c, c, kResidualGain);
}

Var sfb_forward(const ParamView& p, Var x, const StadConfig& cfg, bool shifted) {
  ++g_sfb_calls;
  Var u = layers::norm(p, "ln1", x);
  const WindowGrid grid = make_window_grid(u.shape(), cfg.window_t, cfg.window_k, shifted);
  const Tensor mask = grid.attention_mask(cfg.heads);
  Var wa = window_unpartition(mhwa(p.sub("attn"), window_partition(u, grid), cfg.heads, &mask), grid);
  Var ca = fca(p.sub("fca"), u);
  Var y = ops::add(x, ops::add(wa, ops::scale_by(ca, p("lambda_ca"))));
  Var hidden = ops::gelu(pconv(p, "mlp1", layers::norm(p, "ln2", y)));
  return ops::add(y, pconv(p, "mlp2", hidden));
}

void init_arb(ParamInit p, std::size_t c) {
  for (std::size_t d : {1u, 2u, 4u}) {
    ParamInit b = p.sub("d" + std::to_string(d));
    b.depthwise("dw", 3, c);
    b.linear("pw", c, c);
  }
  p.linear("fuse", 3 * c, c, kResidualGain);
}

Var arb(const ParamView& p, Var amp) {
  std::vector<Var> branches;
  for (std::size_t d : {1u, 2u, 4u}) {
    const ParamView b = p.sub("d" + std::to_string(d));
    branches.push_back(pconv(b, "pw", dwconv(b, "dw", amp, d)));
  }
  return pconv(p, "fuse", ops::concat_last(branches));
}

void init_prb(ParamInit p, std::size_t c) {
  p.depthwise("dw", 3, c);
  p.linear("pw", c, c);
  p.linear("se1", c, fca_hidden(c));
  p.linear("se2", fca_hidden(c), c);
}

Var prb(const ParamView& p, Var phase) {
  Var y = pconv(p, "pw", dwconv(p, "dw", phase));
  Var g = ops::sigmoid(pconv(p, "se2", ops::relu(pconv(p, "se1", ops::global_avg_pool(y)))));
  return ops::gate(y, g);
}

void init_wfb(ParamInit p, std::size_t c) {
  init_arb(p.sub("arb"), c);
  init_prb(p.sub("prb"), c);
}

Var wfb_core(const ParamView& p, Var x, std::size_t k) {
  require_video(x.shape(), "wfb");
  const std::size_t C = x.shape()[3];
  const WindowGrid grid = make_window_grid(x.shape(), 1, k, false);
  Var win = ops::reshape(window_partition(x, grid), {grid.windows, k, k, C});
  auto [re, im] = ops::fft2(win);
  for (std::size_t i = 0; i < re.value().size(); ++i) {
    const double r = re.value()[i], m = im.value()[i];
    g_phase_margin = std::min(g_phase_margin, std::hypot(r, m));
    if (r < 0.0 && m != 0.0) g_phase_margin = std::min(g_phase_margin, std::abs(m));
  }
  Var amp = arb(p.sub("arb"), ops::amplitude(re, im));
  Var ph = prb(p.sub("prb"), ops::phase(re, im));
  Var out = ops::ifft2_real(ops::mul(amp, ops::cos(ph)), ops::mul(amp, ops::sin(ph)));
  return window_unpartition(ops::reshape(out, {grid.windows, grid.tokens, C}), grid);
}

Var wfb(const ParamView& p, Var x, std::size_t k) { return ops::add(x, wfb_core(p, x, k)); }

void init_rhatb(ParamInit p, const StadConfig& cfg) {
  for (std::size_t j = 0; j < cfg.n_s; ++j) init_sfb(p.sub("sfb", j), cfg);
  init_wfb(p.sub("wfb"), cfg.channels);
  p.conv("conv", 3, cfg.channels, cfg.channels, kResidualGain);
}

Var rhatb(const ParamView& p, Var x, const StadConfig& cfg) {
  Var y = x;
  for (std::size_t j = 0; j < cfg.n_s; ++j) y = sfb_forward(p.sub("sfb", j), y, cfg, j % 2 == 1);
  y = wfb(p.sub("wfb"), y, cfg.window_k);
  return ops::add(x, conv(p, "conv", y));
}

void init_stad(ParamInit p, const StadConfig& cfg) {
  cfg.validate();
  for (std::size_t i = 0; i < cfg.n_r; ++i) init_rhatb(p.sub("rhatb", i), cfg);
  p.conv("conv", 3, cfg.channels, cfg.channels, kResidualGain);
}

Var stad_forward(const ParamView& p, Var f_ma, const StadConfig& cfg) {
  cfg.validate();
  Var y = f_ma;
  for (std::size_t i = 0; i < cfg.n_r; ++i) y = rhatb(p.sub("rhatb", i), y, cfg);
  return conv(p, "conv", y);
}

std::size_t sfb_call_count() { return g_sfb_calls; }
void reset_sfb_call_count() { g_sfb_calls = 0; }
double wfb_phase_margin() { return g_phase_margin; }
void reset_wfb_phase_margin() { g_phase_margin = std::numeric_limits<double>::infinity(); }

ParamStore init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamStore store;
  Rng rng(seed);
  ParamInit root(store, rng);
  root.conv("sfe", 3, 4, cfg.channels);
  dmad::init_dmad(root.sub("dmad"), cfg.dmad());
  init_stad(root.sub("stad"), cfg.stad());
  init_eib(root.sub("eib"), cfg.channels);
  return store;
}

void init_eib(ParamInit p, std::size_t c) {
  p.conv("0", 3, c, c);
  p.conv("1", 3, c, 12, kResidualGain);
}

Var eib(const ParamView& p, Var x) { return ops::pixel_shuffle(conv(p, "1", conv(p, "0", x)), 2); }

ForwardResult mocha_forward(Binding& binding, Var i_raw, int stage, const ModelConfig& cfg) {
  const Shape s = i_raw.shape();
  if (s.size() != 4 || s[0] != 3 || s[3] != 4)
    throw DimensionError("mocha_forward: expected [3,H,W,4] packed RAW frames, got " + shape_str(s));
  if (stage != 1 && stage != 2) throw UsageError("mocha_forward: stage must be 1 or 2");
  const ParamView root(binding);
  ForwardResult r;
  r.f0 = conv(root, "sfe", i_raw);
  Var f_ma = r.f0;
  if (stage == 2) {
    r.dmad = dmad::dmad_forward(root.sub("dmad"), r.f0, cfg.dmad());
    f_ma = r.dmad->f_ma;
  }
  Var f_d = stad_forward(root.sub("stad"), f_ma, cfg.stad());
  Var centre = ops::add(ops::slice_axis0(f_d, 1, 1), ops::slice_axis0(r.f0, 1, 1));
  Var rgb = eib(root.sub("eib"), centre);
  r.rgb = ops::reshape(rgb, {2 * s[1], 2 * s[2], 3});
  return r;
}

const std::vector<std::string>& alignment_op_kinds() {
  static const std::vector<std::string> kinds{"warp", "grid_sample", "flow", "offset", "deform", "align"};
  return kinds;
}

}  // namespace mocha::stad
