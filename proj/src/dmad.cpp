#include "mocha/dmad.hpp"

#include <cstdint>

#include "mocha/errors.hpp"
#include "mocha/layers.hpp"

namespace mocha::dmad {

using layers::conv;
using layers::dwconv;
using layers::pconv;

namespace {

// Output layer of each residual conv block starts 10x smaller, as in STAD, so inserting
// DMAD in stage 2 initially passes the stage-1 features through nearly unchanged.
constexpr double kResidualGain = 0.1;

}  // namespace

void DmadConfig::validate() const {
  if (n_m == 0) throw ConfigError("dmad: n_m must be >= 1");
  if (channels < 4) throw ConfigError("dmad: channels must be >= 4");
  if (heads == 0 || channels % heads) throw ConfigError("dmad: channels must be divisible by heads");
}

void init_conv_block(ParamInit p, std::size_t c) {
  p.depthwise("dw", 3, c);
  p.layer_norm("ln", c);
  p.linear("pw1", c, c);
  p.linear("pw2", c, c, kResidualGain);
}

Var conv_block(const ParamView& p, Var x) {
  Var y = dwconv(p, "dw", x);
  y = layers::norm(p, "ln", y);
  y = ops::gelu(pconv(p, "pw1", y));
  return pconv(p, "pw2", y);
}

void init_conv_block_stack(ParamInit p, std::size_t c, std::size_t n_m) {
  for (std::size_t i = 0; i < n_m; ++i) init_conv_block(p.sub("block", i), c);
}

Var conv_block_stack(const ParamView& p, Var f_in, std::size_t n_m) {
  if (n_m == 0) throw ConfigError("conv_block_stack: n_m must be >= 1");
  Var out = f_in;
  for (std::size_t i = 0; i < n_m; ++i) out = ops::add(out, conv_block(p.sub("block", i), f_in));
  return out;
}

std::pair<Var, Var> mdb_forward(const ParamView& p, Var f0, std::size_t n_m) {
  return {conv_block_stack(p.sub("pdb"), f0, n_m), conv_block_stack(p.sub("mpb"), f0, n_m)};
}

void init_ddb(ParamInit p, std::size_t c) {
  for (const char* head : {"cf", "pm"}) {
    p.sub(head).conv("0", 3, c, c);
    p.sub(head).conv("1", 3, c, 4);
  }
  p.sub("rgb").conv("0", 3, 4, c);
  p.sub("rgb").conv("1", 3, c, 12);
}

DdbOutputs ddb_heads(const ParamView& p, Var f_c, Var f_m) {
  if (f_c.shape().back() < 4) throw DimensionError("ddb_heads: need at least 4 channels");
  auto raw_head = [](const ParamView& h, Var x) { return conv(h, "1", ops::gelu(conv(h, "0", x))); };
  DdbOutputs out;
  out.i_cf_raw = raw_head(p.sub("cf"), f_c);
  out.i_pm_raw = raw_head(p.sub("pm"), f_m);
  const ParamView rgb = p.sub("rgb");
  out.i_m_rgb = ops::pixel_shuffle(conv(rgb, "1", conv(rgb, "0", out.i_cf_raw)), 2);
  return out;
}

void init_mcb(ParamInit p, std::size_t c, std::size_t heads) {
  for (const char* path : {"q", "k", "v"}) {
    p.sub(path).linear("pw", c, c);
    p.sub(path).depthwise("dw", 3, c);
  }
  p.constant("log_temp", {heads}, 0.0);
}

namespace {

// [T,H,W,C] -> [T*heads, H*W, C/heads].
Var split_heads(Var x, std::size_t heads) {
  const Shape s = x.shape();
  const std::size_t T = s[0], HW = s[1] * s[2], C = s[3], c = C / heads;
  Var y = ops::reshape(x, {T, HW, heads, c});
  y = ops::permute(y, {0, 2, 1, 3});
  return ops::reshape(y, {T * heads, HW, c});
}

Var merge_heads(Var x, const Shape& out, std::size_t heads) {
  const std::size_t T = out[0], HW = out[1] * out[2], c = out[3] / heads;
  Var y = ops::reshape(x, {T, heads, HW, c});
  y = ops::permute(y, {0, 2, 1, 3});
  return ops::reshape(y, out);
}

// Scales each channel of [B,N,c] to unit L2 norm over the N tokens.
Var unit_tokens(Var x, std::size_t B, std::size_t N, std::size_t c) {
  Var x4 = ops::reshape(x, {B, N, 1, c});
  Var sumsq = ops::scale(ops::global_avg_pool(ops::square(x4)), static_cast<double>(N));
  return ops::reshape(ops::gate(x4, ops::rsqrt(ops::add_scalar(sumsq, 1e-12))), {B, N, c});
}

}  // namespace

McbOutput mcb_forward(const ParamView& p, Var f_c, Var f_m, std::size_t heads) {
  if (f_c.shape() != f_m.shape()) throw DimensionError("mcb_forward: f_c and f_m shapes differ");
  const Shape s = f_c.shape();
  if (s.size() != 4 || heads == 0 || s[3] % heads) throw DimensionError("mcb_forward: expected [T,H,W,C], C % heads == 0");
  auto embed = [&](const char* path, Var x) {
    const ParamView e = p.sub(path);
    return dwconv(e, "dw", pconv(e, "pw", x));
  };
  Var q = split_heads(embed("q", f_c), heads);
  Var k = split_heads(embed("k", f_m), heads);
  Var v = split_heads(embed("v", f_m), heads);
  const std::size_t B = s[0] * heads, c = s[3] / heads, N = s[1] * s[2];
  q = unit_tokens(q, B, N, c);
  k = unit_tokens(k, B, N, c);

  // Channel-by-channel logits Q^T K / lambda, lambda = exp(log_temp) per head.
  Var logits = ops::bmm(ops::permute(q, {0, 2, 1}), k);
  std::vector<std::int64_t> head_of(B * c * c);
  for (std::size_t i = 0; i < head_of.size(); ++i) head_of[i] = static_cast<std::int64_t>((i / (c * c)) % heads);
  Var inv_temp = ops::gather(ops::exp(ops::scale(p("log_temp"), -1.0)), std::move(head_of), {B, c, c});
  Var attention = ops::softmax(ops::mul(logits, inv_temp));

  // Output channel i mixes value channels j with weight A[i, j]: V A^T.
  Var mixed = ops::bmm(v, ops::permute(attention, {0, 2, 1}));
  Var a_ma = ops::sigmoid(merge_heads(mixed, s, heads));
  return {ops::mul(f_c, a_ma), a_ma, attention};
}

void init_dmad(ParamInit p, const DmadConfig& cfg) {
  cfg.validate();
  init_conv_block_stack(p.sub("pdb"), cfg.channels, cfg.n_m);
  init_conv_block_stack(p.sub("mpb"), cfg.channels, cfg.n_m);
  init_ddb(p.sub("ddb"), cfg.channels);
  init_mcb(p.sub("mcb"), cfg.channels, cfg.heads);
}

DmadOutput dmad_forward(const ParamView& p, Var f0, const DmadConfig& cfg) {
  cfg.validate();
  auto [f_c, f_m] = mdb_forward(p, f0, cfg.n_m);
  DdbOutputs ddb = ddb_heads(p.sub("ddb"), f_c, f_m);
  McbOutput mcb = mcb_forward(p.sub("mcb"), f_c, f_m, cfg.heads);
  return {f_c, f_m, mcb.f_ma, mcb.a_ma, mcb.attention, ddb};
}

}  // namespace mocha::dmad
