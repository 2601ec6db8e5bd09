#pragma once

#include "mocha/params.hpp"
#include "mocha/tape.hpp"

// Decoupled moiré-adaptive demoiréing: twin conv branches (MDB), supervision
// heads (DDB) and transposed channel cross-attention (MCB).
namespace mocha::dmad {

struct DmadConfig {
  std::size_t n_m = 4;
  std::size_t channels = 16;
  std::size_t heads = 1;
  void validate() const;
};

struct DdbOutputs {
  Var i_cf_raw;  // [T,H,W,4]
  Var i_pm_raw;  // [T,H,W,4]
  Var i_m_rgb;   // [T,2H,2W,3]
};

struct McbOutput {
  Var f_ma;
  Var a_ma;
  Var attention;  // [T*heads, C/heads, C/heads], rows sum to 1
};

struct DmadOutput {
  Var f_c;
  Var f_m;
  Var f_ma;
  Var a_ma;
  Var attention;
  DdbOutputs ddb;
};

// dconv3x3 -> LN -> pconv -> GeLU -> pconv.
void init_conv_block(ParamInit p, std::size_t channels);
Var conv_block(const ParamView& p, Var x);

// F_in + sum_i B_i(F_in): every block reads the original input.
void init_conv_block_stack(ParamInit p, std::size_t channels, std::size_t n_m);
Var conv_block_stack(const ParamView& p, Var f_in, std::size_t n_m);

std::pair<Var, Var> mdb_forward(const ParamView& p, Var f0, std::size_t n_m);

void init_ddb(ParamInit p, std::size_t channels);
DdbOutputs ddb_heads(const ParamView& p, Var f_c, Var f_m);

void init_mcb(ParamInit p, std::size_t channels, std::size_t heads);
McbOutput mcb_forward(const ParamView& p, Var f_c, Var f_m, std::size_t heads);

// Parameters under "<prefix>pdb", "mpb", "ddb", "mcb".
void init_dmad(ParamInit p, const DmadConfig& cfg);
DmadOutput dmad_forward(const ParamView& p, Var f0, const DmadConfig& cfg);

}  // namespace mocha::dmad
