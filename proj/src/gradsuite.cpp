#include "mocha/gradsuite.hpp"

#include <algorithm>
#include <chrono>

#include "mocha/dmad.hpp"
#include "mocha/errors.hpp"
#include "mocha/losses.hpp"
#include "mocha/ops.hpp"
#include "mocha/stad.hpp"

namespace mocha {

namespace {

class Seeds {
 public:
  explicit Seeds(std::uint64_t base) : next_(base * 1000) {}
  std::uint64_t operator()() { return next_++; }

 private:
  std::uint64_t next_;
};

Tensor uniform(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(s));
  for (auto& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

// Random linear functional of y, so every output element reaches the gradient.
Var project(Var y, std::uint64_t seed) {
  return ops::sum(ops::mul(y, y.tape().constant(uniform(y.shape(), seed))));
}

// Rows whose forward pass goes through WFB: arg() is discontinuous at the origin and on the
// negative real axis, and its curvature grows near both, so inputs are redrawn until every
// spectral bin keeps a margin and the difference step is reduced.
constexpr double kMinMargin = 1e-3;
constexpr double kPhaseStep = 1e-6;
constexpr int kRedraws = 64;

stad::StadConfig tiny_stad(std::size_t n_s) {
  stad::StadConfig c;
  c.channels = 4;
  c.n_r = 1;
  c.n_s = n_s;
  c.window_t = 2;
  c.window_k = 2;
  c.heads = 2;
  c.mlp_ratio = 2;
  return c;
}

}  // namespace

std::vector<SuiteRow> run_gradient_suite(std::uint64_t seed) {
  using namespace mocha::dmad;
  using namespace mocha::stad;
  Seeds next(seed);
  std::vector<SuiteRow> rows;
  auto record = [&](std::string name, double tol, auto&& run) {
    GradCheckOptions opt;
    opt.tol = tol;
    opt.seed = next();
    const auto t0 = std::chrono::steady_clock::now();
    SuiteRow row{std::move(name), tol, 0.0, run(opt), 0.0};
    row.h = opt.h;
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(std::move(row));
  };
  auto block = [&](const std::string& name, auto&& init, auto&& fn, std::vector<Tensor> inputs, double tol = 1e-4) {
    ParamStore store;
    Rng rng(next());
    init(ParamInit(store, rng, "p."));
    const std::uint64_t proj = next();
    record(name, tol, [&](GradCheckOptions& opt) {
      return grad_check_params(
          store, [&](Binding& b, std::span<const Var> in) { return project(fn(ParamView(b, "p."), in), proj); }, inputs,
          opt);
    });
  };
  constexpr std::size_t C = 4;

  block("conv_block_stack", [](ParamInit p) { init_conv_block_stack(p, C, 2); },
        [](const ParamView& p, std::span<const Var> in) { return conv_block_stack(p, in[0], 2); },
        {uniform({1, 4, 4, C}, next())});
  block("DDB", [](ParamInit p) { init_ddb(p, C); },
        [](const ParamView& p, std::span<const Var> in) {
          auto o = ddb_heads(p, in[0], in[1]);
          return ops::concat_last({ops::reshape(o.i_cf_raw, {o.i_cf_raw.value().size()}),
                                   ops::reshape(o.i_pm_raw, {o.i_pm_raw.value().size()}),
                                   ops::reshape(o.i_m_rgb, {o.i_m_rgb.value().size()})});
        },
        {uniform({1, 4, 4, C}, next()), uniform({1, 4, 4, C}, next())});
  block("MCB", [](ParamInit p) { init_mcb(p, C, 1); },
        [](const ParamView& p, std::span<const Var> in) { return mcb_forward(p, in[0], in[1], 1).f_ma; },
        {uniform({1, 3, 3, C}, next(), -0.5, 0.5), uniform({1, 3, 3, C}, next(), -0.5, 0.5)});
  block("MHWA", [](ParamInit p) { init_mhwa(p, C); },
        [](const ParamView& p, std::span<const Var> in) { return mhwa(p, in[0], 2, nullptr); },
        {uniform({2, 3, C}, next())});
  block("FCA", [](ParamInit p) { init_fca(p, C); },
        [](const ParamView& p, std::span<const Var> in) { return fca(p, in[0]); }, {uniform({2, 4, 4, C}, next())});
  const StadConfig sfb_cfg = tiny_stad(2);
  for (bool shifted : {false, true}) {
    block(shifted ? "SFB (shifted)" : "SFB", [&](ParamInit p) { init_sfb(p, sfb_cfg); },
          [&](const ParamView& p, std::span<const Var> in) { return sfb_forward(p, in[0], sfb_cfg, shifted); },
          {uniform({3, 3, 3, C}, next())});
  }
  block("ARB", [](ParamInit p) { init_arb(p, 2); },
        [](const ParamView& p, std::span<const Var> in) { return arb(p, in[0]); }, {uniform({1, 5, 5, 2}, next())});
  block("PRB", [](ParamInit p) { init_prb(p, 2); },
        [](const ParamView& p, std::span<const Var> in) { return prb(p, in[0]); }, {uniform({1, 4, 4, 2}, next())});

  // Draws inputs until forward() keeps every WFB bin at least kMinMargin from a phase discontinuity.
  auto guarded = [&](auto&& draw, auto&& forward) {
    std::vector<Tensor> in;
    for (int i = 0; i < kRedraws; ++i) {
      in = draw(next());
      stad::reset_wfb_phase_margin();
      forward(in);
      if (stad::wfb_phase_margin() >= kMinMargin) break;
    }
    return in;
  };
  auto phase_row = [&](const std::string& name, const ParamStore& store, auto&& fn, auto&& draw, double tol) {
    const std::vector<Tensor> in = guarded(draw, [&](const std::vector<Tensor>& v) {
      Tape tape;
      Binding b(tape, store);
      std::vector<Var> vars;
      for (const auto& t : v) vars.push_back(tape.constant(t));
      fn(b, std::span<const Var>(vars));
    });
    const std::uint64_t proj = next();
    record(name, tol, [&](GradCheckOptions& opt) {
      opt.h = kPhaseStep;
      return grad_check_params(store, [&](Binding& b, std::span<const Var> v) { return project(fn(b, v), proj); }, in,
                               opt);
    });
  };
  {
    ParamStore store;
    Rng rng(next());
    init_wfb(ParamInit(store, rng, "p."), 2);
    phase_row(
        "WFB", store, [](Binding& b, std::span<const Var> in) { return wfb(ParamView(b, "p."), in[0], 4); },
        [](std::uint64_t s) { return std::vector<Tensor>{uniform({1, 4, 4, 2}, s)}; }, 1e-4);
  }
  {
    const StadConfig cfg = tiny_stad(2);
    ParamStore store;
    Rng rng(next());
    init_rhatb(ParamInit(store, rng, "p."), cfg);
    phase_row(
        "RHATB", store, [&](Binding& b, std::span<const Var> in) { return rhatb(ParamView(b, "p."), in[0], cfg); },
        [](std::uint64_t s) { return std::vector<Tensor>{uniform({2, 4, 4, C}, s)}; }, 1e-4);
  }
  block("EIB", [](ParamInit p) { init_eib(p, C); },
        [](const ParamView& p, std::span<const Var> in) { return eib(p, in[0]); }, {uniform({1, 3, 3, C}, next())});

  auto loss = [&](const std::string& name, const ScalarFn& fn, std::vector<Tensor> inputs) {
    record(name, 1e-4, [&](GradCheckOptions& opt) { return grad_check(fn, inputs, opt); });
  };
  loss("L1 + L2 loss", [](Tape&, std::span<const Var> v) { return ops::add(losses::l1_loss(v[0], v[1]), losses::l2_mean(v[0], v[1])); },
       {uniform({4, 4, 3}, next()), uniform({4, 4, 3}, next())});
  loss("PD loss", [](Tape&, std::span<const Var> v) { return losses::pd_loss(v[0], v[1]); },
       {uniform({1, 4, 4, 3}, next()), uniform({1, 4, 4, 3}, next())});
  loss("MC loss", [](Tape&, std::span<const Var> v) { return losses::mc_loss(v[0], v[1], v[2]); },
       {uniform({1, 3, 3, 4}, next()), uniform({1, 3, 3, 4}, next()), uniform({1, 3, 3, 4}, next())});
  {
    const Tensor gt = uniform({8, 8, 3}, next(), 0.0, 1.0);
    loss("perceptual surrogate", [&](Tape&, std::span<const Var> v) { return losses::perceptual_surrogate(v[0], gt); },
         {uniform({8, 8, 3}, next(), 0.0, 1.0)});
  }
  {
    // Grouping, gather and the weighted nuclear norm through the Jacobi SVD. The
    // weights are frozen at the base point (training treats them as constants) and the
    // input is redrawn until every group's singular values are separated by >= 1e-3.
    losses::GroupingParams gp;
    gp.patch = 4;
    gp.stride = 2;
    gp.k = 4;
    gp.search = 4;
    gp.max_groups = 4;
    const losses::WnnmParams wp;
    Tensor img;
    losses::PatchGroupSet set;
    Tensor groups;
    for (int i = 0; i < kRedraws; ++i) {
      img = uniform({6, 6, 2}, next());
      set = losses::group_patches(img, gp);
      const std::size_t n = gp.patch * gp.patch * 2;
      groups = Tensor({set.groups.size(), n, gp.k});
      const auto idx = set.gather_index(6);
      for (std::size_t j = 0; j < idx.size(); ++j) groups[j] = img[static_cast<std::size_t>(idx[j])];
      double gap = 1e300;
      for (std::size_t g = 0; g < set.groups.size(); ++g) {
        const auto s = losses::singular_values(set.matrix(img, g));
        for (std::size_t j = 1; j < s.size(); ++j) gap = std::min(gap, s[j - 1] - s[j]);
        gap = std::min(gap, s.back());
      }
      if (gap >= 1e-3) break;
    }
    const auto w0 = losses::wnnm_weights(groups, wp);
    const auto idx = set.gather_index(6);
    const Shape gshape = groups.shape();
    loss("MP loss (grouped WNNM via SVD)",
         [&](Tape&, std::span<const Var> v) {
           return losses::weighted_nuclear_norm(ops::gather(v[0], idx, gshape), wp, &w0);
         },
         {img});
  }

  ModelConfig mc;
  mc.channels = 8;
  mc.n_m = 1;
  mc.n_r = 1;
  mc.n_s = 1;
  mc.heads = 2;
  mc.window_k = 4;
  const ParamStore model = init_model(mc, next());
  for (int stage : {1, 2}) {
    phase_row(
        "full model (stage " + std::to_string(stage) + ")", model,
        [&](Binding& b, std::span<const Var> in) { return mocha_forward(b, in[0], stage, mc).rgb; },
        [](std::uint64_t s) { return std::vector<Tensor>{uniform({3, 8, 8, 4}, s, 0.0, 1.0)}; }, 1e-3);
  }
  return rows;
}

}  // namespace mocha
