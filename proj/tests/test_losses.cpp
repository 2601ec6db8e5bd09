#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <set>

#include "mocha/errors.hpp"
#include "mocha/gradcheck.hpp"
#include "mocha/losses.hpp"
#include "mocha/ops.hpp"
#include "mocha/optim.hpp"

using namespace mocha;
using namespace mocha::losses;

namespace {

Tensor random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(s));
  for (auto& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

double scalar(Var v) { return v.value()[0]; }

Tensor matmul_t(const Tensor& a, const Tensor& b) {  // a [n,k] * b[k,m]
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  Tensor c({n, m});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * m + j] += a[i * k + p] * b[p * m + j];
  return c;
}

double frobenius2(const Tensor& t) {
  double s = 0;
  for (double v : t.vec()) s += v * v;
  return s;
}

// [1,H,W,C] image with period `period` along both axes.
Tensor periodic_frame(std::size_t H, std::size_t W, std::size_t C, std::size_t period, std::uint64_t seed) {
  const Tensor tile = random_tensor({period, period, C}, seed);
  Tensor t({1, H, W, C});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < C; ++c) t[(y * W + x) * C + c] = tile[((y % period) * period + x % period) * C + c];
  return t;
}

void rescale_to(Tensor& t, double norm) {
  const double f = norm / std::sqrt(frobenius2(t));
  for (auto& v : t.vec()) v *= f;
}

}  // namespace

TEST_CASE("pixel losses") {
  Tape tape;
  const Tensor a = random_tensor({2, 3, 4, 3}, 1), b = random_tensor({2, 3, 4, 3}, 2);
  Var va = tape.constant(a), vb = tape.constant(b);
  CHECK(scalar(l1_loss(va, va)) == 0.0);
  CHECK(scalar(l2_mean(va, va)) == 0.0);
  Tensor shifted = a;
  for (auto& v : shifted.vec()) v += 1.0;
  CHECK(scalar(l1_loss(tape.constant(shifted), va)) == doctest::Approx(1.0).epsilon(1e-15));

  double s1 = 0, s2 = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    s1 += std::abs(a[i] - b[i]);
    s2 += (a[i] - b[i]) * (a[i] - b[i]);
  }
  const double n = static_cast<double>(a.size());  // T*H*W*C
  CHECK(std::abs(scalar(l1_loss(va, vb)) - s1 / n) <= 1e-12);
  CHECK(std::abs(scalar(l2_mean(va, vb)) - std::sqrt(s2 / n)) <= 1e-12);
  CHECK(std::abs(scalar(pd_loss(va, vb)) - std::sqrt(s2 / n)) <= 1e-12);
  CHECK_THROWS_AS(l1_loss(va, tape.constant(Tensor({2, 3, 4, 1}))), DimensionError);

  SUBCASE("l2_mean has a zero gradient at a perfect match") {
    Tape t;
    Var x = t.variable(a);
    t.backward(l2_mean(x, t.constant(a)));
    const Tensor grad = t.grad_or_zero(x);
    for (double g : grad.vec()) CHECK(g == 0.0);
  }
  SUBCASE("gradients") {
    auto r = grad_check([](Tape&, std::span<const Var> v) { return ops::add(l1_loss(v[0], v[1]), l2_mean(v[0], v[1])); },
                        {a, b});
    CAPTURE(r.max_rel_err);
    CHECK(r.pass);
  }
}

TEST_CASE("moire consistency loss") {
  Tape tape;
  const Tensor cf = random_tensor({3, 4, 4, 4}, 3), pm = random_tensor({3, 4, 4, 4}, 4), raw = random_tensor({3, 4, 4, 4}, 5);
  Var vcf = tape.constant(cf), vpm = tape.constant(pm);
  CHECK(scalar(mc_loss(vcf, vpm, ops::add(vcf, vpm))) == 0.0);
  CHECK(scalar(mc_loss(tape.constant(raw), tape.constant(Tensor(raw.shape())), tape.constant(raw))) == 0.0);
  double s = 0;
  for (std::size_t i = 0; i < raw.size(); ++i) s += (cf[i] + pm[i] - raw[i]) * (cf[i] + pm[i] - raw[i]);
  CHECK(std::abs(scalar(mc_loss(vcf, vpm, tape.constant(raw))) - std::sqrt(s / raw.size())) <= 1e-12);
  auto r = grad_check([](Tape&, std::span<const Var> v) { return mc_loss(v[0], v[1], v[2]); }, {cf, pm, raw});
  CHECK(r.pass);
}

TEST_CASE("patch grouping") {
  SUBCASE("period equal to the stride gives identical patches in every group") {
    const Tensor img = periodic_frame(24, 20, 2, 4, 6).reshaped({24, 20, 2});
    const auto set = group_patches(img);
    CHECK(set.groups.size() == 5 * 4);
    for (std::size_t g = 0; g < set.groups.size(); ++g) {
      const Tensor m = set.matrix(img, g);
      const std::size_t n = m.shape()[0], K = m.shape()[1];
      CHECK(K == 8);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 1; j < K; ++j) CHECK(m[r * K + j] == m[r * K]);
    }
  }
  SUBCASE("membership matches a brute-force all-pairs search") {
    GroupingParams gp;
    gp.patch = 2;
    gp.stride = 2;
    gp.k = 4;
    gp.search = 4;
    const Tensor img = random_tensor({8, 8, 3}, 7);
    const auto set = group_patches(img, gp);
    CHECK(set.groups.size() == 16);
    // Distances between every pair of 2x2 patch positions.
    const std::size_t P = 7;
    std::vector<double> d(P * P * P * P);
    for (std::size_t a = 0; a < P * P; ++a)
      for (std::size_t b = 0; b < P * P; ++b) {
        double s = 0;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx)
            for (std::size_t c = 0; c < 3; ++c) {
              const double e = img.at({a / P + dy, a % P + dx, c}) - img.at({b / P + dy, b % P + dx, c});
              s += e * e;
            }
        d[a * P * P + b] = s;
      }
    std::size_t g = 0;
    for (std::size_t ry = 0; ry < P; ry += 2)
      for (std::size_t rx = 0; rx < P; rx += 2, ++g) {
        std::vector<std::pair<double, std::size_t>> all;
        for (std::size_t b = 0; b < P * P; ++b) {
          const long dy = long(b / P) - long(ry), dx = long(b % P) - long(rx);
          if (std::abs(dy) <= 2 && std::abs(dx) <= 2) all.emplace_back(d[(ry * P + rx) * P * P + b], b);
        }
        std::sort(all.begin(), all.end());
        std::set<std::size_t> expect, got;
        for (std::size_t j = 0; j < 4; ++j) expect.insert(all[j].second);
        for (const auto& [y, x] : set.groups[g].coords) got.insert(y * P + x);
        CHECK(got == expect);
        CHECK(set.groups[g].coords[0] == std::pair{ry, rx});
      }
  }
  SUBCASE("contracts") {
    GroupingParams gp;
    gp.k = 1;
    CHECK_THROWS_AS(group_patches(Tensor({16, 16, 1}), gp), ConfigError);
    CHECK_THROWS_AS(group_patches(Tensor({6, 16, 1})), DimensionError);
    CHECK_THROWS_AS(group_patches(Tensor({8, 8, 1})), DimensionError);  // one position, K = 8
  }
  SUBCASE("group count is capped") {
    const auto set = group_patches(random_tensor({64, 64, 1}, 8));
    CHECK(set.groups.size() == 64);
  }
}

TEST_CASE("singular values") {
  SUBCASE("rank one") {
    const Tensor u = random_tensor({6, 1}, 9), v = random_tensor({1, 4}, 10);
    const auto s = singular_values(matmul_t(u, v));
    CHECK(s[0] == doctest::Approx(std::sqrt(frobenius2(u) * frobenius2(v))).epsilon(1e-12));
    for (std::size_t i = 1; i < 4; ++i) CHECK(s[i] <= 1e-10);
  }
  SUBCASE("diagonal") {
    const auto s = singular_values(Tensor({2, 2}, {1.0, 0.0, 0.0, 3.0}));
    CHECK(s[0] == doctest::Approx(3.0));
    CHECK(s[1] == doctest::Approx(1.0));
  }
  SUBCASE("two columns: roots of the 2x2 characteristic polynomial") {
    const Tensor m = random_tensor({6, 2}, 11);
    double a = 0, b = 0, c = 0;
    for (std::size_t r = 0; r < 6; ++r) {
      a += m[r * 2] * m[r * 2];
      c += m[r * 2 + 1] * m[r * 2 + 1];
      b += m[r * 2] * m[r * 2 + 1];
    }
    const double tr = a + c, det = a * c - b * b, disc = std::sqrt(tr * tr / 4 - det);
    const auto s = singular_values(m);
    CHECK(s[0] == doctest::Approx(std::sqrt(tr / 2 + disc)).epsilon(1e-12));
    CHECK(s[1] == doctest::Approx(std::sqrt(tr / 2 - disc)).epsilon(1e-12));
  }
  SUBCASE("random 6x4: Frobenius identity and reconstruction") {
    const Tensor m = random_tensor({6, 4}, 12);
    const Svd d = svd_jacobi(m);
    double s2 = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      s2 += d.sigma[i] * d.sigma[i];
      if (i) CHECK(d.sigma[i] <= d.sigma[i - 1]);
    }
    CHECK(std::abs(s2 - frobenius2(m)) <= 1e-10);
    for (std::size_t r = 0; r < 6; ++r)
      for (std::size_t c = 0; c < 4; ++c) {
        double v = 0;
        for (std::size_t i = 0; i < 4; ++i) v += d.u[r * 4 + i] * d.sigma[i] * d.v[c * 4 + i];
        CHECK(v == doctest::Approx(m[r * 4 + c]).epsilon(1e-12));
      }
  }
  SUBCASE("failure modes") {
    CHECK_THROWS_AS(svd_jacobi(random_tensor({6, 4}, 13), 1e-12, 1), NumericalError);
    CHECK_THROWS_AS(singular_values(Tensor({2, 2}, {1.0, NAN, 0.0, 1.0})), NumericalError);
  }
}

TEST_CASE("moire prior loss") {
  const WnnmParams wp;
  SUBCASE("zero prediction") {
    Tape tape;
    CHECK(scalar(mp_loss(tape.constant(Tensor({1, 16, 16, 4})))) == 0.0);
  }
  SUBCASE("K identical unit-norm patches") {
    const std::size_t n = 12, K = 8;
    Tensor col = random_tensor({n}, 14);
    rescale_to(col, 1.0);
    Tensor g({1, n, K});
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < K; ++j) g[r * K + j] = col[r];
    Tape tape;
    const double rk = std::sqrt(double(K));
    CHECK(scalar(weighted_nuclear_norm(tape.constant(g), wp)) == doctest::Approx(wp.c_w * rk * rk / (rk + wp.eps)).epsilon(1e-9));
    // Through the grouping path: a periodic frame yields rank-one groups.
    Tensor frame = periodic_frame(16, 16, 4, 4, 15);
    Tape t2;
    const double loss = scalar(mp_loss(t2.constant(frame)));
    const auto set = group_patches(frame.reshaped({16, 16, 4}));
    double expect = 0;
    for (std::size_t gi = 0; gi < set.groups.size(); ++gi) {
      const auto sv = singular_values(set.matrix(frame.reshaped({16, 16, 4}), gi));
      CHECK(sv[1] <= 1e-12 * sv[0]);
      for (double s : sv) expect += wp.c_w * rk * s / (s + wp.eps);
    }
    CHECK(loss == doctest::Approx(expect / set.groups.size()).epsilon(1e-9));
  }
  SUBCASE("invariant to permuting patches within a group") {
    const Tensor g = random_tensor({2, 10, 5}, 16);
    Tensor p(g.shape());
    const std::size_t perm[] = {3, 0, 4, 1, 2};
    for (std::size_t gi = 0; gi < 2; ++gi)
      for (std::size_t r = 0; r < 10; ++r)
        for (std::size_t j = 0; j < 5; ++j) p[(gi * 10 + r) * 5 + j] = g[(gi * 10 + r) * 5 + perm[j]];
    Tape tape;
    CHECK(scalar(weighted_nuclear_norm(tape.constant(p))) ==
          doctest::Approx(scalar(weighted_nuclear_norm(tape.constant(g)))).epsilon(1e-12));
  }
  SUBCASE("self-similar predictions score lower than white noise of equal norm") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Tensor periodic = periodic_frame(16, 16, 4, 4, 100 + seed), noise = random_tensor({1, 16, 16, 4}, 200 + seed);
      rescale_to(periodic, 5.0);
      rescale_to(noise, 5.0);
      Tape tape;
      CAPTURE(seed);
      CHECK(scalar(mp_loss(tape.constant(periodic))) < scalar(mp_loss(tape.constant(noise))));
    }
  }
  SUBCASE("gradient with frozen weights, away from repeated singular values") {
    Tensor g = random_tensor({2, 8, 4}, 17);
    // Spread the spectrum so every gap is at least 1e-3.
    for (std::size_t gi = 0; gi < 2; ++gi)
      for (std::size_t r = 0; r < 8; ++r)
        for (std::size_t j = 0; j < 4; ++j) g[(gi * 8 + r) * 4 + j] *= 1.0 + 0.5 * double(j);
    const Tensor g0 = g;
    for (std::size_t gi = 0; gi < 2; ++gi) {
      Tensor m({8, 4});
      std::copy_n(g.vec().begin() + gi * 32, 32, m.vec().begin());
      const auto s = singular_values(m);
      for (std::size_t i = 1; i < 4; ++i) REQUIRE(s[i - 1] - s[i] >= 1e-3);
    }
    const GroupWeights w0 = wnnm_weights(g0, wp);
    auto r = grad_check([&](Tape&, std::span<const Var> v) { return weighted_nuclear_norm(v[0], wp, &w0); }, {g0});
    CAPTURE(r.max_rel_err);
    CHECK(r.pass);
    // The detached-weight gradient is what training sees: Σ w_i u_i v_iᵀ.
    Tape tape;
    Var x = tape.variable(g0);
    tape.backward(weighted_nuclear_norm(x, wp));
    Tensor m({8, 4});
    std::copy_n(g0.vec().begin(), 32, m.vec().begin());
    const Svd d = svd_jacobi(m);
    for (std::size_t r2 = 0; r2 < 8; ++r2)
      for (std::size_t c = 0; c < 4; ++c) {
        double e = 0;
        for (std::size_t i = 0; i < 4; ++i) e += w0[0][i] * d.u[r2 * 4 + i] * d.v[c * 4 + i];
        CHECK(tape.grad_or_zero(x)[r2 * 4 + c] == doctest::Approx(e / 2.0).epsilon(1e-10));
      }
  }
}

TEST_CASE("perceptual surrogate") {
  const Tensor a = random_tensor({16, 16, 3}, 18, 0.0, 1.0), b = random_tensor({16, 16, 3}, 19, 0.0, 1.0);
  Tape tape;
  CHECK(scalar(perceptual_surrogate(tape.constant(a), a)) == 0.0);
  CHECK(scalar(perceptual_surrogate(tape.constant(a), b)) == doctest::Approx(scalar(perceptual_surrogate(tape.constant(b), a))).epsilon(1e-12));
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Tensor p = random_tensor({16, 16, 3}, 300 + s, 0.0, 1.0), q = random_tensor({16, 16, 3}, 400 + s, 0.0, 1.0);
    CHECK(scalar(perceptual_surrogate(tape.constant(p), q)) > 0.0);
  }
  const Tensor b8 = random_tensor({8, 8, 3}, 21, 0.0, 1.0);
  auto r = grad_check([&](Tape&, std::span<const Var> v) { return perceptual_surrogate(v[0], b8); },
                      {random_tensor({8, 8, 3}, 20, 0.0, 1.0)});
  CAPTURE(r.max_rel_err);
  CHECK(r.pass);
  CHECK_THROWS_AS(perceptual_surrogate(tape.constant(a), Tensor({16, 16, 1})), DimensionError);
}

TEST_CASE("stage losses") {
  stad::ModelConfig cfg;
  cfg.channels = 8;
  cfg.n_m = 1;
  cfg.n_r = 1;
  cfg.n_s = 1;
  cfg.heads = 2;
  cfg.window_k = 4;
  const ParamStore store = stad::init_model(cfg, 21);
  Targets tg;
  tg.i_raw = random_tensor({3, 8, 8, 4}, 22, 0.0, 1.0);
  tg.gt_rgb = random_tensor({16, 16, 3}, 23, 0.0, 1.0);
  tg.gt_rgb_all = random_tensor({3, 16, 16, 3}, 24, 0.0, 1.0);

  SUBCASE("perfect prediction gives zero stage-1 loss") {
    Tape tape;
    stad::ForwardResult out;
    out.rgb = tape.constant(tg.gt_rgb);
    const auto rep = stage_losses(out, tg, 1);
    CHECK(scalar(rep.total) == 0.0);
    CHECK_THROWS_AS(stage_losses(out, tg, 2), UsageError);
    CHECK_THROWS_AS(stage_losses(out, tg, 0), UsageError);
  }
  SUBCASE("default weights") {
    const LossWeights w;
    CHECK(w.perceptual == 0.01);
    CHECK(w.pd == 1.0);
    CHECK(w.mp == 1.0);
    CHECK(w.mc == 0.5);
    LossWeights bad;
    bad.mc = -1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }
  SUBCASE("report terms sum to the total") {
    for (int stage : {1, 2}) {
      Tape tape;
      Binding b(tape, store);
      const auto out = stad::mocha_forward(b, tape.constant(tg.i_raw), stage, cfg);
      GroupingParams gp;
      gp.patch = 4;
      gp.stride = 2;
      const auto rep = stage_losses(out, tg, stage, {}, gp);
      CHECK(rep.terms.size() == (stage == 1 ? 2u : 5u));
      double s = 0;
      for (const auto& [name, v] : rep.terms) s += v;
      CHECK(std::abs(s - scalar(rep.total)) <= 1e-12);
      tape.backward(rep.total);
      for (const auto& name : b.bound_names()) CHECK((stage == 2 || !name.starts_with("dmad.")));
    }
  }
}

TEST_CASE("AdamW") {
  using optim::AdamW;
  ParamStore store;
  store.add("a", Tensor({1}, 1.0));
  store.add("b", Tensor({2}, {0.5, -0.5}));
  GradList g(2);

  SUBCASE("closed-form first step") {
    AdamW opt(store, {"a"}, {.lr = 0.1, .weight_decay = 0.0});
    g[0] = Tensor({1}, 2.0);
    opt.step(store, g);
    CHECK(opt.first_moment("a")[0] == doctest::Approx(0.2).epsilon(1e-15));
    CHECK(opt.second_moment("a")[0] == doctest::Approx(0.004).epsilon(1e-15));
    CHECK(store.get("a")[0] == doctest::Approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8)).epsilon(1e-15));
  }
  SUBCASE("zero gradient without decay changes nothing") {
    AdamW opt(store, {"a", "b"}, {.lr = 0.1, .weight_decay = 0.0});
    g[0] = Tensor({1});
    g[1] = Tensor({2});
    opt.step(store, g);
    CHECK(store.get("a")[0] == 1.0);
    CHECK(store.get("b")[1] == -0.5);
  }
  SUBCASE("decay is decoupled") {
    AdamW opt(store, {"a"}, {.lr = 0.1, .weight_decay = 0.5});
    g[0] = Tensor({1});
    opt.step(store, g);
    CHECK(store.get("a")[0] == doctest::Approx(0.95).epsilon(1e-15));
  }
  SUBCASE("lr_scale isolation") {
    ParamStore other = store;
    other.set_lr_scale("a", 0.1);
    AdamW o1(store, {"a", "b"}, {.lr = 0.1, .weight_decay = 0.0}), o2(other, {"a", "b"}, {.lr = 0.1, .weight_decay = 0.0});
    g[0] = Tensor({1}, 2.0);
    g[1] = Tensor({2}, {1.0, -3.0});
    o1.step(store, g);
    o2.step(other, g);
    CHECK(bit_identical(store.get("b"), other.get("b")));
    CHECK(1.0 - other.get("a")[0] == doctest::Approx(0.1 * (1.0 - store.get("a")[0])).epsilon(1e-12));
  }
  SUBCASE("bit-reproducible and unmanaged parameters untouched") {
    ParamStore s2 = store;
    AdamW o1(store, {"b"}), o2(s2, {"b"});
    for (int i = 0; i < 5; ++i) {
      g[0] = Tensor({1}, 1.0);
      g[1] = random_tensor({2}, 25 + i);
      o1.step(store, g);
      o2.step(s2, g);
    }
    CHECK(bit_identical(store.get("b"), s2.get("b")));
    CHECK(store.get("a")[0] == 1.0);
    CHECK(o1.steps() == 5);
  }
  SUBCASE("misaligned gradients") {
    AdamW opt(store, {"a"});
    CHECK_THROWS_AS(opt.step(store, GradList(1)), UsageError);
    GradList bad(2);
    bad[0] = Tensor({3});
    CHECK_THROWS_AS(opt.step(store, bad), UsageError);
    CHECK_THROWS_AS(AdamW(store, {"a"}, {.lr = -1.0}), ConfigError);
  }
}
