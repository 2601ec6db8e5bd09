#include "mocha/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

#include "mocha/errors.hpp"
#include "mocha/ops.hpp"
#include "mocha/parallel.hpp"
#include "mocha/params.hpp"
#include "mocha/rng.hpp"

namespace mocha::losses {

void LossWeights::validate() const {
  for (double w : {perceptual, pd, mp, mc})
    if (!(w >= 0.0)) throw ConfigError("loss weights must be >= 0");
}

void GroupingParams::validate() const {
  if (k < 2) throw ConfigError("patch groups need K >= 2");
  if (patch == 0 || stride == 0 || max_groups == 0) throw ConfigError("patch, stride and max_groups must be positive");
}

namespace {

void require_same(const Var& a, const Var& b, const char* what) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(what) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
}

}  // namespace

Var l1_loss(Var pred, Var target) {
  require_same(pred, target, "l1_loss");
  return ops::mean(ops::abs(ops::sub(pred, target)));
}

Var l2_mean(Var pred, Var target) {
  require_same(pred, target, "l2_mean");
  return ops::sqrt(ops::mean(ops::square(ops::sub(pred, target))));
}

Var pd_loss(Var i_m_rgb, Var gt_rgb) { return l2_mean(i_m_rgb, gt_rgb); }

Var mc_loss(Var i_cf_raw, Var i_pm_raw, Var i_raw) {
  require_same(i_cf_raw, i_pm_raw, "mc_loss");
  return l2_mean(ops::add(i_cf_raw, i_pm_raw), i_raw);
}

Tensor PatchGroupSet::matrix(const Tensor& img, std::size_t g) const {
  const auto& coords = groups.at(g).coords;
  const std::size_t n = patch * patch * channels, K = coords.size(), W = img.shape()[1];
  Tensor m({n, K});
  for (std::size_t j = 0; j < K; ++j)
    for (std::size_t dy = 0; dy < patch; ++dy)
      for (std::size_t dx = 0; dx < patch; ++dx)
        for (std::size_t c = 0; c < channels; ++c)
          m[((dy * patch + dx) * channels + c) * K + j] =
              img[((coords[j].first + dy) * W + coords[j].second + dx) * channels + c];
  return m;
}

std::vector<std::int64_t> PatchGroupSet::gather_index(std::size_t width) const {
  std::vector<std::int64_t> index;
  for (const auto& grp : groups) {
    const std::size_t K = grp.coords.size();
    for (std::size_t dy = 0; dy < patch; ++dy)
      for (std::size_t dx = 0; dx < patch; ++dx)
        for (std::size_t c = 0; c < channels; ++c)
          for (std::size_t j = 0; j < K; ++j)
            index.push_back(static_cast<std::int64_t>(((grp.coords[j].first + dy) * width + grp.coords[j].second + dx) * channels + c));
  }
  return index;
}

PatchGroupSet group_patches(const Tensor& img, const GroupingParams& gp) {
  gp.validate();
  if (img.rank() != 3) throw DimensionError("group_patches: expected [H,W,C], got " + shape_str(img.shape()));
  const std::size_t H = img.shape()[0], W = img.shape()[1], C = img.shape()[2], P = gp.patch;
  if (H < P || W < P) throw DimensionError("group_patches: image smaller than one patch");
  const std::size_t last_y = H - P, last_x = W - P;

  std::vector<std::pair<std::size_t, std::size_t>> refs;
  for (std::size_t y = 0; y <= last_y; y += gp.stride)
    for (std::size_t x = 0; x <= last_x; x += gp.stride) refs.emplace_back(y, x);
  if (refs.size() > gp.max_groups) {
    std::vector<std::pair<std::size_t, std::size_t>> kept;
    for (std::size_t i = 0; i < gp.max_groups; ++i) kept.push_back(refs[i * refs.size() / gp.max_groups]);
    refs = std::move(kept);
  }

  auto distance = [&](std::size_t ay, std::size_t ax, std::size_t by, std::size_t bx) {
    double d = 0;
    for (std::size_t dy = 0; dy < P; ++dy)
      for (std::size_t dx = 0; dx < P; ++dx)
        for (std::size_t c = 0; c < C; ++c) {
          const double e = img[((ay + dy) * W + ax + dx) * C + c] - img[((by + dy) * W + bx + dx) * C + c];
          d += e * e;
        }
    return d;
  };

  PatchGroupSet set;
  set.patch = P;
  set.channels = C;
  set.groups.resize(refs.size());
  const std::size_t half = gp.search / 2;
  parallel_for(refs.size(), [&](std::size_t g) {
    const auto [ry, rx] = refs[g];
    struct Cand {
      double d;
      int not_ref;
      std::size_t y, x;
    };
    std::vector<Cand> cands;
    for (std::size_t y = ry > half ? ry - half : 0; y <= std::min(last_y, ry + half); ++y)
      for (std::size_t x = rx > half ? rx - half : 0; x <= std::min(last_x, rx + half); ++x)
        cands.push_back({distance(ry, rx, y, x), (y == ry && x == rx) ? 0 : 1, y, x});
    if (cands.size() < gp.k) throw DimensionError("group_patches: search window holds fewer than K patches");
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(gp.k), cands.end(),
                      [](const Cand& a, const Cand& b) {
                        return std::tie(a.d, a.not_ref, a.y, a.x) < std::tie(b.d, b.not_ref, b.y, b.x);
                      });
    for (std::size_t j = 0; j < gp.k; ++j) set.groups[g].coords.emplace_back(cands[j].y, cands[j].x);
  });
  return set;
}

Svd svd_jacobi(const Tensor& m, double tol, int max_sweeps) {
  if (m.rank() != 2) throw DimensionError("svd: expected a matrix");
  const std::size_t n = m.shape()[0], K = m.shape()[1];
  for (double v : m.vec())
    if (!std::isfinite(v)) throw NumericalError("svd: non-finite entry");
  // Columns stored contiguously: a[j*n + r].
  std::vector<double> a(n * K), v(K * K, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < K; ++j) a[j * n + r] = m[r * K + j];
  for (std::size_t j = 0; j < K; ++j) v[j * K + j] = 1.0;

  bool converged = false;
  for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t p = 0; p + 1 < K; ++p)
      for (std::size_t q = p + 1; q < K; ++q) {
        double alpha = 0, beta = 0, gamma = 0;
        for (std::size_t r = 0; r < n; ++r) {
          alpha += a[p * n + r] * a[p * n + r];
          beta += a[q * n + r] * a[q * n + r];
          gamma += a[p * n + r] * a[q * n + r];
        }
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
        for (std::size_t r = 0; r < n; ++r) {
          const double ap = a[p * n + r], aq = a[q * n + r];
          a[p * n + r] = c * ap - s * aq;
          a[q * n + r] = s * ap + c * aq;
        }
        for (std::size_t r = 0; r < K; ++r) {
          const double vp = v[p * K + r], vq = v[q * K + r];
          v[p * K + r] = c * vp - s * vq;
          v[q * K + r] = s * vp + c * vq;
        }
      }
  }
  if (!converged) throw NumericalError("svd: Jacobi rotations did not converge in " + std::to_string(max_sweeps) + " sweeps");

  std::vector<double> norms(K);
  for (std::size_t j = 0; j < K; ++j) {
    double s = 0;
    for (std::size_t r = 0; r < n; ++r) s += a[j * n + r] * a[j * n + r];
    norms[j] = std::sqrt(s);
  }
  std::vector<std::size_t> order(K);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return norms[i] > norms[j]; });

  Svd out;
  out.u = Tensor({n, K});
  out.v = Tensor({K, K});
  for (std::size_t i = 0; i < K; ++i) {
    const std::size_t j = order[i];
    out.sigma.push_back(norms[j]);
    if (norms[j] > 0.0)
      for (std::size_t r = 0; r < n; ++r) out.u[r * K + i] = a[j * n + r] / norms[j];
    for (std::size_t r = 0; r < K; ++r) out.v[r * K + i] = v[j * K + r];
  }
  return out;
}

std::vector<double> singular_values(const Tensor& m) { return svd_jacobi(m).sigma; }

namespace {

Tensor group_slice(const Tensor& groups, std::size_t g) {
  const std::size_t n = groups.shape()[1], K = groups.shape()[2];
  Tensor m({n, K});
  std::copy_n(groups.vec().begin() + static_cast<std::ptrdiff_t>(g * n * K), n * K, m.vec().begin());
  return m;
}

}  // namespace

GroupWeights wnnm_weights(const Tensor& groups, const WnnmParams& wp) {
  if (groups.rank() != 3) throw DimensionError("wnnm: expected [G,n,K]");
  const std::size_t G = groups.shape()[0], K = groups.shape()[2];
  GroupWeights w(G);
  parallel_for(G, [&](std::size_t g) {
    for (double s : singular_values(group_slice(groups, g)))
      w[g].push_back(wp.c_w * std::sqrt(static_cast<double>(K)) / (s + wp.eps));
  });
  return w;
}

Var weighted_nuclear_norm(Var groups, const WnnmParams& wp, const GroupWeights* frozen) {
  const Tensor& gv = groups.value();
  if (gv.rank() != 3 || gv.shape()[0] == 0) throw DimensionError("wnnm: expected non-empty [G,n,K]");
  const std::size_t G = gv.shape()[0], n = gv.shape()[1], K = gv.shape()[2];
  std::vector<Svd> svds(G);
  parallel_for(G, [&](std::size_t g) { svds[g] = svd_jacobi(group_slice(gv, g)); });
  GroupWeights w = frozen ? *frozen : GroupWeights(G);
  if (w.size() != G) throw UsageError("wnnm: frozen weights do not match the group count");
  double total = 0;
  for (std::size_t g = 0; g < G; ++g) {
    if (!frozen)
      for (double s : svds[g].sigma) w[g].push_back(wp.c_w * std::sqrt(static_cast<double>(K)) / (s + wp.eps));
    if (w[g].size() != K) throw UsageError("wnnm: frozen weights do not match K");
    for (std::size_t i = 0; i < K; ++i) total += w[g][i] * svds[g].sigma[i];
  }
  Tensor y({1}, total / static_cast<double>(G));
  return groups.tape().record(
      "wnnm", std::move(y), {groups},
      [groups, svds = std::move(svds), w = std::move(w), G, n, K](Tape& t, const Tensor& grad) {
        Tensor d(t.value(groups).shape());
        const double scale = grad[0] / static_cast<double>(G);
        for (std::size_t g = 0; g < G; ++g)
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < K; ++c) {
              double acc = 0;
              for (std::size_t i = 0; i < K; ++i) acc += w[g][i] * svds[g].u[r * K + i] * svds[g].v[c * K + i];
              d[(g * n + r) * K + c] = scale * acc;
            }
        t.accumulate(groups, d);
      });
}

Var mp_loss(Var i_pm_raw, const GroupingParams& gp, const WnnmParams& wp) {
  const Shape s = i_pm_raw.shape();
  if (s.size() != 4) throw DimensionError("mp_loss: expected [T,H,W,C], got " + shape_str(s));
  const std::size_t T = s[0], H = s[1], W = s[2], C = s[3];
  Var total;
  for (std::size_t t = 0; t < T; ++t) {
    Var frame = ops::reshape(ops::slice_axis0(i_pm_raw, t, 1), {H, W, C});
    const PatchGroupSet set = group_patches(frame.value(), gp);
    const std::size_t n = gp.patch * gp.patch * C;
    Var groups = ops::gather(frame, set.gather_index(W), {set.groups.size(), n, gp.k});
    Var term = weighted_nuclear_norm(groups, wp);
    total = t == 0 ? term : ops::add(total, term);
  }
  return ops::scale(total, 1.0 / static_cast<double>(T));
}

namespace {

struct FrozenPyramid {
  std::vector<Tensor> w, b;
};

const FrozenPyramid& pyramid(std::uint64_t seed) {
  // Built on first use; the seed is fixed in practice, so one cached instance per thread suffices.
  thread_local std::uint64_t cached_seed = 0;
  thread_local FrozenPyramid cached;
  if (cached.w.empty() || cached_seed != seed) {
    ParamStore store;
    Rng rng(seed);
    ParamInit init(store, rng);
    const std::size_t widths[] = {3, 8, 16, 32, 64};
    cached = {};
    for (std::size_t l = 0; l < 4; ++l) {
      const std::string name = "p" + std::to_string(l);
      init.conv(name, 3, widths[l], widths[l + 1]);
      cached.w.push_back(store.get(name + ".w"));
      cached.b.push_back(store.get(name + ".b"));
    }
    cached_seed = seed;
  }
  return cached;
}

Var pyramid_features(Var rgb, const FrozenPyramid& net) {
  Shape s = rgb.shape();
  if (s.size() == 3) rgb = ops::reshape(rgb, {1, s[0], s[1], s[2]});
  if (rgb.shape().back() != 3) throw DimensionError("perceptual: expected RGB input");
  Tape& tape = rgb.tape();
  for (std::size_t l = 0; l < net.w.size(); ++l)
    rgb = ops::gelu(ops::conv2d(rgb, tape.constant(net.w[l]), tape.constant(net.b[l]), {.dilation = 1, .stride = 2}));
  return rgb;
}

}  // namespace

Var perceptual_surrogate(Var pred_rgb, const Tensor& gt_rgb, std::uint64_t seed) {
  if (pred_rgb.shape() != gt_rgb.shape()) throw DimensionError("perceptual: shapes differ");
  const FrozenPyramid& net = pyramid(seed);
  Var fp = pyramid_features(pred_rgb, net);
  Var fg = pyramid_features(pred_rgb.tape().constant(gt_rgb), net);
  return l2_mean(fp, fg);
}

LossReport stage_losses(const stad::ForwardResult& out, const Targets& targets, int stage, const LossWeights& w,
                        const GroupingParams& gp, const WnnmParams& wp) {
  w.validate();
  if (stage != 1 && stage != 2) throw UsageError("stage_losses: stage must be 1 or 2");
  if (stage == 2 && !out.dmad) throw UsageError("stage_losses: stage 2 needs DMAD outputs");
  Tape& tape = out.rgb.tape();
  LossReport r;
  auto add = [&](const char* name, double weight, Var term) {
    Var weighted = ops::scale(term, weight);
    r.terms.emplace_back(name, weighted.value()[0]);
    r.total = r.total.valid() ? ops::add(r.total, weighted) : weighted;
  };
  add("l1", 1.0, l1_loss(out.rgb, tape.constant(targets.gt_rgb)));
  add("perceptual", w.perceptual, perceptual_surrogate(out.rgb, targets.gt_rgb));
  if (stage == 2) {
    const auto& ddb = out.dmad->ddb;
    add("pd", w.pd, pd_loss(ddb.i_m_rgb, tape.constant(targets.gt_rgb_all)));
    const std::size_t centre = ddb.i_pm_raw.shape()[0] / 2;
    add("mp", w.mp, mp_loss(ops::slice_axis0(ddb.i_pm_raw, centre, 1), gp, wp));
    add("mc", w.mc, mc_loss(ddb.i_cf_raw, ddb.i_pm_raw, tape.constant(targets.i_raw)));
  }
  return r;
}

}  // namespace mocha::losses
