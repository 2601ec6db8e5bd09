// One PASS/FAIL line per acceptance criterion; exit status 1 if any fails.
#include <chrono>
#include <cmath>
#include <complex>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "mocha/corpus.hpp"
#include "mocha/errors.hpp"
#include "mocha/fft.hpp"
#include "mocha/gradsuite.hpp"
#include "mocha/io.hpp"
#include "mocha/losses.hpp"
#include "mocha/parallel.hpp"
#include "mocha/rng.hpp"
#include "mocha/stad.hpp"
#include "mocha/train.hpp"

using namespace mocha;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Tensor random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t(std::move(s));
  for (auto& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

// ---- 1

Outcome gradient_suite() {
  set_thread_count(1);
  const auto t0 = Clock::now();
  const auto rows = run_gradient_suite(1);
  const double secs = since(t0);
  set_thread_count(0);
  bool ok = secs <= 300.0;
  double worst = 0;
  std::string failed;
  for (const auto& r : rows) {
    ok = ok && r.report.pass;
    worst = std::max(worst, r.report.max_rel_err / r.tol);
    if (!r.report.pass) failed += " " + r.block;
  }
  return {ok, fmt("%zu rows, worst error %.3g of tolerance, %.1f s single-threaded%s%s", rows.size(), worst, secs,
                  failed.empty() ? "" : "; failed:", failed.c_str())};
}

// ---- 2

// Plain O(N^2 M^2) 2-D DFT of one real plane.
std::vector<std::complex<double>> dft2(const Tensor& x) {
  const std::size_t H = x.dim(0), W = x.dim(1);
  std::vector<std::complex<double>> out(H * W);
  for (std::size_t u = 0; u < H; ++u)
    for (std::size_t v = 0; v < W; ++v) {
      std::complex<double> s = 0;
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t xx = 0; xx < W; ++xx) {
          const double a = -2.0 * M_PI * (static_cast<double>(u * y) / H + static_cast<double>(v * xx) / W);
          s += x[y * W + xx] * std::complex<double>(std::cos(a), std::sin(a));
        }
      out[u * W + v] = s;
    }
  return out;
}

Outcome fft_checks() {
  double roundtrip = 0, parseval = 0, oracle = 0;
  for (std::size_t n : {4, 8, 16}) {
    const Tensor x = random_tensor({n, n}, 40 + n);
    const ComplexSpectrum s = fft2(x);
    const Tensor back = ifft2_real(s);
    for (std::size_t i = 0; i < x.size(); ++i) roundtrip = std::max(roundtrip, std::abs(back[i] - x[i]));
    double e_x = 0, e_f = 0;
    for (double v : x.vec()) e_x += v * v;
    for (std::size_t i = 0; i < x.size(); ++i) e_f += s.re[i] * s.re[i] + s.im[i] * s.im[i];
    parseval = std::max(parseval, std::abs(e_x - e_f / static_cast<double>(n * n)) / e_x);
    const auto ref = dft2(x);
    for (std::size_t i = 0; i < x.size(); ++i) oracle = std::max(oracle, std::abs(std::complex<double>(s.re[i], s.im[i]) - ref[i]));
    std::vector<std::complex<double>> line(n), direct(n);
    for (std::size_t i = 0; i < n; ++i) line[i] = direct[i] = {x[i], x[n + i]};
    fft1d(line, false);
    fft1d(direct, false, FftPath::kDirect);
    for (std::size_t i = 0; i < n; ++i) oracle = std::max(oracle, std::abs(line[i] - direct[i]));
  }
  const bool ok = roundtrip <= 1e-9 && parseval <= 1e-8 && oracle <= 1e-9;
  return {ok, fmt("sizes 4/8/16: roundtrip %.2e, Parseval %.2e, radix-2 vs direct DFT %.2e", roundtrip, parseval, oracle)};
}

// ---- 3

Outcome shape_contract() {
  stad::ModelConfig mc;
  mc.channels = 8;
  mc.n_m = 1;
  mc.n_r = 1;
  mc.n_s = 1;
  mc.heads = 2;
  mc.window_k = 4;
  const ParamStore model = stad::init_model(mc, 3);
  bool ok = true;
  std::string seen;
  for (std::size_t h : {8, 16, 32})
    for (std::size_t w : {8, 16, 32})
      for (int stage : {1, 2}) {
        const Tensor y = train::infer(model, mc, random_tensor({3, h, w, 4}, h * 100 + w, 0.0, 1.0), stage);
        ok = ok && y.shape() == Shape{2 * h, 2 * w, 3};
        if (stage == 2 && h == w) seen += " " + shape_str(y.shape());
      }

  // WFB with identity branches: unit centre taps, identity pointwise maps, the amplitude
  // fuse passing its first branch and a saturated phase gate.
  constexpr std::size_t C = 3;
  ParamStore store;
  Rng rng(7);
  stad::init_wfb(ParamInit(store, rng, "w."), C);
  for (auto& e : store.entries())
    for (auto& v : e.value.vec()) v = 0.0;
  Tensor tap({3, 3, C}), eye({C, C}), fuse({3 * C, C});
  for (std::size_t c = 0; c < C; ++c) {
    tap.at({1, 1, c}) = 1.0;
    eye.at({c, c}) = 1.0;
    fuse.at({c, c}) = 1.0;
  }
  store.set("w.arb.d1.dw.w", tap);
  store.set("w.arb.d1.pw.w", eye);
  store.set("w.arb.fuse.w", fuse);
  store.set("w.prb.dw.w", tap);
  store.set("w.prb.pw.w", eye);
  store.set("w.prb.se2.b", Tensor({C}, 60.0));
  const Tensor x = random_tensor({2, 16, 16, C}, 8);
  Tape tape;
  Binding b(tape, store);
  const Tensor y = stad::wfb_core(ParamView(b, "w."), tape.constant(x), 8).value();
  double err = 0;
  for (std::size_t i = 0; i < x.size(); ++i) err = std::max(err, std::abs(y[i] - x[i]));
  ok = ok && err <= 1e-9;
  return {ok, fmt("(3,H,W,4) -> (2H,2W,3) for H,W in {8,16,32}, both stages:%s; WFB identity roundtrip %.2e", seen.c_str(), err)};
}

// ---- 4, 5, 6

const corpus::CorpusStats& analysis_corpus() {
  static const corpus::CorpusStats stats = [] {
    synth::SynthConfig sc;
    sc.raw_h = sc.raw_w = 128;
    sc.frames = 5;
    std::vector<corpus::ClipStats> clips;
    for (std::size_t i = 0; i < 8; ++i) clips.push_back(corpus::clip_stats(synth::synth_clip(sc, corpus::clip_seed(1, i))));
    return corpus::corpus_stats(clips);
  }();
  return stats;
}

Outcome table1() {
  const auto& s = analysis_corpus();
  return {s.ncc_srgb < 1.0 && s.ncc_srgb < s.ncc_raw,
          fmt("8 clips, RAW 128x128, 5 frames: mean nCC sRGB %.4f, RAW %.4f", s.ncc_srgb, s.ncc_raw)};
}

Outcome table2() {
  const auto& s = analysis_corpus();
  return {s.temporal_mean_moire > s.temporal_mean_clean && s.temporal_var_moire > s.temporal_var_clean,
          fmt("temporal amplitude difference mean %.1f vs %.1f, variance %.4g vs %.4g (moire vs clean)", s.temporal_mean_moire,
              s.temporal_mean_clean, s.temporal_var_moire, s.temporal_var_clean)};
}

Outcome table3() {
  const auto& s = analysis_corpus();
  return {s.has_prior && s.prior_mean_moire > s.prior_mean_clean && s.prior_var_moire > s.prior_var_clean,
          fmt("prior mean %.4f vs %.4f, variance %.3g vs %.3g (moire vs clean)", s.prior_mean_moire, s.prior_mean_clean,
              s.prior_var_moire, s.prior_var_clean)};
}

// ---- 7

Outcome mp_property() {
  auto scaled = [](Tensor t) {
    double n = 0;
    for (double v : t.vec()) n += v * v;
    for (auto& v : t.vec()) v *= 5.0 / std::sqrt(n);
    return t;
  };
  std::size_t wins = 0;
  double worst_ratio = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Tensor tile = random_tensor({4, 4, 4}, 500 + seed);
    Tensor periodic({1, 16, 16, 4});
    for (std::size_t y = 0; y < 16; ++y)
      for (std::size_t x = 0; x < 16; ++x)
        for (std::size_t c = 0; c < 4; ++c) periodic[(y * 16 + x) * 4 + c] = tile[((y % 4) * 4 + x % 4) * 4 + c];
    periodic = scaled(periodic);
    const Tensor noise = scaled(random_tensor({1, 16, 16, 4}, 600 + seed));
    Tape tape;
    const double lp = losses::mp_loss(tape.constant(periodic)).value()[0];
    const double ln = losses::mp_loss(tape.constant(noise)).value()[0];
    if (lp < ln) ++wins;
    worst_ratio = std::max(worst_ratio, lp / ln);
  }
  return {wins == 20, fmt("periodic < noise on %zu/20 seeds at equal Frobenius norm; largest ratio %.3f", wins, worst_ratio)};
}

// ---- 8

Outcome training() {
  synth::SynthConfig sc;
  sc.raw_h = sc.raw_w = 16;
  sc.frames = 3;
  std::vector<train::Sample> clips;
  for (std::uint64_t s = 100; s < 108; ++s) clips.push_back(train::make_sample(synth::synth_clip(sc, s)));
  const train::Sample held = train::make_sample(synth::synth_clip(sc, 999));
  train::TrainConfig cfg;
  cfg.model.channels = 16;
  cfg.model.n_r = 2;
  cfg.model.n_s = 2;
  cfg.epochs1 = 30;
  cfg.epochs2 = 30;
  cfg.seed = 1;
  set_thread_count(1);
  auto t0 = Clock::now();
  const auto a = train::train_two_stage(clips, held, cfg);
  const double secs = since(t0);
  const auto b = train::train_two_stage(clips, held, cfg);
  set_thread_count(0);

  const auto& l1 = a.stage1.log;
  const auto& l2 = a.stage2.log;
  const double psnr1 = train::psnr(train::infer(a.stage1.params, cfg.model, held.i_raw, 1), held.targets.gt_rgb);
  const double psnr2 = train::psnr(train::infer(a.stage2.params, cfg.model, held.i_raw, 2), held.targets.gt_rgb);
  bool same = a.stage1.params == b.stage1.params && a.stage2.params == b.stage2.params &&
              l1.size() == b.stage1.log.size() && l2.size() == b.stage2.log.size();
  for (std::size_t i = 0; same && i < l1.size(); ++i) same = l1[i].total == b.stage1.log[i].total && l1[i].psnr == b.stage1.log[i].psnr;
  for (std::size_t i = 0; same && i < l2.size(); ++i) same = l2[i].total == b.stage2.log[i].total && l2[i].psnr == b.stage2.log[i].psnr;

  const bool fall = l1.back().total <= 0.5 * l1.front().total;
  const bool s2 = l2.back().total <= l2.front().total;
  const bool order = psnr2 >= psnr1;
  return {fall && s2 && order && same && secs <= 1800.0,
          fmt("stage 1 loss %.4f -> %.4f (%.0f%%); stage 2 total %.4f -> %.4f; held-out PSNR stage 1 %.3f dB, stage 2 "
              "%.3f dB; %.0f s per run; rerun %s",
              l1.front().total, l1.back().total, 100.0 * l1.back().total / l1.front().total, l2.front().total,
              l2.back().total, psnr1, psnr2, secs, same ? "bit-identical" : "DIFFERS")};
}

// ---- 9

int sh(const std::string& cmd) {
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

// Every file under root, keyed by relative path.
std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename().string().find(".stderr") == std::string::npos)
      files[fs::relative(e.path(), root).string()] = io::read_file(e.path());
  return files;
}

Outcome cli_determinism() {
  const fs::path base = fs::temp_directory_path() / "mocha_acceptance_cli";
  fs::remove_all(base);
  const std::string tiny =
      " --set channels=8 --set n_m=1 --set n_r=1 --set n_s=1 --set heads=2 --set window_k=4 --set patch=4"
      " --set patch_stride=2 --set group_k=4 --set search=8 --set epochs1=2 --set epochs2=2";
  std::vector<std::map<std::string, std::string>> runs;
  std::string failures;
  for (int threads : {1, 4}) {
    const fs::path d = base / ("threads" + std::to_string(threads));
    fs::create_directories(d);
    const std::string m = "MOCHA_THREADS=" + std::to_string(threads) + " " + MOCHA_CLI_PATH;
    const std::string c = (d / "corpus").string();
    auto step = [&](const std::string& name, const std::string& args) {
      const int rc = sh(m + " " + args + " > " + (d / (name + ".stdout")).string() + " 2> " + (d / (name + ".stderr")).string());
      if (rc != 0) failures += fmt(" %s(threads %d) exited %d;", name.c_str(), threads, rc);
    };
    step("synth", "synth --clips 3 --seed 11 --set raw_h=16 --set raw_w=16 --out " + c);
    step("cc", "analyze cc " + c);
    step("prior", "analyze prior " + c + " --patch 16 --maps " + (d / "maps").string());
    step("temporal", "analyze temporal " + c + " --maps " + (d / "maps").string());
    step("swap", "analyze swap " + c + "/clip000_moire_rgb.ndt " + c + "/clip000_clean_rgb.ndt --frame 1 --out " +
                     (d / "swap").string() + " --maps " + (d / "maps").string());
    step("train1", tiny + " train --stage 1 --corpus " + c + " --out " + (d / "t").string());
    step("train2", tiny + " train --stage 2 --from " + (d / "t/stage1.ckpt").string() + " --corpus " + c + " --out " +
                       (d / "t").string());
    step("trainall", tiny + " train --corpus " + c + " --out " + (d / "all").string());
    step("infer", tiny + " infer --weights " + (d / "t/stage2.ckpt").string() + " --input " + c +
                      "/clip001_moire_raw.ndt --out " + (d / "pred").string());
    step("gradcheck", "gradcheck");
    runs.push_back(snapshot(d));
  }
  std::size_t differ = 0;
  for (const auto& [name, bytes] : runs[0]) {
    auto it = runs[1].find(name);
    if (it == runs[1].end() || it->second != bytes) {
      ++differ;
      failures += " " + name + " differs;";
    }
  }
  if (runs[0].size() != runs[1].size()) failures += " file sets differ;";
  const bool ok = failures.empty() && runs[0].size() > 50;
  return {ok, fmt("synth, analyze cc/prior/temporal/swap, train 1/2/all, infer, gradcheck: %zu output files compared "
                  "across MOCHA_THREADS=1 and 4, %zu differ%s",
                  runs[0].size(), differ, failures.c_str())};
}

}  // namespace

int main() {
  const std::pair<const char*, std::function<Outcome()>> criteria[] = {
      {"gradient suite", gradient_suite},
      {"FFT correctness", fft_checks},
      {"shape contract", shape_contract},
      {"colour correlation ordering", table1},
      {"temporal variation ordering", table2},
      {"moire prior ordering", table3},
      {"MP loss on periodic vs noise", mp_property},
      {"two-stage training dynamics", training},
      {"CLI determinism", cli_determinism},
  };
  int failed = 0, id = 0;
  for (const auto& [name, fn] : criteria) {
    ++id;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    std::printf("[%s] %d. %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), since(t0));
    std::fflush(stdout);
    if (!o.pass) ++failed;
  }
  std::printf("%d/%d criteria pass\n", id - failed, id);
  return failed == 0 ? 0 : 1;
}
