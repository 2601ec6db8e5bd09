// mocha: synth | analyze | train | infer | gradcheck
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mocha/analysis.hpp"
#include "mocha/config.hpp"
#include "mocha/corpus.hpp"
#include "mocha/errors.hpp"
#include "mocha/fft.hpp"
#include "mocha/gradsuite.hpp"
#include "mocha/io.hpp"
#include "mocha/train.hpp"

namespace fs = std::filesystem;
using namespace mocha;

namespace {

enum Exit { kOk = 0, kUsage = 1, kFormat = 2, kNumerical = 3 };

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Globals {
  std::string config_file;
  std::vector<std::string> sets;
};

RunConfig resolve(const Globals& g, const std::vector<std::pair<std::string, std::string>>& flags) {
  RunConfig cfg = g.config_file.empty() ? RunConfig() : RunConfig::from_file(g.config_file);
  for (const auto& s : g.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + s + "'");
    cfg.set(s.substr(0, eq), s.substr(eq + 1));
  }
  for (const auto& [k, v] : flags) cfg.set(k, v);
  return cfg;
}

void log_config(const RunConfig& cfg, const std::string& cmd, const fs::path& copy = {}) {
  std::cerr << "mocha " << cmd << ": resolved config (hash " << cfg.hash() << ")\n" << cfg.resolved();
  if (!copy.empty()) {
    std::ofstream os(copy);
    if (!(os << cfg.resolved())) throw Error("cannot write '" + copy.string() + "'");
  }
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create directory '" + dir.string() + "': " + ec.message());
}

// ---- synth

struct SynthArgs {
  std::string out;
  std::optional<std::size_t> clips;
  std::optional<std::uint64_t> seed;
  std::optional<double> scale, jitter;
};

int cmd_synth(const Globals& g, const SynthArgs& a) {
  std::vector<std::pair<std::string, std::string>> flags;
  if (a.clips) flags.emplace_back("clips", std::to_string(*a.clips));
  if (a.seed) flags.emplace_back("synth_seed", std::to_string(*a.seed));
  if (a.scale) {
    flags.emplace_back("scale_lo", num(*a.scale));
    flags.emplace_back("scale_hi", num(*a.scale));
  }
  if (a.jitter) {
    // Multiplies every default pose perturbation; 0 holds the camera still.
    const RunConfig defaults;
    for (const char* k : {"translation_jitter", "rotation_jitter", "scale_jitter", "tilt"})
      flags.emplace_back(k, num(defaults.real(k) * *a.jitter));
  }
  const RunConfig cfg = resolve(g, flags);
  make_dir(a.out);
  log_config(cfg, "synth", fs::path(a.out) / "config.txt");
  const synth::SynthConfig sc = cfg.synth();
  const std::uint64_t base = cfg.u64("synth_seed");
  std::vector<synth::VideoClipPair> clips;
  for (std::size_t i = 0; i < cfg.count("clips"); ++i) clips.push_back(synth::synth_clip(sc, corpus::clip_seed(base, i)));
  corpus::write_corpus(a.out, clips, {{"synth_seed", std::to_string(base)}, {"config_hash", cfg.hash()}});
  return kOk;
}

// ---- analyze

struct AnalyzeArgs {
  std::string kind;
  std::vector<std::string> inputs;
  std::string csv, maps, out = ".";
  std::size_t patch = 128;
  std::size_t frame = 0;
};

class Csv {
 public:
  explicit Csv(const std::string& path) {
    if (!path.empty()) {
      file_.open(path);
      if (!file_) throw Error("cannot open '" + path + "' for writing");
    }
    os() << "clip_id,metric,value\n";
  }
  void row(const std::string& id, const std::string& metric, double v) { os() << id << ',' << metric << ',' << num(v) << '\n'; }
  void close() {
    os().flush();
    if (!os()) throw Error("write failed for CSV output");
  }

 private:
  std::ostream& os() { return file_.is_open() ? static_cast<std::ostream&>(file_) : std::cout; }
  std::ofstream file_;
};

// Display map: channel mean of log(1 + |F|), DC moved to the centre.
Tensor amplitude_map(const Tensor& img) {
  const Tensor amp = fft2(img).amplitude();
  const std::size_t H = img.dim(0), W = img.dim(1), C = img.rank() == 3 ? img.dim(2) : 1;
  Tensor out({H, W});
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      double s = 0;
      for (std::size_t c = 0; c < C; ++c) s += std::log1p(amp[(y * W + x) * C + c]);
      out[((y + H / 2) % H) * W + (x + W / 2) % W] = s / static_cast<double>(C);
    }
  return out;
}

std::vector<Tensor> frames_of(const Tensor& t, const std::string& path) {
  if (t.rank() == 3) return {t};
  if (t.rank() == 4) {
    std::vector<Tensor> f;
    for (std::size_t i = 0; i < t.dim(0); ++i) f.push_back(synth::frame(t, i));
    return f;
  }
  throw DimensionError("'" + path + "' has shape " + shape_str(t.shape()) + "; expected [H,W,C] or [T,H,W,C]");
}

Tensor pick_frame(const std::string& path, std::size_t frame) {
  const Tensor t = io::load_ndt(path);
  const auto f = frames_of(t, path);
  if (frame >= f.size()) throw UsageError("--frame " + std::to_string(frame) + " out of range for '" + path + "'");
  return f[frame];
}

std::string frame_id(const std::string& stem, std::size_t t, std::size_t n) {
  return n == 1 ? stem : stem + "_t" + std::to_string(t);
}

bool is_corpus(const std::string& p) { return fs::is_directory(p); }

void write_map(const AnalyzeArgs& a, const std::string& name, const Tensor& m) {
  if (a.maps.empty()) return;
  make_dir(a.maps);
  io::save_pfm(fs::path(a.maps) / (name + ".pfm"), m);
}

int analyze_cc(const AnalyzeArgs& a, Csv& csv) {
  if (is_corpus(a.inputs[0])) {
    if (a.inputs.size() != 1) throw UsageError("analyze cc takes one corpus directory");
    std::vector<double> all_srgb, all_raw;
    for (const auto& f : corpus::read_manifest(a.inputs[0])) {
      const auto clip = corpus::load_clip(f);
      std::vector<double> srgb, raw;
      for (std::size_t t = 0; t < clip.moire_rgb.dim(0); ++t) {
        srgb.push_back(analysis::normalized_cc(synth::frame(clip.moire_rgb, t), synth::frame(clip.clean_rgb, t)));
        raw.push_back(analysis::normalized_cc(analysis::raw_to_rgb3(synth::frame(clip.moire_raw, t)),
                                              analysis::raw_to_rgb3(synth::frame(clip.pseudo_clean_raw, t))));
      }
      csv.row(f.id, "ncc_srgb", analysis::mean_variance(srgb).first);
      csv.row(f.id, "ncc_raw", analysis::mean_variance(raw).first);
      all_srgb.insert(all_srgb.end(), srgb.begin(), srgb.end());
      all_raw.insert(all_raw.end(), raw.begin(), raw.end());
    }
    csv.row("corpus", "ncc_srgb", analysis::mean_variance(all_srgb).first);
    csv.row("corpus", "ncc_raw", analysis::mean_variance(all_raw).first);
    return kOk;
  }
  const std::string stem = fs::path(a.inputs[0]).stem().string();
  const auto x = frames_of(io::load_ndt(a.inputs[0]), a.inputs[0]);
  if (a.inputs.size() == 1) {
    for (std::size_t t = 0; t < x.size(); ++t) csv.row(frame_id(stem, t, x.size()), "cc", analysis::color_correlation(x[t]));
    return kOk;
  }
  if (a.inputs.size() != 2) throw UsageError("analyze cc takes a corpus directory, one image or an (image, reference) pair");
  const auto r = frames_of(io::load_ndt(a.inputs[1]), a.inputs[1]);
  if (r.size() != x.size()) throw DimensionError("analyze cc: inputs have different frame counts");
  std::vector<double> v;
  for (std::size_t t = 0; t < x.size(); ++t) {
    const std::string id = frame_id(stem, t, x.size());
    csv.row(id, "cc", analysis::color_correlation(x[t]));
    csv.row(id, "cc_reference", analysis::color_correlation(r[t]));
    v.push_back(analysis::normalized_cc(x[t], r[t]));
    csv.row(id, "ncc", v.back());
  }
  if (x.size() > 1) csv.row(stem, "ncc_mean", analysis::mean_variance(v).first);
  return kOk;
}

void prior_rows(const AnalyzeArgs& a, Csv& csv, const std::string& id, const std::string& suffix, const Tensor& clip_or_img,
                const std::string& path, std::vector<double>& pool) {
  const auto frames = frames_of(clip_or_img, path);
  std::vector<double> v;
  for (std::size_t t = 0; t < frames.size(); ++t) {
    const auto rep = analysis::moire_prior(frames[t], a.patch);
    v.insert(v.end(), rep.per_patch.vec().begin(), rep.per_patch.vec().end());
    write_map(a, frame_id(id + suffix + "_prior", t, frames.size()), rep.per_patch);
  }
  const auto [m, var] = analysis::mean_variance(v);
  csv.row(id, "prior_mean" + suffix, m);
  csv.row(id, "prior_variance" + suffix, var);
  pool.insert(pool.end(), v.begin(), v.end());
}

int analyze_prior(const AnalyzeArgs& a, Csv& csv) {
  if (is_corpus(a.inputs[0])) {
    if (a.inputs.size() != 1) throw UsageError("analyze prior takes one corpus directory");
    std::vector<double> pm, pc;
    for (const auto& f : corpus::read_manifest(a.inputs[0])) {
      prior_rows(a, csv, f.id, "_moire", io::load_ndt(f.moire_rgb), f.moire_rgb.string(), pm);
      prior_rows(a, csv, f.id, "_clean", io::load_ndt(f.clean_rgb), f.clean_rgb.string(), pc);
    }
    const auto [mm, mv] = analysis::mean_variance(pm);
    const auto [cm, cv] = analysis::mean_variance(pc);
    csv.row("corpus", "prior_mean_moire", mm);
    csv.row("corpus", "prior_variance_moire", mv);
    csv.row("corpus", "prior_mean_clean", cm);
    csv.row("corpus", "prior_variance_clean", cv);
    return kOk;
  }
  std::vector<double> pool;
  for (const auto& in : a.inputs) prior_rows(a, csv, fs::path(in).stem().string(), "", io::load_ndt(in), in, pool);
  return kOk;
}

void temporal_rows(const AnalyzeArgs& a, Csv& csv, const std::string& id, const std::string& suffix, const Tensor& clip,
                   std::vector<double>& pool) {
  const auto rep = analysis::temporal_stats(clip);
  for (std::size_t k = 0; k < rep.per_pair.size(); ++k) csv.row(id, "temporal_pair" + std::to_string(k) + suffix, rep.per_pair[k]);
  csv.row(id, "temporal_mean" + suffix, rep.mean);
  csv.row(id, "temporal_variance" + suffix, rep.variance);
  pool.insert(pool.end(), rep.per_pair.vec().begin(), rep.per_pair.vec().end());
  if (!a.maps.empty())
    for (std::size_t t = 0; t < clip.dim(0); ++t) write_map(a, id + suffix + "_amp_t" + std::to_string(t), amplitude_map(synth::frame(clip, t)));
}

int analyze_temporal(const AnalyzeArgs& a, Csv& csv) {
  if (is_corpus(a.inputs[0])) {
    if (a.inputs.size() != 1) throw UsageError("analyze temporal takes one corpus directory");
    std::vector<double> pm, pc;
    for (const auto& f : corpus::read_manifest(a.inputs[0])) {
      const auto clip = corpus::load_clip(f);
      temporal_rows(a, csv, f.id, "_moire", clip.moire_rgb, pm);
      temporal_rows(a, csv, f.id, "_clean", clip.clean_rgb, pc);
    }
    const auto [mm, mv] = analysis::mean_variance(pm);
    const auto [cm, cv] = analysis::mean_variance(pc);
    csv.row("corpus", "temporal_mean_moire", mm);
    csv.row("corpus", "temporal_variance_moire", mv);
    csv.row("corpus", "temporal_mean_clean", cm);
    csv.row("corpus", "temporal_variance_clean", cv);
    return kOk;
  }
  std::vector<double> pool;
  for (const auto& in : a.inputs) {
    const Tensor clip = io::load_ndt(in);
    if (clip.rank() != 4) throw DimensionError("'" + in + "' has shape " + shape_str(clip.shape()) + "; expected [T,H,W,C]");
    temporal_rows(a, csv, fs::path(in).stem().string(), "", clip, pool);
  }
  return kOk;
}

int analyze_swap(const AnalyzeArgs& a, Csv& csv) {
  if (a.inputs.size() != 2) throw UsageError("analyze swap takes two images");
  const Tensor x = pick_frame(a.inputs[0], a.frame), y = pick_frame(a.inputs[1], a.frame);
  const auto [s1, s2] = analysis::amp_phase_swap(x, y);
  make_dir(a.out);
  const fs::path out(a.out);
  io::save_ndt(out / "swap_phase_a_amp_b.ndt", s1);
  io::save_ndt(out / "swap_phase_b_amp_a.ndt", s2);
  if (x.dim(2) == 3 || x.dim(2) == 1) {
    io::save_pfm(out / "swap_phase_a_amp_b.pfm", s1);
    io::save_pfm(out / "swap_phase_b_amp_a.pfm", s2);
  }
  write_map(a, "a_amp", amplitude_map(x));
  write_map(a, "b_amp", amplitude_map(y));
  double d1 = 0, d2 = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    d1 = std::max(d1, std::abs(s1[i] - x[i]));
    d2 = std::max(d2, std::abs(s2[i] - y[i]));
  }
  csv.row("swap", "max_abs_diff_phase_a_amp_b_vs_a", d1);
  csv.row("swap", "max_abs_diff_phase_b_amp_a_vs_b", d2);
  return kOk;
}

int cmd_analyze(const Globals& g, const AnalyzeArgs& a) {
  log_config(resolve(g, {}), "analyze " + a.kind);
  Csv csv(a.csv);
  int rc = kOk;
  if (a.kind == "cc") rc = analyze_cc(a, csv);
  else if (a.kind == "prior") rc = analyze_prior(a, csv);
  else if (a.kind == "temporal") rc = analyze_temporal(a, csv);
  else rc = analyze_swap(a, csv);
  csv.close();
  return rc;
}

// ---- train

struct TrainArgs {
  std::string stage = "all";
  std::string from, corpus, out;
  std::optional<std::size_t> heldout;
};

void check_weights(const ParamStore& weights, const stad::ModelConfig& mc, const std::string& path) {
  const ParamStore ref = stad::init_model(mc, 0);
  const auto& e = ref.entries();
  bool ok = e.size() == weights.size();
  for (std::size_t i = 0; ok && i < e.size(); ++i)
    ok = weights.entries()[i].name == e[i].name && weights.entries()[i].value.shape() == e[i].value.shape();
  if (!ok) throw ConfigError("weights in '" + path + "' do not match the configured model dimensions");
}

int cmd_train(const Globals& g, const TrainArgs& a) {
  if (a.stage == "2" && a.from.empty()) throw UsageError("train --stage 2 requires --from <stage1 checkpoint>");
  if (a.stage != "2" && !a.from.empty()) throw UsageError("--from is only valid with --stage 2");
  RunConfig cfg = resolve(g, {});
  make_dir(a.out);
  log_config(cfg, "train", fs::path(a.out) / "config.txt");
  train::TrainConfig tc = cfg.training();
  tc.config_hash = cfg.hash();
  tc.validate();

  const auto files = corpus::read_manifest(a.corpus);
  if (files.empty()) throw UsageError("corpus '" + a.corpus + "' has no clips");
  const std::size_t held = a.heldout.value_or(files.size() - 1);
  if (held >= files.size()) throw UsageError("--heldout " + std::to_string(held) + " out of range");
  std::vector<train::Sample> samples;
  std::optional<train::Sample> heldout;
  for (std::size_t i = 0; i < files.size(); ++i) {
    train::Sample s = train::make_sample(corpus::load_clip(files[i]));
    if (i == held) heldout = s;
    if (i != held || files.size() == 1) samples.push_back(std::move(s));
  }
  if (files.size() == 1) std::cerr << "mocha train: single clip; it is also the held-out clip\n";

  const fs::path out(a.out);
  if (a.stage == "all") {
    train::train_two_stage(samples, *heldout, tc, out);
  } else if (a.stage == "1") {
    auto r = train::train_stage1(stad::init_model(tc.model, tc.seed), samples, *heldout, tc);
    train::save_checkpoint(out / "stage1.ckpt", {r.params, 1, tc.epochs1, tc.seed, tc.config_hash});
    train::write_log_csv(out / "stage1_log.csv", r.log);
  } else {
    const train::Checkpoint from = train::load_checkpoint(a.from);
    check_weights(from.params, tc.model, a.from);
    if (from.stage != 1) std::cerr << "mocha train: --from checkpoint was written by stage " << from.stage << "\n";
    auto r = train::train_stage2(from.params, samples, *heldout, tc);
    train::save_checkpoint(out / "stage2.ckpt", {r.params, 2, tc.epochs2, tc.seed, tc.config_hash});
    train::write_log_csv(out / "stage2_log.csv", r.log);
  }
  return kOk;
}

// ---- infer

struct InferArgs {
  std::string weights, input, out;
  std::optional<int> stage;
};

int cmd_infer(const Globals& g, const InferArgs& a) {
  const RunConfig cfg = resolve(g, {});
  log_config(cfg, "infer");
  const train::Checkpoint ck = train::load_checkpoint(a.weights);
  const stad::ModelConfig mc = cfg.model();
  check_weights(ck.params, mc, a.weights);
  const int stage = a.stage.value_or(ck.stage == 2 ? 2 : 1);
  const Tensor raw = io::load_ndt(a.input);
  if (raw.rank() != 4 || raw.dim(0) != 3 || raw.dim(3) != 4)
    throw DimensionError("'" + a.input + "' has shape " + shape_str(raw.shape()) + "; expected [3,H,W,4]");
  const Tensor rgb = train::infer(ck.params, mc, raw, stage);
  const fs::path prefix(a.out);
  if (prefix.has_parent_path()) make_dir(prefix.parent_path());
  io::save_ppm(prefix.string() + ".ppm", rgb);
  io::save_pfm(prefix.string() + ".pfm", rgb);
  io::save_ndt(prefix.string() + ".ndt", rgb);
  return kOk;
}

// ---- gradcheck

int cmd_gradcheck(const Globals& g, std::uint64_t seed) {
  log_config(resolve(g, {}), "gradcheck");
  const auto rows = run_gradient_suite(seed);
  std::printf("%-34s %8s %8s %8s %13s  %s\n", "block", "tol", "h", "checks", "max_rel_err", "result");
  bool all = true;
  double seconds = 0;
  for (const auto& r : rows) {
    std::printf("%-34s %8.0e %8.0e %8zu %13.3e  %s\n", r.block.c_str(), r.tol, r.h, r.report.checks, r.report.max_rel_err,
                r.report.pass ? "pass" : "FAIL");
    all = all && r.report.pass;
    seconds += r.seconds;
  }
  std::printf("%s\n", all ? "all blocks pass" : "gradient check FAILED");
  std::fflush(stdout);
  std::fprintf(stderr, "mocha gradcheck: %.2f s\n", seconds);
  return all ? kOk : kNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MoCHA-former video demoiréing toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_file, "key=value config file")->check(CLI::ExistingFile);
  app.add_option("--set", g.sets, "override one config key (key=value); repeatable");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "generate a paired clean/moiré clip corpus");
  synth->add_option("--out", sa.out, "output directory")->required();
  synth->add_option("--clips", sa.clips, "number of clips");
  synth->add_option("--seed", sa.seed, "corpus seed");
  synth->add_option("--scale", sa.scale, "fixed capture scale (1.0 with --jitter 0: control corpus)");
  synth->add_option("--jitter", sa.jitter, "multiplier on the pose perturbations");

  AnalyzeArgs aa;
  auto* analyze = app.add_subcommand("analyze", "moiré statistics as CSV rows (clip_id,metric,value)");
  analyze->add_option("kind", aa.kind, "cc | prior | temporal | swap")
      ->required()
      ->check(CLI::IsMember({"cc", "prior", "temporal", "swap"}));
  analyze->add_option("inputs", aa.inputs, "corpus directory or NDT files")->required();
  analyze->add_option("--csv", aa.csv, "write CSV here instead of stdout");
  analyze->add_option("--maps", aa.maps, "directory for PFM heatmaps");
  analyze->add_option("--patch", aa.patch, "prior patch size")->check(CLI::PositiveNumber);
  analyze->add_option("--out", aa.out, "swap output directory");
  analyze->add_option("--frame", aa.frame, "frame of a clip input used by swap");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "two-stage training on a synthesized corpus");
  train->add_option("--stage", ta.stage, "1 | 2 | all")->check(CLI::IsMember({"1", "2", "all"}));
  train->add_option("--from", ta.from, "stage-1 checkpoint (stage 2)");
  train->add_option("--corpus", ta.corpus, "corpus directory")->required();
  train->add_option("--out", ta.out, "output directory")->required();
  train->add_option("--heldout", ta.heldout, "held-out clip index (default: last)");

  InferArgs ia;
  auto* infer = app.add_subcommand("infer", "demoiré a 3-frame RAW clip");
  infer->add_option("--weights", ia.weights, "checkpoint")->required();
  infer->add_option("--input", ia.input, "[3,H,W,4] NDT clip")->required();
  infer->add_option("--out", ia.out, "output prefix (.ppm, .pfm, .ndt)")->required();
  infer->add_option("--stage", ia.stage, "1 or 2 (default: checkpoint stage)")->check(CLI::Range(1, 2));

  std::uint64_t gc_seed = 1;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every block");
  gradcheck->add_option("--seed", gc_seed, "suite seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*synth) return cmd_synth(g, sa);
    if (*analyze) return cmd_analyze(g, aa);
    if (*train) return cmd_train(g, ta);
    if (*infer) return cmd_infer(g, ia);
    return cmd_gradcheck(g, gc_seed);
  } catch (const FormatError& e) {
    std::cerr << "mocha: format error: " << e.what() << "\n";
    return kFormat;
  } catch (const NumericalError& e) {
    std::cerr << "mocha: numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::exception& e) {
    std::cerr << "mocha: error: " << e.what() << "\n";
    return kUsage;
  }
}
