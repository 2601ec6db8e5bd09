#include "mocha/corpus.hpp"

#include <cstdio>
#include <sstream>
#include <tuple>

#include "mocha/analysis.hpp"
#include "mocha/errors.hpp"
#include "mocha/io.hpp"

namespace mocha::corpus {

namespace fs = std::filesystem;

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const std::string& need(const io::KeyValues& kv, const std::string& key, const fs::path& manifest) {
  auto it = kv.find(key);
  if (it == kv.end()) throw FormatError(manifest.string() + ": missing key '" + key + "'");
  return it->second;
}

std::uint64_t to_u64(const std::string& s, const std::string& key, const fs::path& manifest) {
  std::size_t used = 0;
  std::uint64_t v = 0;
  try {
    v = std::stoull(s, &used);
  } catch (...) {
    used = 0;
  }
  if (used == 0 || used != s.size() || s[0] == '-')
    throw FormatError(manifest.string() + ": bad integer '" + s + "' for '" + key + "'");
  return v;
}

void append(std::vector<double>& dst, const Tensor& t) { dst.insert(dst.end(), t.vec().begin(), t.vec().end()); }

}  // namespace

std::uint64_t clip_seed(std::uint64_t base, std::size_t i) { return base * 1000 + i; }

std::string clip_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "clip%03zu", i);
  return buf;
}

void write_corpus(const fs::path& dir, const std::vector<synth::VideoClipPair>& clips,
                  const std::vector<std::pair<std::string, std::string>>& extra) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create directory '" + dir.string() + "': " + ec.message());
  io::KeyValues kv;
  for (const auto& [k, v] : extra) kv[k] = v;
  kv["clips"] = std::to_string(clips.size());
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const auto& c = clips[i];
    const std::string id = clip_id(i);
    const std::pair<const char*, const Tensor*> tensors[] = {{"clean_rgb", &c.clean_rgb},
                                                             {"moire_rgb", &c.moire_rgb},
                                                             {"moire_raw", &c.moire_raw},
                                                             {"pseudo_clean_raw", &c.pseudo_clean_raw}};
    for (const auto& [name, t] : tensors) {
      const std::string file = id + "_" + name + ".ndt";
      io::save_ndt(dir / file, *t);
      kv[id + "." + name] = file;
    }
    const std::size_t T = c.moire_rgb.dim(0);
    for (std::size_t t = 0; t < T; ++t) {
      io::save_ppm(dir / (id + "_moire_t" + std::to_string(t) + ".ppm"), synth::frame(c.moire_rgb, t));
      io::save_ppm(dir / (id + "_clean_t" + std::to_string(t) + ".ppm"), synth::frame(c.clean_rgb, t));
    }
    kv[id + ".seed"] = std::to_string(c.meta.seed);
    kv[id + ".pitch"] = std::to_string(c.meta.pitch);
    kv[id + ".content_h"] = std::to_string(c.meta.content_h);
    kv[id + ".content_w"] = std::to_string(c.meta.content_w);
    kv[id + ".frames"] = std::to_string(c.meta.poses.size());
    for (std::size_t t = 0; t < c.meta.poses.size(); ++t) {
      const auto& p = c.meta.poses[t];
      kv[id + ".pose." + std::to_string(t)] = num(p.ty) + " " + num(p.tx) + " " + num(p.rotation) + " " +
                                              num(p.scale) + " " + num(p.tilt_y) + " " + num(p.tilt_x);
    }
  }
  io::write_key_values(dir / "manifest.txt", kv);
}

std::vector<ClipFiles> read_manifest(const fs::path& dir) {
  const fs::path manifest = dir / "manifest.txt";
  if (!fs::exists(manifest)) throw UsageError("no manifest.txt in '" + dir.string() + "'");
  const io::KeyValues kv = io::read_key_values(manifest);
  const std::uint64_t n = to_u64(need(kv, "clips", manifest), "clips", manifest);
  std::vector<ClipFiles> out;
  for (std::size_t i = 0; i < n; ++i) {
    ClipFiles f;
    f.id = clip_id(i);
    auto path = [&](const char* name) { return dir / need(kv, f.id + "." + name, manifest); };
    f.clean_rgb = path("clean_rgb");
    f.moire_rgb = path("moire_rgb");
    f.moire_raw = path("moire_raw");
    f.pseudo_clean_raw = path("pseudo_clean_raw");
    auto u = [&](const char* name) {
      const std::string key = f.id + "." + name;
      return to_u64(need(kv, key, manifest), key, manifest);
    };
    f.meta.seed = u("seed");
    f.meta.pitch = u("pitch");
    f.meta.content_h = u("content_h");
    f.meta.content_w = u("content_w");
    const std::uint64_t frames = u("frames");
    for (std::size_t t = 0; t < frames; ++t) {
      const std::string key = f.id + ".pose." + std::to_string(t);
      std::istringstream ss(need(kv, key, manifest));
      synth::CapturePose p;
      if (!(ss >> p.ty >> p.tx >> p.rotation >> p.scale >> p.tilt_y >> p.tilt_x))
        throw FormatError(manifest.string() + ": bad pose '" + key + "'");
      f.meta.poses.push_back(p);
    }
    out.push_back(std::move(f));
  }
  return out;
}

synth::VideoClipPair load_clip(const ClipFiles& files) {
  synth::VideoClipPair c;
  c.clean_rgb = io::load_ndt(files.clean_rgb);
  c.moire_rgb = io::load_ndt(files.moire_rgb);
  c.moire_raw = io::load_ndt(files.moire_raw);
  c.pseudo_clean_raw = io::load_ndt(files.pseudo_clean_raw);
  c.meta = files.meta;
  auto check = [&](const Tensor& t, std::size_t rank, std::size_t ch, const fs::path& p) {
    if (t.rank() != rank || t.dim(rank - 1) != ch || t.dim(0) != c.moire_rgb.dim(0))
      throw DimensionError("'" + p.string() + "' has shape " + shape_str(t.shape()) + "; expected [T,H,W," +
                           std::to_string(ch) + "] matching the clip");
  };
  check(c.moire_rgb, 4, 3, files.moire_rgb);
  check(c.clean_rgb, 4, 3, files.clean_rgb);
  check(c.moire_raw, 4, 4, files.moire_raw);
  check(c.pseudo_clean_raw, 4, 4, files.pseudo_clean_raw);
  if (c.clean_rgb.shape() != c.moire_rgb.shape() || c.moire_raw.shape() != c.pseudo_clean_raw.shape() ||
      c.moire_rgb.dim(1) != 2 * c.moire_raw.dim(1) || c.moire_rgb.dim(2) != 2 * c.moire_raw.dim(2))
    throw DimensionError("clip '" + files.id + "': inconsistent RAW/sRGB extents");
  return c;
}

ClipStats clip_stats(const synth::VideoClipPair& clip, std::size_t patch) {
  ClipStats s;
  const std::size_t T = clip.moire_rgb.dim(0);
  const bool prior = clip.moire_rgb.dim(1) >= patch && clip.moire_rgb.dim(2) >= patch;
  for (std::size_t t = 0; t < T; ++t) {
    const Tensor mr = synth::frame(clip.moire_rgb, t), cr = synth::frame(clip.clean_rgb, t);
    s.ncc_srgb.push_back(analysis::normalized_cc(mr, cr));
    s.ncc_raw.push_back(analysis::normalized_cc(analysis::raw_to_rgb3(synth::frame(clip.moire_raw, t)),
                                                analysis::raw_to_rgb3(synth::frame(clip.pseudo_clean_raw, t))));
    if (prior) {
      append(s.prior_moire, analysis::moire_prior(mr, patch).per_patch);
      append(s.prior_clean, analysis::moire_prior(cr, patch).per_patch);
    }
  }
  append(s.temporal_moire, analysis::temporal_stats(clip.moire_rgb).per_pair);
  append(s.temporal_clean, analysis::temporal_stats(clip.clean_rgb).per_pair);
  return s;
}

CorpusStats corpus_stats(std::span<const ClipStats> clips) {
  std::vector<double> srgb, raw, pm, pc, tm, tc;
  for (const auto& c : clips) {
    srgb.insert(srgb.end(), c.ncc_srgb.begin(), c.ncc_srgb.end());
    raw.insert(raw.end(), c.ncc_raw.begin(), c.ncc_raw.end());
    pm.insert(pm.end(), c.prior_moire.begin(), c.prior_moire.end());
    pc.insert(pc.end(), c.prior_clean.begin(), c.prior_clean.end());
    tm.insert(tm.end(), c.temporal_moire.begin(), c.temporal_moire.end());
    tc.insert(tc.end(), c.temporal_clean.begin(), c.temporal_clean.end());
  }
  CorpusStats s;
  s.ncc_srgb = analysis::mean_variance(srgb).first;
  s.ncc_raw = analysis::mean_variance(raw).first;
  std::tie(s.prior_mean_moire, s.prior_var_moire) = analysis::mean_variance(pm);
  std::tie(s.prior_mean_clean, s.prior_var_clean) = analysis::mean_variance(pc);
  std::tie(s.temporal_mean_moire, s.temporal_var_moire) = analysis::mean_variance(tm);
  std::tie(s.temporal_mean_clean, s.temporal_var_clean) = analysis::mean_variance(tc);
  s.has_prior = !pm.empty();
  return s;
}

}  // namespace mocha::corpus
