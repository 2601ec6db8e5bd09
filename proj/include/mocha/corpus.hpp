#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mocha/synth.hpp"

// On-disk clip corpora (NDT tensors, PPM previews, key=value manifest) and
// corpus-level moiré statistics.
namespace mocha::corpus {

// Seed of clip i in a corpus generated from base seed s.
std::uint64_t clip_seed(std::uint64_t base, std::size_t i);

std::string clip_id(std::size_t i);  // "clip000", ...

// Writes <id>_{clean_rgb,moire_rgb,moire_raw,pseudo_clean_raw}.ndt, per-frame
// <id>_{clean,moire}_t<k>.ppm previews and manifest.txt into dir.
// extra entries are copied into the manifest verbatim.
void write_corpus(const std::filesystem::path& dir, const std::vector<synth::VideoClipPair>& clips,
                  const std::vector<std::pair<std::string, std::string>>& extra = {});

struct ClipFiles {
  std::string id;
  std::filesystem::path clean_rgb, moire_rgb, moire_raw, pseudo_clean_raw;
  synth::ClipMeta meta;
};
// Paths are resolved against dir. Missing keys raise FormatError.
std::vector<ClipFiles> read_manifest(const std::filesystem::path& dir);
synth::VideoClipPair load_clip(const ClipFiles& files);

struct ClipStats {
  std::vector<double> ncc_srgb;  // per frame
  std::vector<double> ncc_raw;
  std::vector<double> prior_moire;  // per patch, every frame; empty if frames are smaller than one patch
  std::vector<double> prior_clean;
  std::vector<double> temporal_moire;  // per adjacent pair
  std::vector<double> temporal_clean;
};
ClipStats clip_stats(const synth::VideoClipPair& clip, std::size_t patch = 128);

// nCC averaged over every frame of every clip; prior and temporal values pooled before
// taking mean and population variance.
struct CorpusStats {
  double ncc_srgb = 0.0, ncc_raw = 0.0;
  double prior_mean_moire = 0.0, prior_var_moire = 0.0;
  double prior_mean_clean = 0.0, prior_var_clean = 0.0;
  double temporal_mean_moire = 0.0, temporal_var_moire = 0.0;
  double temporal_mean_clean = 0.0, temporal_var_clean = 0.0;
  bool has_prior = false;
};
CorpusStats corpus_stats(std::span<const ClipStats> clips);

}  // namespace mocha::corpus
