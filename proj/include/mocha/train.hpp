#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mocha/losses.hpp"
#include "mocha/optim.hpp"
#include "mocha/stad.hpp"
#include "mocha/synth.hpp"

namespace mocha::train {

// How the two stated stage-2 learning-rate reductions combine.
enum class LrReading {
  kCompose,   // SFE/EIB at lr2, STAD at lr2 * stad_lr_scale
  kCoincide,  // the drop to lr2 is the 1/10 reduction; SFE/STAD/EIB all at lr2
};

struct TrainConfig {
  stad::ModelConfig model;
  losses::LossWeights weights;
  losses::GroupingParams grouping;
  losses::WnnmParams wnnm;
  std::size_t epochs1 = 30;
  std::size_t epochs2 = 30;
  std::size_t batch = 1;
  double lr1 = 1e-4;
  double lr2 = 1e-5;
  double dmad_lr = 1e-4;
  double stad_lr_scale = 0.1;
  LrReading lr_reading = LrReading::kCompose;
  double weight_decay = 0.01;
  std::uint64_t seed = 1;
  std::string config_hash;  // recorded in checkpoint manifests
  void validate() const;
};

struct Sample {
  Tensor i_raw;  // [3,H,W,4]
  losses::Targets targets;
};

Sample make_sample(const synth::VideoClipPair& clip);

struct EpochLog {
  int stage = 0;
  std::size_t epoch = 0;  // 1-based
  std::vector<std::pair<std::string, double>> terms;  // per-step means of the weighted terms
  double total = 0.0;
  double psnr = 0.0;  // held-out clip
};

struct StageResult {
  ParamStore params;
  std::vector<EpochLog> log;
};

double psnr(const Tensor& pred, const Tensor& gt);

// Runs the model without recording gradients of interest and returns the clamped [2H,2W,3] image.
Tensor infer(const ParamStore& params, const stad::ModelConfig& cfg, const Tensor& i_raw, int stage);

// Stage 1 updates sfe./stad./eib. only; DMAD parameters are never bound.
StageResult train_stage1(ParamStore params, const std::vector<Sample>& train, const Sample& heldout,
                         const TrainConfig& cfg);
// Stage 2 starts from stage-1 weights with fresh optimizers: one for SFE/STAD/EIB at lr2
// (STAD additionally scaled per lr_reading) and a separate one for DMAD at dmad_lr.
StageResult train_stage2(ParamStore params, const std::vector<Sample>& train, const Sample& heldout,
                         const TrainConfig& cfg);

struct Checkpoint {
  ParamStore params;
  int stage = 0;
  std::size_t epoch = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
};

// <path> holds the parameters, <path>.manifest the key=value metadata.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
// Missing files raise UsageError; malformed ones FormatError.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// CSV rows: stage,epoch,term,value (terms, then total and psnr).
void write_log_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log);

struct TwoStageResult {
  StageResult stage1, stage2;
};

// Full procedure; writes stage1.ckpt, stage2.ckpt (+ manifests) and train_log.csv into out_dir when non-empty.
TwoStageResult train_two_stage(const std::vector<Sample>& train, const Sample& heldout, const TrainConfig& cfg,
                               const std::filesystem::path& out_dir = {});

}  // namespace mocha::train
