#include "mocha/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "mocha/errors.hpp"
#include "mocha/io.hpp"
#include "mocha/rng.hpp"

namespace mocha::train {

void TrainConfig::validate() const {
  model.validate();
  weights.validate();
  grouping.validate();
  if (batch == 0) throw ConfigError("batch must be >= 1");
  for (double v : {lr1, lr2, dmad_lr, stad_lr_scale})
    if (!(v > 0.0)) throw ConfigError("learning rates and scales must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
}

Sample make_sample(const synth::VideoClipPair& clip) {
  const Shape& s = clip.moire_raw.shape();
  if (s.size() != 4 || s[0] != 3) throw DimensionError("training clips must have 3 frames, got " + shape_str(s));
  Sample out;
  out.i_raw = clip.moire_raw;
  out.targets.gt_rgb = synth::frame(clip.clean_rgb, 1);
  out.targets.gt_rgb_all = clip.clean_rgb;
  out.targets.i_raw = clip.moire_raw;
  return out;
}

double psnr(const Tensor& pred, const Tensor& gt) {
  if (pred.shape() != gt.shape()) throw DimensionError("psnr: shapes differ");
  double mse = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = std::clamp(pred[i], 0.0, 1.0) - gt[i];
    mse += d * d;
  }
  mse /= static_cast<double>(pred.size());
  return mse == 0.0 ? INFINITY : 10.0 * std::log10(1.0 / mse);
}

Tensor infer(const ParamStore& params, const stad::ModelConfig& cfg, const Tensor& i_raw, int stage) {
  Tape tape;
  Binding b(tape, params);
  Tensor y = stad::mocha_forward(b, tape.constant(i_raw), stage, cfg).rgb.value();
  for (auto& v : y.vec()) v = std::clamp(v, 0.0, 1.0);
  return y;
}

namespace {

using Terms = std::vector<std::pair<std::string, double>>;

double accumulate_step(ParamStore& params, const std::vector<const Sample*>& batch, int stage, const TrainConfig& cfg,
                       const std::vector<optim::AdamW*>& optimizers, Terms& terms) {
  GradList acc(params.size());
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  double total = 0;
  for (const Sample* s : batch) {
    Tape tape;
    Binding b(tape, params);
    auto out = stad::mocha_forward(b, tape.constant(s->i_raw), stage, cfg.model);
    auto rep = losses::stage_losses(out, s->targets, stage, cfg.weights, cfg.grouping, cfg.wnnm);
    const double value = rep.total.value()[0];
    if (!std::isfinite(value)) throw NumericalError("training loss is not finite");
    total += value * inv_b;
    if (terms.empty())
      for (const auto& [name, v] : rep.terms) terms.emplace_back(name, 0.0);
    for (std::size_t i = 0; i < rep.terms.size(); ++i) terms[i].second += rep.terms[i].second * inv_b;
    tape.backward(rep.total);
    GradList g = b.gradients();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!g[i]) continue;
      if (!acc[i]) acc[i] = Tensor(g[i]->shape());
      for (std::size_t j = 0; j < g[i]->size(); ++j) (*acc[i])[j] += (*g[i])[j] * inv_b;
    }
  }
  for (auto* opt : optimizers) opt->step(params, acc);
  return total;
}

StageResult run_stage(ParamStore params, const std::vector<Sample>& train, const Sample& heldout,
                      const TrainConfig& cfg, int stage, std::size_t epochs,
                      const std::vector<optim::AdamW*>& optimizers) {
  if (train.empty()) throw UsageError("training needs at least one clip");
  StageResult result;
  Rng rng(cfg.seed * 2 + static_cast<std::uint64_t>(stage));
  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 1; epoch <= epochs; ++epoch) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    EpochLog log;
    log.stage = stage;
    log.epoch = epoch;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      std::vector<const Sample*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + cfg.batch); ++i) batch.push_back(&train[order[i]]);
      Terms terms;
      log.total += accumulate_step(params, batch, stage, cfg, optimizers, terms);
      if (log.terms.empty()) log.terms = Terms(terms.size());
      for (std::size_t i = 0; i < terms.size(); ++i) {
        log.terms[i].first = terms[i].first;
        log.terms[i].second += terms[i].second;
      }
      ++steps;
    }
    log.total /= static_cast<double>(steps);
    for (auto& t : log.terms) t.second /= static_cast<double>(steps);
    log.psnr = psnr(infer(params, cfg.model, heldout.i_raw, stage), heldout.targets.gt_rgb);
    result.log.push_back(std::move(log));
  }
  result.params = std::move(params);
  return result;
}

optim::AdamWConfig adam(double lr, const TrainConfig& cfg) {
  optim::AdamWConfig a;
  a.lr = lr;
  a.weight_decay = cfg.weight_decay;
  return a;
}

}  // namespace

StageResult train_stage1(ParamStore params, const std::vector<Sample>& train, const Sample& heldout,
                         const TrainConfig& cfg) {
  cfg.validate();
  params.set_lr_scale_prefix("", 1.0);
  optim::AdamW opt(params, optim::names_with_prefix(params, {"sfe.", "stad.", "eib."}), adam(cfg.lr1, cfg));
  return run_stage(std::move(params), train, heldout, cfg, 1, cfg.epochs1, {&opt});
}

StageResult train_stage2(ParamStore params, const std::vector<Sample>& train, const Sample& heldout,
                         const TrainConfig& cfg) {
  cfg.validate();
  params.set_lr_scale_prefix("", 1.0);
  if (cfg.lr_reading == LrReading::kCompose) params.set_lr_scale_prefix("stad.", cfg.stad_lr_scale);
  optim::AdamW base(params, optim::names_with_prefix(params, {"sfe.", "stad.", "eib."}), adam(cfg.lr2, cfg));
  optim::AdamW dmad(params, optim::names_with_prefix(params, {"dmad."}), adam(cfg.dmad_lr, cfg));
  return run_stage(std::move(params), train, heldout, cfg, 2, cfg.epochs2, {&base, &dmad});
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  io::save_params(path, ckpt.params);
  io::KeyValues kv{{"stage", std::to_string(ckpt.stage)},
                   {"epoch", std::to_string(ckpt.epoch)},
                   {"seed", std::to_string(ckpt.seed)},
                   {"config_hash", ckpt.config_hash.empty() ? "-" : ckpt.config_hash}};
  io::write_key_values(path.string() + ".manifest", kv);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::filesystem::path manifest = path.string() + ".manifest";
  if (!std::filesystem::exists(path)) throw UsageError("checkpoint not found: " + path.string());
  if (!std::filesystem::exists(manifest)) throw UsageError("checkpoint manifest not found: " + manifest.string());
  Checkpoint c;
  c.params = io::load_params(path);
  const io::KeyValues kv = io::read_key_values(manifest);
  auto field = [&](const char* key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(manifest.string() + ": missing key '" + key + "'");
    return it->second;
  };
  try {
    c.stage = std::stoi(field("stage"));
    c.epoch = std::stoull(field("epoch"));
    c.seed = std::stoull(field("seed"));
  } catch (const std::logic_error&) {
    throw FormatError(manifest.string() + ": malformed numeric field");
  }
  c.config_hash = field("config_hash");
  return c;
}

void write_log_csv(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open '" + path.string() + "' for writing");
  os << "stage,epoch,term,value\n";
  char buf[64];
  auto row = [&](const EpochLog& e, const std::string& term, double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    os << e.stage << ',' << e.epoch << ',' << term << ',' << buf << '\n';
  };
  for (const auto& e : log) {
    for (const auto& [term, v] : e.terms) row(e, term, v);
    row(e, "total", e.total);
    row(e, "psnr", e.psnr);
  }
  if (!os) throw Error("write failed for '" + path.string() + "'");
}

TwoStageResult train_two_stage(const std::vector<Sample>& train, const Sample& heldout, const TrainConfig& cfg,
                               const std::filesystem::path& out_dir) {
  cfg.validate();
  TwoStageResult r;
  r.stage1 = train_stage1(stad::init_model(cfg.model, cfg.seed), train, heldout, cfg);
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    save_checkpoint(out_dir / "stage1.ckpt", {r.stage1.params, 1, cfg.epochs1, cfg.seed, cfg.config_hash});
  }
  r.stage2 = train_stage2(r.stage1.params, train, heldout, cfg);
  if (!out_dir.empty()) {
    save_checkpoint(out_dir / "stage2.ckpt", {r.stage2.params, 2, cfg.epochs2, cfg.seed, cfg.config_hash});
    std::vector<EpochLog> all = r.stage1.log;
    all.insert(all.end(), r.stage2.log.begin(), r.stage2.log.end());
    write_log_csv(out_dir / "train_log.csv", all);
  }
  return r;
}

}  // namespace mocha::train
