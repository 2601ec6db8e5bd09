#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include "mocha/errors.hpp"
#include "mocha/io.hpp"
#include "mocha/parallel.hpp"
#include "mocha/train.hpp"

using namespace mocha;
using namespace mocha::train;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.model.channels = 8;
  c.model.n_m = 1;
  c.model.n_r = 1;
  c.model.n_s = 1;
  c.model.heads = 2;
  c.model.window_k = 4;
  c.grouping.patch = 4;
  c.grouping.stride = 2;
  c.grouping.k = 4;
  c.grouping.search = 8;
  c.epochs1 = 1;
  c.epochs2 = 1;
  c.seed = 5;
  c.config_hash = "0123456789abcdef";
  return c;
}

struct Corpus {
  std::vector<Sample> train;
  Sample heldout;
};

const Corpus& corpus() {
  static const Corpus c = [] {
    synth::SynthConfig sc;
    sc.raw_h = sc.raw_w = 8;
    sc.frames = 3;
    Corpus out;
    for (std::uint64_t s : {11u, 12u}) out.train.push_back(make_sample(synth::synth_clip(sc, s)));
    out.heldout = make_sample(synth::synth_clip(sc, 13));
    return out;
  }();
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "mocha_test_train" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

bool same_params(const ParamStore& a, const ParamStore& b) {
  if (a.names() != b.names()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!bit_identical(a.entries()[i].value, b.entries()[i].value)) return false;
  return true;
}

// Largest |after - before| over parameters whose name starts with prefix.
double max_step(const ParamStore& before, const ParamStore& after, const std::string& prefix) {
  double m = 0;
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (!before.entries()[i].name.starts_with(prefix)) continue;
    const Tensor& a = before.entries()[i].value;
    const Tensor& b = after.entries()[i].value;
    for (std::size_t j = 0; j < a.size(); ++j) m = std::max(m, std::abs(b[j] - a[j]));
  }
  return m;
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::ifstream is(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("samples and PSNR") {
  synth::SynthConfig sc;
  sc.raw_h = sc.raw_w = 8;
  sc.frames = 3;
  const auto clip = synth::synth_clip(sc, 3);
  const Sample s = make_sample(clip);
  CHECK(s.i_raw.shape() == Shape{3, 8, 8, 4});
  CHECK(bit_identical(s.targets.gt_rgb, synth::frame(clip.clean_rgb, 1)));
  CHECK(bit_identical(s.targets.gt_rgb_all, clip.clean_rgb));
  sc.frames = 5;
  CHECK_THROWS_AS(make_sample(synth::synth_clip(sc, 3)), DimensionError);

  Tensor gt({2, 2, 3}, 0.5), pred({2, 2, 3}, 0.6);
  CHECK(psnr(pred, gt) == doctest::Approx(20.0).epsilon(1e-12));  // mse 0.01
  CHECK(std::isinf(psnr(gt, gt)));
  Tensor high({2, 2, 3}, 1.0), over({2, 2, 3}, 7.0);
  CHECK(psnr(over, gt) == psnr(high, gt));  // predictions are clamped to [0,1]
  CHECK_THROWS_AS(psnr(Tensor({2, 2, 1}), gt), DimensionError);
}

TEST_CASE("training configuration validation") {
  TrainConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.batch = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.lr2 = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.weight_decay = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.grouping.k = 1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(train_stage1(stad::init_model(tiny_config().model, 1), {}, corpus().heldout, tiny_config()),
                  UsageError);
}

TEST_CASE("two-stage smoke run writes checkpoints and the log") {
  const TrainConfig cfg = tiny_config();
  const fs::path dir = scratch("smoke");
  const auto r = train_two_stage(corpus().train, corpus().heldout, cfg, dir);
  for (const char* f : {"stage1.ckpt", "stage1.ckpt.manifest", "stage2.ckpt", "stage2.ckpt.manifest", "train_log.csv"})
    CHECK_MESSAGE(fs::exists(dir / f), f);
  REQUIRE(r.stage1.log.size() == 1);
  REQUIRE(r.stage2.log.size() == 1);
  CHECK(r.stage1.log[0].terms.size() == 2);
  CHECK(r.stage2.log[0].terms.size() == 5);

  const Checkpoint c1 = load_checkpoint(dir / "stage1.ckpt");
  CHECK(c1.stage == 1);
  CHECK(c1.epoch == 1);
  CHECK(c1.seed == cfg.seed);
  CHECK(c1.config_hash == cfg.config_hash);
  CHECK(same_params(c1.params, r.stage1.params));
  const Checkpoint c2 = load_checkpoint(dir / "stage2.ckpt");
  CHECK(c2.stage == 2);
  CHECK(same_params(c2.params, r.stage2.params));

  const auto csv = lines_of(dir / "train_log.csv");
  REQUIRE(csv.size() == 1 + 4 + 7);
  CHECK(csv[0] == "stage,epoch,term,value");
  CHECK(csv[1].starts_with("1,1,l1,"));
  CHECK(csv[3].starts_with("1,1,total,"));
  CHECK(csv[4].starts_with("1,1,psnr,"));
  CHECK(csv[7].starts_with("2,1,pd,"));
  CHECK(csv[8].starts_with("2,1,mp,"));
  CHECK(csv[9].starts_with("2,1,mc,"));
  // Values are printed with round-trip precision.
  const std::string total = csv[3].substr(std::string("1,1,total,").size());
  CHECK(std::stod(total) == r.stage1.log[0].total);

  // Weighted terms add up to the logged total.
  double sum = 0;
  for (const auto& [name, v] : r.stage2.log[0].terms) sum += v;
  CHECK(sum == doctest::Approx(r.stage2.log[0].total).epsilon(1e-12));
}

TEST_CASE("stage 1 never touches DMAD and stage 2 trains it") {
  const TrainConfig cfg = tiny_config();
  const ParamStore init = stad::init_model(cfg.model, cfg.seed);
  const auto s1 = train_stage1(init, corpus().train, corpus().heldout, cfg);
  CHECK(max_step(init, s1.params, "dmad.") == 0.0);
  CHECK(max_step(init, s1.params, "sfe.") > 0.0);
  CHECK(max_step(init, s1.params, "stad.") > 0.0);
  CHECK(max_step(init, s1.params, "eib.") > 0.0);
  const auto s2 = train_stage2(s1.params, corpus().train, corpus().heldout, cfg);
  CHECK(max_step(s1.params, s2.params, "dmad.") > 0.0);
}

TEST_CASE("effective learning rates follow the configured reading") {
  // One AdamW step with bias correction moves each coordinate by lr * g/(|g| + eps), so with
  // decay off the largest move in a group is its effective learning rate.
  TrainConfig cfg = tiny_config();
  cfg.weight_decay = 0.0;
  const std::vector<Sample> one{corpus().train[0]};
  const ParamStore init = stad::init_model(cfg.model, cfg.seed);
  auto near = [](double step, double lr) { return step <= lr * (1 + 1e-8) && step >= lr * 0.999; };

  const auto s1 = train_stage1(init, one, corpus().heldout, cfg);
  for (const char* g : {"sfe.", "stad.", "eib."}) CHECK_MESSAGE(near(max_step(init, s1.params, g), cfg.lr1), g);

  for (LrReading reading : {LrReading::kCompose, LrReading::kCoincide}) {
    cfg.lr_reading = reading;
    const auto s2 = train_stage2(s1.params, one, corpus().heldout, cfg);
    const bool compose = reading == LrReading::kCompose;
    CAPTURE(compose);
    CHECK(near(max_step(s1.params, s2.params, "sfe."), cfg.lr2));
    CHECK(near(max_step(s1.params, s2.params, "eib."), cfg.lr2));
    CHECK(near(max_step(s1.params, s2.params, "stad."), compose ? cfg.lr2 * cfg.stad_lr_scale : cfg.lr2));
    CHECK(near(max_step(s1.params, s2.params, "dmad."), cfg.dmad_lr));
    CHECK(s2.params.lr_scale("stad.conv.w") == (compose ? cfg.stad_lr_scale : 1.0));
    CHECK(s2.params.lr_scale("eib.0.w") == 1.0);
  }
}

TEST_CASE("training is bit-reproducible across reruns and worker counts") {
  TrainConfig cfg = tiny_config();
  cfg.epochs1 = 2;
  cfg.epochs2 = 2;
  cfg.batch = 2;
  set_thread_count(1);
  const auto a = train_two_stage(corpus().train, corpus().heldout, cfg);
  const auto b = train_two_stage(corpus().train, corpus().heldout, cfg);
  set_thread_count(4);
  const auto c = train_two_stage(corpus().train, corpus().heldout, cfg);
  set_thread_count(0);
  for (const auto* other : {&b, &c}) {
    CHECK(same_params(a.stage2.params, other->stage2.params));
    for (std::size_t e = 0; e < 2; ++e) {
      CHECK(a.stage1.log[e].total == other->stage1.log[e].total);
      CHECK(a.stage2.log[e].total == other->stage2.log[e].total);
      CHECK(a.stage2.log[e].psnr == other->stage2.log[e].psnr);
    }
  }
  TrainConfig reseeded = cfg;
  reseeded.seed = 6;
  const auto d = train_two_stage(corpus().train, corpus().heldout, reseeded);
  CHECK_FALSE(same_params(a.stage2.params, d.stage2.params));
}

TEST_CASE("checkpoint errors") {
  const fs::path dir = scratch("ckpt");
  CHECK_THROWS_AS(load_checkpoint(dir / "absent.ckpt"), UsageError);

  ParamStore p;
  p.add("w", Tensor({2}, {1.0, 2.0}));
  save_checkpoint(dir / "a.ckpt", {p, 1, 3, 9, "abc"});
  const Checkpoint back = load_checkpoint(dir / "a.ckpt");
  CHECK(back.params == p);
  CHECK(back.epoch == 3);
  CHECK(back.seed == 9);
  CHECK(back.config_hash == "abc");

  fs::remove(dir / "a.ckpt.manifest");
  CHECK_THROWS_AS(load_checkpoint(dir / "a.ckpt"), UsageError);
  {
    std::ofstream os(dir / "a.ckpt.manifest");
    os << "stage=x\nepoch=1\nseed=1\nconfig_hash=abc\n";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "a.ckpt"), FormatError);
  {
    std::ofstream os(dir / "a.ckpt.manifest");
    os << "stage=1\nepoch=1\n";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "a.ckpt"), FormatError);
  {
    std::ofstream os(dir / "a.ckpt", std::ios::binary);
    os << "not a parameter file";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "a.ckpt"), FormatError);
}

TEST_CASE("a non-finite loss stops training") {
  const TrainConfig cfg = tiny_config();
  ParamStore p = stad::init_model(cfg.model, cfg.seed);
  p.get_mut("eib.1.b")[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(train_stage1(p, corpus().train, corpus().heldout, cfg), NumericalError);
  CHECK_THROWS_AS(train_stage2(p, corpus().train, corpus().heldout, cfg), NumericalError);
}
