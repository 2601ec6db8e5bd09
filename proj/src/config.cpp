#include "mocha/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "mocha/errors.hpp"

namespace mocha {

namespace {

enum class Kind { kCount, kReal, kU64, kReading };

struct KeySpec {
  const char* def;
  Kind kind;
};

const std::map<std::string, KeySpec>& schema() {
  static const std::map<std::string, KeySpec> s{
      // model
      {"channels", {"16", Kind::kCount}},
      {"n_m", {"4", Kind::kCount}},
      {"dmad_heads", {"1", Kind::kCount}},
      {"n_r", {"4", Kind::kCount}},
      {"n_s", {"5", Kind::kCount}},
      {"window_t", {"2", Kind::kCount}},
      {"window_k", {"7", Kind::kCount}},
      {"heads", {"4", Kind::kCount}},
      {"mlp_ratio", {"2", Kind::kCount}},
      // losses
      {"lambda_perceptual", {"0.01", Kind::kReal}},
      {"lambda_pd", {"1", Kind::kReal}},
      {"lambda_mp", {"1", Kind::kReal}},
      {"lambda_mc", {"0.5", Kind::kReal}},
      {"patch", {"8", Kind::kCount}},
      {"patch_stride", {"4", Kind::kCount}},
      {"group_k", {"8", Kind::kCount}},
      {"search", {"16", Kind::kCount}},
      {"max_groups", {"64", Kind::kCount}},
      {"wnnm_c", {"1", Kind::kReal}},
      {"wnnm_eps", {"1e-6", Kind::kReal}},
      // training
      {"epochs1", {"30", Kind::kCount}},
      {"epochs2", {"30", Kind::kCount}},
      {"batch", {"1", Kind::kCount}},
      {"lr1", {"1e-4", Kind::kReal}},
      {"lr2", {"1e-5", Kind::kReal}},
      {"dmad_lr", {"1e-4", Kind::kReal}},
      {"stad_lr_scale", {"0.1", Kind::kReal}},
      {"lr_reading", {"compose", Kind::kReading}},
      {"weight_decay", {"0.01", Kind::kReal}},
      {"seed", {"1", Kind::kU64}},
      // synthesis
      {"clips", {"8", Kind::kCount}},
      {"raw_h", {"32", Kind::kCount}},
      {"raw_w", {"32", Kind::kCount}},
      {"frames", {"3", Kind::kCount}},
      {"pitch", {"3", Kind::kCount}},
      {"subsamples", {"12", Kind::kCount}},
      {"scale_lo", {"0.8", Kind::kReal}},
      {"scale_hi", {"0.95", Kind::kReal}},
      {"translation_jitter", {"1", Kind::kReal}},
      {"rotation_jitter", {"0.01", Kind::kReal}},
      {"scale_jitter", {"0.02", Kind::kReal}},
      {"tilt", {"0.05", Kind::kReal}},
      {"sharpen", {"0.5", Kind::kReal}},
      {"synth_seed", {"7", Kind::kU64}},
  };
  return s;
}

void check_value(const std::string& key, const std::string& value, Kind kind) {
  const char* b = value.data();
  const char* e = b + value.size();
  bool ok = !value.empty();
  if (ok) switch (kind) {
      case Kind::kCount:
      case Kind::kU64: {
        std::uint64_t v = 0;
        auto [p, ec] = std::from_chars(b, e, v);
        ok = ec == std::errc() && p == e;
        break;
      }
      case Kind::kReal: {
        double v = 0;
        auto [p, ec] = std::from_chars(b, e, v);
        ok = ec == std::errc() && p == e && std::isfinite(v);
        break;
      }
      case Kind::kReading:
        ok = value == "compose" || value == "coincide";
        break;
    }
  if (!ok) throw ConfigError("config key '" + key + "': invalid value '" + value + "'");
}

}  // namespace

RunConfig::RunConfig() {
  for (const auto& [k, spec] : schema()) values_[k] = spec.def;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  RunConfig c;
  c.merge(io::read_key_values(path));
  return c;
}

bool RunConfig::is_known(const std::string& key) const { return schema().count(key) > 0; }

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = schema().find(key);
  if (it == schema().end()) throw ConfigError("unknown config key '" + key + "'");
  check_value(key, value, it->second.kind);
  values_[key] = value;
}

void RunConfig::merge(const io::KeyValues& kv) {
  for (const auto& [k, v] : kv) set(k, v);
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

double RunConfig::real(const std::string& key) const { return std::stod(get(key)); }
std::size_t RunConfig::count(const std::string& key) const { return static_cast<std::size_t>(std::stoull(get(key))); }
std::uint64_t RunConfig::u64(const std::string& key) const { return std::stoull(get(key)); }

stad::ModelConfig RunConfig::model() const {
  stad::ModelConfig m;
  m.channels = count("channels");
  m.n_m = count("n_m");
  m.dmad_heads = count("dmad_heads");
  m.n_r = count("n_r");
  m.n_s = count("n_s");
  m.window_t = count("window_t");
  m.window_k = count("window_k");
  m.heads = count("heads");
  m.mlp_ratio = count("mlp_ratio");
  m.validate();
  return m;
}

losses::LossWeights RunConfig::weights() const {
  losses::LossWeights w;
  w.perceptual = real("lambda_perceptual");
  w.pd = real("lambda_pd");
  w.mp = real("lambda_mp");
  w.mc = real("lambda_mc");
  w.validate();
  return w;
}

synth::SynthConfig RunConfig::synth() const {
  synth::SynthConfig s;
  s.raw_h = count("raw_h");
  s.raw_w = count("raw_w");
  s.frames = count("frames");
  s.pitch = count("pitch");
  s.subsamples = count("subsamples");
  s.scale_lo = real("scale_lo");
  s.scale_hi = real("scale_hi");
  s.translation_jitter = real("translation_jitter");
  s.rotation_jitter = real("rotation_jitter");
  s.scale_jitter = real("scale_jitter");
  s.tilt = real("tilt");
  s.isp.sharpen = real("sharpen");
  return s;
}

train::TrainConfig RunConfig::training() const {
  train::TrainConfig t;
  t.model = model();
  t.weights = weights();
  t.grouping.patch = count("patch");
  t.grouping.stride = count("patch_stride");
  t.grouping.k = count("group_k");
  t.grouping.search = count("search");
  t.grouping.max_groups = count("max_groups");
  t.wnnm.c_w = real("wnnm_c");
  t.wnnm.eps = real("wnnm_eps");
  t.epochs1 = count("epochs1");
  t.epochs2 = count("epochs2");
  t.batch = count("batch");
  t.lr1 = real("lr1");
  t.lr2 = real("lr2");
  t.dmad_lr = real("dmad_lr");
  t.stad_lr_scale = real("stad_lr_scale");
  t.lr_reading = get("lr_reading") == "compose" ? train::LrReading::kCompose : train::LrReading::kCoincide;
  t.weight_decay = real("weight_decay");
  t.seed = u64("seed");
  t.config_hash = hash();
  t.validate();
  return t;
}

std::string RunConfig::resolved() const {
  std::ostringstream os;
  for (const auto& [k, v] : values_) os << k << '=' << v << '\n';
  return os.str();
}

std::string RunConfig::hash() const {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : resolved()) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace mocha
