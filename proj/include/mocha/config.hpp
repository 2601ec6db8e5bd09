#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "mocha/io.hpp"
#include "mocha/synth.hpp"
#include "mocha/train.hpp"

namespace mocha {

// key=value run configuration with typed accessors. Every key has a default;
// unknown keys and malformed values raise ConfigError.
class RunConfig {
 public:
  RunConfig();

  static RunConfig from_file(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  void merge(const io::KeyValues& kv);
  bool is_known(const std::string& key) const;

  const std::string& get(const std::string& key) const;
  double real(const std::string& key) const;
  std::size_t count(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;

  stad::ModelConfig model() const;
  losses::LossWeights weights() const;
  synth::SynthConfig synth() const;
  train::TrainConfig training() const;

  // Sorted "key=value" lines of every setting.
  std::string resolved() const;
  // FNV-1a of resolved(), as 16 hex digits.
  std::string hash() const;

  const io::KeyValues& values() const { return values_; }

 private:
  io::KeyValues values_;
};

}  // namespace mocha
