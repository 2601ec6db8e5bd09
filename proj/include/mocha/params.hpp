#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mocha/rng.hpp"
#include "mocha/tape.hpp"
#include "mocha/tensor.hpp"

namespace mocha {

// Named trainable tensors in insertion order, each with a learning-rate scale.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor value;
    double lr_scale = 1.0;
    friend bool operator==(const Entry&, const Entry&) = default;
  };

  void add(std::string name, Tensor value, double lr_scale = 1.0);
  bool contains(std::string_view name) const;
  std::size_t index_of(std::string_view name) const;
  const Tensor& get(std::string_view name) const;
  Tensor& get_mut(std::string_view name);
  void set(std::string_view name, Tensor value);
  double lr_scale(std::string_view name) const;
  void set_lr_scale(std::string_view name, double scale);
  // Applies scale to every parameter whose name starts with prefix.
  void set_lr_scale_prefix(std::string_view prefix, double scale);

  std::size_t size() const noexcept { return entries_.size(); }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  std::vector<Entry>& entries() noexcept { return entries_; }
  std::vector<std::string> names() const;
  std::size_t scalar_count() const;

  friend bool operator==(const ParamStore&, const ParamStore&) = default;

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

// Gradients aligned with ParamStore order; nullopt for parameters the loss never touched.
using GradList = std::vector<std::optional<Tensor>>;

// Lazily binds ParamStore entries onto a Tape as variables. Parameters that are
// never requested stay off the tape and receive no gradient.
class Binding {
 public:
  Binding(Tape& tape, const ParamStore& store);
  // Uses caller-provided Vars (one per store entry) instead of fresh leaves.
  Binding(Tape& tape, const ParamStore& store, std::span<const Var> preset);

  Var get(std::string_view name);
  Tape& tape() noexcept { return *tape_; }
  const ParamStore& store() const noexcept { return *store_; }
  bool is_bound(std::string_view name) const;
  std::vector<std::string> bound_names() const;

  // Call after tape.backward(loss).
  GradList gradients() const;

 private:
  Tape* tape_;
  const ParamStore* store_;
  std::vector<Var> vars_;
};

// Prefix-scoped parameter lookup used by model forward functions.
class ParamView {
 public:
  ParamView(Binding& binding, std::string prefix = {}) : binding_(&binding), prefix_(std::move(prefix)) {}
  Var operator()(std::string_view name) const;
  ParamView sub(std::string_view name) const;
  ParamView sub(std::string_view name, std::size_t index) const;
  Tape& tape() const { return binding_->tape(); }
  const std::string& prefix() const noexcept { return prefix_; }

 private:
  Binding* binding_;
  std::string prefix_;
};

// Prefix-scoped parameter creation. Weights use fan-in scaled uniform (He)
// initialization, biases start at zero.
class ParamInit {
 public:
  ParamInit(ParamStore& store, Rng& rng, std::string prefix = {})
      : store_(&store), rng_(&rng), prefix_(std::move(prefix)) {}

  ParamInit sub(std::string_view name) const;
  ParamInit sub(std::string_view name, std::size_t index) const;

  // "<name>.w" [k,k,cin,cout] and "<name>.b" [cout]. gain multiplies the uniform bound.
  void conv(std::string_view name, std::size_t k, std::size_t cin, std::size_t cout, double gain = 1.0);
  // "<name>.w" [k,k,c] and "<name>.b" [c].
  void depthwise(std::string_view name, std::size_t k, std::size_t c);
  // "<name>.w" [cin,cout] and "<name>.b" [cout].
  void linear(std::string_view name, std::size_t cin, std::size_t cout, double gain = 1.0);
  // "<name>.g" ones and "<name>.b" zeros.
  void layer_norm(std::string_view name, std::size_t c);
  void constant(std::string_view name, Shape shape, double value);
  // U(-b, b) with b = gain * sqrt(6 / fan_in).
  void he_uniform(std::string_view name, Shape shape, std::size_t fan_in, double gain = 1.0);

 private:
  std::string full(std::string_view name) const;

  ParamStore* store_;
  Rng* rng_;
  std::string prefix_;
};

}  // namespace mocha
