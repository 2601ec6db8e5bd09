#include "mocha/params.hpp"

#include <cmath>

#include "mocha/errors.hpp"

namespace mocha {

void ParamStore::add(std::string name, Tensor value, double lr_scale) {
  if (index_.count(name)) throw UsageError("duplicate parameter name '" + name + "'");
  if (!(lr_scale > 0.0)) throw UsageError("lr_scale must be positive for '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.push_back(Entry{std::move(name), std::move(value), lr_scale});
}

bool ParamStore::contains(std::string_view name) const { return index_.find(name) != index_.end(); }

std::size_t ParamStore::index_of(std::string_view name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw UsageError("unknown parameter '" + std::string(name) + "'");
  return it->second;
}

const Tensor& ParamStore::get(std::string_view name) const { return entries_[index_of(name)].value; }

Tensor& ParamStore::get_mut(std::string_view name) { return entries_[index_of(name)].value; }

void ParamStore::set(std::string_view name, Tensor value) {
  Entry& e = entries_[index_of(name)];
  if (value.shape() != e.value.shape()) {
    throw DimensionError("parameter '" + e.name + "' expects shape " + shape_str(e.value.shape()) + ", got " +
                         shape_str(value.shape()));
  }
  e.value = std::move(value);
}

double ParamStore::lr_scale(std::string_view name) const { return entries_[index_of(name)].lr_scale; }

void ParamStore::set_lr_scale(std::string_view name, double scale) {
  if (!(scale > 0.0)) throw UsageError("lr_scale must be positive");
  entries_[index_of(name)].lr_scale = scale;
}

void ParamStore::set_lr_scale_prefix(std::string_view prefix, double scale) {
  if (!(scale > 0.0)) throw UsageError("lr_scale must be positive");
  for (auto& e : entries_)
    if (std::string_view(e.name).starts_with(prefix)) e.lr_scale = scale;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

Binding::Binding(Tape& tape, const ParamStore& store) : tape_(&tape), store_(&store), vars_(store.size()) {}

Binding::Binding(Tape& tape, const ParamStore& store, std::span<const Var> preset)
    : tape_(&tape), store_(&store), vars_(preset.begin(), preset.end()) {
  if (preset.size() != store.size()) throw UsageError("Binding preset count does not match the store");
}

Var Binding::get(std::string_view name) {
  const std::size_t i = store_->index_of(name);
  if (!vars_[i].valid()) vars_[i] = tape_->variable(store_->entries()[i].value);
  return vars_[i];
}

bool Binding::is_bound(std::string_view name) const { return vars_[store_->index_of(name)].valid(); }

std::vector<std::string> Binding::bound_names() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < vars_.size(); ++i)
    if (vars_[i].valid()) out.push_back(store_->entries()[i].name);
  return out;
}

GradList Binding::gradients() const {
  GradList out(vars_.size());
  for (std::size_t i = 0; i < vars_.size(); ++i) {
    if (!vars_[i].valid()) continue;
    if (const Tensor* g = tape_->grad(vars_[i])) out[i] = *g;
  }
  return out;
}

Var ParamView::operator()(std::string_view name) const { return binding_->get(prefix_ + std::string(name)); }

ParamView ParamView::sub(std::string_view name) const {
  return ParamView(*binding_, prefix_ + std::string(name) + ".");
}

ParamView ParamView::sub(std::string_view name, std::size_t index) const {
  return ParamView(*binding_, prefix_ + std::string(name) + "." + std::to_string(index) + ".");
}

std::string ParamInit::full(std::string_view name) const { return prefix_ + std::string(name); }

ParamInit ParamInit::sub(std::string_view name) const {
  return ParamInit(*store_, *rng_, prefix_ + std::string(name) + ".");
}

ParamInit ParamInit::sub(std::string_view name, std::size_t index) const {
  return ParamInit(*store_, *rng_, prefix_ + std::string(name) + "." + std::to_string(index) + ".");
}

void ParamInit::he_uniform(std::string_view name, Shape shape, std::size_t fan_in, double gain) {
  const double bound = gain * std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor w(std::move(shape));
  for (auto& v : w.vec()) v = rng_->uniform(-bound, bound);
  store_->add(full(name), std::move(w));
}

void ParamInit::conv(std::string_view name, std::size_t k, std::size_t cin, std::size_t cout, double gain) {
  he_uniform(std::string(name) + ".w", {k, k, cin, cout}, k * k * cin, gain);
  constant(std::string(name) + ".b", {cout}, 0.0);
}

void ParamInit::depthwise(std::string_view name, std::size_t k, std::size_t c) {
  he_uniform(std::string(name) + ".w", {k, k, c}, k * k);
  constant(std::string(name) + ".b", {c}, 0.0);
}

void ParamInit::linear(std::string_view name, std::size_t cin, std::size_t cout, double gain) {
  he_uniform(std::string(name) + ".w", {cin, cout}, cin, gain);
  constant(std::string(name) + ".b", {cout}, 0.0);
}

void ParamInit::layer_norm(std::string_view name, std::size_t c) {
  constant(std::string(name) + ".g", {c}, 1.0);
  constant(std::string(name) + ".b", {c}, 0.0);
}

void ParamInit::constant(std::string_view name, Shape shape, double value) {
  store_->add(full(name), Tensor(std::move(shape), value));
}

}  // namespace mocha
