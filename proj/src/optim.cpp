#include "mocha/optim.hpp"

#include <cmath>

#include "mocha/errors.hpp"

namespace mocha::optim {

AdamW::AdamW(const ParamStore& store, std::vector<std::string> names, AdamWConfig cfg)
    : cfg_(cfg), names_(std::move(names)), store_size_(store.size()) {
  if (!(cfg_.lr > 0.0) || cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0 ||
      !(cfg_.eps > 0.0) || cfg_.weight_decay < 0.0)
    throw ConfigError("AdamW: invalid hyperparameters");
  for (const auto& n : names_) {
    index_.push_back(store.index_of(n));
    m_.emplace_back(store.get(n).shape());
    v_.emplace_back(store.get(n).shape());
  }
}

void AdamW::step(ParamStore& store, const GradList& grads) {
  if (grads.size() != store.size() || store.size() != store_size_)
    throw UsageError("AdamW: gradient list is not aligned with the parameter store");
  ++step_;
  const double t = static_cast<double>(step_);
  const double bc1 = 1.0 - std::pow(cfg_.beta1, t), bc2 = 1.0 - std::pow(cfg_.beta2, t);
  for (std::size_t k = 0; k < names_.size(); ++k) {
    const auto& g = grads[index_[k]];
    if (!g) continue;
    Tensor& p = store.get_mut(names_[k]);
    if (g->shape() != p.shape()) throw UsageError("AdamW: gradient shape mismatch for '" + names_[k] + "'");
    const double lr = cfg_.lr * store.lr_scale(names_[k]);
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = (*g)[i];
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      p[i] *= 1.0 - lr * cfg_.weight_decay;
      p[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
    }
  }
}

std::size_t AdamW::slot(std::string_view name) const {
  for (std::size_t k = 0; k < names_.size(); ++k)
    if (names_[k] == name) return k;
  throw UsageError("AdamW: '" + std::string(name) + "' is not managed by this optimizer");
}

const Tensor& AdamW::first_moment(std::string_view name) const { return m_[slot(name)]; }
const Tensor& AdamW::second_moment(std::string_view name) const { return v_[slot(name)]; }

std::vector<std::string> names_with_prefix(const ParamStore& store, std::initializer_list<std::string_view> prefixes) {
  std::vector<std::string> out;
  for (const auto& e : store.entries())
    for (auto p : prefixes)
      if (std::string_view(e.name).starts_with(p)) {
        out.push_back(e.name);
        break;
      }
  return out;
}

}  // namespace mocha::optim
