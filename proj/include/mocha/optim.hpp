#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "mocha/params.hpp"

namespace mocha::optim {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Decoupled weight decay with bias correction (PyTorch AdamW). Owns moments for a
// subset of the store; the effective step size of a parameter is lr * its lr_scale.
class AdamW {
 public:
  AdamW(const ParamStore& store, std::vector<std::string> names, AdamWConfig cfg = {});

  // grads must be aligned with the store (one slot per entry); missing grads skip the parameter.
  void step(ParamStore& store, const GradList& grads);

  std::size_t steps() const { return step_; }
  const AdamWConfig& config() const { return cfg_; }
  const std::vector<std::string>& names() const { return names_; }
  const Tensor& first_moment(std::string_view name) const;
  const Tensor& second_moment(std::string_view name) const;

 private:
  std::size_t slot(std::string_view name) const;

  AdamWConfig cfg_;
  std::vector<std::string> names_;
  std::vector<std::size_t> index_;
  std::vector<Tensor> m_, v_;
  std::size_t store_size_ = 0;
  std::size_t step_ = 0;
};

// Store names starting with any of the prefixes, in store order.
std::vector<std::string> names_with_prefix(const ParamStore& store, std::initializer_list<std::string_view> prefixes);

}  // namespace mocha::optim
