#include "mocha/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mocha/errors.hpp"
#include "mocha/rng.hpp"

namespace mocha {

namespace {

double evaluate(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& x : inputs) vars.push_back(tape.constant(x));
  Var out = f(tape, vars);
  if (out.value().size() != 1) throw UsageError("grad_check: function is not scalar-valued");
  return out.value()[0];
}

// Differences below the rounding resolution of the central quotient are indistinguishable
// from zero (e.g. the exactly-zero gradient of a key bias under softmax).
double rel_err(double ad, double fd, double fp, double fm, double h) {
  const double resolution = 1024.0 * std::numeric_limits<double>::epsilon() *
                            std::max({1.0, std::abs(fp), std::abs(fm)}) / (2.0 * h);
  if (std::abs(ad - fd) <= resolution) return 0.0;
  return std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), 1e-8});
}

}  // namespace

GradCheckReport grad_check(const ScalarFn& f, const std::vector<Tensor>& inputs, const GradCheckOptions& opt) {
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const auto& x : inputs) vars.push_back(tape.variable(x));
    Var out = f(tape, vars);
    if (out.value().size() != 1) throw UsageError("grad_check: function is not scalar-valued");
    tape.backward(out);
    for (const auto& v : vars) analytic.push_back(tape.grad_or_zero(v));
  }

  std::size_t total = 0;
  for (const auto& x : inputs) total += x.size();

  GradCheckReport report;
  std::vector<Tensor> work = inputs;
  if (total <= opt.max_coordinates) {
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      for (std::size_t i = 0; i < inputs[k].size(); ++i) {
        const double orig = inputs[k][i];
        work[k][i] = orig + opt.h;
        const double fp = evaluate(f, work);
        work[k][i] = orig - opt.h;
        const double fm = evaluate(f, work);
        work[k][i] = orig;
        const double fd = (fp - fm) / (2.0 * opt.h);
        report.max_rel_err = std::max(report.max_rel_err, rel_err(analytic[k][i], fd, fp, fm, opt.h));
        ++report.checks;
      }
    }
  } else {
    report.probe_mode = true;
    Rng rng(opt.seed);
    for (std::size_t p = 0; p < opt.probes; ++p) {
      std::vector<Tensor> dir;
      double ad = 0.0;
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        Tensor d(inputs[k].shape());
        for (std::size_t i = 0; i < d.size(); ++i) {
          d[i] = rng.normal();
          ad += d[i] * analytic[k][i];
        }
        dir.push_back(std::move(d));
      }
      for (std::size_t k = 0; k < inputs.size(); ++k)
        for (std::size_t i = 0; i < work[k].size(); ++i) work[k][i] = inputs[k][i] + opt.h * dir[k][i];
      const double fp = evaluate(f, work);
      for (std::size_t k = 0; k < inputs.size(); ++k)
        for (std::size_t i = 0; i < work[k].size(); ++i) work[k][i] = inputs[k][i] - opt.h * dir[k][i];
      const double fm = evaluate(f, work);
      const double fd = (fp - fm) / (2.0 * opt.h);
      report.max_rel_err = std::max(report.max_rel_err, rel_err(ad, fd, fp, fm, opt.h));
      ++report.checks;
    }
  }
  report.pass = report.max_rel_err <= opt.tol;
  return report;
}

GradCheckReport grad_check_params(const ParamStore& store, const ParamScalarFn& f, const std::vector<Tensor>& extra,
                                  const GradCheckOptions& opt) {
  std::vector<Tensor> inputs;
  for (const auto& e : store.entries()) inputs.push_back(e.value);
  const std::size_t n_params = inputs.size();
  inputs.insert(inputs.end(), extra.begin(), extra.end());
  ScalarFn wrapped = [&](Tape& tape, std::span<const Var> vars) {
    Binding binding(tape, store, vars.subspan(0, n_params));
    return f(binding, vars.subspan(n_params));
  };
  return grad_check(wrapped, inputs, opt);
}

}  // namespace mocha
