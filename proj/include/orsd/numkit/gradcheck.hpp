#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "orsd/numkit/tape.hpp"

namespace orsd::numkit {

struct GradCheckOptions {
  double h = 1e-5;
  // Entries probed per parameter; larger arrays are subsampled with `seed`.
  std::size_t max_entries_per_param = std::numeric_limits<std::size_t>::max();
  std::uint64_t seed = 0;
  // Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
  // The floor sits above central-difference roundoff (~1e-16 |f| / h), so
  // gradients that are exactly zero are not reported as large relative errors.
  double denom_floor = 1e-4;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

// Compares reverse-mode gradients of `loss_fn` against central differences
// (f(x+h) - f(x-h)) / 2h for every probed parameter entry. `loss_fn` must build
// the whole graph on the tape it is handed and return a 1x1 var.
inline GradCheckResult grad_check(const std::function<Var(Tape&)>& loss_fn,
                                  const std::vector<Parameter*>& params,
                                  const GradCheckOptions& opt = {}) {
  if (!(opt.h > 0.0)) throw NumericError("grad_check: h must be positive");
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    Var loss = loss_fn(tape);
    tape.backward(loss);
  }
  std::vector<Tensor2D> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) analytic.push_back(p->grad);

  const auto eval = [&]() {
    Tape tape;
    return loss_fn(tape).value().item();
  };

  std::mt19937_64 rng(opt.seed);
  GradCheckResult res;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter& p = *params[pi];
    std::vector<std::size_t> idx(p.value.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (idx.size() > opt.max_entries_per_param) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opt.max_entries_per_param);
    }
    for (std::size_t i : idx) {
      const double orig = p.value[i];
      p.value[i] = orig + opt.h;
      const double fp = eval();
      p.value[i] = orig - opt.h;
      const double fm = eval();
      p.value[i] = orig;
      const double num = (fp - fm) / (2.0 * opt.h);
      const double ana = analytic[pi][i];
      const double denom = std::max({std::abs(ana), std::abs(num), opt.denom_floor});
      const double rel = std::abs(ana - num) / denom;
      ++res.checked;
      if (!(rel <= res.max_rel_error)) {
        res.max_rel_error = std::isnan(rel) ? std::numeric_limits<double>::infinity() : rel;
        res.worst_param = p.name;
        res.worst_index = i;
        res.analytic = ana;
        res.numeric = num;
      }
    }
  }
  for (Parameter* p : params) p->zero_grad();
  return res;
}

}  // namespace orsd::numkit
