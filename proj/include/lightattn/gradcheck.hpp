#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "lightattn/tensor.hpp"

namespace lightattn {

// Central-difference verification of the reverse pass. `f` must rebuild its
// graph on every call and be deterministic (run with dropout disabled).
// Returns the max over all parameter elements of
//   |analytic - central| / max(|analytic|, |central|, 1e-8).
inline double grad_check(const std::function<Tensor()>& f,
                         const std::vector<Tensor>& params, double eps = 1e-5) {
  double base;
  {
    NoGradGuard ng;
    base = f().item();
    double again = f().item();
    if (base != again) {
      throw ContractError("grad_check: f is not deterministic (dropout active?)");
    }
  }
  (void)base;

  for (const auto& p : params) const_cast<Tensor&>(p).zero_grad();
  Tensor loss = f();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad());

  double worst = 0.0;
  NoGradGuard ng;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    for (std::size_t i = 0; i < p.data().size(); ++i) {
      double saved = p.data()[i];
      p.data()[i] = saved + eps;
      double up = f().item();
      p.data()[i] = saved - eps;
      double down = f().item();
      p.data()[i] = saved;
      double numeric = (up - down) / (2.0 * eps);
      double a = analytic[pi][i];
      double err = std::fabs(a - numeric) /
                   std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace lightattn
