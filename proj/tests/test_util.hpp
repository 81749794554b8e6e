#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "diffil/rng.hpp"
#include "diffil/tensor.hpp"

namespace diffil::testing {

inline Tensor<double> random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& x : t.v) x = rng.normal() * scale;
  return t;
}

// Central finite differences of a scalar-valued function against analytic
// gradients, coordinate by coordinate. Returns the worst relative error with
// denominator max(|fd|, |analytic|, floor) so that numerically-zero entries
// compare absolutely.
inline double fd_max_rel_err(const std::function<double()>& loss,
                             const std::vector<Tensor<double>*>& params,
                             const std::vector<Tensor<double>>& analytic, double h = 1e-5,
                             double floor = 1e-6) {
  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<double>& p = *params[pi];
    for (int64_t j = 0; j < p.size(); ++j) {
      const double keep = p[j];
      p[j] = keep + h;
      const double up = loss();
      p[j] = keep - h;
      const double down = loss();
      p[j] = keep;
      const double fd = (up - down) / (2.0 * h);
      const double an = analytic[pi][j];
      const double denom = std::max({std::fabs(fd), std::fabs(an), floor});
      worst = std::max(worst, std::fabs(fd - an) / denom);
    }
  }
  return worst;
}

inline int64_t count_params(const std::vector<Tensor<double>*>& params) {
  int64_t n = 0;
  for (auto* p : params) n += p->size();
  return n;
}

}  // namespace diffil::testing
