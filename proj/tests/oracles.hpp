// SPDX-License-Identifier: Apache-2.0
// Test-only reference computations. Nothing here calls the library routine it
// is used to check.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <set>
#include <vector>

#include "drclf/mlp.hpp"

namespace drclf::oracle {

/// The CVaR objective lambda + 1/(alpha n) sum [l - lambda]_+, written out
/// independently of the library.
inline double cvar_objective(const std::vector<double>& losses, double alpha, double lambda) {
  long double hinge = 0;
  for (double l : losses) hinge += l > lambda ? static_cast<long double>(l) - lambda : 0.0L;
  return static_cast<double>(lambda + hinge / (static_cast<long double>(alpha) * losses.size()));
}

/// Exact minimum of the piecewise-linear objective: it is attained at a kink,
/// i.e. at one of the distinct loss values.
inline double kink_enumeration_min(const std::vector<double>& losses, double alpha) {
  const std::set<double> kinks(losses.begin(), losses.end());
  double best = std::numeric_limits<double>::infinity();
  for (double k : kinks) best = std::min(best, cvar_objective(losses, alpha, k));
  return best;
}

/// ln(1 + e^z) - y z for y in {0,1}, rewritten as softplus((1 - 2y) z) so
/// no cancellation happens; evaluated in long double.
inline double bce_reference(double z, double y) {
  const long double t = (1.0L - 2.0L * y) * z;
  const long double sp = t > 0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
  return static_cast<double>(sp);
}

inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Central finite differences of `loss` w.r.t. every trainable entry of
/// `params`, in Trainable::for_each order.
inline std::vector<double> finite_difference_gradient(MlpParams<double> params,
                                                      const std::function<double(const MlpParams<double>&)>& loss,
                                                      double h = 1e-5) {
  std::vector<double> out;
  std::vector<double*> entries;
  params.weights.for_each([&](auto& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) entries.push_back(t.data() + i);
  });
  for (double* e : entries) {
    const double saved = *e;
    *e = saved + h;
    const double up = loss(params);
    *e = saved - h;
    const double down = loss(params);
    *e = saved;
    out.push_back((up - down) / (2 * h));
  }
  return out;
}

inline std::vector<double> flatten(const Trainable<double>& t) {
  std::vector<double> out;
  t.for_each([&](const auto& x) {
    for (Eigen::Index i = 0; i < x.size(); ++i) out.push_back(x.data()[i]);
  });
  return out;
}

inline std::vector<double> random_losses(std::mt19937_64& rng, std::size_t n) {
  std::uniform_int_distribution<int> style(0, 2);
  std::exponential_distribution<double> expo(1.0);
  std::uniform_int_distribution<int> small(0, 4);
  std::vector<double> out(n);
  const int s = style(rng);
  for (auto& v : out) {
    // Mix continuous losses with heavily tied ones so kinks coincide.
    v = s == 0 ? expo(rng) : (s == 1 ? 0.25 * small(rng) : (small(rng) == 0 ? 5 * expo(rng) : 0.1 * expo(rng)));
  }
  return out;
}

}  // namespace drclf::oracle
