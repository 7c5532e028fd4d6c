// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "drclf/error.hpp"

namespace drclf {

/// Per-sample losses of one batch, all finite and >= 0.
using LossVector = std::vector<double>;

namespace detail {

inline void check_same_length(std::size_t a, std::size_t b) {
  require(a == b, ErrorKind::DimensionMismatch,
          "length mismatch: " + std::to_string(a) + " logits vs " + std::to_string(b) + " labels");
}

inline void check_alpha(double alpha) {
  require(alpha > 0 && alpha <= 1, ErrorKind::InvalidArgument,
          "alpha must lie in (0,1], got " + std::to_string(alpha));
}

}  // namespace detail

inline double logistic(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Binary cross-entropy on logits, max(z,0) - z*y + log1p(exp(-|z|)).
inline LossVector bce_per_sample(std::span<const double> logits, std::span<const double> labels) {
  detail::check_same_length(logits.size(), labels.size());
  LossVector out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    const double y = labels[i];
    require(y == 0.0 || y == 1.0, ErrorKind::InvalidArgument, "labels must be 0 or 1");
    out[i] = std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  return out;
}

/// d bce / d logit = logistic(z) - y.
inline std::vector<double> bce_logit_grad(std::span<const double> logits, std::span<const double> labels) {
  detail::check_same_length(logits.size(), labels.size());
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logistic(logits[i]) - labels[i];
  return out;
}

/// lambda + 1/(alpha n) * sum_i [loss_i - lambda]_+
inline double cvar_value(std::span<const double> losses, double alpha, double lambda) {
  require(!losses.empty(), ErrorKind::InvalidArgument, "empty loss vector");
  detail::check_alpha(alpha);
  double hinge = 0;
  for (double l : losses) hinge += std::max(l - lambda, 0.0);
  return lambda + hinge / (alpha * static_cast<double>(losses.size()));
}

struct CvarSolution {
  double lambda = 0;
  double value = 0;
  std::size_t active_count = 0;  // #{loss_i > lambda}
};

inline std::size_t count_above(std::span<const double> losses, double lambda) {
  return static_cast<std::size_t>(
      std::count_if(losses.begin(), losses.end(), [lambda](double l) { return l > lambda; }));
}

/// Minimizes the CVaR objective over lambda by bisection on its subgradient
///   g(lambda) = 1 - #{loss_i > lambda} / (alpha n),
/// which is a nondecreasing step function. The bracket [min, max] contains a
/// minimizer; bisection stops once its width is <= tol * (max - min) or after
/// 64 halvings. The returned lambda is the bracket's right end, where g >= 0.
///
/// When alpha = 1 every lambda below min(losses) is optimal. The returned
/// lambda is then one ulp below the minimum so that all samples are strictly
/// active and the CVaR weights reduce to the uniform 1/n of plain averaging.
inline CvarSolution cvar_lambda_search(std::span<const double> losses, double alpha, double tol = 1e-9) {
  require(!losses.empty(), ErrorKind::InvalidArgument, "empty loss vector");
  detail::check_alpha(alpha);
  require(tol > 0, ErrorKind::InvalidArgument, "lambda tolerance must be positive");
  for (double l : losses) require(std::isfinite(l), ErrorKind::NonFiniteLoss, "non-finite loss in batch");

  const auto [min_it, max_it] = std::minmax_element(losses.begin(), losses.end());
  double lo = *min_it;
  double hi = *max_it;
  const double scaled_n = alpha * static_cast<double>(losses.size());
  auto subgradient = [&](double lambda) { return 1.0 - static_cast<double>(count_above(losses, lambda)) / scaled_n; };

  double lambda = hi;
  if (alpha >= 1.0) {
    lambda = std::nextafter(lo, -std::numeric_limits<double>::infinity());
  } else if (subgradient(lo) >= 0) {
    lambda = lo;
  } else {
    const double width = tol * (hi - lo);
    for (int iter = 0; iter < 64 && hi - lo > width; ++iter) {
      const double mid = lo + 0.5 * (hi - lo);
      if (mid <= lo || mid >= hi) break;
      if (subgradient(mid) < 0) {
        lo = mid;
      } else {
        hi = mid;
      }
    }
    lambda = hi;
  }
  return {lambda, cvar_value(losses, alpha, lambda), count_above(losses, lambda)};
}

/// Per-sample weights 1/(alpha n) * 1[loss_i > lambda]; a loss exactly at
/// lambda gets weight 0. The batch gradient is sum_i weight_i * grad loss_i.
inline std::vector<double> cvar_active_weights(std::span<const double> losses, double lambda, double alpha) {
  require(!losses.empty(), ErrorKind::InvalidArgument, "empty loss vector");
  detail::check_alpha(alpha);
  const double w = 1.0 / (alpha * static_cast<double>(losses.size()));
  std::vector<double> out(losses.size());
  for (std::size_t i = 0; i < losses.size(); ++i) out[i] = losses[i] > lambda ? w : 0.0;
  return out;
}

}  // namespace drclf
