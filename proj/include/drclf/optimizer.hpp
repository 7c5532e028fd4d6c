// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "drclf/error.hpp"
#include "drclf/featurebank.hpp"
#include "drclf/mlp.hpp"
#include "drclf/robust_loss.hpp"
#include "drclf/seed.hpp"

namespace drclf {

enum class UpdateRule { adam, sgd };

struct TrainConfig {
  double alpha = 0.5;
  double gamma = 0.05;  // SAM radius
  double lr = 1e-3;
  double lr_min = 0.0;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  double dropout_rate = 0.3;
  std::size_t hidden_dim = 0;  // 0: same width as the input features
  std::size_t hidden_layers = 2;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double lambda_tol = 1e-9;  // relative to the batch loss range
  bool sam = true;
  UpdateRule update = UpdateRule::adam;

  bool operator==(const TrainConfig&) const = default;

  void validate() const {
    auto finite = [](double v) { return std::isfinite(v); };
    require(finite(alpha) && alpha > 0 && alpha <= 1, ErrorKind::InvalidArgument, "alpha must lie in (0,1]");
    require(finite(gamma) && gamma >= 0, ErrorKind::InvalidArgument, "gamma must be finite and nonnegative");
    require(finite(lr) && lr > 0, ErrorKind::InvalidArgument, "lr must be positive");
    require(finite(lr_min) && lr_min >= 0 && lr_min <= lr, ErrorKind::InvalidArgument, "lr_min must lie in [0, lr]");
    require(batch_size >= 2, ErrorKind::TrainBatchTooSmall, "batch_size must be at least 2");
    require(finite(dropout_rate) && dropout_rate >= 0 && dropout_rate < 1, ErrorKind::InvalidArgument,
            "dropout_rate must lie in [0,1)");
    require(finite(adam_beta1) && adam_beta1 >= 0 && adam_beta1 < 1 && finite(adam_beta2) && adam_beta2 >= 0 &&
                adam_beta2 < 1 && finite(adam_eps) && adam_eps > 0,
            ErrorKind::InvalidArgument, "invalid Adam hyperparameters");
    require(finite(lambda_tol) && lambda_tol > 0, ErrorKind::InvalidArgument, "lambda_tol must be positive");
  }

  std::vector<std::size_t> dims(std::size_t feature_dim) const {
    std::vector<std::size_t> d{feature_dim};
    for (std::size_t i = 0; i < hidden_layers; ++i) d.push_back(hidden_dim ? hidden_dim : feature_dim);
    d.push_back(1);
    return d;
  }
};

NLOHMANN_JSON_SERIALIZE_ENUM(UpdateRule, {{UpdateRule::adam, "adam"}, {UpdateRule::sgd, "sgd"}})

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"alpha", c.alpha},
                     {"gamma", c.gamma},
                     {"lr", c.lr},
                     {"lr_min", c.lr_min},
                     {"batch_size", c.batch_size},
                     {"epochs", c.epochs},
                     {"seed", c.seed},
                     {"dropout_rate", c.dropout_rate},
                     {"hidden_dim", c.hidden_dim},
                     {"hidden_layers", c.hidden_layers},
                     {"adam_beta1", c.adam_beta1},
                     {"adam_beta2", c.adam_beta2},
                     {"adam_eps", c.adam_eps},
                     {"lambda_tol", c.lambda_tol},
                     {"sam", c.sam},
                     {"update", c.update}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.alpha = j.value("alpha", d.alpha);
  c.gamma = j.value("gamma", d.gamma);
  c.lr = j.value("lr", d.lr);
  c.lr_min = j.value("lr_min", d.lr_min);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.seed = j.value("seed", d.seed);
  c.dropout_rate = j.value("dropout_rate", d.dropout_rate);
  c.hidden_dim = j.value("hidden_dim", d.hidden_dim);
  c.hidden_layers = j.value("hidden_layers", d.hidden_layers);
  c.adam_beta1 = j.value("adam_beta1", d.adam_beta1);
  c.adam_beta2 = j.value("adam_beta2", d.adam_beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
  c.lambda_tol = j.value("lambda_tol", d.lambda_tol);
  c.sam = j.value("sam", d.sam);
  c.update = j.value("update", d.update);
}

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double mean_cvar_loss = 0;
  double mean_lambda = 0;
  double active_fraction = 0;
  double lr = 0;
  std::size_t batches = 0;
  std::size_t dropped_samples = 0;

  bool operator==(const EpochStats&) const = default;
};

inline void to_json(nlohmann::json& j, const EpochStats& e) {
  j = nlohmann::json{{"epoch", e.epoch},
                     {"mean_cvar_loss", e.mean_cvar_loss},
                     {"mean_lambda", e.mean_lambda},
                     {"active_fraction", e.active_fraction},
                     {"lr", e.lr},
                     {"batches", e.batches},
                     {"dropped_samples", e.dropped_samples}};
}

inline void from_json(const nlohmann::json& j, EpochStats& e) {
  j.at("epoch").get_to(e.epoch);
  j.at("mean_cvar_loss").get_to(e.mean_cvar_loss);
  j.at("mean_lambda").get_to(e.mean_lambda);
  j.at("active_fraction").get_to(e.active_fraction);
  j.at("lr").get_to(e.lr);
  e.batches = j.value("batches", std::size_t{0});
  e.dropped_samples = j.value("dropped_samples", std::size_t{0});
}

/// A classifier ready for inference. Training runs in double precision; the
/// stored weights are rounded to float.
struct TrainedModel {
  MlpParams<float> params;
  TrainConfig config;
  std::uint32_t feature_dim = 0;
  std::vector<EpochStats> history;

  bool operator==(const TrainedModel&) const = default;
};

// ---------------------------------------------------------------------------

/// gamma * sign(g) entrywise with sign(0) = 0, over every trainable tensor.
template <typename Scalar>
Trainable<Scalar> sam_perturbation(const Gradients<Scalar>& grads, double gamma) {
  Trainable<Scalar> eps = grads;
  const auto g = static_cast<Scalar>(gamma);
  eps.for_each([g](auto& t) {
    t = t.unaryExpr([g](Scalar v) { return v > Scalar(0) ? g : (v < Scalar(0) ? -g : Scalar(0)); });
  });
  return eps;
}

template <typename Scalar>
void add_scaled(Trainable<Scalar>& target, const Trainable<Scalar>& delta, Scalar scale = Scalar(1)) {
  target.zip(delta, [scale](auto& a, const auto& b) { a += scale * b; });
}

struct AdamState {
  Trainable<double> first_moment;
  Trainable<double> second_moment;
  std::uint64_t step = 0;

  bool operator==(const AdamState&) const = default;
};

/// Bias-corrected Adam: theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
inline void adam_step(AdamState& state, Trainable<double>& params, const Gradients<double>& grads, double lr,
                      const TrainConfig& config) {
  require(lr > 0, ErrorKind::InvalidArgument, "learning rate must be positive");
  if (state.step == 0 && state.first_moment.layers.empty()) {
    state.first_moment = params.zeros_like();
    state.second_moment = params.zeros_like();
  }
  // Validate every shape before touching any state.
  params.zip(grads, [](auto&, const auto&) {});
  params.zip(state.first_moment, [](auto&, const auto&) {});

  ++state.step;
  const double b1 = config.adam_beta1;
  const double b2 = config.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const double eps = config.adam_eps;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    auto update = [&](auto& theta, const auto& g, auto& m, auto& v) {
      m = b1 * m + (1.0 - b1) * g;
      v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
      theta.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
    };
    auto& p = params.layers[l];
    const auto& g = grads.layers[l];
    auto& m = state.first_moment.layers[l];
    auto& v = state.second_moment.layers[l];
    update(p.weight, g.weight, m.weight, v.weight);
    update(p.bias, g.bias, m.bias, v.bias);
    update(p.scale, g.scale, m.scale, v.scale);
    update(p.shift, g.shift, m.shift, v.shift);
  }
}

/// Plain gradient step theta <- theta - lr * g, the update line of the
/// algorithm taken literally.
inline void sgd_step(Trainable<double>& params, const Gradients<double>& grads, double lr) {
  add_scaled(params, grads, -lr);
}

/// Half-cosine annealing from lr at step 0 to lr_min at step == total_steps.
inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr, double lr_min) {
  require(total_steps >= 1, ErrorKind::InvalidArgument, "total_steps must be at least 1");
  require(step <= total_steps, ErrorKind::InvalidArgument,
          "step " + std::to_string(step) + " is past total_steps " + std::to_string(total_steps));
  if (step == 0) return lr;
  if (step == total_steps) return lr_min;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr - lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

// ---------------------------------------------------------------------------

/// Snapshot handed to TrainHooks::on_batch after each optimizer step.
struct BatchTrace {
  std::size_t epoch = 0;  // 1-based
  std::size_t batch = 0;  // 0-based within the epoch
  const LossVector* losses = nullptr;
  CvarSolution solution;
  const std::vector<double>* weights = nullptr;            // at theta
  const std::vector<double>* perturbed_weights = nullptr;  // at theta + eps, null without SAM
  const Gradients<double>* grad_at_params = nullptr;
  const Trainable<double>* perturbation = nullptr;  // null without SAM
  const Gradients<double>* grad_applied = nullptr;
  const Trainable<double>* params_before = nullptr;
  const Trainable<double>* params_after = nullptr;
  const AdamState* optimizer_before = nullptr;
  std::size_t forward_passes = 0;
  std::size_t backward_passes = 0;
  std::size_t lambda_searches = 0;
};

struct TrainHooks {
  std::function<void(const BatchTrace&)> on_batch;
  std::function<void(const std::string&)> on_log;
};

namespace detail {

inline Matrix<double> gather_rows(const FeatureBank& bank, std::span<const std::size_t> idx) {
  Matrix<double> x(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(bank.feature_dim));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto& f = bank.records[idx[i]].feature;
    for (std::size_t j = 0; j < f.size(); ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = f[j];
  }
  return x;
}

inline Matrix<double> bank_matrix(const FeatureBank& bank) {
  std::vector<std::size_t> idx(bank.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return gather_rows(bank, idx);
}

inline std::vector<double> bank_labels(const FeatureBank& bank) {
  std::vector<double> y;
  y.reserve(bank.size());
  for (const auto& r : bank.records) y.push_back(static_cast<double>(*r.label));
  return y;
}

inline void check_losses_finite(const LossVector& losses, std::size_t epoch, std::size_t batch) {
  for (double l : losses) {
    if (!std::isfinite(l)) {
      fail(ErrorKind::NonFiniteLoss,
           "non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch));
    }
  }
}

inline Vector<double> weighted_logit_grad(std::span<const double> logits, std::span<const double> labels,
                                          std::span<const double> weights) {
  const auto g = bce_logit_grad(logits, labels);
  Vector<double> out(static_cast<Eigen::Index>(g.size()));
  for (std::size_t i = 0; i < g.size(); ++i) out(static_cast<Eigen::Index>(i)) = weights[i] * g[i];
  return out;
}

inline std::span<const double> as_span(const Vector<double>& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

}  // namespace detail

inline TrainedModel make_model(const MlpParams<double>& params, const TrainConfig& config, std::uint32_t feature_dim,
                               std::vector<EpochStats> history) {
  return {params.cast<float>(), config, feature_dim, std::move(history)};
}

/// Mini-batch CVaR training with sign-SAM:
///   1. train-mode forward at theta with fresh dropout masks, per-sample BCE
///   2. lambda by bisection on the batch losses
///   3. backward with logit gradients weighted by the active-set weights
///   4. eps = gamma * sign(grad)
///   5. forward/backward at theta + eps with the same masks and lambda;
///      running statistics are updated from this pass only
///   6. optimizer step on the unperturbed theta using the step-5 gradient
/// Shuffling, initialization and dropout draw from seeds derived from
/// config.seed, so runs are bit-reproducible.
inline TrainedModel train(const FeatureBank& bank, const TrainConfig& config, const TrainHooks& hooks = {}) {
  config.validate();
  require(bank.labeled, ErrorKind::UnlabeledInput, "training needs a labeled bank");
  require(bank.size() >= 2, ErrorKind::TrainBatchTooSmall, "training needs at least 2 records");
  bank.validate();

  const auto dims = config.dims(bank.feature_dim);
  auto params = init_params<double>(dims, derive_seed(config.seed, seed_stream::init));
  std::vector<EpochStats> history;
  if (config.epochs == 0) return make_model(params, config, bank.feature_dim, history);

  Rng shuffle_rng(derive_seed(config.seed, seed_stream::shuffle));
  Rng dropout_rng(derive_seed(config.seed, seed_stream::dropout));
  AdamState adam;
  const auto labels = detail::bank_labels(bank);
  std::vector<std::size_t> order(bank.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    EpochStats stats;
    stats.epoch = epoch;
    stats.lr = cosine_lr(epoch - 1, config.epochs, config.lr, config.lr_min);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double active_total = 0;
    for (std::size_t start = 0, batch = 0; start < order.size(); start += config.batch_size, ++batch) {
      const std::size_t n = std::min(config.batch_size, order.size() - start);
      if (n < 2) {
        stats.dropped_samples += n;
        if (hooks.on_log) {
          hooks.on_log("epoch " + std::to_string(epoch) + ": dropped final batch of " + std::to_string(n) + " sample(s)");
        }
        continue;
      }
      const std::span<const std::size_t> idx(order.data() + start, n);
      const auto x = detail::gather_rows(bank, idx);
      std::vector<double> y(n);
      for (std::size_t i = 0; i < n; ++i) y[i] = labels[idx[i]];

      BatchTrace trace;
      std::optional<Trainable<double>> before;
      std::optional<AdamState> adam_before;
      if (hooks.on_batch) {
        before = params.weights;
        adam_before = adam;
      }

      const auto masks = draw_dropout_masks<double>(dims, n, config.dropout_rate, dropout_rng);
      const auto cache = forward(params, x, Mode::train, masks);
      ++trace.forward_passes;
      const auto losses = bce_per_sample(detail::as_span(cache.logits), y);
      detail::check_losses_finite(losses, epoch, batch);

      const auto solution = cvar_lambda_search(losses, config.alpha, config.lambda_tol);
      ++trace.lambda_searches;
      const auto weights = cvar_active_weights(losses, solution.lambda, config.alpha);
      const auto grad = backward(params, cache, detail::weighted_logit_grad(detail::as_span(cache.logits), y, weights));
      ++trace.backward_passes;

      const Gradients<double>* applied = &grad;
      std::optional<Trainable<double>> eps;
      std::optional<Gradients<double>> perturbed_grad;
      std::vector<double> perturbed_weights;
      if (config.sam) {
        eps = sam_perturbation(grad, config.gamma);
        MlpParams<double> perturbed = params;
        add_scaled(perturbed.weights, *eps);
        const auto cache2 = forward(perturbed, x, Mode::train, masks);
        ++trace.forward_passes;
        const auto losses2 = bce_per_sample(detail::as_span(cache2.logits), y);
        detail::check_losses_finite(losses2, epoch, batch);
        perturbed_weights = cvar_active_weights(losses2, solution.lambda, config.alpha);
        perturbed_grad =
            backward(perturbed, cache2, detail::weighted_logit_grad(detail::as_span(cache2.logits), y, perturbed_weights));
        ++trace.backward_passes;
        update_running_stats(params, cache2);
        applied = &*perturbed_grad;
      } else {
        update_running_stats(params, cache);
      }
      require(applied->all_finite(), ErrorKind::NonFiniteLoss,
              "non-finite gradient at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch));

      if (config.update == UpdateRule::adam) {
        adam_step(adam, params.weights, *applied, stats.lr, config);
      } else {
        sgd_step(params.weights, *applied, stats.lr);
      }

      stats.mean_cvar_loss += solution.value;
      stats.mean_lambda += solution.lambda;
      active_total += static_cast<double>(solution.active_count) / static_cast<double>(n);
      ++stats.batches;

      if (hooks.on_batch) {
        trace.epoch = epoch;
        trace.batch = batch;
        trace.losses = &losses;
        trace.solution = solution;
        trace.weights = &weights;
        trace.perturbed_weights = config.sam ? &perturbed_weights : nullptr;
        trace.grad_at_params = &grad;
        trace.perturbation = eps ? &*eps : nullptr;
        trace.grad_applied = applied;
        trace.params_before = &*before;
        trace.params_after = &params.weights;
        trace.optimizer_before = &*adam_before;
        hooks.on_batch(trace);
      }
    }
    const auto batches = static_cast<double>(stats.batches);
    stats.mean_cvar_loss /= batches;
    stats.mean_lambda /= batches;
    stats.active_fraction = active_total / batches;
    require(std::isfinite(stats.mean_cvar_loss), ErrorKind::NonFiniteLoss,
            "non-finite mean loss at epoch " + std::to_string(epoch));
    history.push_back(stats);
  }
  return make_model(params, config, bank.feature_dim, std::move(history));
}

// ---------------------------------------------------------------------------

/// Eval-mode logits of a stored model, computed in double precision.
inline Vector<double> predict_logits(const TrainedModel& model, const Matrix<double>& features) {
  const auto params = model.params.cast<double>();
  return forward(params, features, Mode::eval).logits;
}

/// logistic(logit), clamped so every probability lies strictly inside (0,1).
inline std::vector<double> predict_proba(const TrainedModel& model, const Matrix<double>& features) {
  const auto logits = predict_logits(model, features);
  std::vector<double> p(static_cast<std::size_t>(logits.size()));
  constexpr double lo = std::numeric_limits<double>::min();
  const double hi = std::nextafter(1.0, 0.0);
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::clamp(logistic(logits(static_cast<Eigen::Index>(i))), lo, hi);
  return p;
}

inline std::vector<double> predict_proba(const TrainedModel& model, const FeatureBank& bank) {
  require(bank.feature_dim == model.feature_dim, ErrorKind::DimensionMismatch,
          "bank dim " + std::to_string(bank.feature_dim) + " vs model dim " + std::to_string(model.feature_dim));
  if (bank.empty()) return {};
  return predict_proba(model, detail::bank_matrix(bank));
}

inline void write_history_jsonl(const std::vector<EpochStats>& history, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  for (const auto& e : history) {
    nlohmann::ordered_json j;
    j["epoch"] = e.epoch;
    j["mean_cvar_loss"] = e.mean_cvar_loss;
    j["mean_lambda"] = e.mean_lambda;
    j["active_fraction"] = e.active_fraction;
    j["lr"] = e.lr;
    out << j.dump() << '\n';
  }
  if (!out) fail(ErrorKind::Io, "write failed for " + path.string());
}

}  // namespace drclf
