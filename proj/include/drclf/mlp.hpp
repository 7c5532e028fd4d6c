// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "drclf/error.hpp"
#include "drclf/seed.hpp"

namespace drclf {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

namespace detail {

template <typename A, typename B>
bool same_tensor(const A& a, const B& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && a == b;
}

}  // namespace detail

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Trainable tensors of one linear layer. Hidden layers also carry the
/// batch-norm affine pair; for the output layer `scale` and `shift` are empty.
template <typename Scalar>
struct LayerTensors {
  Matrix<Scalar> weight;  // out x in
  Vector<Scalar> bias;
  Vector<Scalar> scale;
  Vector<Scalar> shift;

  bool operator==(const LayerTensors& o) const {
    return detail::same_tensor(weight, o.weight) && detail::same_tensor(bias, o.bias) &&
           detail::same_tensor(scale, o.scale) && detail::same_tensor(shift, o.shift);
  }
};

/// The trainable parameter set. Gradients, SAM perturbations, Adam moments
/// and loss-surface directions all share this shape.
template <typename Scalar>
struct Trainable {
  std::vector<LayerTensors<Scalar>> layers;

  /// Visits (weight, bias, scale, shift) of every layer in a fixed order.
  template <typename F>
  void for_each(F&& f) {
    for (auto& l : layers) {
      f(l.weight);
      f(l.bias);
      f(l.scale);
      f(l.shift);
    }
  }
  template <typename F>
  void for_each(F&& f) const {
    for (const auto& l : layers) {
      f(l.weight);
      f(l.bias);
      f(l.scale);
      f(l.shift);
    }
  }

  /// Visits matching tensors of two equally shaped sets.
  template <typename Other, typename F>
  void zip(Other& other, F&& f) {
    require(other.layers.size() == layers.size(), ErrorKind::StaleCache, "parameter layer count mismatch");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto& a = layers[i];
      auto& b = other.layers[i];
      require(a.weight.rows() == b.weight.rows() && a.weight.cols() == b.weight.cols() &&
                  a.bias.size() == b.bias.size() && a.scale.size() == b.scale.size() &&
                  a.shift.size() == b.shift.size(),
              ErrorKind::StaleCache, "parameter shape mismatch in layer " + std::to_string(i));
      f(a.weight, b.weight);
      f(a.bias, b.bias);
      f(a.scale, b.scale);
      f(a.shift, b.shift);
    }
  }

  Trainable zeros_like() const {
    Trainable out = *this;
    out.for_each([](auto& t) { t.setZero(); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const auto& t) { n += static_cast<std::size_t>(t.size()); });
    return n;
  }

  bool all_finite() const {
    bool ok = true;
    for_each([&](const auto& t) { ok = ok && t.allFinite(); });
    return ok;
  }

  template <typename To>
  Trainable<To> cast() const {
    Trainable<To> out;
    out.layers.reserve(layers.size());
    for (const auto& l : layers) {
      out.layers.push_back({l.weight.template cast<To>(), l.bias.template cast<To>(),
                            l.scale.template cast<To>(), l.shift.template cast<To>()});
    }
    return out;
  }

  bool operator==(const Trainable&) const = default;
};

template <typename Scalar>
using Gradients = Trainable<Scalar>;

template <typename Scalar>
struct BatchNormStats {
  Vector<Scalar> mean;
  Vector<Scalar> var;

  bool operator==(const BatchNormStats& o) const {
    return detail::same_tensor(mean, o.mean) && detail::same_tensor(var, o.var);
  }
};

/// Parameters of a [d_in, h_1, ..., h_k, 1] perceptron. Every hidden layer is
/// linear -> batch-norm -> ReLU -> dropout; the output layer is linear only.
template <typename Scalar>
struct MlpParams {
  std::vector<std::size_t> dims;
  Trainable<Scalar> weights;
  std::vector<BatchNormStats<Scalar>> running;  // one per hidden layer

  std::size_t input_dim() const { return dims.front(); }
  std::size_t hidden_layers() const { return dims.size() - 2; }

  template <typename To>
  MlpParams<To> cast() const {
    MlpParams<To> out;
    out.dims = dims;
    out.weights = weights.template cast<To>();
    for (const auto& r : running) out.running.push_back({r.mean.template cast<To>(), r.var.template cast<To>()});
    return out;
  }

  void validate() const {
    require(dims.size() >= 2 && dims.back() == 1, ErrorKind::InvalidArgument, "dims must end in 1");
    require(weights.layers.size() == dims.size() - 1 && running.size() == dims.size() - 2,
            ErrorKind::InvalidArgument, "layer count does not match dims");
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      const auto& t = weights.layers[l];
      const bool hidden = l + 2 < dims.size();
      const auto out = static_cast<Eigen::Index>(dims[l + 1]);
      const auto in = static_cast<Eigen::Index>(dims[l]);
      require(t.weight.rows() == out && t.weight.cols() == in && t.bias.size() == out &&
                  t.scale.size() == (hidden ? out : 0) && t.shift.size() == (hidden ? out : 0),
              ErrorKind::InvalidArgument, "tensor shapes of layer " + std::to_string(l) + " do not match dims");
      if (hidden) {
        require(running[l].mean.size() == out && running[l].var.size() == out, ErrorKind::InvalidArgument,
                "running statistics of layer " + std::to_string(l) + " do not match dims");
        require((running[l].var.array() > 0).all(), ErrorKind::InvalidArgument,
                "running variance must be strictly positive");
        require(running[l].mean.allFinite() && running[l].var.allFinite(), ErrorKind::InvalidArgument,
                "running statistics must be finite");
      }
    }
    require(weights.all_finite(), ErrorKind::InvalidArgument, "parameters must be finite");
  }

  bool operator==(const MlpParams&) const = default;
};

/// He-style init: weights ~ N(0, 2/fan_in), zero biases, BN scale 1 / shift 0,
/// running mean 0 / variance 1.
template <typename Scalar>
MlpParams<Scalar> init_params(const std::vector<std::size_t>& dims, std::uint64_t seed) {
  require(dims.size() >= 2, ErrorKind::InvalidArgument, "need at least input and output dims");
  for (auto d : dims) require(d > 0, ErrorKind::InvalidArgument, "dims must be positive");
  require(dims.back() == 1, ErrorKind::InvalidArgument, "output dim must be 1");

  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  MlpParams<Scalar> p;
  p.dims = dims;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const auto in = static_cast<Eigen::Index>(dims[l]);
    const auto out = static_cast<Eigen::Index>(dims[l + 1]);
    const double stddev = std::sqrt(2.0 / static_cast<double>(in));
    LayerTensors<Scalar> t;
    t.weight.resize(out, in);
    for (Eigen::Index r = 0; r < out; ++r) {
      for (Eigen::Index c = 0; c < in; ++c) t.weight(r, c) = static_cast<Scalar>(stddev * normal(rng));
    }
    t.bias = Vector<Scalar>::Zero(out);
    if (l + 2 < dims.size()) {
      t.scale = Vector<Scalar>::Ones(out);
      t.shift = Vector<Scalar>::Zero(out);
      p.running.push_back({Vector<Scalar>::Zero(out), Vector<Scalar>::Ones(out)});
    } else {
      t.scale.resize(0);
      t.shift.resize(0);
    }
    p.weights.layers.push_back(std::move(t));
  }
  return p;
}

enum class Mode { train, eval };

/// Inverted-dropout masks, one n x h matrix per hidden layer with entries in
/// {0, 1/(1-p)}. An empty set means no dropout.
template <typename Scalar>
struct DropoutMasks {
  std::vector<Matrix<Scalar>> layers;
  bool empty() const { return layers.empty(); }
};

template <typename Scalar>
DropoutMasks<Scalar> draw_dropout_masks(const std::vector<std::size_t>& dims, std::size_t batch, double rate,
                                        Rng& rng) {
  require(rate >= 0 && rate < 1, ErrorKind::InvalidArgument, "dropout rate must lie in [0,1)");
  DropoutMasks<Scalar> masks;
  if (rate == 0) return masks;
  std::bernoulli_distribution keep(1.0 - rate);
  const auto kept = static_cast<Scalar>(1.0 / (1.0 - rate));
  for (std::size_t l = 1; l + 1 < dims.size(); ++l) {
    Matrix<Scalar> m(static_cast<Eigen::Index>(batch), static_cast<Eigen::Index>(dims[l]));
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = keep(rng) ? kept : Scalar(0);
    }
    masks.layers.push_back(std::move(m));
  }
  return masks;
}

template <typename Scalar>
struct HiddenCache {
  Matrix<Scalar> input;       // n x in
  Matrix<Scalar> pre;         // linear output, n x h
  Vector<Scalar> batch_mean;  // statistics used for normalization
  Vector<Scalar> batch_var;
  Vector<Scalar> inv_std;
  Matrix<Scalar> normalized;  // pre-affine
  Matrix<Scalar> affine;      // after scale/shift, before ReLU
  Matrix<Scalar> activated;   // after ReLU, before dropout
  Matrix<Scalar> mask;        // empty when dropout inactive
};

template <typename Scalar>
struct ForwardCache {
  Mode mode = Mode::eval;
  std::vector<HiddenCache<Scalar>> hidden;
  Matrix<Scalar> output_input;  // n x h_k
  Vector<Scalar> logits;
};

/// Forward pass over a batch (one sample per row). Train mode normalizes with
/// batch statistics and applies `masks`; eval mode uses running statistics and
/// no dropout. Parameters are never modified here; see update_running_stats.
template <typename Scalar>
ForwardCache<Scalar> forward(const MlpParams<Scalar>& params, const Matrix<Scalar>& batch, Mode mode,
                             const DropoutMasks<Scalar>& masks = {}) {
  require(static_cast<std::size_t>(batch.cols()) == params.input_dim(), ErrorKind::DimensionMismatch,
          "batch has " + std::to_string(batch.cols()) + " features, model expects " +
              std::to_string(params.input_dim()));
  const auto n = batch.rows();
  if (mode == Mode::train) {
    require(n >= 2, ErrorKind::TrainBatchTooSmall, "train-mode batch needs at least 2 samples, got " + std::to_string(n));
  }
  const bool dropout = mode == Mode::train && !masks.empty();
  if (dropout) {
    require(masks.layers.size() == params.hidden_layers(), ErrorKind::DimensionMismatch, "dropout mask layer count");
  }

  ForwardCache<Scalar> cache;
  cache.mode = mode;
  Matrix<Scalar> x = batch;
  for (std::size_t l = 0; l < params.hidden_layers(); ++l) {
    const auto& t = params.weights.layers[l];
    HiddenCache<Scalar> h;
    h.input = std::move(x);
    h.pre = (h.input * t.weight.transpose()).rowwise() + t.bias.transpose();
    if (mode == Mode::train) {
      h.batch_mean = h.pre.colwise().mean().transpose();
      h.batch_var = (h.pre.rowwise() - h.batch_mean.transpose()).array().square().colwise().mean().transpose();
    } else {
      h.batch_mean = params.running[l].mean;
      h.batch_var = params.running[l].var;
    }
    h.inv_std = (h.batch_var.array() + Scalar(kBatchNormEps)).rsqrt().matrix();
    h.normalized = ((h.pre.rowwise() - h.batch_mean.transpose()).array().rowwise() * h.inv_std.transpose().array())
                       .matrix();
    h.affine = ((h.normalized.array().rowwise() * t.scale.transpose().array()).rowwise() + t.shift.transpose().array())
                   .matrix();
    h.activated = h.affine.cwiseMax(Scalar(0));
    if (dropout) {
      h.mask = masks.layers[l];
      require(h.mask.rows() == n && h.mask.cols() == h.activated.cols(), ErrorKind::DimensionMismatch,
              "dropout mask shape mismatch in layer " + std::to_string(l));
      x = h.activated.cwiseProduct(h.mask);
    } else {
      x = h.activated;
    }
    cache.hidden.push_back(std::move(h));
  }
  const auto& out = params.weights.layers.back();
  cache.output_input = std::move(x);
  cache.logits = (cache.output_input * out.weight.transpose()).col(0).array() + out.bias(0);
  return cache;
}

/// Exponential moving average of the batch statistics recorded by a
/// train-mode forward: running <- (1-m) running + m batch. The variance uses
/// the unbiased n/(n-1) correction.
template <typename Scalar>
void update_running_stats(MlpParams<Scalar>& params, const ForwardCache<Scalar>& cache,
                          double momentum = kBatchNormMomentum) {
  require(cache.mode == Mode::train, ErrorKind::StaleCache, "running statistics need a train-mode cache");
  require(cache.hidden.size() == params.hidden_layers(), ErrorKind::StaleCache, "cache layer count mismatch");
  const auto m = static_cast<Scalar>(momentum);
  for (std::size_t l = 0; l < cache.hidden.size(); ++l) {
    const auto& h = cache.hidden[l];
    const auto n = static_cast<Scalar>(h.pre.rows());
    auto& r = params.running[l];
    r.mean = (Scalar(1) - m) * r.mean + m * h.batch_mean;
    r.var = (Scalar(1) - m) * r.var + m * h.batch_var * (n / (n - Scalar(1)));
  }
}

/// Exact gradients of sum_i dlogits_i * logit_i w.r.t. every trainable
/// tensor, back through dropout (same masks), ReLU, batch-norm on the batch
/// statistics path, and the linear maps.
template <typename Scalar>
Gradients<Scalar> backward(const MlpParams<Scalar>& params, const ForwardCache<Scalar>& cache,
                           const Vector<Scalar>& dlogits) {
  require(cache.mode == Mode::train, ErrorKind::StaleCache, "backward needs a train-mode cache");
  require(cache.hidden.size() == params.hidden_layers(), ErrorKind::StaleCache, "cache layer count mismatch");
  require(dlogits.size() == cache.logits.size(), ErrorKind::StaleCache, "dlogits length does not match cache");
  for (std::size_t l = 0; l < cache.hidden.size(); ++l) {
    require(cache.hidden[l].input.cols() == params.weights.layers[l].weight.cols() &&
                cache.hidden[l].pre.cols() == params.weights.layers[l].weight.rows(),
            ErrorKind::StaleCache, "cache shapes do not match parameters in layer " + std::to_string(l));
  }

  Gradients<Scalar> g = params.weights.zeros_like();
  const auto n = static_cast<Scalar>(dlogits.size());

  auto& go = g.layers.back();
  const auto& out = params.weights.layers.back();
  go.weight = dlogits.transpose() * cache.output_input;
  go.bias(0) = dlogits.sum();
  Matrix<Scalar> dx = dlogits * out.weight;  // n x h_k

  for (std::size_t l = cache.hidden.size(); l-- > 0;) {
    const auto& h = cache.hidden[l];
    const auto& t = params.weights.layers[l];
    auto& gl = g.layers[l];

    Matrix<Scalar> dact = h.mask.size() ? dx.cwiseProduct(h.mask) : dx;
    Matrix<Scalar> daffine = (h.affine.array() > Scalar(0)).select(dact.array(), Scalar(0)).matrix();
    gl.scale = daffine.cwiseProduct(h.normalized).colwise().sum().transpose();
    gl.shift = daffine.colwise().sum().transpose();

    Matrix<Scalar> dnorm = (daffine.array().rowwise() * t.scale.transpose().array()).matrix();
    const auto mean_dnorm = (dnorm.colwise().sum() / n).eval();
    const auto mean_dnorm_x = (dnorm.cwiseProduct(h.normalized).colwise().sum() / n).eval();
    Matrix<Scalar> dpre = (((dnorm.rowwise() - mean_dnorm).array() -
                            h.normalized.array().rowwise() * mean_dnorm_x.array())
                               .rowwise() *
                           h.inv_std.transpose().array())
                              .matrix();

    gl.weight = dpre.transpose() * h.input;
    gl.bias = dpre.colwise().sum().transpose();
    if (l > 0) dx = dpre * t.weight;
  }
  return g;
}

template <typename Scalar>
Matrix<Scalar> rows_to_matrix(const std::vector<const std::vector<float>*>& rows, std::size_t dim) {
  Matrix<Scalar> m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i]->size() == dim, ErrorKind::DimensionMismatch, "feature row has wrong length");
    for (std::size_t j = 0; j < dim; ++j) {
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = static_cast<Scalar>((*rows[i])[j]);
    }
  }
  return m;
}

}  // namespace drclf
