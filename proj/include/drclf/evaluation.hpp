// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "drclf/error.hpp"
#include "drclf/featurebank.hpp"
#include "drclf/optimizer.hpp"
#include "drclf/robust_loss.hpp"

namespace drclf {

struct SlicePrediction {
  std::uint64_t scan_id = 0;
  std::uint8_t label = 0;
  double probability = 0;

  bool operator==(const SlicePrediction&) const = default;
};

/// Eval-mode predictions in bank order; label = 1[p >= 0.5].
inline std::vector<SlicePrediction> predict_slices(const TrainedModel& model, const FeatureBank& bank) {
  const auto probs = predict_proba(model, bank);
  std::vector<SlicePrediction> out(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) {
    out[i] = {bank.records[i].scan_id, static_cast<std::uint8_t>(probs[i] >= 0.5 ? 1 : 0), probs[i]};
  }
  return out;
}

enum class VoteRule {
  majority,         // hard-label vote, ties to 1
  mean_probability  // mean slice probability >= 0.5
};

inline std::string to_string(VoteRule rule) {
  return rule == VoteRule::majority ? "majority" : "mean_probability";
}

/// One label per scan from its slices' labels. An exact tie goes to 1.
inline std::map<std::uint64_t, std::uint8_t> aggregate_scans(std::span<const SlicePrediction> slices,
                                                             VoteRule rule = VoteRule::majority) {
  require(!slices.empty(), ErrorKind::InvalidArgument, "no slice predictions to aggregate");
  std::map<std::uint64_t, std::pair<double, std::size_t>> tally;
  for (const auto& s : slices) {
    auto& t = tally[s.scan_id];
    t.first += rule == VoteRule::majority ? static_cast<double>(s.label) : s.probability;
    ++t.second;
  }
  std::map<std::uint64_t, std::uint8_t> out;
  for (const auto& [id, t] : tally) {
    const bool positive = rule == VoteRule::majority ? 2.0 * t.first >= static_cast<double>(t.second)
                                                     : t.first / static_cast<double>(t.second) >= 0.5;
    out[id] = positive ? 1 : 0;
  }
  return out;
}

struct ConfusionCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;

  std::size_t total() const { return tp + fp + tn + fn; }
  bool operator==(const ConfusionCounts&) const = default;
};

/// Tallies with class 1 as positive.
inline ConfusionCounts confusion(std::span<const std::uint8_t> preds, std::span<const std::uint8_t> truth) {
  require(preds.size() == truth.size(), ErrorKind::DimensionMismatch,
          std::to_string(preds.size()) + " predictions vs " + std::to_string(truth.size()) + " labels");
  ConfusionCounts c;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    require(preds[i] <= 1 && truth[i] <= 1, ErrorKind::InvalidArgument, "labels must be binary");
    if (preds[i] == 1) {
      (truth[i] == 1 ? c.tp : c.fp)++;
    } else {
      (truth[i] == 1 ? c.fn : c.tn)++;
    }
  }
  return c;
}

struct ClassScores {
  double precision = 0;
  double recall = 0;
  double f1 = 0;
};

namespace detail {

inline double ratio_or_zero(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

inline ClassScores class_scores(std::size_t tp, std::size_t fp, std::size_t fn) {
  return {ratio_or_zero(tp, tp + fp), ratio_or_zero(tp, tp + fn), ratio_or_zero(2 * tp, 2 * tp + fp + fn)};
}

}  // namespace detail

inline ClassScores positive_scores(const ConfusionCounts& c) { return detail::class_scores(c.tp, c.fp, c.fn); }
// Negatives scored as if they were the positive class.
inline ClassScores negative_scores(const ConfusionCounts& c) { return detail::class_scores(c.tn, c.fn, c.fp); }

/// Unweighted mean of the two per-class F1 scores. A class whose F1
/// denominator is zero scores 0.
inline double macro_f1(const ConfusionCounts& c) {
  require(c.total() > 0, ErrorKind::InvalidArgument, "macro F1 of an empty confusion matrix");
  return 0.5 * (positive_scores(c).f1 + negative_scores(c).f1);
}

struct LevelReport {
  ConfusionCounts confusion;
  double macro_f1 = 0;
  ClassScores positive;
  ClassScores negative;
};

struct EvalReport {
  LevelReport slice;
  LevelReport scan;
  std::size_t num_slices = 0;
  std::size_t num_scans = 0;
  VoteRule vote = VoteRule::majority;
};

inline LevelReport level_report(const ConfusionCounts& c) {
  return {c, macro_f1(c), positive_scores(c), negative_scores(c)};
}

/// Slice metrics against slice labels and scan metrics (after voting)
/// against manifest labels, from a single inference pass.
inline EvalReport evaluate(const TrainedModel& model, const FeatureBank& bank, const ScanManifest& manifest,
                           VoteRule vote = VoteRule::majority) {
  require(bank.labeled, ErrorKind::UnlabeledInput, "evaluation needs a labeled bank");
  require(!bank.empty(), ErrorKind::InvalidArgument, "evaluation bank is empty");
  for (const auto& r : bank.records) {
    auto it = manifest.entries.find(r.scan_id);
    require(it != manifest.entries.end(), ErrorKind::MissingManifestEntry,
            "scan_id " + std::to_string(r.scan_id) + " is not in the manifest");
    require(it->second.label.has_value(), ErrorKind::MissingManifestEntry,
            "manifest entry for scan_id " + std::to_string(r.scan_id) + " has no label");
  }

  const auto preds = predict_slices(model, bank);
  std::vector<std::uint8_t> slice_pred(preds.size()), slice_truth(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    slice_pred[i] = preds[i].label;
    slice_truth[i] = *bank.records[i].label;
  }
  const auto scans = aggregate_scans(preds, vote);
  std::vector<std::uint8_t> scan_pred, scan_truth;
  for (const auto& [id, label] : scans) {
    scan_pred.push_back(label);
    scan_truth.push_back(*manifest.entries.at(id).label);
  }

  EvalReport report;
  report.slice = level_report(confusion(slice_pred, slice_truth));
  report.scan = level_report(confusion(scan_pred, scan_truth));
  report.num_slices = preds.size();
  report.num_scans = scans.size();
  report.vote = vote;
  return report;
}

inline nlohmann::ordered_json report_json(const EvalReport& r) {
  auto scores = [](const ClassScores& s) {
    nlohmann::ordered_json j;
    j["precision"] = s.precision;
    j["recall"] = s.recall;
    j["f1"] = s.f1;
    return j;
  };
  auto level = [&](const LevelReport& l) {
    nlohmann::ordered_json j;
    j["confusion"] = nlohmann::ordered_json{{"tp", l.confusion.tp}, {"fp", l.confusion.fp},
                                            {"tn", l.confusion.tn}, {"fn", l.confusion.fn}};
    j["macro_f1"] = l.macro_f1;
    j["positive"] = scores(l.positive);
    j["negative"] = scores(l.negative);
    return j;
  };
  nlohmann::ordered_json j;
  j["num_slices"] = r.num_slices;
  j["num_scans"] = r.num_scans;
  j["vote_rule"] = std::string(to_string(r.vote));
  j["tie_rule"] = "ties_to_positive";
  j["slice"] = level(r.slice);
  j["scan"] = level(r.scan);
  return j;
}

// ---------------------------------------------------------------------------
// Loss landscape export

/// Full-bank CVaR of the eval-mode BCE losses of `params`.
inline double bank_cvar_loss(const MlpParams<double>& params, const Matrix<double>& x, std::span<const double> y,
                             double alpha, double lambda_tol = 1e-9) {
  const auto logits = forward(params, x, Mode::eval).logits;
  const auto losses = bce_per_sample({logits.data(), static_cast<std::size_t>(logits.size())}, y);
  return cvar_lambda_search(losses, alpha, lambda_tol).value;
}

inline double model_cvar_loss(const TrainedModel& model, const FeatureBank& bank, double alpha) {
  require(bank.labeled && !bank.empty(), ErrorKind::UnlabeledInput, "loss evaluation needs a nonempty labeled bank");
  require(bank.feature_dim == model.feature_dim, ErrorKind::DimensionMismatch, "bank and model dims differ");
  return bank_cvar_loss(model.params.cast<double>(), detail::bank_matrix(bank), detail::bank_labels(bank), alpha);
}

struct SurfacePoint {
  double u = 0;
  double v = 0;
  double loss = 0;
};

/// Random Gaussian direction rescaled tensor by tensor to the norm of the
/// matching parameter tensor. Returns false if the result is all zero.
inline bool filter_normalized_direction(const Trainable<double>& params, Rng& rng, Trainable<double>& out) {
  std::normal_distribution<double> normal(0.0, 1.0);
  out = params;
  double total = 0;
  out.zip(params, [&](auto& d, const auto& theta) {
    for (Eigen::Index i = 0; i < d.size(); ++i) d.data()[i] = normal(rng);
    const double dn = d.norm();
    const double tn = theta.norm();
    if (dn > 0) d *= tn / dn;
    total += d.squaredNorm();
  });
  return total > 0 && std::isfinite(total);
}

/// loss(u, v) = full-bank CVaR_alpha at theta + u d1 + v d2 on a square grid
/// of grid_points^2 cells spanning [-half_width, half_width]^2, row-major in u.
inline std::vector<SurfacePoint> loss_surface(const TrainedModel& model, const FeatureBank& bank, double alpha,
                                              double grid_half_width, std::size_t grid_points, std::uint64_t seed) {
  require(grid_points >= 3 && grid_points % 2 == 1, ErrorKind::InvalidArgument, "grid_points must be odd and >= 3");
  require(std::isfinite(grid_half_width) && grid_half_width > 0, ErrorKind::InvalidArgument,
          "grid_half_width must be positive");
  require(bank.labeled && !bank.empty(), ErrorKind::UnlabeledInput, "loss surface needs a nonempty labeled bank");
  require(bank.feature_dim == model.feature_dim, ErrorKind::DimensionMismatch, "bank and model dims differ");

  const auto base = model.params.cast<double>();
  Rng rng(seed);
  Trainable<double> d1, d2;
  bool ok = false;
  for (int attempt = 0; attempt < 10 && !ok; ++attempt) {
    ok = filter_normalized_direction(base.weights, rng, d1) && filter_normalized_direction(base.weights, rng, d2);
  }
  require(ok, ErrorKind::DegenerateDirection, "could not draw nonzero directions after 10 attempts");

  const auto x = detail::bank_matrix(bank);
  const auto y = detail::bank_labels(bank);
  const auto span = static_cast<double>(grid_points - 1);
  std::vector<SurfacePoint> out;
  out.reserve(grid_points * grid_points);
  for (std::size_t i = 0; i < grid_points; ++i) {
    const double u = grid_half_width * (2.0 * static_cast<double>(i) - span) / span;
    for (std::size_t j = 0; j < grid_points; ++j) {
      const double v = grid_half_width * (2.0 * static_cast<double>(j) - span) / span;
      MlpParams<double> p = base;
      if (u != 0) add_scaled(p.weights, d1, u);
      if (v != 0) add_scaled(p.weights, d2, v);
      out.push_back({u, v, bank_cvar_loss(p, x, y, alpha)});
    }
  }
  return out;
}

inline std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_surface_csv(const std::vector<SurfacePoint>& surface, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << "u,v,loss\n";
  for (const auto& p : surface) out << format_g17(p.u) << ',' << format_g17(p.v) << ',' << format_g17(p.loss) << '\n';
  if (!out) fail(ErrorKind::Io, "write failed for " + path.string());
}

}  // namespace drclf
