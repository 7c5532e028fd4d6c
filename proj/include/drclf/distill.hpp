// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>

#include "json.hpp"

#include "drclf/error.hpp"
#include "drclf/featurebank.hpp"
#include "drclf/optimizer.hpp"

namespace drclf {

struct PseudoLabelStats {
  std::size_t total_unlabeled = 0;
  std::size_t labeled_positive = 0;
  std::size_t labeled_negative = 0;
  std::size_t discarded_low_confidence = 0;
  std::optional<double> threshold_used;

  bool operator==(const PseudoLabelStats&) const = default;
};

inline nlohmann::ordered_json stats_json(const PseudoLabelStats& s) {
  nlohmann::ordered_json j;
  j["total_unlabeled"] = s.total_unlabeled;
  j["labeled_positive"] = s.labeled_positive;
  j["labeled_negative"] = s.labeled_negative;
  j["discarded_low_confidence"] = s.discarded_low_confidence;
  j["threshold_used"] = s.threshold_used ? nlohmann::ordered_json(*s.threshold_used) : nlohmann::ordered_json();
  return j;
}

struct PseudoLabelOptions {
  std::optional<double> threshold;  // keep a slice only if max(p, 1-p) >= threshold
  bool per_scan = false;            // broadcast each scan's majority label to its slices
};

/// Labels every slice of an unlabeled bank with the teacher's decision
/// 1[p >= 0.5]. With a threshold, slices whose confidence max(p, 1-p) falls
/// below it are dropped. With per_scan, the scan's majority label (ties to 1)
/// replaces the slice labels before the threshold is applied.
inline std::pair<FeatureBank, PseudoLabelStats> pseudo_label(const TrainedModel& teacher, const FeatureBank& unlabeled,
                                                             const PseudoLabelOptions& options = {}) {
  require(unlabeled.empty() || !unlabeled.labeled, ErrorKind::LabeledInputRejected,
          "pseudo-labeling expects an unlabeled bank");
  require(unlabeled.feature_dim == teacher.feature_dim, ErrorKind::DimensionMismatch,
          "bank dim " + std::to_string(unlabeled.feature_dim) + " vs model dim " + std::to_string(teacher.feature_dim));
  if (options.threshold) {
    require(*options.threshold > 0.5 && *options.threshold < 1, ErrorKind::InvalidArgument,
            "confidence threshold must lie in (0.5, 1)");
  }

  PseudoLabelStats stats;
  stats.total_unlabeled = unlabeled.size();
  stats.threshold_used = options.threshold;
  FeatureBank out{unlabeled.feature_dim, {}, true};
  if (unlabeled.empty()) return {std::move(out), stats};

  const auto probs = predict_proba(teacher, unlabeled);
  std::vector<std::uint8_t> labels(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) labels[i] = probs[i] >= 0.5 ? 1 : 0;

  if (options.per_scan) {
    std::map<std::uint64_t, std::pair<std::size_t, std::size_t>> votes;  // (positive, total)
    for (std::size_t i = 0; i < labels.size(); ++i) {
      auto& v = votes[unlabeled.records[i].scan_id];
      v.first += labels[i];
      ++v.second;
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const auto& v = votes[unlabeled.records[i].scan_id];
      labels[i] = 2 * v.first >= v.second ? 1 : 0;
    }
  }

  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (options.threshold && std::max(probs[i], 1.0 - probs[i]) < *options.threshold) {
      ++stats.discarded_low_confidence;
      continue;
    }
    SampleRecord r = unlabeled.records[i];
    r.label = labels[i];
    (labels[i] ? stats.labeled_positive : stats.labeled_negative)++;
    out.records.push_back(std::move(r));
  }
  return {std::move(out), stats};
}

struct DistillReport {
  TrainedModel teacher;
  TrainedModel student;
  FeatureBank pseudo_bank;
  PseudoLabelStats stats;
  std::size_t labeled_size = 0;
  std::size_t student_training_size = 0;
};

/// Teacher on the labeled bank, pseudo-labels on the unlabeled bank, then a
/// student on labeled + pseudo-labeled records.
inline DistillReport distill(const FeatureBank& labeled, const FeatureBank& unlabeled, const TrainConfig& teacher_cfg,
                             const TrainConfig& student_cfg, const PseudoLabelOptions& options = {},
                             const TrainHooks& hooks = {}) {
  require(labeled.labeled, ErrorKind::UnlabeledInput, "teacher training needs a labeled bank");
  require(unlabeled.empty() || !unlabeled.labeled, ErrorKind::LabeledInputRejected,
          "the unlabeled bank carries labels");
  require(labeled.feature_dim == unlabeled.feature_dim, ErrorKind::DimensionMismatch,
          "labeled dim " + std::to_string(labeled.feature_dim) + " vs unlabeled dim " +
              std::to_string(unlabeled.feature_dim));

  DistillReport report;
  report.teacher = train(labeled, teacher_cfg, hooks);
  auto [pseudo, stats] = pseudo_label(report.teacher, unlabeled, options);
  report.stats = stats;
  const auto student_set = merge_banks(labeled, pseudo);
  report.labeled_size = labeled.size();
  report.student_training_size = student_set.size();
  report.pseudo_bank = std::move(pseudo);
  report.student = train(student_set, student_cfg, hooks);
  return report;
}

/// JSON form of a report; models are referenced by the paths they were
/// written to.
inline nlohmann::ordered_json report_json(const DistillReport& report, const std::string& teacher_path,
                                          const std::string& student_path) {
  nlohmann::ordered_json j;
  j["teacher_model"] = teacher_path;
  j["student_model"] = student_path;
  j["pseudo_label_stats"] = stats_json(report.stats);
  j["labeled_size"] = report.labeled_size;
  j["pseudo_labeled_kept"] = report.pseudo_bank.size();
  j["student_training_set_size"] = report.student_training_size;
  return j;
}

}  // namespace drclf
