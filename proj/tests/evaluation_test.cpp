// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>

#include <gtest/gtest.h>

#include "drclf/evaluation.hpp"
#include "oracles.hpp"

namespace drclf {
namespace {

TrainedModel constant_model(std::uint32_t dim, float logit) {
  TrainedModel m;
  m.params = init_params<float>({dim, dim, dim, 1}, 0);
  m.params.weights.layers[2].weight.setZero();
  m.params.weights.layers[2].bias(0) = logit;
  m.feature_dim = dim;
  return m;
}

/// Output = a * (first feature) routed through identity-like hidden layers:
/// BN with running mean 0 / var 1 - eps, ReLU passes positive inputs.
TrainedModel first_feature_model(float a) {
  TrainedModel m;
  m.params = init_params<float>({2, 1, 1, 1}, 0);
  for (std::size_t l = 0; l < 2; ++l) {
    auto& t = m.params.weights.layers[l];
    t.weight.setZero();
    t.weight(0, 0) = 1.0f;
    m.params.running[l].var.setConstant(1.0f - 1e-5f);
  }
  m.params.weights.layers[2].weight(0, 0) = a;
  m.params.weights.layers[2].bias(0) = -a * 5.0f;  // decision boundary at feature 5
  m.feature_dim = 2;
  return m;
}

SlicePrediction sp(std::uint64_t id, std::uint8_t label) { return {id, label, label ? 0.9 : 0.1}; }

TEST(AggregateScans, MajorityAndTies) {
  std::vector<SlicePrediction> a{sp(1, 1), sp(1, 1), sp(1, 0)};
  EXPECT_EQ(aggregate_scans(a).at(1), 1);
  std::vector<SlicePrediction> tie{sp(2, 0), sp(2, 1)};
  EXPECT_EQ(aggregate_scans(tie).at(2), 1);
  std::vector<SlicePrediction> two{sp(10, 0), sp(11, 1), sp(10, 0), sp(11, 0), sp(10, 0), sp(11, 1)};
  const auto out = aggregate_scans(two);
  EXPECT_EQ(out.size(), 2u);
  EXPECT_EQ(out.at(10), 0);
  EXPECT_EQ(out.at(11), 1);
  EXPECT_THROW(aggregate_scans(std::vector<SlicePrediction>{}), Error);
}

TEST(AggregateScans, OrderInvariant) {
  std::mt19937_64 rng(3);
  std::vector<SlicePrediction> v;
  for (int i = 0; i < 60; ++i) v.push_back(sp(rng() % 7, rng() % 2));
  const auto ref = aggregate_scans(v);
  for (int k = 0; k < 20; ++k) {
    std::shuffle(v.begin(), v.end(), rng);
    EXPECT_EQ(aggregate_scans(v), ref);
  }
}

TEST(AggregateScans, MeanProbabilityRule) {
  std::vector<SlicePrediction> v{{1, 1, 0.55}, {1, 1, 0.6}, {1, 0, 0.05}};
  EXPECT_EQ(aggregate_scans(v, VoteRule::majority).at(1), 1);
  EXPECT_EQ(aggregate_scans(v, VoteRule::mean_probability).at(1), 0);
  std::vector<SlicePrediction> half{{2, 1, 0.5}, {2, 0, 0.25}, {2, 1, 0.75}};
  EXPECT_EQ(aggregate_scans(half, VoteRule::mean_probability).at(2), 1);
}

TEST(Confusion, Examples) {
  const std::vector<std::uint8_t> preds{1, 0, 1}, truth{1, 1, 1};
  EXPECT_EQ(confusion(preds, truth), (ConfusionCounts{2, 0, 0, 1}));
  EXPECT_EQ(confusion(truth, truth).fp + confusion(truth, truth).fn, 0u);
  const std::vector<std::uint8_t> t{0, 1, 1, 0}, inv{1, 0, 0, 1};
  const auto c = confusion(inv, t);
  EXPECT_EQ(c.tp + c.tn, 0u);
  EXPECT_THROW(confusion(preds, std::vector<std::uint8_t>{1}), Error);
  EXPECT_THROW(confusion(std::vector<std::uint8_t>{2}, std::vector<std::uint8_t>{1}), Error);
}

TEST(MacroF1, HandComputedFixtures) {
  // tp, fp, tn, fn
  EXPECT_NEAR(macro_f1({8, 2, 8, 2}), 0.8, 1e-9);
  EXPECT_NEAR(positive_scores({8, 2, 8, 2}).f1, 0.8, 1e-12);
  EXPECT_NEAR(negative_scores({8, 2, 8, 2}).f1, 0.8, 1e-12);
  // F1_pos = 10/15, F1_neg = 20/25, mean = 11/15 = 0.7333...
  EXPECT_NEAR(macro_f1({5, 0, 10, 5}), 11.0 / 15.0, 1e-9);
  EXPECT_NEAR(macro_f1({5, 0, 10, 5}), 0.73333, 1e-5);
  EXPECT_NEAR(positive_scores({5, 0, 10, 5}).f1, 2.0 / 3.0, 1e-12);
  EXPECT_DOUBLE_EQ(positive_scores({5, 0, 10, 5}).precision, 1.0);
  EXPECT_DOUBLE_EQ(positive_scores({5, 0, 10, 5}).recall, 0.5);
  EXPECT_EQ(macro_f1({3, 0, 4, 0}), 1.0);
  EXPECT_THROW(macro_f1({}), Error);
}

TEST(MacroF1, ZeroDenominatorClassScoresZero) {
  // Only positives present and all correct: F1_neg has 0/0.
  EXPECT_EQ(macro_f1({4, 0, 0, 0}), 0.5);
  EXPECT_EQ(negative_scores({4, 0, 0, 0}).precision, 0.0);
}

TEST(MacroF1, Properties) {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<std::size_t> d(0, 20);
  for (int i = 0; i < 2000; ++i) {
    const ConfusionCounts c{d(rng), d(rng), d(rng), d(rng)};
    if (c.total() == 0) continue;
    const double f = macro_f1(c);
    EXPECT_GE(f, 0.0);
    EXPECT_LE(f, 1.0);
    // Swap class roles: tp<->tn, fp<->fn.
    EXPECT_DOUBLE_EQ(f, macro_f1({c.tn, c.fn, c.tp, c.fp}));
    // With both classes present in the truth, perfect iff no errors.
    if (c.tp + c.fn > 0 && c.tn + c.fp > 0) {
      EXPECT_EQ(f == 1.0, c.fp == 0 && c.fn == 0);
    }
  }
}

TEST(PredictSlices, TieRuleAndShape) {
  FeatureBank bank{4, {}, true};
  for (int i = 0; i < 6; ++i) bank.records.push_back({static_cast<std::uint64_t>(i / 2), 0, {1, 2, 3, float(i)}});
  const auto preds = predict_slices(constant_model(4, 0.0f), bank);
  ASSERT_EQ(preds.size(), bank.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    EXPECT_EQ(preds[i].probability, 0.5);
    EXPECT_EQ(preds[i].label, 1);
    EXPECT_EQ(preds[i].scan_id, bank.records[i].scan_id);
  }
  const auto again = predict_slices(constant_model(4, 0.0f), bank);
  for (std::size_t i = 0; i < preds.size(); ++i) EXPECT_EQ(again[i].probability, preds[i].probability);
  EXPECT_THROW(predict_slices(constant_model(5, 0.0f), bank), Error);
}

FeatureBank scan_bank(const std::vector<std::pair<std::uint64_t, std::pair<float, std::uint8_t>>>& rows) {
  FeatureBank b{2, {}, true};
  for (const auto& [id, fl] : rows) b.records.push_back({id, fl.second, {fl.first, 0.0f}});
  return b;
}

TEST(Evaluate, PerfectPredictions) {
  const auto model = first_feature_model(4.0f);
  const auto bank = scan_bank({{0, {9, 1}}, {0, {8, 1}}, {1, {1, 0}}, {1, {2, 0}}, {1, {0.5f, 0}}});
  ScanManifest m;
  m.entries[0] = {"a", 1};
  m.entries[1] = {"b", 0};
  const auto r = evaluate(model, bank, m);
  EXPECT_EQ(r.slice.macro_f1, 1.0);
  EXPECT_EQ(r.scan.macro_f1, 1.0);
  EXPECT_EQ(r.num_slices, 5u);
  EXPECT_EQ(r.num_scans, 2u);
}

TEST(Evaluate, ScanErrorFromWrongMajority) {
  const auto model = first_feature_model(4.0f);
  // Scan 0 is positive but two of its three slices look negative.
  const auto bank = scan_bank({{0, {9, 1}}, {0, {1, 1}}, {0, {2, 1}}, {1, {1, 0}}, {2, {9, 1}}});
  ScanManifest m;
  m.entries[0] = {"a", 1};
  m.entries[1] = {"b", 0};
  m.entries[2] = {"c", 1};
  const auto r = evaluate(model, bank, m);
  EXPECT_EQ(r.slice.confusion, (ConfusionCounts{2, 0, 1, 2}));
  EXPECT_EQ(r.scan.confusion, (ConfusionCounts{1, 0, 1, 1}));
  EXPECT_NEAR(r.scan.macro_f1, 0.5 * (2.0 / 3.0 + 2.0 / 3.0), 1e-12);
  const auto j = report_json(r);
  EXPECT_EQ(j.at("tie_rule"), "ties_to_positive");
  EXPECT_EQ(j.at("vote_rule"), "majority");
  EXPECT_TRUE(j.at("slice").contains("macro_f1"));
  EXPECT_EQ(j.at("scan").at("confusion").at("fn"), 1);
}

TEST(Evaluate, Errors) {
  const auto model = first_feature_model(1.0f);
  const auto bank = scan_bank({{0, {9, 1}}, {1, {1, 0}}});
  ScanManifest m;
  m.entries[0] = {"a", 1};
  try {
    evaluate(model, bank, m);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MissingManifestEntry);
  }
  m.entries[1] = {"b", std::nullopt};
  EXPECT_THROW(evaluate(model, bank, m), Error);
  m.entries[1].label = 0;
  EXPECT_THROW(evaluate(model, strip_labels(bank), m), Error);
  EXPECT_THROW(evaluate(constant_model(3, 0), bank, m), Error);
}

FeatureBank synth_eval_bank() {
  SynthConfig sc;
  sc.num_scans_per_class = 5;
  sc.feature_dim = 4;
  sc.seed = 2;
  return synth_bank(sc).first;
}

TEST(LossSurface, GridShapeAndCenter) {
  const auto bank = synth_eval_bank();
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 16;
  const auto model = train(bank, cfg);
  const auto surface = loss_surface(model, bank, 0.5, 1.0, 5, 3);
  ASSERT_EQ(surface.size(), 25u);
  EXPECT_EQ(surface.front().u, -1.0);
  EXPECT_EQ(surface.front().v, -1.0);
  EXPECT_EQ(surface.back().u, 1.0);
  const auto& center = surface[12];
  EXPECT_EQ(center.u, 0.0);
  EXPECT_EQ(center.v, 0.0);
  EXPECT_NEAR(center.loss, model_cvar_loss(model, bank, 0.5), 1e-9);
  for (const auto& p : surface) EXPECT_TRUE(std::isfinite(p.loss));

  const auto again = loss_surface(model, bank, 0.5, 1.0, 5, 3);
  for (std::size_t i = 0; i < 25; ++i) EXPECT_EQ(again[i].loss, surface[i].loss);

  const auto path = std::filesystem::path(testing::TempDir()) / "s.csv";
  write_surface_csv(surface, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "u,v,loss");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    const auto last = line.rfind(',');
    if (rows == 13) {
      EXPECT_EQ(std::stod(line.substr(last + 1)), center.loss);
    }
  }
  EXPECT_EQ(rows, 25u);
}

TEST(LossSurface, Errors) {
  const auto bank = synth_eval_bank();
  TrainedModel zero = constant_model(4, 0.0f);
  zero.params.weights.for_each([](auto& t) { t.setZero(); });
  try {
    loss_surface(zero, bank, 0.5, 1.0, 3, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DegenerateDirection);
  }
  const auto model = constant_model(4, 0.0f);
  EXPECT_THROW(loss_surface(model, bank, 0.5, 1.0, 4, 1), Error);
  EXPECT_THROW(loss_surface(model, bank, 0.5, 1.0, 1, 1), Error);
  EXPECT_THROW(loss_surface(model, bank, 0.5, 0.0, 3, 1), Error);
}

TEST(FormatG17, RoundTrips) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1e3, 1e3);
  for (int i = 0; i < 100; ++i) {
    const double v = u(rng);
    EXPECT_EQ(std::stod(format_g17(v)), v);
  }
}

}  // namespace
}  // namespace drclf
