// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "drclf/distill.hpp"
#include "drclf/error.hpp"
#include "drclf/evaluation.hpp"
#include "drclf/featurebank.hpp"
#include "drclf/model_file.hpp"
#include "drclf/optimizer.hpp"
#include "drclf/run_manifest.hpp"
#include "drclf/seed.hpp"

namespace drclf::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Environment variable naming the default directory for training histories.
inline constexpr const char* kLogDirEnv = "DRCLF_LOG_DIR";

namespace detail {

inline fs::path with_suffix(const fs::path& p, const std::string& suffix) { return fs::path(p.string() + suffix); }

inline fs::path default_manifest_for(const fs::path& bank) {
  fs::path m = bank;
  m.replace_extension(".manifest.csv");
  return m;
}

inline const CLI::Validator kAlpha(
    [](std::string& s) -> std::string {
      double v = 0;
      try {
        v = std::stod(s);
      } catch (const std::exception&) {
        return "alpha must be a number";
      }
      return v > 0 && v <= 1 ? std::string() : "alpha must lie in (0,1], got " + s;
    },
    "ALPHA in (0,1]");

inline void add_train_flags(CLI::App* app, TrainConfig& cfg) {
  app->add_option("--alpha", cfg.alpha, "CVaR level")->check(kAlpha)->capture_default_str();
  app->add_option("--gamma", cfg.gamma, "SAM perturbation radius")->check(CLI::NonNegativeNumber)->capture_default_str();
  app->add_option("--lr", cfg.lr, "initial learning rate")->check(CLI::PositiveNumber)->capture_default_str();
  app->add_option("--lr-min", cfg.lr_min, "final learning rate of the cosine schedule")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  app->add_option("--batch", cfg.batch_size, "mini-batch size")->check(CLI::Range(2, 1 << 30))->capture_default_str();
  app->add_option("--epochs", cfg.epochs, "training epochs")->check(CLI::NonNegativeNumber)->capture_default_str();
  app->add_option("--seed", cfg.seed, "random seed")->capture_default_str();
  app->add_option("--dropout", cfg.dropout_rate, "dropout rate")->check(CLI::Range(0.0, 0.999999))->capture_default_str();
  app->add_option("--hidden", cfg.hidden_dim, "hidden width (0 = feature dim)")->capture_default_str();
  app->add_option("--lambda-tol", cfg.lambda_tol, "relative bisection tolerance")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app->add_flag("!--no-sam", cfg.sam, "disable the SAM second pass");
  app->add_option("--update", cfg.update, "adam or sgd")
      ->transform(CLI::CheckedTransformer(std::map<std::string, UpdateRule>{{"adam", UpdateRule::adam},
                                                                            {"sgd", UpdateRule::sgd}}))
      ->capture_default_str();
}

inline nlohmann::ordered_json config_json(const TrainConfig& cfg) {
  nlohmann::json j = cfg;
  return nlohmann::ordered_json::parse(j.dump());
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline void write_json(const nlohmann::ordered_json& j, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) fail(ErrorKind::Io, "write failed for " + path.string());
}

inline void finish(RunManifest& run, const Stopwatch& clock, const fs::path& primary_output) {
  run.duration_seconds = clock.seconds();
  write_run_manifest(run, with_suffix(primary_output, ".run.json"));
}

inline ScanManifest load_manifest_or_empty(const std::string& given, const fs::path& bank, RunManifest& run) {
  const fs::path path = given.empty() ? default_manifest_for(bank) : fs::path(given);
  if (!given.empty() || fs::exists(path)) {
    auto m = read_manifest(path);
    run.add_input(path);
    return m;
  }
  return {};
}

}  // namespace detail

/// Parses argv and runs one subcommand. Exit codes: 0 success, 2 usage error,
/// 1 runtime error.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Distributionally robust classifier heads over embedding banks"};
  app.name("drclf");
  app.require_subcommand(1);

  // synth
  SynthConfig synth_cfg;
  std::string synth_out, synth_manifest;
  auto* synth = app.add_subcommand("synth", "generate a synthetic two-cluster bank");
  synth->add_option("--scans-per-class", synth_cfg.num_scans_per_class)->check(CLI::PositiveNumber)->capture_default_str();
  std::uint32_t slices = 0, slices_max = 0;
  synth->add_option("--slices", slices, "slices per scan (minimum when --slices-max is given)")
      ->check(CLI::PositiveNumber);
  synth->add_option("--slices-max", slices_max, "maximum slices per scan")->check(CLI::PositiveNumber);
  synth->add_option("--dim", synth_cfg.feature_dim)->check(CLI::PositiveNumber)->capture_default_str();
  synth->add_option("--sep", synth_cfg.class_separation, "distance between class means")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  synth->add_option("--sigma", synth_cfg.noise_sigma)->check(CLI::PositiveNumber)->capture_default_str();
  synth->add_option("--label-noise", synth_cfg.label_noise_rate)->check(CLI::Range(0.0, 0.999999))->capture_default_str();
  synth->add_option("--seed", synth_cfg.seed)->capture_default_str();
  synth->add_option("--out", synth_out, "output .fbank")->required();
  synth->add_option("--manifest", synth_manifest, "output manifest CSV (default <out>.manifest.csv)");

  // split
  std::string split_bank_path, split_manifest, split_a, split_b;
  double split_fraction = 0.8;
  std::uint64_t split_seed = 0;
  auto* split_cmd = app.add_subcommand("split", "scan-grouped split of a bank and its manifest");
  split_cmd->add_option("--bank", split_bank_path)->required()->check(CLI::ExistingFile);
  split_cmd->add_option("--manifest", split_manifest, "input manifest (default <bank>.manifest.csv)");
  split_cmd->add_option("--fraction", split_fraction, "share of scans in the first output")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  split_cmd->add_option("--seed", split_seed)->capture_default_str();
  split_cmd->add_option("--out-a", split_a, "first output .fbank")->required();
  split_cmd->add_option("--out-b", split_b, "second output .fbank")->required();

  // train
  TrainConfig train_cfg;
  std::string train_bank, train_out, train_history;
  auto* train_cmd = app.add_subcommand("train", "train a classifier head with CVaR + SAM");
  train_cmd->add_option("--bank", train_bank, "labeled .fbank")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--out", train_out, "output .mlpmodel")->required();
  train_cmd->add_option("--history", train_history, "per-epoch JSON-lines log");
  detail::add_train_flags(train_cmd, train_cfg);

  // eval
  std::string eval_model, eval_bank, eval_manifest, eval_out;
  VoteRule eval_vote = VoteRule::majority;
  auto* eval_cmd = app.add_subcommand("eval", "slice- and scan-level macro F1");
  eval_cmd->add_option("--model", eval_model)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--bank", eval_bank, "labeled .fbank")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--manifest", eval_manifest, "scan manifest (default <bank>.manifest.csv)");
  eval_cmd->add_option("--out", eval_out, "report JSON")->required();
  eval_cmd->add_option("--vote", eval_vote, "majority or mean-prob")
      ->transform(CLI::CheckedTransformer(std::map<std::string, VoteRule>{
          {"majority", VoteRule::majority}, {"mean-prob", VoteRule::mean_probability}}));

  // pseudo-label
  std::string pl_model, pl_bank, pl_out, pl_stats;
  PseudoLabelOptions pl_opts;
  std::optional<double> pl_threshold;
  auto* pl_cmd = app.add_subcommand("pseudo-label", "label an unlabeled bank with a teacher model");
  pl_cmd->add_option("--model", pl_model)->required()->check(CLI::ExistingFile);
  pl_cmd->add_option("--bank", pl_bank, "unlabeled .fbank")->required()->check(CLI::ExistingFile);
  pl_cmd->add_option("--threshold", pl_threshold, "keep slices with max(p,1-p) >= threshold")
      ->check(CLI::Range(0.5, 1.0));
  pl_cmd->add_flag("--per-scan", pl_opts.per_scan, "broadcast each scan's majority label");
  pl_cmd->add_option("--out", pl_out, "output labeled .fbank")->required();
  pl_cmd->add_option("--stats", pl_stats, "stats JSON (default <out>.stats.json)");

  // distill
  TrainConfig distill_cfg;
  std::string d_labeled, d_unlabeled, d_teacher, d_student, d_pseudo, d_report;
  std::optional<std::size_t> student_epochs;
  PseudoLabelOptions d_opts;
  std::optional<double> d_threshold;
  auto* d_cmd = app.add_subcommand("distill", "teacher -> pseudo-labels -> student");
  d_cmd->add_option("--labeled", d_labeled)->required()->check(CLI::ExistingFile);
  d_cmd->add_option("--unlabeled", d_unlabeled)->required()->check(CLI::ExistingFile);
  d_cmd->add_option("--threshold", d_threshold)->check(CLI::Range(0.5, 1.0));
  d_cmd->add_flag("--per-scan", d_opts.per_scan);
  d_cmd->add_option("--student-epochs", student_epochs, "student epochs (default --epochs)");
  d_cmd->add_option("--teacher-out", d_teacher)->required();
  d_cmd->add_option("--student-out", d_student)->required();
  d_cmd->add_option("--pseudo-out", d_pseudo, "pseudo-labeled .fbank (optional)");
  d_cmd->add_option("--report", d_report, "report JSON")->required();
  detail::add_train_flags(d_cmd, distill_cfg);

  // sweep-alpha
  TrainConfig sweep_cfg;
  std::string s_train, s_test, s_manifest, s_out;
  std::vector<double> alphas{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  auto* s_cmd = app.add_subcommand("sweep-alpha", "train and evaluate one model per alpha");
  s_cmd->add_option("--train-bank", s_train)->required()->check(CLI::ExistingFile);
  s_cmd->add_option("--test-bank", s_test)->required()->check(CLI::ExistingFile);
  s_cmd->add_option("--manifest", s_manifest, "test manifest (default <test-bank>.manifest.csv)");
  s_cmd->add_option("--alphas", alphas, "alpha grid")->delimiter(',')->check(detail::kAlpha)->capture_default_str();
  s_cmd->add_option("--out", s_out, "output CSV")->required();
  detail::add_train_flags(s_cmd, sweep_cfg);

  // loss-surface
  std::string ls_model, ls_bank, ls_out;
  double ls_alpha = 0.5, ls_width = 1.0;
  std::size_t ls_points = 21;
  std::uint64_t ls_seed = 0;
  auto* ls_cmd = app.add_subcommand("loss-surface", "CVaR loss on a 2-D filter-normalized grid");
  ls_cmd->add_option("--model", ls_model)->required()->check(CLI::ExistingFile);
  ls_cmd->add_option("--bank", ls_bank, "labeled .fbank")->required()->check(CLI::ExistingFile);
  ls_cmd->add_option("--alpha", ls_alpha)->check(detail::kAlpha)->capture_default_str();
  ls_cmd->add_option("--half-width", ls_width)->check(CLI::PositiveNumber)->capture_default_str();
  ls_cmd->add_option("--points", ls_points, "odd grid size >= 3")->capture_default_str();
  ls_cmd->add_option("--seed", ls_seed)->capture_default_str();
  ls_cmd->add_option("--out", ls_out, "output CSV")->required();

  // verify-run
  std::string vr_path;
  auto* vr_cmd = app.add_subcommand("verify-run", "recompute digests recorded in a .run.json");
  vr_cmd->add_option("run", vr_path)->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return kExitUsage;
  }

  detail::Stopwatch clock;
  try {
    if (*synth) {
      if (slices > 0) {
        synth_cfg.slices_min = slices;
        synth_cfg.slices_max = slices_max > 0 ? slices_max : slices;
      } else if (slices_max > 0) {
        synth_cfg.slices_max = slices_max;
      }
      const auto [bank, manifest] = synth_bank(synth_cfg);
      const fs::path manifest_path = synth_manifest.empty() ? detail::default_manifest_for(synth_out) : fs::path(synth_manifest);
      write_bank(bank, synth_out);
      write_manifest(manifest, manifest_path);
      RunManifest run;
      run.command = "synth";
      run.seed = synth_cfg.seed;
      run.config = nlohmann::ordered_json{{"scans_per_class", synth_cfg.num_scans_per_class},
                                          {"slices_min", synth_cfg.slices_min},
                                          {"slices_max", synth_cfg.slices_max},
                                          {"feature_dim", synth_cfg.feature_dim},
                                          {"class_separation", synth_cfg.class_separation},
                                          {"noise_sigma", synth_cfg.noise_sigma},
                                          {"label_noise_rate", synth_cfg.label_noise_rate}};
      run.add_output(synth_out);
      run.add_output(manifest_path);
      detail::finish(run, clock, synth_out);
      out << "wrote " << bank.size() << " records (" << manifest.entries.size() << " scans) to " << synth_out << '\n';
      return kExitOk;
    }

    if (*split_cmd) {
      RunManifest run;
      run.command = "split";
      run.seed = split_seed;
      const auto bank = read_bank(split_bank_path);
      run.add_input(split_bank_path);
      const auto manifest = detail::load_manifest_or_empty(split_manifest, split_bank_path, run);
      const auto [a, b] = split_bank(bank, split_fraction, split_seed);
      run.config = nlohmann::ordered_json{{"fraction", split_fraction}};
      for (const auto& [part, out_path] : {std::pair{&a, split_a}, std::pair{&b, split_b}}) {
        write_bank(*part, out_path);
        run.add_output(out_path);
        if (!manifest.entries.empty()) {
          ScanManifest sub;
          for (auto id : part->scan_ids()) {
            auto it = manifest.entries.find(id);
            require(it != manifest.entries.end(), ErrorKind::MissingManifestEntry,
                    "scan_id " + std::to_string(id) + " is not in the manifest");
            sub.entries.insert(*it);
          }
          const auto mpath = detail::default_manifest_for(out_path);
          write_manifest(sub, mpath);
          run.add_output(mpath);
        }
      }
      detail::finish(run, clock, split_a);
      out << "split " << bank.size() << " records into " << a.size() << " + " << b.size() << '\n';
      return kExitOk;
    }

    if (*train_cmd) {
      const auto bank = read_bank(train_bank);
      const auto model = train(bank, train_cfg, {nullptr, [&](const std::string& msg) { err << msg << '\n'; }});
      write_model(model, train_out);
      fs::path history_path;
      if (!train_history.empty()) {
        history_path = train_history;
      } else if (const char* dir = std::getenv(kLogDirEnv); dir && *dir) {
        history_path = fs::path(dir) / (fs::path(train_out).filename().string() + ".history.jsonl");
      } else {
        history_path = detail::with_suffix(train_out, ".history.jsonl");
      }
      write_history_jsonl(model.history, history_path);
      RunManifest run;
      run.command = "train";
      run.seed = train_cfg.seed;
      run.config = detail::config_json(train_cfg);
      run.add_input(train_bank);
      run.add_output(train_out);
      run.add_output(history_path);
      detail::finish(run, clock, train_out);
      if (!model.history.empty()) {
        const auto& last = model.history.back();
        out << "epoch " << last.epoch << ": mean_cvar_loss=" << last.mean_cvar_loss << " mean_lambda=" << last.mean_lambda
            << " active_fraction=" << last.active_fraction << " lr=" << last.lr << '\n';
      } else {
        out << "no epochs run; wrote initialized model\n";
      }
      return kExitOk;
    }

    if (*eval_cmd) {
      RunManifest run;
      run.command = "eval";
      const auto model = read_model(eval_model);
      const auto bank = read_bank(eval_bank);
      run.add_input(eval_model);
      run.add_input(eval_bank);
      const auto manifest = detail::load_manifest_or_empty(eval_manifest, eval_bank, run);
      const auto report = evaluate(model, bank, manifest, eval_vote);
      detail::write_json(report_json(report), eval_out);
      run.config = nlohmann::ordered_json{{"vote", std::string(to_string(eval_vote))}};
      run.add_output(eval_out);
      detail::finish(run, clock, eval_out);
      out << "slice_macro_f1=" << report.slice.macro_f1 << " scan_macro_f1=" << report.scan.macro_f1 << '\n';
      return kExitOk;
    }

    if (*pl_cmd) {
      pl_opts.threshold = pl_threshold;
      const auto model = read_model(pl_model);
      const auto bank = read_bank(pl_bank);
      const auto [labeled, stats] = pseudo_label(model, bank, pl_opts);
      write_bank(labeled, pl_out);
      const fs::path stats_path = pl_stats.empty() ? detail::with_suffix(pl_out, ".stats.json") : fs::path(pl_stats);
      detail::write_json(stats_json(stats), stats_path);
      RunManifest run;
      run.command = "pseudo-label";
      run.config = nlohmann::ordered_json{{"threshold", pl_threshold ? nlohmann::ordered_json(*pl_threshold) : nullptr},
                                          {"per_scan", pl_opts.per_scan}};
      run.add_input(pl_model);
      run.add_input(pl_bank);
      run.add_output(pl_out);
      run.add_output(stats_path);
      detail::finish(run, clock, pl_out);
      out << "pseudo-labeled " << labeled.size() << " of " << stats.total_unlabeled << " slices ("
          << stats.labeled_positive << " positive, " << stats.labeled_negative << " negative, "
          << stats.discarded_low_confidence << " discarded)\n";
      return kExitOk;
    }

    if (*d_cmd) {
      d_opts.threshold = d_threshold;
      const auto labeled = read_bank(d_labeled);
      const auto unlabeled = read_bank(d_unlabeled);
      TrainConfig teacher_cfg = distill_cfg;
      TrainConfig student_cfg = distill_cfg;
      teacher_cfg.seed = derive_seed(distill_cfg.seed, seed_stream::teacher);
      student_cfg.seed = derive_seed(distill_cfg.seed, seed_stream::student);
      if (student_epochs) student_cfg.epochs = *student_epochs;
      const auto report = distill(labeled, unlabeled, teacher_cfg, student_cfg, d_opts,
                                  {nullptr, [&](const std::string& msg) { err << msg << '\n'; }});
      write_model(report.teacher, d_teacher);
      write_model(report.student, d_student);
      if (!d_pseudo.empty()) write_bank(report.pseudo_bank, d_pseudo);
      detail::write_json(report_json(report, d_teacher, d_student), d_report);
      RunManifest run;
      run.command = "distill";
      run.seed = distill_cfg.seed;
      run.config = nlohmann::ordered_json{{"teacher", detail::config_json(teacher_cfg)},
                                          {"student", detail::config_json(student_cfg)},
                                          {"threshold", d_threshold ? nlohmann::ordered_json(*d_threshold) : nullptr},
                                          {"per_scan", d_opts.per_scan}};
      run.add_input(d_labeled);
      run.add_input(d_unlabeled);
      run.add_output(d_teacher);
      run.add_output(d_student);
      if (!d_pseudo.empty()) run.add_output(d_pseudo);
      run.add_output(d_report);
      detail::finish(run, clock, d_report);
      out << "student trained on " << report.student_training_size << " records (" << report.labeled_size
          << " labeled + " << report.pseudo_bank.size() << " pseudo-labeled)\n";
      return kExitOk;
    }

    if (*s_cmd) {
      RunManifest run;
      run.command = "sweep-alpha";
      run.seed = sweep_cfg.seed;
      const auto train_bank_data = read_bank(s_train);
      const auto test_bank = read_bank(s_test);
      run.add_input(s_train);
      run.add_input(s_test);
      const auto manifest = detail::load_manifest_or_empty(s_manifest, s_test, run);
      std::vector<double> grid = alphas;
      std::sort(grid.begin(), grid.end());
      std::ofstream csv(s_out, std::ios::binary | std::ios::trunc);
      if (!csv) fail(ErrorKind::Io, "cannot open " + s_out + " for writing");
      csv << "alpha,slice_macro_f1,scan_macro_f1\n";
      for (std::size_t k = 0; k < grid.size(); ++k) {
        TrainConfig cfg = sweep_cfg;
        cfg.alpha = grid[k];
        cfg.seed = derive_seed(sweep_cfg.seed, seed_stream::sweep + k);
        const auto model = train(train_bank_data, cfg);
        const auto report = evaluate(model, test_bank, manifest);
        csv << format_g17(grid[k]) << ',' << format_g17(report.slice.macro_f1) << ','
            << format_g17(report.scan.macro_f1) << '\n';
        out << "alpha=" << grid[k] << " slice_macro_f1=" << report.slice.macro_f1
            << " scan_macro_f1=" << report.scan.macro_f1 << '\n';
      }
      csv.close();
      nlohmann::ordered_json cfg_json = detail::config_json(sweep_cfg);
      cfg_json["alphas"] = grid;
      run.config = cfg_json;
      run.add_output(s_out);
      detail::finish(run, clock, s_out);
      return kExitOk;
    }

    if (*ls_cmd) {
      const auto model = read_model(ls_model);
      const auto bank = read_bank(ls_bank);
      const auto surface = loss_surface(model, bank, ls_alpha, ls_width, ls_points, ls_seed);
      write_surface_csv(surface, ls_out);
      RunManifest run;
      run.command = "loss-surface";
      run.seed = ls_seed;
      run.config = nlohmann::ordered_json{{"alpha", ls_alpha}, {"half_width", ls_width}, {"points", ls_points}};
      run.add_input(ls_model);
      run.add_input(ls_bank);
      run.add_output(ls_out);
      detail::finish(run, clock, ls_out);
      out << "wrote " << surface.size() << " grid cells to " << ls_out << '\n';
      return kExitOk;
    }

    if (*vr_cmd) {
      const auto problems = verify_run_manifest(read_run_manifest(vr_path));
      for (const auto& p : problems) err << p << '\n';
      if (!problems.empty()) return kExitRuntime;
      out << "all digests match\n";
      return kExitOk;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace drclf::cli
