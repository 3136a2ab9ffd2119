// fallkan: command-line front end for ingestion, feature extraction, model
// training/evaluation, streaming replay, synthetic data and reports.
//
// Exit codes: 0 success, 1 validation error or bad usage, 2 I/O error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fallkan/config.hpp"
#include "fallkan/evaluation.hpp"
#include "fallkan/pipeline.hpp"
#include "fallkan/streaming.hpp"

namespace fs = std::filesystem;
using namespace fallkan;

namespace {

struct CommonArgs {
  std::string config;
  std::string out;
  std::string data;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> jobs;
};

void add_common(CLI::App* sub, CommonArgs& a) {
  sub->add_option("--config", a.config, "JSON run configuration (defaults for missing keys)");
  sub->add_option("--out", a.out, "output directory");
  sub->add_option("--data", a.data, "dataset root (trial files, annotations.csv, subjects.csv)");
  sub->add_option("--seed", a.seed, "seed for splits, synthesis and model initialization");
  sub->add_option("--jobs", a.jobs, "worker threads (0 = all cores)");
}

std::string out_path(const RunConfig& cfg, const std::string& name) { return (fs::path(cfg.out) / name).string(); }

/// Resolves the configuration, creates --out and writes config.json there.
RunConfig resolve(const CommonArgs& a) {
  auto cfg = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  if (!a.out.empty()) cfg.out = a.out;
  if (!a.data.empty()) cfg.data.root = a.data;
  if (a.seed) {
    cfg.seed = *a.seed;
    cfg.fdnn.seed = *a.seed;
    cfg.kan.seed = *a.seed;
  }
  if (a.jobs) cfg.jobs = *a.jobs;
  cfg.validate();
  std::error_code ec;
  fs::create_directories(cfg.out, ec);
  if (ec) throw IoError(cfg.out, "cannot create output directory: " + ec.message());
  csv::write_file(out_path(cfg, "config.json"), to_json(cfg).dump(2) + "\n");
  return cfg;
}

void write_json(const RunConfig& cfg, const std::string& name, const nlohmann::json& j) {
  csv::write_file(out_path(cfg, name), j.dump(2) + "\n");
}

nlohmann::json read_json(const std::string& path) {
  try {
    return nlohmann::json::parse(csv::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

void print_warnings(const std::vector<std::string>& warnings, std::size_t limit = 20) {
  for (std::size_t i = 0; i < warnings.size() && i < limit; ++i) std::cerr << "warning: " << warnings[i] << "\n";
  if (warnings.size() > limit) std::cerr << "warning: ... " << warnings.size() - limit << " more\n";
}

/// Fall segments from a cached directory, or extracted from the corpus.
std::vector<FallSegment> segments_for(const RunConfig& cfg, const std::string& segment_dir) {
  if (!segment_dir.empty()) return load_segments(segment_dir);
  const auto corpus = open_corpus(cfg);
  auto set = collect_segments(corpus, corpus.trials(true), cfg);
  print_warnings(set.warnings);
  if (set.segments.empty()) throw ValidationError("no fall segments could be extracted");
  return std::move(set.segments);
}

SequenceSplit fall_split(const Corpus& corpus, const RunConfig& cfg) {
  std::vector<TrialId> falls;
  for (const auto& id : corpus.trials(true))
    if (corpus.annotated(id)) falls.push_back(id);
  return split_sequences(falls, cfg.split, cfg.seed);
}

nlohmann::json ids_json(const std::vector<TrialId>& ids) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& id : ids) a.push_back(id.str());
  return a;
}

std::string fmt(double v) { return csv::format_double(v); }

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string("n/a"); }

// ---------------------------------------------------------------------------
// Subcommands

int cmd_verify(const CommonArgs& a, const std::string& root_arg) {
  auto cfg = resolve(a);
  const std::string root = root_arg.empty() ? cfg.data.root : root_arg;
  if (root.empty()) throw ValidationError("verify needs a dataset root");
  if (!fs::is_directory(root)) throw IoError(root, "not a directory");
  const auto s = verify_corpus(root, cfg.resolved_jobs());
  std::cout << "adl_trials " << s.adl_trials << "\nfall_trials " << s.fall_trials << "\ntotal " << s.total()
            << "\nunreadable " << s.unreadable.size() << "\nextra " << s.extra.size() << "\nmissing "
            << s.missing.size() << "\n";
  print_warnings(s.warnings);
  for (const auto& u : s.unreadable) std::cerr << "unreadable: " << u << "\n";
  write_json(cfg, "verify.json",
             {{"root", root},
              {"adl_trials", s.adl_trials},
              {"fall_trials", s.fall_trials},
              {"by_activity", s.by_activity},
              {"by_subject", s.by_subject},
              {"unreadable", s.unreadable},
              {"extra", s.extra},
              {"missing", s.missing},
              {"warnings", s.warnings}});
  return 0;
}

int cmd_features(const CommonArgs& a) {
  const auto cfg = resolve(a);
  const auto corpus = open_corpus(cfg);
  const auto set = collect_segments(corpus, corpus.trials(true), cfg);
  print_warnings(set.warnings);
  save_segments(set, fs::path(cfg.out) / "segments");
  std::cout << "segments " << set.segments.size() << "\n";
  return 0;
}

int cmd_select(const CommonArgs& a, const std::string& segment_dir) {
  const auto cfg = resolve(a);
  const auto segments = segments_for(cfg, segment_dir);
  const auto [x, y] = selection_data(segments);
  const auto report = select_features(x, y, signal_names(kAllSignals), cfg.selection);
  csv::write_file(out_path(cfg, "selection.csv"), report.to_csv());
  write_json(cfg, "selection.json", {{"chosen", report.chosen_features()}, {"rows", x.rows}});
  for (const auto& f : report.chosen_features()) std::cout << f << "\n";
  return 0;
}

int cmd_train_fdnn(const CommonArgs& a) {
  const auto cfg = resolve(a);
  const auto corpus = open_corpus(cfg);
  const auto split = fall_split(corpus, cfg);
  write_json(cfg, "split.json",
             {{"seed", cfg.seed},
              {"train", ids_json(split.train)},
              {"validation", ids_json(split.validation)},
              {"test", ids_json(split.test)}});
  const auto train_frames = load_frames(corpus, split.train, cfg);
  const auto stats = fit_frame_standardizer(train_frames);
  const auto train_set = to_sequences(train_frames, stats);
  const auto val_set = to_sequences(load_frames(corpus, split.validation, cfg), stats);
  const auto result = train(cfg.fdnn, train_set, val_set, [](const EpochLog& e) {
    std::cout << "epoch " << e.epoch << " loss " << fmt(e.train_loss) << " val_accuracy " << fmt(e.val_accuracy)
              << "\n";
  });
  save_checkpoint(result.params, stats, out_path(cfg, "fdnn.ckpt"), fdnn_metadata(cfg));
  csv::write_file(out_path(cfg, "fdnn_log.csv"), training_log_csv(result.log));
  std::cout << "best_epoch " << result.best_epoch << " val_accuracy " << fmt(result.best_val_accuracy) << "\n";
  return 0;
}

void warn_front_end(const FdnnCheckpoint& ck, const RunConfig& cfg) {
  const auto& m = ck.metadata;
  if (m.contains("causal_features") && m["causal_features"].get<bool>() != cfg.features.causal)
    std::cerr << "warning: checkpoint was trained with causal_features=" << m["causal_features"] << "\n";
  if (m.contains("derivative_order") && m["derivative_order"].get<int>() != cfg.features.derivative_order)
    std::cerr << "warning: checkpoint was trained with derivative_order=" << m["derivative_order"] << "\n";
}

int cmd_eval_fdnn(const CommonArgs& a, const std::string& model) {
  const auto cfg = resolve(a);
  const auto ck = load_checkpoint(model);
  warn_front_end(ck, cfg);
  const auto corpus = open_corpus(cfg);
  const auto split = fall_split(corpus, cfg);
  const auto falls = evaluate_detector(corpus, split.test, ck, cfg);
  const auto adls = evaluate_detector(corpus, corpus.trials(false), ck, cfg);
  nlohmann::json j = {{"fall_trials", nlohmann::json::array()}, {"adl_trials", nlohmann::json::array()}};
  for (const auto& t : falls) j["fall_trials"].push_back(to_json(t));
  for (const auto& t : adls) j["adl_trials"].push_back(to_json(t));
  write_json(cfg, "fdnn_eval.json", j);
  const auto tables = metric_tables(falls, adls);
  for (const auto* t : {&tables.fall_tpr, &tables.fall_tnr, &tables.adl_tnr}) {
    csv::write_file(out_path(cfg, t->name + ".csv"), to_csv(*t));
    std::cout << t->name << " " << fmt(t->average) << "\n";
  }
  return 0;
}

int cmd_train_kan(const CommonArgs& a, const std::string& segment_dir) {
  const auto cfg = resolve(a);
  const auto all = segments_for(cfg, segment_dir);
  const auto& plan = cfg.kan_split.plan;
  const int val_rep = cfg.kan_split.validation_repetition;
  const auto is_tuning = [&](int r) {
    return std::find(plan.tuning_repetitions.begin(), plan.tuning_repetitions.end(), r) != plan.tuning_repetitions.end();
  };
  const auto train_segs = filter_segments(all, [&](int r) { return is_tuning(r) && r != val_rep; });
  const auto val_segs = filter_segments(all, [&](int r) { return r == val_rep; });
  if (train_segs.empty() || val_segs.empty()) throw ValidationError("train-kan needs training and validation repetitions");
  const auto result = fit_segments(cfg.kan, train_segs, val_segs, cfg.features.kan_inputs, [](const KanEpochLog& e) {
    std::cout << "epoch " << e.epoch << " train_rmse " << fmt(e.train_rmse) << " val_rmse " << fmt(e.val_rmse) << "\n";
  });
  save_kan(result.model, out_path(cfg, "kan.ckpt"));
  csv::write_file(out_path(cfg, "kan_log.csv"), kan_log_csv(result.log));
  std::cout << "best_epoch " << result.best_epoch << " val_rmse " << fmt(result.best_val_rmse) << "\n";
  return 0;
}

int cmd_cv_kan(const CommonArgs& a, const std::string& segment_dir, const std::string& grid_file) {
  const auto cfg = resolve(a);
  const auto segments = segments_for(cfg, segment_dir);
  std::vector<KanConfig> grid;
  if (grid_file.empty()) {
    grid = default_kan_grid(cfg.kan);
  } else {
    const auto j = read_json(grid_file);
    if (!j.is_array()) throw ValidationError(grid_file + ": grid must be a JSON array of KAN configs");
    for (const auto& e : j) {
      KanConfig c = cfg.kan;
      auto merged = nlohmann::json(c);
      merged.update(e);
      grid.push_back(merged.get<KanConfig>());
    }
  }
  const auto r = cross_validate(grid, cfg.kan_split.plan, segments, cfg.features.kan_inputs, cfg.resolved_jobs());
  print_warnings(r.warnings);
  csv::write_file(out_path(cfg, "cv_kan.csv"), r.to_csv());
  write_json(cfg, "cv_best.json", {{"kan", r.best}, {"warnings", r.warnings}});
  std::cout << "best n=" << r.best.n << " q=" << r.best.q << " mu=" << fmt(r.best.mu) << " window_ms="
            << fmt(r.best.window_ms) << "\n";
  return 0;
}

/// Segment closest to the 700 ms reference fall duration.
const FallSegment& typical_segment(const std::vector<FallSegment>& segs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < segs.size(); ++i)
    if (std::abs(static_cast<double>(segs[i].size()) - 141.0) < std::abs(static_cast<double>(segs[best].size()) - 141.0))
      best = i;
  return segs[best];
}

int cmd_eval_kan(const CommonArgs& a, const std::string& model_path, const std::string& segment_dir) {
  const auto cfg = resolve(a);
  const auto model = load_kan(model_path);
  const auto test = filter_segments(segments_for(cfg, segment_dir),
                                    [&](int r) { return r == cfg.kan_split.plan.test_repetition; });
  if (test.empty()) throw ValidationError("no segments from the test repetition");
  nlohmann::json j = {{"tti", nlohmann::json::array()}, {"trajectories", nlohmann::json::array()}};
  std::vector<SegmentPrediction> preds;
  for (const auto& s : test) {
    preds.push_back({s.id, predict_segment(model, s), s.tti_ms});
    j["tti"].push_back(to_json(preds.back()));
  }
  j["trajectories"].push_back(to_json(trajectory(model, typical_segment(test))));
  write_json(cfg, "kan_eval.json", j);
  const auto heat = rmse_by_group(preds);
  csv::write_file(out_path(cfg, "rmse_heatmap.csv"), to_csv(heat));
  std::cout << "tti_rmse_ms " << fmt(heat.global_rmse) << "\nsegments " << test.size() << "\n";
  return 0;
}

int cmd_trace(const CommonArgs& a, const std::string& model_path, const std::string& trial,
              const std::string& segment_dir) {
  const auto cfg = resolve(a);
  const auto model = load_kan(model_path);
  const auto id = TrialId::parse(trial);
  std::optional<FallSegment> seg;
  if (!segment_dir.empty()) {
    const auto path = fs::path(segment_dir) / (id.str() + ".json");
    seg = segment_from_json(read_json(path.string()));
  } else {
    const auto corpus = open_corpus(cfg);
    const auto set = collect_segments(corpus, {id}, cfg);
    print_warnings(set.warnings);
    if (set.segments.empty()) throw ValidationError(id.str() + ": no fall segment");
    seg = set.segments.front();
  }
  const auto t = trajectory(model, *seg);
  csv::write_file(out_path(cfg, "trajectory_" + id.str() + ".csv"), to_csv(t));
  csv::write_file(out_path(cfg, "trajectory_" + id.str() + ".svg"), detail::trajectory_svg(t));
  std::cout << "samples " << t.t_ms.size() << "\n";
  return 0;
}

int cmd_stream(const CommonArgs& a, const std::string& fdnn_path, const std::string& kan_path,
               const std::string& trial, bool realtime, bool no_gate) {
  const auto cfg = resolve(a);
  const auto ck = load_checkpoint(fdnn_path);
  const auto kan = load_kan(kan_path);
  if (ck.metadata.contains("causal_features") && !ck.metadata["causal_features"].get<bool>())
    std::cerr << "warning: detector was trained on batch (non-causal) features\n";
  const auto corpus = open_corpus(cfg);
  const auto id = TrialId::parse(trial);
  StreamOptions opt;
  opt.filter = cfg.filter;
  opt.derivative_order = cfg.features.derivative_order;
  opt.pacing = realtime ? Pacing::Realtime : Pacing::Fast;
  opt.gate_kan = !no_gate;
  const auto r = stream_trial(ck, kan, corpus.load(id), corpus.subject(id), opt);
  csv::write_file(out_path(cfg, "events_" + id.str() + ".csv"), events_csv(r.events));
  write_json(cfg, "latency_" + id.str() + ".json", to_json(r.latency));
  std::size_t falling = 0;
  for (const auto& e : r.events) falling += e.decision;
  std::cout << "samples " << r.latency.samples << "\nfalling " << falling << "\nmean_us " << fmt(r.latency.mean_us)
            << "\np99_us " << fmt(r.latency.p99_us) << "\nmax_us " << fmt(r.latency.max_us) << "\nmisses "
            << r.latency.misses << "\n";
  return 0;
}

int cmd_synth(const CommonArgs& a) {
  const auto cfg = resolve(a);
  const auto files = write_synthetic_corpus(cfg.out, cfg.synth, cfg.calibration, cfg.seed);
  std::cout << "files " << files.size() << "\n";
  return 0;
}

int cmd_report(const CommonArgs& a, const std::string& fdnn_eval, const std::string& kan_eval) {
  const auto cfg = resolve(a);
  if (fdnn_eval.empty() && kan_eval.empty()) throw ValidationError("report needs --fdnn-eval and/or --kan-eval");
  ReportBundle b;
  try {
    if (!fdnn_eval.empty()) {
      const auto j = read_json(fdnn_eval);
      for (const auto& t : j.at("fall_trials")) b.fall_trials.push_back(trial_metrics_from_json(t));
      for (const auto& t : j.at("adl_trials")) b.adl_trials.push_back(trial_metrics_from_json(t));
    }
    if (!kan_eval.empty()) {
      const auto j = read_json(kan_eval);
      for (const auto& p : j.at("tti")) b.tti.push_back(segment_prediction_from_json(p));
      for (const auto& t : j.value("trajectories", nlohmann::json::array())) b.trajectories.push_back(trajectory_from_json(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("report input: ") + e.what());
  }
  for (const auto& f : render_report(b, cfg.out)) std::cout << f << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fall detection and time-of-impact estimation on SisFall-format IMU data", "fallkan"};
  app.require_subcommand(1);

  CommonArgs common;
  std::string root, model, segments, grid, trial, fdnn_model, kan_model, fdnn_eval, kan_eval;
  bool realtime = false, no_gate = false;

  auto* verify = app.add_subcommand("verify", "count trials by class and check the corpus");
  verify->add_option("root", root, "dataset root");
  auto* features = app.add_subcommand("features", "extract fall segments into <out>/segments");
  auto* select = app.add_subcommand("select", "rank features by correlation and mRMR");
  auto* train_fdnn = app.add_subcommand("train-fdnn", "train the recurrent fall detector");
  auto* eval_fdnn = app.add_subcommand("eval-fdnn", "per-trial TPR/TNR of a detector checkpoint");
  auto* train_kan = app.add_subcommand("train-kan", "fit the time-of-impact regressor");
  auto* cv_kan = app.add_subcommand("cv-kan", "repetition-wise cross-validation of regressor settings");
  auto* eval_kan = app.add_subcommand("eval-kan", "time-of-impact RMSE on the held-out repetition");
  auto* trace = app.add_subcommand("trace", "predicted vs true time of impact for one fall");
  auto* stream = app.add_subcommand("stream", "replay one trial sample by sample through both models");
  auto* synth = app.add_subcommand("synth", "write a deterministic synthetic corpus to --out");
  auto* report = app.add_subcommand("report", "render tables, heatmaps and summary.json");

  for (auto* s : {verify, features, select, train_fdnn, eval_fdnn, train_kan, cv_kan, eval_kan, trace, stream, synth,
                  report})
    add_common(s, common);
  for (auto* s : {select, train_kan, cv_kan, eval_kan, trace})
    s->add_option("--segments", segments, "segment directory written by `features`");
  eval_fdnn->add_option("--model", model, "detector checkpoint")->required();
  eval_kan->add_option("--model", model, "regressor checkpoint")->required();
  trace->add_option("--model", model, "regressor checkpoint")->required();
  trace->add_option("--trial", trial, "trial id, e.g. F01_SA01_R01")->required();
  cv_kan->add_option("--grid", grid, "JSON array of KAN config overrides");
  stream->add_option("--fdnn", fdnn_model, "detector checkpoint")->required();
  stream->add_option("--kan", kan_model, "regressor checkpoint")->required();
  stream->add_option("--trial", trial, "trial id")->required();
  stream->add_flag("--realtime", realtime, "pace samples at 5 ms");
  stream->add_flag("--no-gate", no_gate, "evaluate the regressor on every sample");
  report->add_option("--fdnn-eval", fdnn_eval, "fdnn_eval.json from eval-fdnn");
  report->add_option("--kan-eval", kan_eval, "kan_eval.json from eval-kan");

  if (argc <= 1) {
    std::cerr << app.help();
    return 1;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 1;
  }

  try {
    if (*verify) return cmd_verify(common, root);
    if (*features) return cmd_features(common);
    if (*select) return cmd_select(common, segments);
    if (*train_fdnn) return cmd_train_fdnn(common);
    if (*eval_fdnn) return cmd_eval_fdnn(common, model);
    if (*train_kan) return cmd_train_kan(common, segments);
    if (*cv_kan) return cmd_cv_kan(common, segments, grid);
    if (*eval_kan) return cmd_eval_kan(common, model, segments);
    if (*trace) return cmd_trace(common, model, trial, segments);
    if (*stream) return cmd_stream(common, fdnn_model, kan_model, trial, realtime, no_gate);
    if (*synth) return cmd_synth(common);
    if (*report) return cmd_report(common, fdnn_eval, kan_eval);
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
