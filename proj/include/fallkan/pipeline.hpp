#pragma once

// Corpus-level plumbing shared by the command-line tool and the acceptance
// runner: lazy trial loading, per-trial frames and fall segments, detector
// datasets and evaluation, and a synthetic corpus in the SisFall layout.

#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "fallkan/config.hpp"
#include "fallkan/evaluation.hpp"
#include "fallkan/features.hpp"
#include "fallkan/fdnn.hpp"
#include "fallkan/kan.hpp"
#include "fallkan/sisfall.hpp"
#include "fallkan/streaming.hpp"

namespace fallkan {

/// Trial files, annotations and subject profiles. Trials are read on demand
/// so the full corpus never has to sit in memory.
struct Corpus {
  std::map<TrialId, std::filesystem::path> files;
  AnnotationTable annotations;
  SubjectTable subjects;
  CalibrationSpec calibration;

  std::vector<TrialId> trials(bool falls) const {
    std::vector<TrialId> out;
    for (const auto& [id, path] : files)
      if (id.is_fall() == falls) out.push_back(id);
    return out;
  }

  bool annotated(const TrialId& id) const {
    const auto it = annotations.find(id.str());
    return it != annotations.end() && !it->second.empty();
  }

  const SubjectProfile& subject(const TrialId& id) const {
    const auto it = subjects.find(id.subject);
    if (it == subjects.end()) throw IntegrityError("no profile for subject " + id.subject);
    return it->second;
  }

  AnnotatedTrial load(const TrialId& id) const {
    const auto it = files.find(id);
    if (it == files.end()) throw ValidationError("trial " + id.str() + " is not in the corpus");
    const auto records = parse_trial_file(csv::read_file(it->second.string()), id);
    return import_annotations(annotations, id, calibrate(records, calibration));
  }
};

inline Corpus open_corpus(const RunConfig& cfg) {
  if (cfg.data.root.empty()) throw ValidationError("no dataset root given (use --data or data.root)");
  if (!std::filesystem::is_directory(cfg.data.root)) throw IoError(cfg.data.root, "dataset root is not a directory");
  Corpus c;
  c.calibration = cfg.calibration;
  for (const auto& p : list_trial_files(cfg.data.root)) {
    try {
      c.files.emplace(TrialId::parse(p.filename().string()), p);
    } catch (const ValidationError&) {
      // Not a trial file (e.g. a readme); verify reports these.
    }
  }
  if (c.files.empty()) throw ValidationError("no trial files under " + cfg.data.root);
  c.annotations = load_annotations(cfg.data.annotations_path());
  c.subjects = load_subjects(cfg.data.subjects_path());
  std::vector<TrialId> ids;
  for (const auto& [id, p] : c.files) ids.push_back(id);
  require_profiles(c.subjects, ids);
  return c;
}

inline std::vector<FeatureFrame> trial_frames(const AnnotatedTrial& trial, const SubjectProfile& subject,
                                              const RunConfig& cfg) {
  return cfg.features.causal ? causal_features(trial, subject, cfg.filter, cfg.features.derivative_order)
                             : compute_features(trial, subject, cfg.filter, cfg.features.derivative_order);
}

struct SegmentSet {
  std::vector<FallSegment> segments;
  std::vector<std::string> warnings;
};

/// Fall segments for `ids` (falls without a FALL span are skipped with a warning).
inline SegmentSet collect_segments(const Corpus& corpus, const std::vector<TrialId>& ids, const RunConfig& cfg) {
  std::vector<std::optional<FallSegment>> found(ids.size());
  std::vector<std::string> errors(ids.size());
  detail::parallel_for(ids.size(), cfg.resolved_jobs(), [&](std::size_t i) {
    if (!ids[i].is_fall()) return;
    if (!corpus.annotated(ids[i])) {
      errors[i] = ids[i].str() + ": no FALL annotation, skipped";
      return;
    }
    const auto trial = corpus.load(ids[i]);
    const auto frames = trial_frames(trial, corpus.subject(ids[i]), cfg);
    found[i] = extract_fall_segment(trial, frames, cfg.stillness, cfg.filter.accelerometer);
  });
  SegmentSet out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (found[i]) {
      if (!found[i]->stillness_reached) out.warnings.push_back(ids[i].str() + ": no stillness after the fall");
      out.segments.push_back(std::move(*found[i]));
    }
    if (!errors[i].empty()) out.warnings.push_back(errors[i]);
  }
  return out;
}

inline void save_segments(const SegmentSet& set, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::string index = "trial_id,start_index,end_index,stillness_reached,samples\n";
  for (const auto& s : set.segments) {
    csv::write_file((dir / (s.id.str() + ".json")).string(), to_json(s).dump());
    index += s.id.str() + "," + std::to_string(s.start_index) + "," + std::to_string(s.end_index) + "," +
             (s.stillness_reached ? "1" : "0") + "," + std::to_string(s.size()) + "\n";
  }
  csv::write_file((dir / "index.csv").string(), index);
}

inline std::vector<FallSegment> load_segments(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError(dir.string(), "segment directory not found");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<FallSegment> out;
  for (const auto& p : files) {
    try {
      out.push_back(segment_from_json(nlohmann::json::parse(csv::read_file(p.string()))));
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(p.string() + ": " + e.what());
    }
  }
  if (out.empty()) throw ValidationError("no segments in " + dir.string());
  return out;
}

/// Segments whose repetition satisfies `keep`.
template <class Pred>
std::vector<FallSegment> filter_segments(const std::vector<FallSegment>& all, Pred keep) {
  std::vector<FallSegment> out;
  for (const auto& s : all)
    if (keep(s.id.repetition)) out.push_back(s);
  return out;
}

/// Rows of every segment with their time-of-impact targets, for selection.
inline std::pair<Matrix, std::vector<double>> selection_data(std::span<const FallSegment> segments) {
  Matrix x(0, kAllSignals);
  std::vector<double> y;
  for (const auto& s : segments) {
    for (std::size_t r = 0; r < s.rows.rows; ++r) x.append_row(s.rows.row(r));
    y.insert(y.end(), s.tti_ms.begin(), s.tti_ms.end());
  }
  if (x.rows == 0) throw ValidationError("no segment rows for feature selection");
  return {std::move(x), std::move(y)};
}

// ---------------------------------------------------------------------------
// Detector datasets

struct FrameSet {
  std::vector<TrialId> ids;
  std::vector<std::vector<FeatureFrame>> frames;
  std::vector<std::vector<Label>> labels;
};

inline FrameSet load_frames(const Corpus& corpus, const std::vector<TrialId>& ids, const RunConfig& cfg) {
  FrameSet fs;
  fs.ids = ids;
  fs.frames.resize(ids.size());
  fs.labels.resize(ids.size());
  detail::parallel_for(ids.size(), cfg.resolved_jobs(), [&](std::size_t i) {
    const auto trial = corpus.load(ids[i]);
    fs.frames[i] = trial_frames(trial, corpus.subject(ids[i]), cfg);
    fs.labels[i] = trial.labels;
  });
  return fs;
}

inline StandardizationStats fit_frame_standardizer(const FrameSet& fs) {
  Matrix m(0, kFdnnInputs);
  for (const auto& frames : fs.frames)
    for (const auto& f : frames) m.append_row(f.fdnn_view());
  return fit_standardizer(m);
}

inline std::vector<LabeledSequence> to_sequences(const FrameSet& fs, const StandardizationStats& stats) {
  std::vector<LabeledSequence> out;
  out.reserve(fs.ids.size());
  for (std::size_t i = 0; i < fs.ids.size(); ++i) out.push_back(make_sequence(fs.frames[i], fs.labels[i], stats));
  return out;
}

/// Metadata stored with detector checkpoints so a stream can check it runs
/// the same front end.
inline nlohmann::json fdnn_metadata(const RunConfig& cfg) {
  const auto full = to_json(cfg);
  return {{"features", signal_names(kFdnnInputs)},
          {"filter", full.at("filter")},
          {"derivative_order", cfg.features.derivative_order},
          {"causal_features", cfg.features.causal}};
}

/// Per-trial confusion counts of a trained detector.
inline std::vector<TrialMetrics> evaluate_detector(const Corpus& corpus, const std::vector<TrialId>& ids,
                                                   const FdnnCheckpoint& ck, const RunConfig& cfg) {
  std::vector<TrialMetrics> out(ids.size());
  detail::parallel_for(ids.size(), cfg.resolved_jobs(), [&](std::size_t i) {
    const auto trial = corpus.load(ids[i]);
    const auto frames = trial_frames(trial, corpus.subject(ids[i]), cfg);
    const auto seq = make_sequence(frames, trial.labels, ck.standardizer);
    const auto trace = forward(ck.params, seq, Mode::Infer);
    out[i] = {ids[i], confusion(trace.decision, seq.labels)};
  });
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

/// Writes `<dir>/SAxx/<trial>.txt`, `annotations.csv` and `subjects.csv`.
/// Fall timing, subject profiles and noise all derive from `seed`.
inline std::vector<std::string> write_synthetic_corpus(const std::filesystem::path& dir, const SynthOptions& opt,
                                                       const CalibrationSpec& calibration, std::uint64_t seed) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir.string(), "cannot create directory: " + ec.message());
  Rng rng(seed);
  std::vector<std::string> written;
  std::string subjects = "subject_id,age,height_cm,weight_kg,gender\n";
  AnnotationTable annotations;
  for (int s = 1; s <= opt.subjects; ++s) {
    const std::string sid = std::string("SA") + (s < 10 ? "0" : "") + std::to_string(s);
    const int age = static_cast<int>(rng.uniform(19.0, 31.0));
    const int height = static_cast<int>(rng.uniform(150.0, 186.0));
    const int weight = static_cast<int>(rng.uniform(45.0, 91.0));
    subjects += sid + "," + std::to_string(age) + "," + std::to_string(height) + "," + std::to_string(weight) + "," +
                (s % 2 ? "F" : "M") + "\n";
    const auto subject_dir = dir / sid;
    std::filesystem::create_directories(subject_dir, ec);
    if (ec) throw IoError(subject_dir.string(), "cannot create directory: " + ec.message());

    std::vector<std::pair<ActivityCode, SyntheticKind>> acts;
    for (int f = 1; f <= opt.fall_activities; ++f) acts.emplace_back(ActivityCode::fall(f), SyntheticKind::Fall);
    for (int a = 0; a < opt.adl_activities; ++a)
      acts.emplace_back(ActivityCode::adl(5 + a), a % 2 ? SyntheticKind::Sit : SyntheticKind::Walk);
    for (const auto& [code, kind] : acts) {
      for (int r = 1; r <= opt.repetitions; ++r) {
        SyntheticSpec spec;
        spec.kind = kind;
        spec.id.activity = code;
        spec.id.subject = sid;
        spec.id.repetition = r;
        spec.duration_s = opt.duration_s;
        spec.noise_g = opt.noise_g;
        spec.onset_s = rng.uniform(2.0, opt.duration_s / 2.0);
        spec.impact_s = spec.onset_s + 0.005 * std::round(rng.uniform(0.5, 0.9) / 0.005);
        const std::uint64_t trial_seed = rng.next();
        const auto t = generate_synthetic_trial(spec, trial_seed);
        std::vector<RawRecord> records;
        records.reserve(t.trial.samples.size());
        for (const auto& smp : t.trial.samples) records.push_back(to_counts(smp, calibration));
        const auto path = subject_dir / (spec.id.str() + ".txt");
        csv::write_file(path.string(), format_trial_file(records));
        written.push_back(path.string());
        if (t.truth) annotations[spec.id.str()].push_back({t.truth->start, t.truth->end});
      }
    }
  }
  csv::write_file((dir / "annotations.csv").string(), format_annotations(annotations));
  csv::write_file((dir / "subjects.csv").string(), subjects);
  written.push_back((dir / "annotations.csv").string());
  written.push_back((dir / "subjects.csv").string());
  return written;
}

}  // namespace fallkan
