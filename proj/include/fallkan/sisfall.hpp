#pragma once

// SisFall corpus ingestion: trial files, subject metadata, FALL annotations,
// ADC calibration and corpus integrity checks.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "fallkan/csv.hpp"
#include "fallkan/error.hpp"

namespace fallkan {

inline constexpr double kSampleRateHz = 200.0;
inline constexpr double kSamplePeriodS = 1.0 / kSampleRateHz;
inline constexpr double kSamplePeriodMs = 5.0;

using Vec3 = std::array<double, 3>;

// ---------------------------------------------------------------------------
// Identifiers

/// One of F01-F15 (falls) or D01-D19 (activities of daily living).
class ActivityCode {
 public:
  static constexpr int kFallCodes = 15;
  static constexpr int kAdlCodes = 19;

  static ActivityCode fall(int number) { return ActivityCode('F', number); }
  static ActivityCode adl(int number) { return ActivityCode('D', number); }

  static ActivityCode parse(std::string_view s) {
    if (s.size() != 3 || (s[0] != 'F' && s[0] != 'D'))
      throw ValidationError("bad activity code '" + std::string(s) + "'");
    const auto n = csv::parse_number<int>(s.substr(1));
    if (!n) throw ValidationError("bad activity code '" + std::string(s) + "'");
    return ActivityCode(s[0], *n);
  }

  bool is_fall() const noexcept { return kind_ == 'F'; }
  int number() const noexcept { return number_; }

  std::string str() const {
    std::string s(1, kind_);
    if (number_ < 10) s += '0';
    return s + std::to_string(number_);
  }

  /// All 34 codes, falls first.
  static std::vector<ActivityCode> all() {
    std::vector<ActivityCode> out;
    for (int i = 1; i <= kFallCodes; ++i) out.push_back(fall(i));
    for (int i = 1; i <= kAdlCodes; ++i) out.push_back(adl(i));
    return out;
  }

  friend auto operator<=>(const ActivityCode&, const ActivityCode&) = default;

 private:
  ActivityCode(char kind, int number) : kind_(kind), number_(number) {
    const int limit = kind == 'F' ? kFallCodes : kAdlCodes;
    if (number < 1 || number > limit)
      throw ValidationError("activity code out of range: " + std::string(1, kind) +
                            std::to_string(number));
  }

  char kind_;
  int number_;
};

inline bool is_valid_subject_id(std::string_view s) {
  if (s.size() != 4 || s[0] != 'S' || (s[1] != 'A' && s[1] != 'E')) return false;
  const auto n = csv::parse_number<int>(s.substr(2));
  if (!n || *n < 1) return false;
  return s[1] == 'A' ? *n <= 23 : *n <= 15;
}

struct TrialId {
  ActivityCode activity = ActivityCode::fall(1);
  std::string subject;
  int repetition = 1;

  /// Parses `<ACT>_<SUBJ>_R<NN>`, optionally with a `.txt` suffix.
  static TrialId parse(std::string_view s) {
    if (s.ends_with(".txt")) s.remove_suffix(4);
    const auto first = s.find('_');
    const auto second = first == std::string_view::npos ? first : s.find('_', first + 1);
    if (second == std::string_view::npos)
      throw ValidationError("bad trial id '" + std::string(s) + "'");
    TrialId id;
    id.activity = ActivityCode::parse(s.substr(0, first));
    id.subject = std::string(s.substr(first + 1, second - first - 1));
    if (!is_valid_subject_id(id.subject))
      throw ValidationError("bad subject id '" + id.subject + "'");
    const auto rep = s.substr(second + 1);
    const auto n = rep.size() >= 2 && rep[0] == 'R' ? csv::parse_number<int>(rep.substr(1))
                                                     : std::nullopt;
    if (!n || *n < 1 || *n > 5) throw ValidationError("bad repetition in '" + std::string(s) + "'");
    id.repetition = *n;
    return id;
  }

  std::string str() const {
    return activity.str() + "_" + subject + "_R" + (repetition < 10 ? "0" : "") +
           std::to_string(repetition);
  }

  bool is_fall() const noexcept { return activity.is_fall(); }

  friend auto operator<=>(const TrialId&, const TrialId&) = default;
};

// ---------------------------------------------------------------------------
// Raw records and calibration

/// ADXL345 x/y/z, ITG3200 x/y/z, MMA8451Q x/y/z, file column order.
using RawRecord = std::array<std::int32_t, 9>;

struct SensorScale {
  double range;    ///< full scale, g or deg/s
  int resolution;  ///< bits

  double counts_per_unit() const { return static_cast<double>(1LL << resolution) / (2.0 * range); }
  std::int64_t min_count() const { return -(1LL << (resolution - 1)); }
  std::int64_t max_count() const { return (1LL << (resolution - 1)) - 1; }
};

struct CalibrationSpec {
  SensorScale adxl345{16.0, 13};
  SensorScale itg3200{2000.0, 16};
  SensorScale mma8451q{8.0, 14};

  void validate() const {
    for (const auto* s : {&adxl345, &itg3200, &mma8451q}) {
      if (!(s->range > 0.0)) throw ValidationError("calibration range must be positive");
      if (s->resolution != 13 && s->resolution != 14 && s->resolution != 16)
        throw ValidationError("calibration resolution must be 13, 14 or 16 bits");
    }
  }
};

struct CalibratedSample {
  Vec3 adxl345{};   ///< g
  Vec3 mma8451q{};  ///< g
  Vec3 itg3200{};   ///< deg/s
  double t = 0.0;   ///< seconds from trial start
};

namespace detail {

inline double convert(std::int32_t counts, const SensorScale& s, const char* sensor) {
  if (counts < s.min_count() || counts > s.max_count())
    throw RangeError(std::string(sensor) + " count " + std::to_string(counts) +
                     " outside signed " + std::to_string(s.resolution) + "-bit range");
  return (2.0 * s.range / static_cast<double>(1LL << s.resolution)) * counts;
}

}  // namespace detail

/// Linear ADC conversion (2 * range / 2^bits) * counts; time = index / 200 Hz.
inline CalibratedSample calibrate(const RawRecord& r, const CalibrationSpec& spec,
                                  std::size_t index = 0) {
  CalibratedSample s;
  for (int k = 0; k < 3; ++k) {
    s.adxl345[k] = detail::convert(r[k], spec.adxl345, "ADXL345");
    s.itg3200[k] = detail::convert(r[3 + k], spec.itg3200, "ITG3200");
    s.mma8451q[k] = detail::convert(r[6 + k], spec.mma8451q, "MMA8451Q");
  }
  s.t = static_cast<double>(index) * kSamplePeriodS;
  return s;
}

inline std::vector<CalibratedSample> calibrate(const std::vector<RawRecord>& records,
                                               const CalibrationSpec& spec) {
  std::vector<CalibratedSample> out;
  out.reserve(records.size());
  for (std::size_t i = 0; i < records.size(); ++i) out.push_back(calibrate(records[i], spec, i));
  return out;
}

/// Inverse of calibrate: nearest counts, saturated at the converter range.
inline RawRecord to_counts(const CalibratedSample& s, const CalibrationSpec& spec) {
  auto enc = [](double v, const SensorScale& sc) {
    const double c = std::round(v * sc.counts_per_unit());
    return static_cast<std::int32_t>(std::clamp(c, static_cast<double>(sc.min_count()), static_cast<double>(sc.max_count())));
  };
  RawRecord r{};
  for (int k = 0; k < 3; ++k) {
    r[k] = enc(s.adxl345[k], spec.adxl345);
    r[3 + k] = enc(s.itg3200[k], spec.itg3200);
    r[6 + k] = enc(s.mma8451q[k], spec.mma8451q);
  }
  return r;
}

/// Distribution layout: comma-separated counts, each row ending in ';'.
inline std::string format_trial_file(const std::vector<RawRecord>& records) {
  std::string out;
  for (const auto& r : records) {
    for (std::size_t k = 0; k < 9; ++k) {
      if (k) out += ',';
      out += std::to_string(r[k]);
    }
    out += ";\n";
  }
  return out;
}

/// One record per non-empty row of 9 comma-separated integers. A trailing ';'
/// (as in the public distribution) is accepted.
inline std::vector<RawRecord> parse_trial_file(std::string_view text, const TrialId& id) {
  std::vector<RawRecord> out;
  for (const auto& line : csv::lines(text)) {
    auto row = line.text;
    if (row.ends_with(';')) row.remove_suffix(1);
    const auto fields = csv::split(row);
    if (fields.size() != 9)
      throw ParseError(line.number, id.str() + ": expected 9 fields, got " +
                                        std::to_string(fields.size()));
    RawRecord r{};
    for (std::size_t k = 0; k < 9; ++k) {
      const auto v = csv::parse_number<std::int32_t>(fields[k]);
      if (!v)
        throw ParseError(line.number,
                         id.str() + ": non-integer field '" + std::string(fields[k]) + "'");
      r[k] = *v;
    }
    out.push_back(r);
  }
  if (out.empty()) throw ValidationError(id.str() + ": empty trial file");
  return out;
}

struct TrialFile {
  TrialId id;
  std::vector<RawRecord> records;
};

inline TrialFile read_trial_file(const std::filesystem::path& path) {
  const auto id = TrialId::parse(path.filename().string());
  return {id, parse_trial_file(csv::read_file(path.string()), id)};
}

// ---------------------------------------------------------------------------
// Subjects

struct SubjectProfile {
  std::string subject_id;
  double age = 0.0;        ///< years
  double height_cm = 0.0;
  double weight_kg = 0.0;
  double gender = 0.0;     ///< F = 0.0, M = 1.0
};

using SubjectTable = std::map<std::string, SubjectProfile>;

inline double encode_gender(std::string_view g) {
  if (g == "F" || g == "f") return 0.0;
  if (g == "M" || g == "m") return 1.0;
  throw ValidationError("gender must be F or M, got '" + std::string(g) + "'");
}

inline SubjectTable parse_subjects(std::string_view text) {
  const auto rows = csv::lines(text);
  if (rows.empty()) throw ValidationError("subject file is empty");
  const auto header = csv::split(rows.front().text);
  const std::vector<std::string_view> expected{"subject_id", "age", "height_cm", "weight_kg",
                                               "gender"};
  if (header != expected)
    throw ParseError(rows.front().number,
                     "expected header subject_id,age,height_cm,weight_kg,gender");
  SubjectTable table;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto f = csv::split(rows[i].text);
    if (f.size() != 5) throw ParseError(rows[i].number, "expected 5 fields");
    SubjectProfile p;
    p.subject_id = std::string(f[0]);
    const auto age = csv::parse_number<double>(f[1]);
    const auto h = csv::parse_number<double>(f[2]);
    const auto w = csv::parse_number<double>(f[3]);
    if (!age || !h || !w) throw ParseError(rows[i].number, "non-numeric subject attribute");
    if (!(*age > 0 && *h > 0 && *w > 0))
      throw ParseError(rows[i].number, "age, height and weight must be positive");
    p.age = *age;
    p.height_cm = *h;
    p.weight_kg = *w;
    p.gender = encode_gender(f[4]);
    if (!table.emplace(p.subject_id, p).second)
      throw ParseError(rows[i].number, "duplicate subject_id " + p.subject_id);
  }
  return table;
}

inline SubjectTable load_subjects(const std::string& path) {
  return parse_subjects(csv::read_file(path));
}

/// Throws IntegrityError naming the first trial whose subject lacks a profile.
inline void require_profiles(const SubjectTable& table, const std::vector<TrialId>& trials) {
  for (const auto& t : trials)
    if (!table.contains(t.subject))
      throw IntegrityError("trial " + t.str() + " has no profile for subject " + t.subject);
}

// ---------------------------------------------------------------------------
// Annotations

enum class Label : std::uint8_t { Background = 0, Fall = 1 };

/// Inclusive, 0-based sample index range.
struct Span {
  std::size_t start = 0;
  std::size_t end = 0;
  friend bool operator==(const Span&, const Span&) = default;
};

using AnnotationTable = std::map<std::string, std::vector<Span>>;

struct AnnotatedTrial {
  TrialId id;
  std::vector<CalibratedSample> samples;
  std::vector<Label> labels;

  std::optional<Span> fall_span() const {
    const auto first = std::find(labels.begin(), labels.end(), Label::Fall);
    if (first == labels.end()) return std::nullopt;
    const auto last = std::find(labels.rbegin(), labels.rend(), Label::Fall);
    return Span{static_cast<std::size_t>(first - labels.begin()),
                static_cast<std::size_t>(labels.rend() - last) - 1};
  }
};

/// Parses `trial_id,start_index,end_index` rows. Multiple rows per trial are
/// kept; they are validated when applied to a trial.
inline AnnotationTable parse_annotations(std::string_view text) {
  const auto rows = csv::lines(text);
  if (rows.empty()) throw ValidationError("annotation file is empty");
  const auto header = csv::split(rows.front().text);
  const std::vector<std::string_view> expected{"trial_id", "start_index", "end_index"};
  if (header != expected)
    throw ParseError(rows.front().number, "expected header trial_id,start_index,end_index");
  AnnotationTable table;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto f = csv::split(rows[i].text);
    if (f.size() != 3) throw ParseError(rows[i].number, "expected 3 fields");
    const auto id = TrialId::parse(f[0]);
    const auto a = csv::parse_number<std::size_t>(f[1]);
    const auto b = csv::parse_number<std::size_t>(f[2]);
    if (!a || !b) throw ParseError(rows[i].number, "bad span index");
    if (*b < *a) throw ParseError(rows[i].number, "span end before start");
    table[id.str()].push_back({*a, *b});
  }
  return table;
}

inline AnnotationTable load_annotations(const std::string& path) {
  return parse_annotations(csv::read_file(path));
}

inline AnnotatedTrial import_annotations(const AnnotationTable& table, const TrialId& id,
                                         std::vector<CalibratedSample> samples) {
  AnnotatedTrial trial{id, std::move(samples), {}};
  trial.labels.assign(trial.samples.size(), Label::Background);
  const auto it = table.find(id.str());
  if (it == table.end() || it->second.empty()) return trial;

  auto spans = it->second;
  if (!id.is_fall()) throw IntegrityError(id.str() + ": FALL span on an ADL trial");
  std::sort(spans.begin(), spans.end(),
            [](const Span& a, const Span& b) { return a.start < b.start; });
  for (std::size_t i = 1; i < spans.size(); ++i)
    if (spans[i].start <= spans[i - 1].end)
      throw IntegrityError(id.str() + ": overlapping FALL spans");
  if (spans.size() > 1) throw IntegrityError(id.str() + ": more than one FALL span");
  const auto& s = spans.front();
  if (s.end >= trial.samples.size())
    throw IntegrityError(id.str() + ": span [" + std::to_string(s.start) + "," +
                         std::to_string(s.end) + "] outside " +
                         std::to_string(trial.samples.size()) + " samples");
  std::fill(trial.labels.begin() + static_cast<std::ptrdiff_t>(s.start),
            trial.labels.begin() + static_cast<std::ptrdiff_t>(s.end) + 1, Label::Fall);
  return trial;
}

inline AnnotatedTrial import_annotations(const std::string& path, const TrialId& id,
                                         std::vector<CalibratedSample> samples) {
  return import_annotations(load_annotations(path), id, std::move(samples));
}

/// Collapses upstream per-sample class names into FALL spans. Only "FALL"
/// (case-insensitive) is kept; any other class becomes background.
inline std::vector<Span> normalize_upstream_labels(const std::vector<std::string>& classes) {
  std::vector<Span> spans;
  const auto is_fall = [](const std::string& c) {
    std::string u = c;
    std::transform(u.begin(), u.end(), u.begin(), [](unsigned char ch) { return std::toupper(ch); });
    return csv::trim(u) == "FALL";
  };
  for (std::size_t i = 0; i < classes.size(); ++i) {
    if (!is_fall(classes[i])) continue;
    if (!spans.empty() && spans.back().end + 1 == i)
      spans.back().end = i;
    else
      spans.push_back({i, i});
  }
  return spans;
}

inline std::string format_annotations(const AnnotationTable& table) {
  std::string out = "trial_id,start_index,end_index\n";
  for (const auto& [id, spans] : table)
    for (const auto& s : spans)
      out += id + "," + std::to_string(s.start) + "," + std::to_string(s.end) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Corpus

/// Repetitions recorded per activity in the public distribution (D01-D04 are
/// single long recordings).
inline int expected_repetitions(const ActivityCode& a) {
  return (!a.is_fall() && a.number() <= 4) ? 1 : 5;
}

inline constexpr int kSisfallAdlTrials = 2706;
inline constexpr int kSisfallFallTrials = 1798;
inline constexpr int kSisfallAdlTestSequences = 2701;

struct CorpusSummary {
  int adl_trials = 0;
  int fall_trials = 0;
  std::map<std::string, int> by_activity;
  std::map<std::string, int> by_subject;
  std::vector<TrialId> trials;             ///< sorted
  std::vector<std::string> unreadable;     ///< path: reason
  std::vector<std::string> extra;          ///< files not matching the naming pattern
  std::vector<std::string> missing;        ///< expected trial ids not found
  std::vector<std::string> warnings;

  int total() const { return adl_trials + fall_trials; }
};

namespace detail {

template <class Fn>
void parallel_for(std::size_t n, unsigned jobs, Fn&& fn) {
  if (jobs <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  const unsigned workers = std::min<unsigned>(jobs, static_cast<unsigned>(n));
  for (unsigned w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
  for (auto& t : pool) t.join();
}

}  // namespace detail

/// Lists trial files below `root` (recursively), sorted by path.
inline std::vector<std::filesystem::path> list_trial_files(const std::filesystem::path& root) {
  std::vector<std::filesystem::path> files;
  std::error_code ec;
  if (!std::filesystem::is_directory(root, ec)) return files;
  for (auto it = std::filesystem::recursive_directory_iterator(root, ec);
       !ec && it != std::filesystem::recursive_directory_iterator(); it.increment(ec)) {
    if (it->is_regular_file() && it->path().extension() == ".txt") files.push_back(it->path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

/// Counts trials by class and subject. Unreadable or malformed files are
/// listed rather than fatal; missing repetitions produce warnings.
inline CorpusSummary verify_corpus(const std::filesystem::path& root, unsigned jobs = 1) {
  CorpusSummary summary;
  const auto files = list_trial_files(root);
  if (files.empty()) {
    summary.warnings.push_back("no trial files found under " + root.string());
    return summary;
  }

  std::vector<std::optional<TrialId>> ids(files.size());
  std::vector<std::string> errors(files.size());
  detail::parallel_for(files.size(), jobs, [&](std::size_t i) {
    try {
      ids[i] = TrialId::parse(files[i].filename().string());
    } catch (const ValidationError&) {
      return;
    }
    try {
      (void)parse_trial_file(csv::read_file(files[i].string()), *ids[i]);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });

  for (std::size_t i = 0; i < files.size(); ++i) {
    if (!ids[i]) {
      // Non-trial .txt files (e.g. a readme) are reported, not counted.
      summary.extra.push_back(files[i].string());
      continue;
    }
    if (!errors[i].empty()) {
      summary.unreadable.push_back(files[i].string() + ": " + errors[i]);
      continue;
    }
    const auto& id = *ids[i];
    summary.trials.push_back(id);
    (id.is_fall() ? summary.fall_trials : summary.adl_trials) += 1;
    summary.by_activity[id.activity.str()] += 1;
    summary.by_subject[id.subject] += 1;
  }
  std::sort(summary.trials.begin(), summary.trials.end());
  const auto dup = std::adjacent_find(summary.trials.begin(), summary.trials.end());
  if (dup != summary.trials.end())
    summary.warnings.push_back("duplicate trial " + dup->str());

  for (const auto& [subject, count] : summary.by_subject) {
    (void)count;
    // Elderly subjects other than SE06 recorded ADLs only.
    const bool does_falls = subject[1] == 'A' || subject == "SE06";
    for (const auto& code : ActivityCode::all()) {
      if (code.is_fall() && !does_falls) continue;
      for (int rep = 1; rep <= expected_repetitions(code); ++rep) {
        TrialId id{code, subject, rep};
        if (!std::binary_search(summary.trials.begin(), summary.trials.end(), id))
          summary.missing.push_back(id.str());
      }
    }
  }
  if (!summary.missing.empty())
    summary.warnings.push_back(std::to_string(summary.missing.size()) +
                               " expected trials missing");
  return summary;
}

}  // namespace fallkan
