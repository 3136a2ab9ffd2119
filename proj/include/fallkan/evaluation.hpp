#pragma once

// Sample-level detection metrics, per-subject/per-activity tables, impact
// time error maps, trajectory traces, a synthetic trial generator, and the
// CSV/SVG/JSON report writer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fallkan/csv.hpp"
#include "fallkan/error.hpp"
#include "fallkan/features.hpp"
#include "fallkan/kan.hpp"
#include "fallkan/rng.hpp"
#include "fallkan/sisfall.hpp"

namespace fallkan {

// ---------------------------------------------------------------------------
// Confusion counts and rates

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::uint64_t total() const { return tp + fp + tn + fn; }
  ConfusionCounts& operator+=(const ConfusionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    return *this;
  }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// FALL (1) is the positive class. Steps whose mask entry is 0 are skipped;
/// an empty mask means every step counts.
inline ConfusionCounts confusion(std::span<const std::uint8_t> decisions, std::span<const std::uint8_t> labels,
                                 std::span<const std::uint8_t> mask = {}) {
  if (decisions.size() != labels.size() || (!mask.empty() && mask.size() != labels.size()))
    throw ValidationError("decisions, labels and mask must have equal length");
  ConfusionCounts c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!mask.empty() && mask[i] == 0) continue;
    const bool p = decisions[i] != 0, y = labels[i] != 0;
    if (p && y) ++c.tp;
    else if (p) ++c.fp;
    else if (y) ++c.fn;
    else ++c.tn;
  }
  return c;
}

struct Rates {
  std::optional<double> tpr;  ///< empty when there are no positive samples
  std::optional<double> tnr;  ///< empty when there are no negative samples
};

inline Rates rates(const ConfusionCounts& c) {
  Rates r;
  if (c.tp + c.fn > 0) r.tpr = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  if (c.tn + c.fp > 0) r.tnr = static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
  return r;
}

struct TrialMetrics {
  TrialId id;
  ConfusionCounts counts;
};

// ---------------------------------------------------------------------------
// Subject x activity tables

enum class Metric { Tpr, Tnr };

using Cell = std::optional<double>;

struct MetricTable {
  std::string name;
  std::vector<std::string> subjects;  ///< rows
  std::vector<std::string> columns;   ///< activity codes
  std::vector<std::vector<Cell>> cells;
  std::vector<Cell> column_average;   ///< mean of each column's non-blank cells
  Cell average;                       ///< mean over all non-blank cells
  Cell pooled;                        ///< rate of the summed confusion counts

  Cell at(const std::string& subject, const std::string& column) const {
    const auto r = std::find(subjects.begin(), subjects.end(), subject);
    const auto c = std::find(columns.begin(), columns.end(), column);
    if (r == subjects.end() || c == columns.end()) return std::nullopt;
    return cells[static_cast<std::size_t>(r - subjects.begin())][static_cast<std::size_t>(c - columns.begin())];
  }
};

namespace detail {

inline std::string cell_text(const Cell& c) { return c ? csv::format_double(*c) : std::string(); }

inline Cell mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline std::vector<std::string> codes(bool falls) {
  std::vector<std::string> out;
  const int n = falls ? ActivityCode::kFallCodes : ActivityCode::kAdlCodes;
  for (int i = 1; i <= n; ++i) out.push_back((falls ? ActivityCode::fall(i) : ActivityCode::adl(i)).str());
  return out;
}

}  // namespace detail

/// Header `subject,<codes>`, one row per subject, then an `average` row
/// when there is at least one subject. Blank cells are empty fields.
inline std::string to_csv(const MetricTable& t) {
  std::string out = "subject";
  for (const auto& c : t.columns) out += "," + c;
  out += "\n";
  for (std::size_t r = 0; r < t.subjects.size(); ++r) {
    out += t.subjects[r];
    for (const auto& c : t.cells[r]) out += "," + detail::cell_text(c);
    out += "\n";
  }
  if (!t.subjects.empty()) {
    out += "average";
    for (const auto& c : t.column_average) out += "," + detail::cell_text(c);
    out += "\n";
  }
  return out;
}

/// Cell = mean of the per-repetition rates; trials whose rate is undefined
/// do not contribute. Only trials of the requested kind are used.
inline MetricTable metric_table(std::span<const TrialMetrics> trials, Metric metric, bool falls, std::string name,
                                std::vector<std::string> extra_subjects = {}) {
  MetricTable t;
  t.name = std::move(name);
  t.columns = detail::codes(falls);
  std::map<std::string, std::map<std::string, std::vector<double>>> values;
  std::vector<std::string> subjects = std::move(extra_subjects);
  ConfusionCounts pooled;
  for (const auto& m : trials) {
    if (m.id.is_fall() != falls) continue;
    subjects.push_back(m.id.subject);
    pooled += m.counts;
    const auto r = rates(m.counts);
    const auto v = metric == Metric::Tpr ? r.tpr : r.tnr;
    if (v) values[m.id.subject][m.id.activity.str()].push_back(*v);
  }
  std::sort(subjects.begin(), subjects.end());
  subjects.erase(std::unique(subjects.begin(), subjects.end()), subjects.end());
  t.subjects = subjects;
  std::vector<double> all;
  std::vector<std::vector<double>> per_column(t.columns.size());
  for (const auto& s : t.subjects) {
    std::vector<Cell> row;
    for (std::size_t c = 0; c < t.columns.size(); ++c) {
      Cell cell;
      const auto it = values.find(s);
      if (it != values.end()) {
        const auto jt = it->second.find(t.columns[c]);
        if (jt != it->second.end()) cell = detail::mean_of(jt->second);
      }
      if (cell) {
        all.push_back(*cell);
        per_column[c].push_back(*cell);
      }
      row.push_back(cell);
    }
    t.cells.push_back(std::move(row));
  }
  for (const auto& col : per_column) t.column_average.push_back(detail::mean_of(col));
  t.average = detail::mean_of(all);
  const auto pr = rates(pooled);
  t.pooled = metric == Metric::Tpr ? pr.tpr : pr.tnr;
  return t;
}

struct MetricTables {
  MetricTable fall_tpr, fall_tnr, adl_tnr;
};

inline MetricTables metric_tables(std::span<const TrialMetrics> falls, std::span<const TrialMetrics> adls) {
  std::vector<std::string> fall_subjects;
  for (const auto& m : adls) fall_subjects.push_back(m.id.subject);  // subjects without falls show as blank rows
  return {metric_table(falls, Metric::Tpr, true, "fall_tpr", fall_subjects),
          metric_table(falls, Metric::Tnr, true, "fall_tnr", fall_subjects),
          metric_table(adls, Metric::Tnr, false, "adl_tnr")};
}

// ---------------------------------------------------------------------------
// Time-of-impact errors

struct SegmentPrediction {
  TrialId id;
  std::vector<double> predicted;
  std::vector<double> target;
};

struct RmseHeatmap {
  std::vector<std::string> subjects;
  std::vector<std::string> columns;  ///< F01-F15
  std::vector<std::vector<Cell>> cells;
  Cell global_rmse;      ///< pooled over every sample of every group
  Cell mean_cell_rmse;   ///< mean of the non-blank cells
  std::size_t samples = 0;
};

inline double rmse(std::span<const double> predicted, std::span<const double> target) {
  if (predicted.size() != target.size()) throw ValidationError("prediction and target lengths differ");
  if (predicted.empty()) throw ValidationError("RMSE of an empty set");
  double sq = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) sq += (predicted[i] - target[i]) * (predicted[i] - target[i]);
  return std::sqrt(sq / static_cast<double>(predicted.size()));
}

inline RmseHeatmap rmse_by_group(std::span<const SegmentPrediction> predictions) {
  RmseHeatmap h;
  h.columns = detail::codes(true);
  std::map<std::string, std::map<std::string, std::pair<double, std::size_t>>> acc;
  double total_sq = 0.0;
  for (const auto& p : predictions) {
    if (p.predicted.size() != p.target.size())
      throw ValidationError(p.id.str() + ": prediction and target lengths differ");
    if (!p.id.is_fall()) throw ValidationError(p.id.str() + ": impact-time errors are defined for falls only");
    auto& cell = acc[p.id.subject][p.id.activity.str()];
    for (std::size_t i = 0; i < p.target.size(); ++i) {
      const double e = p.predicted[i] - p.target[i];
      cell.first += e * e;
      total_sq += e * e;
    }
    cell.second += p.target.size();
    h.samples += p.target.size();
  }
  std::vector<double> all;
  for (const auto& [subject, row] : acc) {
    h.subjects.push_back(subject);
    std::vector<Cell> cells;
    for (const auto& code : h.columns) {
      const auto it = row.find(code);
      Cell c;
      if (it != row.end() && it->second.second > 0) {
        c = std::sqrt(it->second.first / static_cast<double>(it->second.second));
        all.push_back(*c);
      }
      cells.push_back(c);
    }
    h.cells.push_back(std::move(cells));
  }
  if (h.samples > 0) h.global_rmse = std::sqrt(total_sq / static_cast<double>(h.samples));
  h.mean_cell_rmse = detail::mean_of(all);
  return h;
}

inline std::string to_csv(const RmseHeatmap& h) {
  std::string out = "subject";
  for (const auto& c : h.columns) out += "," + c;
  out += "\n";
  for (std::size_t r = 0; r < h.subjects.size(); ++r) {
    out += h.subjects[r];
    for (const auto& c : h.cells[r]) out += "," + detail::cell_text(c);
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Trajectories

struct TrajectoryTrace {
  TrialId id;
  std::vector<double> t_ms;  ///< from the segment start
  std::vector<double> truth_ms;
  std::vector<double> predicted_ms;
};

inline TrajectoryTrace trajectory(const KanModel& model, const FallSegment& segment) {
  TrajectoryTrace tr;
  tr.id = segment.id;
  tr.truth_ms = tti_targets(segment.size());
  tr.predicted_ms = predict_segment(model, segment);
  for (std::size_t i = 0; i < segment.size(); ++i) tr.t_ms.push_back(static_cast<double>(i) * kSamplePeriodMs);
  return tr;
}

inline std::string to_csv(const TrajectoryTrace& t) {
  std::string out = "t_ms,tti_true_ms,tti_pred_ms\n";
  for (std::size_t i = 0; i < t.t_ms.size(); ++i)
    out += csv::format_double(t.t_ms[i]) + "," + csv::format_double(t.truth_ms[i]) + "," +
           csv::format_double(t.predicted_ms[i]) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic trials

enum class SyntheticKind { Walk, Sit, Fall };

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::Fall;
  TrialId id = TrialId::parse("F01_SA01_R01");
  double duration_s = 15.0;
  double onset_s = 5.0;
  double impact_s = 5.7;
  double noise_g = 0.005;
  double gyro_noise_dps = 0.5;
  Vec3 up_axis{0.0, -1.0, 0.0};  ///< body axis opposite gravity when upright

  std::size_t samples() const { return static_cast<std::size_t>(std::llround(duration_s * kSampleRateHz)); }
  std::size_t onset_index() const { return static_cast<std::size_t>(std::llround(onset_s * kSampleRateHz)); }
  std::size_t impact_index() const { return static_cast<std::size_t>(std::llround(impact_s * kSampleRateHz)); }

  void validate() const {
    if (!(duration_s > 0.0)) throw ValidationError("synthetic duration must be positive");
    if (!(noise_g >= 0.0) || !(gyro_noise_dps >= 0.0)) throw ValidationError("noise levels must be non-negative");
    const double n = std::hypot(up_axis[0], up_axis[1], up_axis[2]);
    if (std::abs(n - 1.0) > 1e-9) throw ValidationError("up axis must be a unit vector");
    if (kind == SyntheticKind::Fall) {
      if (!(impact_s > onset_s)) throw ValidationError("impact must come after the fall onset");
      if (onset_index() < 1 || impact_index() + 200 > samples())
        throw ValidationError("fall must start after the first sample and leave >= 1 s after impact");
      if (!id.is_fall()) throw ValidationError("a synthetic fall needs an F-code trial id");
    } else if (id.is_fall()) {
      throw ValidationError("a synthetic ADL needs a D-code trial id");
    }
  }
};

struct SyntheticTrial {
  AnnotatedTrial trial;
  std::optional<FallInterval> truth;  ///< [onset, impact] for falls
};

namespace detail {

inline Vec3 perpendicular(const Vec3& u) {
  // Any unit vector orthogonal to u.
  const Vec3 e = std::abs(u[0]) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
  Vec3 v{e[0] - u[0] * (u[0] * e[0] + u[1] * e[1] + u[2] * e[2]),
         e[1] - u[1] * (u[0] * e[0] + u[1] * e[1] + u[2] * e[2]),
         e[2] - u[2] * (u[0] * e[0] + u[1] * e[1] + u[2] * e[2])};
  const double n = std::hypot(v[0], v[1], v[2]);
  return {v[0] / n, v[1] / n, v[2] / n};
}

inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

}  // namespace detail

/// Body pitch angle theta(t) about a fixed body axis; the gravity reaction
/// in body coordinates is cos(theta) * up + sin(theta) * side, scaled by a
/// kind-specific magnitude profile. Gyro rates are consistent with theta.
inline SyntheticTrial generate_synthetic_trial(const SyntheticSpec& spec, std::uint64_t seed) {
  spec.validate();
  constexpr double kPi = std::numbers::pi;
  const std::size_t N = spec.samples();
  const auto onset = spec.onset_index(), impact = spec.impact_index();
  const Vec3 up = spec.up_axis, side = detail::perpendicular(up);
  const Vec3 axis = detail::cross(side, up);  // positive theta rotates up toward side
  Rng rng(seed);

  std::vector<double> theta(N, 0.0), mag(N, 1.0);
  for (std::size_t i = 0; i < N; ++i) {
    const double t = static_cast<double>(i) * kSamplePeriodS;
    switch (spec.kind) {
      case SyntheticKind::Walk:
        mag[i] = 1.0 + 0.25 * std::sin(2 * kPi * 1.8 * t);
        theta[i] = 0.08 * std::sin(2 * kPi * 0.9 * t);
        break;
      case SyntheticKind::Sit: {
        const double a = std::clamp((t - 0.4 * spec.duration_s) / 1.5, 0.0, 1.0);
        theta[i] = 0.35 * (1 - std::cos(kPi * a)) / 2;
        mag[i] = 1.0 + (a > 0.0 && a < 1.0 ? 0.3 * std::sin(2 * kPi * a) : 0.0);
        break;
      }
      case SyntheticKind::Fall:
        if (i < onset) {
          mag[i] = 1.0 + 0.2 * std::sin(2 * kPi * 1.8 * t);
          theta[i] = 0.05 * std::sin(2 * kPi * 0.9 * t);
        } else if (i < impact) {
          const double a = static_cast<double>(i - onset) / static_cast<double>(impact - onset);
          theta[i] = (kPi / 2) * (1 - std::cos(kPi * a)) / 2;
          // Free-fall dip with flailing oscillation.
          mag[i] = 1.0 - 0.6 * std::sin(kPi * a) + 0.25 * std::sin(2 * kPi * 5.0 * t);
        } else {
          theta[i] = kPi / 2;
          mag[i] = 1.0;
        }
        break;
    }
  }
  if (spec.kind == SyntheticKind::Fall) {
    // Impact spike in the samples just before ground contact.
    const double spike[] = {2.0, 3.5, 4.5};
    for (std::size_t k = 0; k < 3 && impact >= 3; ++k) mag[impact - 3 + k] = spike[k];
  }

  SyntheticTrial out;
  out.trial.id = spec.id;
  out.trial.samples.resize(N);
  out.trial.labels.assign(N, Label::Background);
  for (std::size_t i = 0; i < N; ++i) {
    const double c = std::cos(theta[i]), s = std::sin(theta[i]);
    const double rate = (i + 1 < N ? theta[i + 1] - theta[i] : 0.0) / kSamplePeriodS * 180.0 / kPi;
    auto& smp = out.trial.samples[i];
    smp.t = static_cast<double>(i) * kSamplePeriodS;
    for (int k = 0; k < 3; ++k) {
      const double a = mag[i] * (c * up[k] + s * side[k]);
      smp.adxl345[k] = a + spec.noise_g * rng.normal();
      smp.mma8451q[k] = a + spec.noise_g * rng.normal();
      smp.itg3200[k] = rate * axis[k] + spec.gyro_noise_dps * rng.normal();
    }
  }
  if (spec.kind == SyntheticKind::Fall) {
    for (std::size_t i = onset; i <= impact; ++i) out.trial.labels[i] = Label::Fall;
    out.truth = FallInterval{onset, impact, true};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

struct ReportBundle {
  std::vector<TrialMetrics> fall_trials;
  std::vector<TrialMetrics> adl_trials;
  std::vector<SegmentPrediction> tti;
  std::vector<TrajectoryTrace> trajectories;
};

inline constexpr int kSummarySchemaVersion = 1;

namespace detail {

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string hex_color(double r, double g, double b) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(std::lround(255 * std::clamp(r, 0.0, 1.0))),
                static_cast<int>(std::lround(255 * std::clamp(g, 0.0, 1.0))),
                static_cast<int>(std::lround(255 * std::clamp(b, 0.0, 1.0))));
  return buf;
}

/// Heatmap colors. Rates: red (0) through yellow (0.5) to green (1).
/// Errors: white (0) to dark red (the table maximum). Blank cells: grey.
inline std::string heat_color(double v, bool is_rate, double max_value) {
  if (is_rate) {
    const double x = std::clamp(v, 0.0, 1.0);
    return x < 0.5 ? hex_color(0.85, 0.2 + 1.3 * x, 0.2) : hex_color(0.85 - 1.3 * (x - 0.5), 0.85, 0.2);
  }
  const double x = max_value > 0.0 ? std::clamp(v / max_value, 0.0, 1.0) : 0.0;
  return hex_color(1.0 - 0.4 * x, 1.0 - x, 1.0 - x);
}

inline std::string heatmap_svg(const std::string& title, const std::vector<std::string>& rows,
                               const std::vector<std::string>& cols, const std::vector<std::vector<Cell>>& cells,
                               bool is_rate) {
  const double cw = 44, ch = 18, left = 60, top = 40;
  double max_value = 0.0;
  for (const auto& r : cells)
    for (const auto& c : r)
      if (c) max_value = std::max(max_value, *c);
  const double width = left + cw * static_cast<double>(cols.size()) + 10;
  const double height = top + ch * static_cast<double>(rows.size()) + 10;
  std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" + num(width) + "\" height=\"" +
       num(height) + "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  s += "<title>" + xml_escape(title) + "</title>\n";
  s += "<text x=\"4\" y=\"14\" font-size=\"12\">" + xml_escape(title) + "</text>\n";
  for (std::size_t c = 0; c < cols.size(); ++c)
    s += "<text x=\"" + num(left + cw * static_cast<double>(c) + 4) + "\" y=\"" + num(top - 6) + "\">" +
         xml_escape(cols[c]) + "</text>\n";
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const double y = top + ch * static_cast<double>(r);
    s += "<text x=\"4\" y=\"" + num(y + 13) + "\">" + xml_escape(rows[r]) + "</text>\n";
    for (std::size_t c = 0; c < cols.size(); ++c) {
      const auto& v = cells[r][c];
      const double x = left + cw * static_cast<double>(c);
      s += "<rect x=\"" + num(x) + "\" y=\"" + num(y) + "\" width=\"" + num(cw) + "\" height=\"" + num(ch) +
           "\" fill=\"" + (v ? heat_color(*v, is_rate, max_value) : std::string("#d0d0d0")) +
           "\" stroke=\"#ffffff\"/>\n";
      if (v)
        s += "<text x=\"" + num(x + 4) + "\" y=\"" + num(y + 13) + "\">" +
             (is_rate ? num(100.0 * *v) : num(*v)) + "</text>\n";
    }
  }
  s += "</svg>\n";
  return s;
}

inline std::string trajectory_svg(const TrajectoryTrace& t) {
  const double W = 480, H = 280, L = 50, B = 30, T = 30, R = 10;
  double tmax = t.t_ms.empty() ? 1.0 : std::max(t.t_ms.back(), 1.0);
  double ymax = 1.0;
  for (double v : t.truth_ms) ymax = std::max(ymax, v);
  for (double v : t.predicted_ms) ymax = std::max(ymax, v);
  auto px = [&](double v) { return L + (W - L - R) * v / tmax; };
  auto py = [&](double v) { return H - B - (H - B - T) * v / ymax; };
  auto polyline = [&](const std::vector<double>& ys, const char* color) {
    std::string pts;
    for (std::size_t i = 0; i < ys.size(); ++i) pts += (i ? " " : "") + num(px(t.t_ms[i])) + "," + num(py(ys[i]));
    return "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
  };
  std::string s = "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" + num(W) + "\" height=\"" + num(H) +
       "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  s += "<title>time of impact " + xml_escape(t.id.str()) + "</title>\n";
  s += "<line x1=\"" + num(L) + "\" y1=\"" + num(H - B) + "\" x2=\"" + num(W - R) + "\" y2=\"" + num(H - B) +
       "\" stroke=\"#000000\"/>\n";
  s += "<line x1=\"" + num(L) + "\" y1=\"" + num(T) + "\" x2=\"" + num(L) + "\" y2=\"" + num(H - B) +
       "\" stroke=\"#000000\"/>\n";
  s += "<text x=\"" + num(L) + "\" y=\"" + num(H - 8) + "\">t [ms], 0 to " + num(tmax) + "</text>\n";
  s += "<text x=\"4\" y=\"" + num(T - 10) + "\">tti [ms], max " + num(ymax) + "</text>\n";
  s += polyline(t.truth_ms, "#1f77b4");
  s += polyline(t.predicted_ms, "#d62728");
  s += "<text x=\"" + num(W - 150) + "\" y=\"" + num(T) + "\" fill=\"#1f77b4\">ground truth</text>\n";
  s += "<text x=\"" + num(W - 150) + "\" y=\"" + num(T + 14) + "\" fill=\"#d62728\">predicted</text>\n";
  s += "</svg>\n";
  return s;
}

inline nlohmann::json opt(const Cell& c) { return c ? nlohmann::json(*c) : nlohmann::json(nullptr); }

}  // namespace detail

/// Writes fall_tpr/fall_tnr/adl_tnr/rmse_heatmap CSV + SVG, one
/// trajectory_<id>.csv/.svg per trace, and summary.json. Returns the
/// written file names.
inline std::vector<std::string> render_report(const ReportBundle& bundle, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError(out_dir.string(), "cannot create directory: " + ec.message());
  std::vector<std::string> written;
  auto put = [&](const std::string& name, const std::string& text) {
    csv::write_file((out_dir / name).string(), text);
    written.push_back(name);
  };
  const auto tables = metric_tables(bundle.fall_trials, bundle.adl_trials);
  for (const auto* t : {&tables.fall_tpr, &tables.fall_tnr, &tables.adl_tnr}) {
    put(t->name + ".csv", to_csv(*t));
    put(t->name + ".svg", detail::heatmap_svg(t->name, t->subjects, t->columns, t->cells, true));
  }
  const auto heat = rmse_by_group(bundle.tti);
  put("rmse_heatmap.csv", to_csv(heat));
  put("rmse_heatmap.svg", detail::heatmap_svg("rmse_heatmap [ms]", heat.subjects, heat.columns, heat.cells, false));
  for (const auto& tr : bundle.trajectories) {
    put("trajectory_" + tr.id.str() + ".csv", to_csv(tr));
    put("trajectory_" + tr.id.str() + ".svg", detail::trajectory_svg(tr));
  }
  nlohmann::json summary = {
      {"schema_version", kSummarySchemaVersion},
      {"fall_tpr_avg", detail::opt(tables.fall_tpr.average)},
      {"fall_tnr_avg", detail::opt(tables.fall_tnr.average)},
      {"adl_tnr_avg", detail::opt(tables.adl_tnr.average)},
      {"tti_rmse_ms", detail::opt(heat.global_rmse)},
      {"fall_tpr_pooled", detail::opt(tables.fall_tpr.pooled)},
      {"fall_tnr_pooled", detail::opt(tables.fall_tnr.pooled)},
      {"adl_tnr_pooled", detail::opt(tables.adl_tnr.pooled)},
      {"tti_rmse_cell_mean_ms", detail::opt(heat.mean_cell_rmse)},
      {"fall_trials", bundle.fall_trials.size()},
      {"adl_trials", bundle.adl_trials.size()},
      {"tti_samples", heat.samples}};
  put("summary.json", summary.dump(2) + "\n");
  return written;
}

// ---------------------------------------------------------------------------
// Serialization of per-trial metrics (evaluation outputs feed `report`)

inline nlohmann::json to_json(const TrialMetrics& m) {
  return {{"trial", m.id.str()}, {"tp", m.counts.tp}, {"fp", m.counts.fp}, {"tn", m.counts.tn}, {"fn", m.counts.fn}};
}

inline TrialMetrics trial_metrics_from_json(const nlohmann::json& j) {
  try {
    return {TrialId::parse(j.at("trial").get<std::string>()),
            {j.at("tp").get<std::uint64_t>(), j.at("fp").get<std::uint64_t>(), j.at("tn").get<std::uint64_t>(),
             j.at("fn").get<std::uint64_t>()}};
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed trial metrics: ") + e.what());
  }
}

inline nlohmann::json to_json(const SegmentPrediction& p) {
  return {{"trial", p.id.str()}, {"predicted", p.predicted}, {"target", p.target}};
}

inline SegmentPrediction segment_prediction_from_json(const nlohmann::json& j) {
  try {
    return {TrialId::parse(j.at("trial").get<std::string>()), j.at("predicted").get<std::vector<double>>(),
            j.at("target").get<std::vector<double>>()};
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed prediction record: ") + e.what());
  }
}

inline nlohmann::json to_json(const TrajectoryTrace& t) {
  return {{"trial", t.id.str()}, {"t_ms", t.t_ms}, {"truth_ms", t.truth_ms}, {"predicted_ms", t.predicted_ms}};
}

inline TrajectoryTrace trajectory_from_json(const nlohmann::json& j) {
  try {
    return {TrialId::parse(j.at("trial").get<std::string>()), j.at("t_ms").get<std::vector<double>>(),
            j.at("truth_ms").get<std::vector<double>>(), j.at("predicted_ms").get<std::vector<double>>()};
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed trajectory: ") + e.what());
  }
}

}  // namespace fallkan
