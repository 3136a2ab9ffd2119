#pragma once

// Run configuration: every pipeline knob in one JSON document. Missing keys
// take defaults, unknown keys are rejected, and the resolved form is written
// next to every run's outputs.

#include <cstdint>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "fallkan/error.hpp"
#include "fallkan/features.hpp"
#include "fallkan/fdnn.hpp"
#include "fallkan/kan.hpp"
#include "fallkan/orientation.hpp"
#include "fallkan/sisfall.hpp"

namespace fallkan {

struct DataPaths {
  std::string root;
  std::string annotations;  ///< empty: <root>/annotations.csv
  std::string subjects;     ///< empty: <root>/subjects.csv

  std::string annotations_path() const { return annotations.empty() ? root + "/annotations.csv" : annotations; }
  std::string subjects_path() const { return subjects.empty() ? root + "/subjects.csv" : subjects; }
};

struct FeatureOptions {
  int derivative_order = 2;
  /// Causal frames (first-sample filter seed, backward tilt derivative) are
  /// what a live stream sees; batch frames use the initial-window seed and
  /// central differences.
  bool causal = true;
  /// Inputs of the time-of-impact regressor.
  std::vector<std::string> kan_inputs = default_kan_features();
};

struct KanSplit {
  CvPlan plan;
  int validation_repetition = 4;  ///< held out from training by train-kan
};

/// Shape of the corpus written by `synth`.
struct SynthOptions {
  int subjects = 4;
  int fall_activities = 3;  ///< F01..Fk
  int adl_activities = 2;   ///< D05.. upward
  int repetitions = 5;
  double duration_s = 12.0;
  double noise_g = 0.005;
};

struct RunConfig {
  DataPaths data;
  std::string out = "out";
  std::uint64_t seed = 1;
  unsigned jobs = 0;  ///< 0: all hardware threads
  CalibrationSpec calibration;
  FilterConfig filter = [] {
    FilterConfig f;
    f.vertical_axis = {0.0, -1.0, 0.0};  // waist-worn SisFall logger: y points down when standing
    return f;
  }();
  FeatureOptions features;
  SelectionConfig selection;
  StillnessConfig stillness;
  SplitRatios split;
  FdnnConfig fdnn;
  KanConfig kan;
  KanSplit kan_split;
  SynthOptions synth;

  unsigned resolved_jobs() const {
    return jobs ? jobs : std::max(1u, std::thread::hardware_concurrency());
  }

  void validate() const {
    calibration.validate();
    filter.validate();
    fdnn.validate();
    kan.validate();
    kan_split.plan.validate();
    if (features.derivative_order != 1 && features.derivative_order != 2)
      throw ValidationError("features.derivative_order must be 1 or 2");
    const auto& reps = kan_split.plan.tuning_repetitions;
    if (std::find(reps.begin(), reps.end(), kan_split.validation_repetition) == reps.end())
      throw ValidationError("kan_split.validation_repetition must be one of the tuning repetitions");
    if (features.kan_inputs.empty()) throw ValidationError("features.kan_inputs must not be empty");
    for (const auto& f : features.kan_inputs) signal_index(f);
    if (fdnn.input_dim != kFdnnInputs) throw ValidationError("fdnn.input_dim must be 18");
    if (!(stillness.threshold_g > 0.0) || !(stillness.window_ms > 0.0))
      throw ValidationError("stillness window and threshold must be positive");
    if (synth.subjects < 1 || synth.subjects > 23 || synth.fall_activities < 1 || synth.fall_activities > 15 ||
        synth.adl_activities < 0 || synth.adl_activities > 15 || synth.repetitions < 1 || synth.repetitions > 5)
      throw ValidationError("synth corpus shape out of range");
  }
};

namespace detail {

/// Rejects keys not present in the defaults' serialization.
inline void check_keys(const nlohmann::json& given, const nlohmann::json& known, const std::string& where) {
  if (!given.is_object()) throw ValidationError(where + " must be a JSON object");
  for (const auto& [k, v] : given.items()) {
    if (!known.contains(k)) throw ValidationError("unknown config key " + where + "." + k);
    if (known[k].is_object() && v.is_object()) check_keys(v, known[k], where + "." + k);
  }
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& into) {
  if (j.contains(key)) into = j.at(key).get<T>();
}

inline nlohmann::json scale_json(const SensorScale& s) { return {{"range", s.range}, {"resolution", s.resolution}}; }

inline void read_scale(const nlohmann::json& j, const char* key, SensorScale& s) {
  if (!j.contains(key)) return;
  read(j.at(key), "range", s.range);
  read(j.at(key), "resolution", s.resolution);
}

}  // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
  const auto& f = c.filter;
  return {
      {"data", {{"root", c.data.root}, {"annotations", c.data.annotations}, {"subjects", c.data.subjects}}},
      {"out", c.out},
      {"seed", c.seed},
      {"jobs", c.jobs},
      {"calibration",
       {{"adxl345", detail::scale_json(c.calibration.adxl345)},
        {"itg3200", detail::scale_json(c.calibration.itg3200)},
        {"mma8451q", detail::scale_json(c.calibration.mma8451q)}}},
      {"filter",
       {{"gyro_noise", f.gyro_noise},
        {"accel_noise", f.accel_noise},
        {"gate_low", f.gate_low},
        {"gate_high", f.gate_high},
        {"initial_variance", f.initial_variance},
        {"dynamic_start_variance", f.dynamic_start_variance},
        {"init_window_s", f.init_window_s},
        {"vertical_axis", f.vertical_axis},
        {"accelerometer", f.accelerometer == PrimaryAccelerometer::Adxl345 ? "adxl345" : "mma8451q"}}},
      {"features", {{"derivative_order", c.features.derivative_order}, {"causal", c.features.causal},
                    {"kan_inputs", c.features.kan_inputs}}},
      {"selection",
       {{"correlation_threshold", c.selection.correlation_threshold},
        {"correlation_top", c.selection.correlation_top},
        {"mrmr_k", c.selection.mrmr_k},
        {"mrmr_bins", c.selection.mrmr_bins}}},
      {"stillness",
       {{"window_ms", c.stillness.window_ms},
        {"threshold_g", c.stillness.threshold_g},
        {"history_samples", c.stillness.history_samples}}},
      {"split", {{"train", c.split.train}, {"validation", c.split.validation}, {"test", c.split.test}}},
      {"fdnn", c.fdnn},
      {"kan", c.kan},
      {"kan_split",
       {{"tuning_repetitions", c.kan_split.plan.tuning_repetitions},
        {"test_repetition", c.kan_split.plan.test_repetition},
        {"validation_repetition", c.kan_split.validation_repetition}}},
      {"synth",
       {{"subjects", c.synth.subjects},
        {"fall_activities", c.synth.fall_activities},
        {"adl_activities", c.synth.adl_activities},
        {"repetitions", c.synth.repetitions},
        {"duration_s", c.synth.duration_s},
        {"noise_g", c.synth.noise_g}}},
  };
}

/// Overlays `j` on the defaults and validates the result.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig c;
  detail::check_keys(j, to_json(c), "config");
  using detail::read;
  try {
    if (j.contains("data")) {
      const auto& d = j["data"];
      read(d, "root", c.data.root);
      read(d, "annotations", c.data.annotations);
      read(d, "subjects", c.data.subjects);
    }
    read(j, "out", c.out);
    read(j, "seed", c.seed);
    read(j, "jobs", c.jobs);
    if (j.contains("calibration")) {
      const auto& cal = j["calibration"];
      detail::read_scale(cal, "adxl345", c.calibration.adxl345);
      detail::read_scale(cal, "itg3200", c.calibration.itg3200);
      detail::read_scale(cal, "mma8451q", c.calibration.mma8451q);
    }
    if (j.contains("filter")) {
      const auto& f = j["filter"];
      read(f, "gyro_noise", c.filter.gyro_noise);
      read(f, "accel_noise", c.filter.accel_noise);
      read(f, "gate_low", c.filter.gate_low);
      read(f, "gate_high", c.filter.gate_high);
      read(f, "initial_variance", c.filter.initial_variance);
      read(f, "dynamic_start_variance", c.filter.dynamic_start_variance);
      read(f, "init_window_s", c.filter.init_window_s);
      read(f, "vertical_axis", c.filter.vertical_axis);
      if (f.contains("accelerometer")) {
        const auto a = f["accelerometer"].get<std::string>();
        if (a == "adxl345")
          c.filter.accelerometer = PrimaryAccelerometer::Adxl345;
        else if (a == "mma8451q")
          c.filter.accelerometer = PrimaryAccelerometer::Mma8451q;
        else
          throw ValidationError("filter.accelerometer must be adxl345 or mma8451q");
      }
    }
    if (j.contains("features")) {
      read(j["features"], "derivative_order", c.features.derivative_order);
      read(j["features"], "causal", c.features.causal);
      read(j["features"], "kan_inputs", c.features.kan_inputs);
    }
    if (j.contains("selection")) {
      const auto& s = j["selection"];
      read(s, "correlation_threshold", c.selection.correlation_threshold);
      read(s, "correlation_top", c.selection.correlation_top);
      read(s, "mrmr_k", c.selection.mrmr_k);
      read(s, "mrmr_bins", c.selection.mrmr_bins);
    }
    if (j.contains("stillness")) {
      const auto& s = j["stillness"];
      read(s, "window_ms", c.stillness.window_ms);
      read(s, "threshold_g", c.stillness.threshold_g);
      read(s, "history_samples", c.stillness.history_samples);
    }
    if (j.contains("split")) {
      read(j["split"], "train", c.split.train);
      read(j["split"], "validation", c.split.validation);
      read(j["split"], "test", c.split.test);
    }
    if (j.contains("fdnn")) c.fdnn = j["fdnn"].get<FdnnConfig>();
    if (j.contains("kan")) c.kan = j["kan"].get<KanConfig>();
    if (j.contains("kan_split")) {
      const auto& k = j["kan_split"];
      read(k, "tuning_repetitions", c.kan_split.plan.tuning_repetitions);
      read(k, "test_repetition", c.kan_split.plan.test_repetition);
      read(k, "validation_repetition", c.kan_split.validation_repetition);
    }
    if (j.contains("synth")) {
      const auto& s = j["synth"];
      read(s, "subjects", c.synth.subjects);
      read(s, "fall_activities", c.synth.fall_activities);
      read(s, "adl_activities", c.synth.adl_activities);
      read(s, "repetitions", c.synth.repetitions);
      read(s, "duration_s", c.synth.duration_s);
      read(s, "noise_g", c.synth.noise_g);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  const auto text = csv::read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace fallkan
