#include <filesystem>
#include <fstream>
#include <random>
#include <unistd.h>

#include <gtest/gtest.h>

#include "fallkan/sisfall.hpp"

namespace fk = fallkan;
namespace fs = std::filesystem;

namespace {

const fk::TrialId kFallId = fk::TrialId::parse("F01_SA01_R01");

std::string zero_rows(std::size_t n) {
  std::string s;
  for (std::size_t i = 0; i < n; ++i) s += "0,0,0,0,0,0,0,0,0\n";
  return s;
}

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("fallkan_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST(TrialId, ParsesFilenamePattern) {
  const auto id = fk::TrialId::parse("D17_SE06_R03.txt");
  EXPECT_EQ(id.activity.str(), "D17");
  EXPECT_FALSE(id.is_fall());
  EXPECT_EQ(id.subject, "SE06");
  EXPECT_EQ(id.repetition, 3);
  EXPECT_EQ(id.str(), "D17_SE06_R03");
}

TEST(TrialId, RejectsOutOfTableCodes) {
  EXPECT_THROW(fk::TrialId::parse("F16_SA01_R01"), fk::ValidationError);
  EXPECT_THROW(fk::TrialId::parse("D20_SA01_R01"), fk::ValidationError);
  EXPECT_THROW(fk::TrialId::parse("F01_SA24_R01"), fk::ValidationError);
  EXPECT_THROW(fk::TrialId::parse("F01_SA01_R06"), fk::ValidationError);
  EXPECT_THROW(fk::TrialId::parse("F01_SA01_R00"), fk::ValidationError);
  EXPECT_EQ(fk::ActivityCode::all().size(), 34u);
}

TEST(ParseTrialFile, ZeroRow) {
  const auto r = fk::parse_trial_file("0,0,0,0,0,0,0,0,0\n", kFallId);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0], fk::RawRecord{});
}

TEST(ParseTrialFile, FifteenSecondTrialHas3000Records) {
  EXPECT_EQ(fk::parse_trial_file(zero_rows(15 * 200), kFallId).size(), 3000u);
}

TEST(ParseTrialFile, AcceptsDistributionRowFormat) {
  const auto r = fk::parse_trial_file("  17,-179,-99,-18,-504,-352,76,-697,-279;\r\n\n", kFallId);
  ASSERT_EQ(r.size(), 1u);
  EXPECT_EQ(r[0], (fk::RawRecord{17, -179, -99, -18, -504, -352, 76, -697, -279}));
}

TEST(ParseTrialFile, MalformedRowReportsLine) {
  try {
    fk::parse_trial_file("0,0,0,0,0,0,0,0,0\n1,2,three,4,5,6,7,8,9\n", kFallId);
    FAIL() << "expected ParseError";
  } catch (const fk::ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
  }
  EXPECT_THROW(fk::parse_trial_file("1,2,3\n", kFallId), fk::ParseError);
  EXPECT_THROW(fk::parse_trial_file("", kFallId), fk::ValidationError);
}

TEST(Calibrate, KnownConversions) {
  const fk::CalibrationSpec spec;
  EXPECT_EQ(fk::calibrate(fk::RawRecord{}, spec).adxl345[0], 0.0);
  fk::RawRecord r{};
  r[0] = 256;
  r[3] = 16384;
  r[6] = 1024;
  const auto s = fk::calibrate(r, spec, 3);
  EXPECT_DOUBLE_EQ(s.adxl345[0], 1.0);
  EXPECT_DOUBLE_EQ(s.itg3200[0], 1000.0);
  EXPECT_DOUBLE_EQ(s.mma8451q[0], 1.0);
  EXPECT_DOUBLE_EQ(s.t, 0.015);
}

TEST(Calibrate, OutOfRangeCountThrows) {
  const fk::CalibrationSpec spec;
  fk::RawRecord r{};
  r[0] = 4096;  // 13-bit signed max is 4095
  EXPECT_THROW(fk::calibrate(r, spec), fk::RangeError);
  r[0] = -4096;
  EXPECT_NO_THROW(fk::calibrate(r, spec));
}

TEST(Calibrate, LinearInCounts) {
  const fk::CalibrationSpec spec;
  std::mt19937 gen(5);
  std::uniform_int_distribution<int> d(-2000, 2000);
  for (int trial = 0; trial < 200; ++trial) {
    fk::RawRecord r{}, r2{};
    for (int k = 0; k < 9; ++k) {
      r[k] = d(gen);
      r2[k] = 2 * r[k];
    }
    const auto a = fk::calibrate(r, spec), b = fk::calibrate(r2, spec);
    for (int k = 0; k < 3; ++k) {
      EXPECT_EQ(b.adxl345[k], 2.0 * a.adxl345[k]);
      EXPECT_EQ(b.itg3200[k], 2.0 * a.itg3200[k]);
      EXPECT_EQ(b.mma8451q[k], 2.0 * a.mma8451q[k]);
    }
  }
}

TEST(Calibrate, PreservesSampleCount) {
  const auto records = fk::parse_trial_file(zero_rows(123), kFallId);
  EXPECT_EQ(fk::calibrate(records, fk::CalibrationSpec{}).size(), 123u);
}

TEST(Subjects, ParsesAndEncodesGender) {
  const auto t = fk::parse_subjects(
      "subject_id,age,height_cm,weight_kg,gender\nSA01,26,165,53,F\nSA02,23,176,58.5,M\n");
  ASSERT_EQ(t.size(), 2u);
  EXPECT_EQ(t.at("SA01").gender, 0.0);
  EXPECT_EQ(t.at("SA02").gender, 1.0);
  EXPECT_EQ(t.at("SA02").weight_kg, 58.5);
}

TEST(Subjects, ThirtyEightProfiles) {
  std::string text = "subject_id,age,height_cm,weight_kg,gender\n";
  for (int i = 1; i <= 23; ++i) text += "SA" + std::string(i < 10 ? "0" : "") + std::to_string(i) + ",25,170,65,M\n";
  for (int i = 1; i <= 15; ++i) text += "SE" + std::string(i < 10 ? "0" : "") + std::to_string(i) + ",65,160,60,F\n";
  EXPECT_EQ(fk::parse_subjects(text).size(), 38u);
}

TEST(Subjects, Errors) {
  EXPECT_THROW(fk::parse_subjects("subject_id,age,height_cm,weight_kg,gender\nSA01,26,165,53,F\nSA01,26,165,53,F\n"),
               fk::ParseError);
  EXPECT_THROW(fk::parse_subjects("subject_id,age,height_cm,weight_kg,gender\nSA01,0,165,53,F\n"), fk::ParseError);
  EXPECT_THROW(fk::parse_subjects("subject_id,age,height_cm,weight_kg,gender\nSA01,20,165,53,X\n"),
               fk::ValidationError);
  const auto t = fk::parse_subjects("subject_id,age,height_cm,weight_kg,gender\nSA01,26,165,53,F\n");
  EXPECT_NO_THROW(fk::require_profiles(t, {kFallId}));
  EXPECT_THROW(fk::require_profiles(t, {fk::TrialId::parse("F01_SA02_R01")}), fk::IntegrityError);
}

TEST(Annotations, SpanArithmetic) {
  const auto table = fk::parse_annotations("trial_id,start_index,end_index\nF01_SA01_R01,1000,1200\n");
  const auto trial = fk::import_annotations(table, kFallId, std::vector<fk::CalibratedSample>(3000));
  EXPECT_EQ(std::count(trial.labels.begin(), trial.labels.end(), fk::Label::Fall), 201);
  EXPECT_EQ(std::count(trial.labels.begin(), trial.labels.end(), fk::Label::Background), 2799);
  EXPECT_EQ(trial.fall_span(), (fk::Span{1000, 1200}));
}

TEST(Annotations, NoSpansIsAllBackground) {
  const auto table = fk::parse_annotations("trial_id,start_index,end_index\n");
  const auto trial = fk::import_annotations(table, kFallId, std::vector<fk::CalibratedSample>(50));
  EXPECT_EQ(std::count(trial.labels.begin(), trial.labels.end(), fk::Label::Fall), 0);
  EXPECT_FALSE(trial.fall_span());
}

TEST(Annotations, Rejections) {
  const std::vector<fk::CalibratedSample> samples(3000);
  auto table = fk::parse_annotations("trial_id,start_index,end_index\nF01_SA01_R01,2900,3100\n");
  EXPECT_THROW(fk::import_annotations(table, kFallId, samples), fk::IntegrityError);
  table = fk::parse_annotations("trial_id,start_index,end_index\nF01_SA01_R01,10,20\nF01_SA01_R01,15,30\n");
  EXPECT_THROW(fk::import_annotations(table, kFallId, samples), fk::IntegrityError);
  table = fk::parse_annotations("trial_id,start_index,end_index\nF01_SA01_R01,10,20\nF01_SA01_R01,40,50\n");
  EXPECT_THROW(fk::import_annotations(table, kFallId, samples), fk::IntegrityError);
  table = fk::parse_annotations("trial_id,start_index,end_index\nD01_SA01_R01,10,20\n");
  EXPECT_THROW(fk::import_annotations(table, fk::TrialId::parse("D01_SA01_R01"), samples), fk::IntegrityError);
}

TEST(Annotations, UpstreamClassesCollapse) {
  const std::vector<std::string> classes{"BACKGROUND", "ALERT", "FALL", "fall", "ALERT", "FALL"};
  const auto spans = fk::normalize_upstream_labels(classes);
  ASSERT_EQ(spans.size(), 2u);
  EXPECT_EQ(spans[0], (fk::Span{2, 3}));
  EXPECT_EQ(spans[1], (fk::Span{5, 5}));
}

TEST(VerifyCorpus, EmptyRootWarns) {
  const auto dir = temp_dir("empty");
  const auto s = fk::verify_corpus(dir);
  EXPECT_EQ(s.total(), 0);
  EXPECT_FALSE(s.warnings.empty());
  fs::remove_all(dir);
}

TEST(VerifyCorpus, CountsAndListsProblems) {
  const auto dir = temp_dir("corpus");
  fs::create_directories(dir / "SA01");
  fs::create_directories(dir / "SE01");
  auto write = [](const fs::path& p, const std::string& text) { std::ofstream(p) << text; };
  write(dir / "SA01" / "F01_SA01_R01.txt", zero_rows(10));
  write(dir / "SA01" / "F01_SA01_R02.txt", zero_rows(10));
  write(dir / "SA01" / "D01_SA01_R01.txt", zero_rows(10));
  write(dir / "SE01" / "D05_SE01_R01.txt", zero_rows(10));
  write(dir / "SE01" / "D05_SE01_R02.txt", "1,2,x\n");
  write(dir / "Readme.txt", "notes");
  const auto a = fk::verify_corpus(dir);
  EXPECT_EQ(a.fall_trials, 2);
  EXPECT_EQ(a.adl_trials, 2);
  EXPECT_EQ(a.total(), 4);
  EXPECT_EQ(a.by_subject.at("SA01"), 3);
  EXPECT_EQ(a.unreadable.size(), 1u);
  EXPECT_EQ(a.extra.size(), 1u);
  // SE01 does not owe falls; SA01 does.
  EXPECT_NE(std::find(a.missing.begin(), a.missing.end(), "F01_SA01_R03"), a.missing.end());
  EXPECT_EQ(std::find(a.missing.begin(), a.missing.end(), "F01_SE01_R01"), a.missing.end());
  const auto b = fk::verify_corpus(dir, 3);
  EXPECT_EQ(b.by_activity, a.by_activity);
  EXPECT_EQ(b.missing, a.missing);
  EXPECT_EQ(b.trials, a.trials);
  fs::remove_all(dir);
}
