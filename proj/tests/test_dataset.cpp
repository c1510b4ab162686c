#include <algorithm>
#include <numeric>

#include <gtest/gtest.h>

#include "multipod/dataset.hpp"
#include "test_support.hpp"

using namespace multipod;
using multipod::testing::TempDir;
using multipod::testing::write_text;

namespace {

std::string manifest_text(const std::vector<std::string>& rows) {
  std::string s = std::string(kManifestHeader) + "\n";
  for (const auto& r : rows) s += r + "\n";
  return s;
}

Manifest make_manifest(const std::vector<int>& per_stage, std::uint64_t tag = 0) {
  Manifest m;
  int id = 0;
  for (int s = 0; s < kNumStages; ++s) {
    for (int i = 0; i < per_stage[static_cast<std::size_t>(s)]; ++i, ++id) {
      SubjectRecord r;
      r.image_path = "img_" + std::to_string(tag) + "_" + std::to_string(id) + ".png";
      r.sex = id % 3 == 0 ? Sex::Male : Sex::Female;
      r.age_years = 8.0 + s;
      r.stage = stage_from_index(s);
      m.records.push_back(r);
    }
  }
  return m;
}

std::vector<std::string> sorted_paths(const Manifest& m) {
  std::vector<std::string> out;
  for (const auto& r : m.records) out.push_back(r.image_path);
  std::sort(out.begin(), out.end());
  return out;
}

// Lower-border concavity of body k measured from the rendered pixels:
// per-column foreground extent inside the body's band, then max - min over
// the body's columns less the two antialiased columns at each side.
double measured_concavity(const ImageBuffer& img, int k) {
  const auto [lo_it, hi_it] = std::minmax_element(img.data.begin(), img.data.end());
  const double bg = *lo_it, fg = *hi_it;
  const int offset = patch_offsets()[static_cast<std::size_t>(k)];
  std::vector<double> extent(static_cast<std::size_t>(img.width), 0.0);
  for (int c = 0; c < img.width; ++c)
    for (int r = offset + 7; r <= offset + 28; ++r)
      extent[static_cast<std::size_t>(c)] += (img.at(r, c) - bg) / (fg - bg);
  const double top = *std::max_element(extent.begin(), extent.end());
  std::vector<double> body;
  for (double e : extent)
    if (e >= 0.5 * top) body.push_back(e);
  if (body.size() < 6) return 0.0;
  const auto [lo, hi] = std::minmax_element(body.begin() + 2, body.end() - 2);
  return *hi - *lo;
}

}  // namespace

TEST(StageLabel, SixOrderedValues) {
  ASSERT_EQ(kAllStages.size(), 6u);
  for (int i = 0; i < kNumStages; ++i) {
    EXPECT_EQ(stage_index(stage_from_index(i)), i);
    EXPECT_EQ(parse_stage(to_string(stage_from_index(i))), stage_from_index(i));
  }
  EXPECT_LT(stage_index(StageLabel::CS1), stage_index(StageLabel::CS6));
  EXPECT_FALSE(parse_stage("CS7"));
  EXPECT_FALSE(parse_stage("CS0"));
  EXPECT_THROW(stage_from_index(6), Error);
}

TEST(LoadManifest, OneRowPerStage) {
  TempDir dir;
  std::vector<std::string> rows;
  for (int s = 1; s <= 6; ++s) {
    rows.push_back("a" + std::to_string(s) + ".png,F,1" + std::to_string(s) + ",CS" +
                   std::to_string(s) + ",,,,");
  }
  write_text(dir / "m.csv", manifest_text(rows));
  const Manifest m = load_manifest(dir / "m.csv");
  ASSERT_EQ(m.size(), 6u);
  for (std::size_t c : class_histogram(m)) EXPECT_EQ(c, 1u);
  EXPECT_EQ(m.records[2].image_path, "a3.png");
  EXPECT_DOUBLE_EQ(m.records[2].age_years, 13.0);
  EXPECT_FALSE(m.records[0].roi);
}

TEST(LoadManifest, UnknownStageNamesRow) {
  TempDir dir;
  write_text(dir / "m.csv", manifest_text({"a.png,F,10,CS1,,,,", "b.png,M,11,CS7,,,,"}));
  try {
    load_manifest(dir / "m.csv");
    FAIL() << "expected an error";
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("stage"), std::string::npos) << msg;
    EXPECT_NE(msg.find("CS7"), std::string::npos) << msg;
  }
}

TEST(LoadManifest, ErrorPaths) {
  TempDir dir;
  EXPECT_THROW(load_manifest(dir / "missing.csv"), Error);

  write_text(dir / "hdr.csv", "path,sex,age,stage\n");
  EXPECT_THROW(load_manifest(dir / "hdr.csv"), Error);

  write_text(dir / "age.csv", manifest_text({"a.png,F,ten,CS1,,,,"}));
  try {
    load_manifest(dir / "age.csv");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("age_years"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }

  write_text(dir / "fields.csv", manifest_text({"a.png,F,10,CS1"}));
  EXPECT_THROW(load_manifest(dir / "fields.csv"), Error);

  write_text(dir / "sex.csv", manifest_text({"a.png,X,10,CS1,,,,"}));
  EXPECT_THROW(load_manifest(dir / "sex.csv"), Error);

  write_text(dir / "dup.csv", manifest_text({"a.png,F,10,CS1,,,,", "a.png,M,12,CS2,,,,"}));
  EXPECT_THROW(load_manifest(dir / "dup.csv"), Error);

  write_text(dir / "roi.csv", manifest_text({"a.png,F,10,CS1,1,2,,"}));
  EXPECT_THROW(load_manifest(dir / "roi.csv"), Error);
}

TEST(LoadManifest, RoiAndAgeWarnings) {
  TempDir dir;
  write_text(dir / "m.csv", manifest_text({"a.png,F,2.5,CS1,3,4,50,100", "b.png,M,12,CS2,,,,"}));
  std::vector<std::string> warnings;
  const Manifest m = load_manifest(dir / "m.csv", &warnings);
  ASSERT_TRUE(m.records[0].roi);
  EXPECT_EQ(*m.records[0].roi, (Rect{3, 4, 50, 100}));
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(LoadManifest, SaveRoundTrip) {
  TempDir dir;
  Manifest m = make_manifest({2, 1, 1, 1, 1, 1});
  m.records[0].roi = Rect{1, 2, 3, 4};
  m.records[1].age_years = 12.345678901234;
  save_manifest(m, dir / "m.csv");
  const Manifest back = load_manifest(dir / "m.csv");
  EXPECT_EQ(back.records, m.records);
}

TEST(FilterBySex, Counts) {
  Manifest m;
  for (int i = 0; i < 5; ++i) {
    SubjectRecord r;
    r.image_path = std::to_string(i);
    r.sex = i < 3 ? Sex::Female : Sex::Male;
    m.records.push_back(r);
  }
  EXPECT_EQ(filter_by_sex(m, Sex::Female).size(), 3u);
  EXPECT_EQ(filter_by_sex(m, Sex::Male).records.front().image_path, "3");

  Manifest males = filter_by_sex(m, Sex::Male);
  EXPECT_TRUE(filter_by_sex(males, Sex::Female).empty());
}

TEST(FilterBySex, AlternatingSyntheticMatchesLinearScan) {
  TempDir dir;
  SyntheticConfig cfg;
  cfg.per_stage_count = 2;
  const Manifest m = generate_synthetic(cfg, dir.path());
  Manifest first10;
  first10.records.assign(m.records.begin(), m.records.begin() + 10);
  std::size_t males = 0;
  for (const auto& r : first10.records) males += r.sex == Sex::Male ? 1 : 0;
  const Manifest got = filter_by_sex(first10, Sex::Male);
  EXPECT_EQ(got.size(), males);
  EXPECT_EQ(got.size(), 4u);  // records 6..9 belong to replica 1
  for (const auto& r : got.records) EXPECT_EQ(r.sex, Sex::Male);
}

TEST(ClassHistogram, EmptyAndFullDataset) {
  EXPECT_EQ(class_histogram(Manifest{}), (StageHistogram{0, 0, 0, 0, 0, 0}));
  const Manifest full = make_manifest({153, 182, 174, 159, 167, 177});
  const StageHistogram h = class_histogram(full);
  EXPECT_EQ(h, (StageHistogram{153, 182, 174, 159, 167, 177}));
  EXPECT_EQ(std::accumulate(h.begin(), h.end(), std::size_t{0}), 1012u);
}

TEST(StratifiedSplit, ExactEightyTwenty) {
  const Manifest m = make_manifest({100, 100, 100, 100, 100, 100});
  for (std::uint64_t seed : {0ull, 1ull, 99ull}) {
    const auto [train, test] = stratified_split(m, 0.8, seed);
    for (std::size_t c : class_histogram(train)) EXPECT_EQ(c, 80u);
    for (std::size_t c : class_histogram(test)) EXPECT_EQ(c, 20u);
  }
}

TEST(StratifiedSplit, RoundingOf153) {
  const Manifest m = make_manifest({153, 0, 0, 0, 0, 0});
  const auto [train, test] = stratified_split(m, 0.8, 3);
  // counting oracle: 0.8 * 153 = 122.4, nearest integer 122
  std::size_t n_train = 0;
  for (const auto& r : train.records) n_train += r.stage == StageLabel::CS1 ? 1 : 0;
  EXPECT_EQ(n_train, 122u);
  EXPECT_EQ(test.size(), 153u - 122u);
  EXPECT_EQ(stratified_train_count(5, 0.5), 3u);  // exact half goes to train
}

TEST(StratifiedSplit, DeterministicAndSeedSensitive) {
  const Manifest m = make_manifest({20, 20, 20, 20, 20, 20});
  const auto a = stratified_split(m, 0.7, 11);
  const auto b = stratified_split(m, 0.7, 11);
  const auto c = stratified_split(m, 0.7, 12);
  EXPECT_EQ(a.first.records, b.first.records);
  EXPECT_EQ(a.second.records, b.second.records);
  EXPECT_NE(a.first.records, c.first.records);
}

TEST(StratifiedSplit, PartitionAndHistogramIdentity) {
  const Manifest m = make_manifest({153, 182, 174, 159, 167, 177});
  for (double f : {0.1, 0.5, 0.8, 0.93}) {
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
      const auto [train, test] = stratified_split(m, f, seed);
      Manifest both = train;
      both.records.insert(both.records.end(), test.records.begin(), test.records.end());
      EXPECT_EQ(sorted_paths(both), sorted_paths(m));

      const auto ht = class_histogram(train), hs = class_histogram(test), hm = class_histogram(m);
      for (std::size_t s = 0; s < hm.size(); ++s) {
        EXPECT_EQ(ht[s] + hs[s], hm[s]);
        EXPECT_LE(std::abs(static_cast<double>(ht[s]) - f * static_cast<double>(hm[s])), 1.0);
      }
    }
  }
}

TEST(StratifiedSplit, Errors) {
  EXPECT_THROW(stratified_split(make_manifest({1, 3, 0, 0, 0, 0}), 0.5, 1), Error);
  EXPECT_THROW(stratified_split(make_manifest({4, 4, 4, 4, 4, 4}), 0.0, 1), Error);
  EXPECT_THROW(stratified_split(make_manifest({4, 4, 4, 4, 4, 4}), 1.0, 1), Error);
}

TEST(GenerateSynthetic, OnePerStageMonotoneParameters) {
  TempDir dir;
  SyntheticConfig cfg;
  cfg.per_stage_count = 1;
  cfg.noise_level = 0.0;
  const Manifest m = generate_synthetic(cfg, dir.path());
  ASSERT_EQ(m.size(), 6u);
  for (int s = 0; s < kNumStages; ++s) EXPECT_EQ(m.records[static_cast<std::size_t>(s)].stage, stage_from_index(s));
  EXPECT_GT(synthetic_concavity_depth(StageLabel::CS6), synthetic_concavity_depth(StageLabel::CS1));
  for (const auto& r : m.records) {
    const ImageBuffer img = read_png(m.resolve(r));
    EXPECT_EQ(img.height, 77);
    EXPECT_EQ(img.width, 35);
    EXPECT_EQ(img.channels, 1);
  }
}

TEST(GenerateSynthetic, MeasuredConcavityIncreasesWithStage) {
  for (std::uint64_t seed : {1ull, 7ull, 42ull}) {
    TempDir dir;
    SyntheticConfig cfg;
    cfg.per_stage_count = 1;
    cfg.noise_level = 0.0;
    cfg.seed = seed;
    const Manifest m = generate_synthetic(cfg, dir.path());
    double prev = -1.0;
    for (const auto& r : m.records) {
      const ImageBuffer img = read_png(m.resolve(r));
      double depth = 0.0;
      for (int k = 0; k < kNumPatches; ++k) depth += measured_concavity(img, k) / kNumPatches;
      EXPECT_GT(depth, prev) << "seed " << seed << " stage " << to_string(r.stage);
      prev = depth;
    }
  }
}

TEST(GenerateSynthetic, ByteIdenticalForSameConfig) {
  TempDir a, b;
  SyntheticConfig cfg;
  cfg.per_stage_count = 3;
  cfg.seed = 1234;
  const Manifest ma = generate_synthetic(cfg, a.path());
  const Manifest mb = generate_synthetic(cfg, b.path());
  EXPECT_EQ(ma.records, mb.records);
  EXPECT_EQ(multipod::testing::read_bytes(a / "manifest.csv"),
            multipod::testing::read_bytes(b / "manifest.csv"));
  for (const auto& r : ma.records) {
    EXPECT_EQ(multipod::testing::read_bytes(ma.resolve(r)),
              multipod::testing::read_bytes(mb.resolve(r)))
        << r.image_path;
  }
  cfg.seed = 1235;
  TempDir c;
  const Manifest mc = generate_synthetic(cfg, c.path());
  EXPECT_NE(multipod::testing::read_bytes(ma.resolve(ma.records[0])),
            multipod::testing::read_bytes(mc.resolve(mc.records[0])));
}

TEST(GenerateSynthetic, AgeIntervals) {
  TempDir dir;
  SyntheticConfig cfg;
  cfg.per_stage_count = 100;
  cfg.noise_level = 0.0;
  cfg.age_model = AgeModel{6.0, 2.0, 1.0};
  const Manifest m = generate_synthetic(cfg, dir.path());
  for (const auto& r : m.records) {
    const double lo = 6.0 + 2.0 * stage_index(r.stage);
    EXPECT_GE(r.age_years, lo);
    EXPECT_LT(r.age_years, lo + 1.0);
    EXPECT_GE(r.age_years, 6.0);
    EXPECT_LE(r.age_years, 18.0);
  }
}

TEST(GenerateSynthetic, ManifestRoundTrip600) {
  TempDir dir;
  SyntheticConfig cfg;
  cfg.per_stage_count = 100;
  const Manifest m = generate_synthetic(cfg, dir.path());
  const Manifest back = load_manifest(dir / "manifest.csv");
  ASSERT_EQ(back.size(), 600u);
  EXPECT_EQ(back.records, m.records);
  for (std::size_t c : class_histogram(back)) EXPECT_EQ(c, 100u);
}

TEST(GenerateSynthetic, RoiModeCropsBackToCanonical) {
  TempDir dir;
  SyntheticConfig cfg;
  cfg.per_stage_count = 1;
  cfg.noise_level = 0.0;
  cfg.with_roi = true;
  const Manifest m = generate_synthetic(cfg, dir.path());
  for (const auto& r : m.records) {
    ASSERT_TRUE(r.roi);
    const ImageBuffer img = read_png(m.resolve(r));
    EXPECT_EQ(img.height, 154);
    EXPECT_EQ(img.width, 70);
    const ImageBuffer roi = preprocess(img, r.roi);
    EXPECT_EQ(roi.height, 77);
    EXPECT_EQ(roi.width, 35);
    // the bright distractor band lies outside the ROI
    EXPECT_LT(*std::max_element(roi.data.begin(), roi.data.end()), 225.0f);
  }
}

TEST(GenerateSynthetic, RejectsBadConfigAndUnwritableDir) {
  SyntheticConfig cfg;
  cfg.per_stage_count = 0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg.per_stage_count = 1;
  cfg.image_height = 20;
  EXPECT_THROW(cfg.validate(), Error);
  cfg.image_height = 77;
  TempDir dir;
  write_text(dir / "file", "x");
  EXPECT_THROW(generate_synthetic(cfg, dir / "file"), Error);
}

TEST(Dataset, RepeatedCallsAgreeBitExactly) {
  TempDir dir;
  SyntheticConfig cfg;
  cfg.per_stage_count = 4;
  const Manifest m = generate_synthetic(cfg, dir.path());
  EXPECT_EQ(filter_by_sex(m, Sex::Female).records, filter_by_sex(m, Sex::Female).records);
  EXPECT_EQ(class_histogram(m), class_histogram(m));
  EXPECT_EQ(stratified_split(m, 0.5, 9).first.records, stratified_split(m, 0.5, 9).first.records);
}
