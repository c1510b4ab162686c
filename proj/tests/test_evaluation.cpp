#include <algorithm>

#include <gtest/gtest.h>

#include "multipod/multipod.hpp"
#include "test_support.hpp"

using namespace multipod;
using multipod::testing::read_bytes;
using multipod::testing::TempDir;

namespace {

MultiPodConfig small_config() {
  MultiPodConfig cfg;
  cfg.seed = 8;
  cfg.backbone.widths = {4, 6, 8};
  cfg.backbone.blocks_per_stage = 1;
  return cfg;
}

Manifest balanced(int per_stage) {
  Manifest m;
  for (int i = 0; i < per_stage * kNumStages; ++i) {
    SubjectRecord r;
    r.image_path = "r" + std::to_string(i);
    r.stage = stage_from_index(i % kNumStages);
    m.records.push_back(r);
  }
  return m;
}

void force_logits(MultiPodModel<float>& m, std::array<float, 6> bias) {
  auto& f = m.fusion();
  std::fill(f.weight.value.begin(), f.weight.value.end(), 0.0f);
  std::copy(bias.begin(), bias.end(), f.bias.value.begin());
}

struct SyntheticSet {
  TempDir dir;
  Manifest m;
  SyntheticSet() {
    SyntheticConfig sc;
    sc.per_stage_count = 4;
    m = generate_synthetic(sc, dir.path());
  }
};

}  // namespace

TEST(Predict, ForcedLogitsAndTieBreak) {
  auto model = build_model<float>(small_config());
  const ImageBuffer img(77, 35, 1, 90.0f);
  force_logits(model, {0, 0, 9, 0, 0, 0});
  EXPECT_EQ(predict(model, img, 10.0), StageLabel::CS3);
  force_logits(model, {0, 3, 0, 0, 3, 0});
  EXPECT_EQ(predict(model, img, 10.0), StageLabel::CS2);
}

TEST(Predict, RepeatedCallsAgree) {
  SyntheticSet data;
  auto model = build_model<float>(small_config());
  const auto& r = data.m.records[3];
  const StageLabel first = predict(model, data.m, r);
  const auto logits = eval_logits(model, load_record_image(data.m, r), r.age_years);
  for (int i = 0; i < 5; ++i) {
    EXPECT_EQ(predict(model, data.m, r), first);
    EXPECT_TRUE(eval_logits(model, load_record_image(data.m, r), r.age_years) == logits);
  }
}

TEST(Predict, RecordErrorsNameThePath) {
  TempDir dir;
  auto model = build_model<float>(small_config());
  Manifest m;
  m.root = dir.path();
  SubjectRecord r;
  r.image_path = "nowhere.png";
  m.records.push_back(r);
  try {
    evaluate(model, m);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("nowhere.png"), std::string::npos);
  }
  write_png(dir / "big.png", ImageBuffer(100, 40, 1, 10.0f));
  m.records[0].image_path = "big.png";
  try {
    evaluate(model, m);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("ROI"), std::string::npos);
  }
  EXPECT_THROW(evaluate(model, Manifest{}), Error);
}

TEST(Evaluate, PerfectAndConstantPredictors) {
  const Manifest m = balanced(10);
  const EvalReport perfect = evaluate_with([](const SubjectRecord& r) { return r.stage; }, m);
  EXPECT_DOUBLE_EQ(perfect.accuracy, 1.0);
  EXPECT_EQ(perfect.n, 60u);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j)
      EXPECT_EQ(perfect.confusion.counts[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)], i == j ? 10u : 0u);

  const EvalReport cs1 = evaluate_with([](const SubjectRecord&) { return StageLabel::CS1; }, m);
  EXPECT_DOUBLE_EQ(cs1.accuracy, 1.0 / 6.0);
  for (int i = 0; i < 6; ++i) {
    EXPECT_EQ(cs1.confusion.counts[static_cast<std::size_t>(i)][0], cs1.confusion.support(i));
    EXPECT_EQ(cs1.confusion.support(i), 10u);
  }
  ASSERT_TRUE(cs1.per_class_recall[0]);
  EXPECT_DOUBLE_EQ(*cs1.per_class_recall[0], 1.0);
  EXPECT_DOUBLE_EQ(*cs1.per_class_recall[3], 0.0);
}

TEST(Evaluate, RecallIsEmptyForAbsentStages) {
  Manifest m = balanced(1);
  m.records.erase(m.records.begin() + 4);
  const EvalReport r = evaluate_with([](const SubjectRecord& x) { return x.stage; }, m);
  EXPECT_FALSE(r.per_class_recall[4]);
  EXPECT_EQ(report_json(r)["per_class_recall"]["CS5"], nullptr);
}

TEST(Evaluate, TraceIdentityAndRowSums) {
  SyntheticSet data;
  auto model = build_model<float>(small_config());
  const EvalReport rep = evaluate(model, data.m);
  EXPECT_EQ(rep.n, data.m.size());
  EXPECT_EQ(rep.confusion.total(), data.m.size());
  EXPECT_DOUBLE_EQ(rep.accuracy, static_cast<double>(rep.confusion.trace()) / static_cast<double>(rep.n));
  const auto hist = class_histogram(data.m);
  for (int s = 0; s < 6; ++s) EXPECT_EQ(rep.confusion.support(s), hist[static_cast<std::size_t>(s)]);
  EXPECT_EQ(rep.model_config, describe(model.config()));
}

TEST(Evaluate, ConfusionIsAdditiveOverDisjointManifests) {
  SyntheticSet data;
  auto model = build_model<float>(small_config());
  Manifest a = data.m, b = data.m;
  a.records.resize(10);
  b.records.erase(b.records.begin(), b.records.begin() + 10);
  ConfusionMatrix sum = evaluate(model, a).confusion;
  sum += evaluate(model, b).confusion;
  EXPECT_EQ(sum, evaluate(model, data.m).confusion);
}

TEST(Evaluate, InvariantToManifestOrder) {
  SyntheticSet data;
  auto model = build_model<float>(small_config());
  Manifest shuffled = data.m;
  std::reverse(shuffled.records.begin(), shuffled.records.end());
  std::rotate(shuffled.records.begin(), shuffled.records.begin() + 7, shuffled.records.end());
  EXPECT_EQ(evaluate(model, shuffled).confusion, evaluate(model, data.m).confusion);
}

TEST(Evaluate, BufferPathMatchesFilePath) {
  SyntheticSet data;
  auto model = build_model<float>(small_config());
  std::vector<ImageBuffer> buffers;
  for (const auto& r : data.m.records) buffers.push_back(load_record_image(data.m, r));
  EXPECT_EQ(evaluate_buffers(model, buffers, data.m).confusion, evaluate(model, data.m).confusion);
}

TEST(ExportReport, CsvRoundTripAndHeaderOrder) {
  TempDir dir;
  ConfusionMatrix cm;
  Rng rng = make_rng({5});
  for (int i = 0; i < 200; ++i) cm.add(stage_from_index(uniform_int(rng, 0, 5)), stage_from_index(uniform_int(rng, 0, 5)));
  const EvalReport rep = summarize(cm);
  export_report(rep, dir / "out");
  EXPECT_EQ(read_confusion_csv(dir / "out" / "confusion.csv"), cm);
  const std::string csv = read_bytes(dir / "out" / "confusion.csv");
  EXPECT_TRUE(csv.starts_with("true\\pred,CS1,CS2,CS3,CS4,CS5,CS6\n"));
  std::size_t pos = 0;
  for (int s = 0; s < 6; ++s) {
    pos = csv.find("\n" + to_string(stage_from_index(s)) + ",", pos);
    ASSERT_NE(pos, std::string::npos);
  }
  EXPECT_TRUE(std::filesystem::exists(dir / "out" / "confusion.png"));
}

TEST(ExportReport, SummaryAccuracyMatchesCsvRecount) {
  SyntheticSet data;
  auto model = build_model<float>(small_config());
  const EvalReport rep = evaluate(model, data.m);
  export_report(rep, data.dir / "rep", false);
  EXPECT_FALSE(std::filesystem::exists(data.dir / "rep" / "confusion.png"));

  // recount from the CSV text alone
  std::istringstream csv(read_bytes(data.dir / "rep" / "confusion.csv"));
  std::string line;
  std::getline(csv, line);
  std::size_t diag = 0, total = 0;
  for (int i = 0; std::getline(csv, line); ++i) {
    std::istringstream row(line);
    std::string cell;
    std::getline(row, cell, ',');
    for (int j = 0; std::getline(row, cell, ','); ++j) {
      const std::size_t v = std::stoul(cell);
      total += v;
      diag += i == j ? v : 0;
    }
  }
  const auto js = nlohmann::json::parse(read_bytes(data.dir / "rep" / "report.json"));
  EXPECT_EQ(total, data.m.size());
  EXPECT_DOUBLE_EQ(js["accuracy"].get<double>(), static_cast<double>(diag) / static_cast<double>(total));
  EXPECT_EQ(js["n"].get<std::size_t>(), total);
  EXPECT_EQ(js["model_config"].get<std::string>(), describe(model.config()));
}

TEST(ExportReport, MalformedCsvIsRejected) {
  TempDir dir;
  multipod::testing::write_text(dir / "bad.csv", "true\\pred,CS2,CS1,CS3,CS4,CS5,CS6\n");
  EXPECT_THROW(read_confusion_csv(dir / "bad.csv"), Error);
  ConfusionMatrix cm;
  std::string text = confusion_csv(cm);
  text.resize(text.size() / 2);
  multipod::testing::write_text(dir / "cut.csv", text);
  EXPECT_THROW(read_confusion_csv(dir / "cut.csv"), Error);
  multipod::testing::write_text(dir / "file", "x");
  EXPECT_THROW(export_report(summarize(cm), dir / "file"), Error);
}
