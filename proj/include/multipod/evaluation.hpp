#pragma once

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "multipod/checkpoint.hpp"
#include "multipod/core.hpp"
#include "multipod/dataset.hpp"
#include "multipod/model.hpp"
#include "multipod/pipeline.hpp"

namespace multipod {

/// Reads a record's image and runs the deterministic eval preprocessing
/// (ROI crop when present, resize to 77x35). Errors name the file.
inline ImageBuffer load_record_image(const Manifest& m, const SubjectRecord& r) {
  const auto path = m.resolve(r);
  try {
    return preprocess(read_png(path), r.roi);
  } catch (const Error& e) {
    throw Error("record '" + path.string() + "': " + e.what());
  }
}

/// Rows are the true stage, columns the predicted stage.
struct ConfusionMatrix {
  std::array<std::array<std::size_t, kNumStages>, kNumStages> counts{};

  void add(StageLabel truth, StageLabel predicted) {
    ++counts[static_cast<std::size_t>(stage_index(truth))]
            [static_cast<std::size_t>(stage_index(predicted))];
  }
  std::size_t total() const {
    std::size_t t = 0;
    for (const auto& row : counts)
      for (std::size_t v : row) t += v;
    return t;
  }
  std::size_t trace() const {
    std::size_t t = 0;
    for (std::size_t i = 0; i < kNumStages; ++i) t += counts[i][i];
    return t;
  }
  std::size_t support(int stage) const {
    std::size_t t = 0;
    for (std::size_t v : counts[static_cast<std::size_t>(stage)]) t += v;
    return t;
  }
  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    for (std::size_t i = 0; i < kNumStages; ++i)
      for (std::size_t j = 0; j < kNumStages; ++j) counts[i][j] += o.counts[i][j];
    return *this;
  }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

struct EvalReport {
  double accuracy = 0.0;
  /// Row-normalized diagonal; empty for stages absent from the manifest.
  std::array<std::optional<double>, kNumStages> per_class_recall{};
  ConfusionMatrix confusion;
  std::size_t n = 0;
  std::string model_config;
  std::uint64_t seed = 0;
  int epoch = 0;
};

inline EvalReport summarize(const ConfusionMatrix& cm) {
  EvalReport r;
  r.confusion = cm;
  r.n = cm.total();
  r.accuracy = r.n == 0 ? 0.0 : static_cast<double>(cm.trace()) / static_cast<double>(r.n);
  for (int s = 0; s < kNumStages; ++s) {
    const std::size_t sup = cm.support(s);
    if (sup > 0) {
      r.per_class_recall[static_cast<std::size_t>(s)] =
          static_cast<double>(cm.counts[static_cast<std::size_t>(s)][static_cast<std::size_t>(s)]) /
          static_cast<double>(sup);
    }
  }
  return r;
}

/// Eval-mode logits for one preprocessed 77x35 buffer. Touches no RNG.
template <typename T>
nn::RowMat<T> eval_logits(MultiPodModel<T>& model, const ImageBuffer& roi_buffer,
                          double age_years) {
  const PatchSet ps = extract_patches(roi_buffer);
  nn::RowMat<T> age(1, kAgeRepeat);
  const auto feat = age_feature(age_years, nullptr, Mode::Eval, model.config().age_scale);
  for (int k = 0; k < kAgeRepeat; ++k) age(0, k) = static_cast<T>(feat[static_cast<std::size_t>(k)]);
  return model.forward(std::span<const PatchSet>(&ps, 1), age, Mode::Eval);
}

template <typename T>
StageLabel predict(MultiPodModel<T>& model, const ImageBuffer& roi_buffer, double age_years) {
  return argmax_stage(eval_logits(model, roi_buffer, age_years).row(0));
}

template <typename T>
StageLabel predict(MultiPodModel<T>& model, const Manifest& m, const SubjectRecord& r) {
  return predict(model, load_record_image(m, r), r.age_years);
}

/// Confusion matrix of an arbitrary per-record predictor; records are
/// evaluated independently so the result does not depend on their order.
template <typename Predictor>
EvalReport evaluate_with(Predictor&& predictor, const Manifest& m) {
  if (m.empty()) throw Error("cannot evaluate an empty manifest");
  ConfusionMatrix cm;
  for (const auto& r : m.records) cm.add(r.stage, predictor(r));
  return summarize(cm);
}

template <typename T>
EvalReport evaluate(MultiPodModel<T>& model, const Manifest& m) {
  EvalReport rep = evaluate_with(
      [&](const SubjectRecord& r) { return predict(model, m, r); }, m);
  rep.model_config = describe(model.config());
  rep.seed = model.config().seed;
  rep.epoch = model.epoch;
  return rep;
}

/// Same as evaluate(), over buffers already preprocessed (the training loop
/// caches them).
template <typename T>
EvalReport evaluate_buffers(MultiPodModel<T>& model, const std::vector<ImageBuffer>& buffers,
                            const Manifest& m) {
  if (buffers.size() != m.size()) throw Error("buffer count does not match the manifest");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < buffers.size(); ++i) {
    cm.add(m.records[i].stage, predict(model, buffers[i], m.records[i].age_years));
  }
  EvalReport rep = summarize(cm);
  rep.model_config = describe(model.config());
  rep.seed = model.config().seed;
  rep.epoch = model.epoch;
  return rep;
}

// ---------------------------------------------------------------------------
// Report export

inline std::string confusion_csv(const ConfusionMatrix& cm) {
  std::ostringstream out;
  out << "true\\pred";
  for (StageLabel s : kAllStages) out << ',' << to_string(s);
  out << '\n';
  for (int i = 0; i < kNumStages; ++i) {
    out << to_string(stage_from_index(i));
    for (std::size_t v : cm.counts[static_cast<std::size_t>(i)]) out << ',' << v;
    out << '\n';
  }
  return out.str();
}

inline ConfusionMatrix read_confusion_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  const auto header = detail::split_csv_line(line);
  if (header.size() != kNumStages + 1) throw Error("confusion csv header malformed");
  for (int j = 0; j < kNumStages; ++j) {
    if (header[static_cast<std::size_t>(j + 1)] != to_string(stage_from_index(j))) {
      throw Error("confusion csv columns must be CS1..CS6");
    }
  }
  ConfusionMatrix cm;
  for (int i = 0; i < kNumStages; ++i) {
    if (!std::getline(in, line)) throw Error("confusion csv truncated");
    const auto f = detail::split_csv_line(line);
    if (f.size() != kNumStages + 1 || f[0] != to_string(stage_from_index(i))) {
      throw Error("confusion csv row " + std::to_string(i + 1) + " malformed");
    }
    for (int j = 0; j < kNumStages; ++j) {
      if (!detail::parse_number(f[static_cast<std::size_t>(j + 1)],
                                cm.counts[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)])) {
        throw Error("confusion csv cell is not an integer");
      }
    }
  }
  return cm;
}

inline nlohmann::ordered_json report_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["accuracy"] = r.accuracy;
  j["n"] = r.n;
  j["correct"] = r.confusion.trace();
  auto recall = nlohmann::ordered_json::object();
  for (int s = 0; s < kNumStages; ++s) {
    const auto& v = r.per_class_recall[static_cast<std::size_t>(s)];
    recall[to_string(stage_from_index(s))] = v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
  }
  j["per_class_recall"] = recall;
  j["model_config"] = r.model_config;
  j["seed"] = r.seed;
  j["epoch"] = r.epoch;
  return j;
}

/// Row-normalized heatmap, 24 px per cell, darker = larger share.
inline ImageBuffer render_confusion(const ConfusionMatrix& cm) {
  constexpr int kCell = 24;
  ImageBuffer img(kNumStages * kCell, kNumStages * kCell, 1, 255.0f);
  for (int i = 0; i < kNumStages; ++i) {
    const std::size_t sup = cm.support(i);
    for (int j = 0; j < kNumStages; ++j) {
      const double share =
          sup == 0 ? 0.0
                   : static_cast<double>(cm.counts[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]) /
                         static_cast<double>(sup);
      const auto v = static_cast<float>(255.0 * (1.0 - share));
      for (int r = 1; r < kCell - 1; ++r)
        for (int c = 1; c < kCell - 1; ++c) img.at(i * kCell + r, j * kCell + c) = v;
    }
  }
  return img;
}

/// Writes report.json, confusion.csv and confusion.png into `dir`.
inline void export_report(const EvalReport& r, const std::filesystem::path& dir,
                          bool render_heatmap = true) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error("cannot create '" + dir.string() + "': " + ec.message());
  {
    std::ofstream out(dir / "report.json", std::ios::binary);
    if (!out) throw Error("cannot write '" + (dir / "report.json").string() + "'");
    out << report_json(r).dump(2) << '\n';
  }
  {
    std::ofstream out(dir / "confusion.csv", std::ios::binary);
    if (!out) throw Error("cannot write '" + (dir / "confusion.csv").string() + "'");
    out << confusion_csv(r.confusion);
  }
  if (render_heatmap) write_png(dir / "confusion.png", render_confusion(r.confusion));
}

}  // namespace multipod
