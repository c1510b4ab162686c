#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "multipod/core.hpp"
#include "multipod/image.hpp"
#include "multipod/pipeline.hpp"

namespace multipod {

inline constexpr double kMinAgeYears = 4.0;
inline constexpr double kMaxAgeYears = 29.0;

inline constexpr const char* kManifestHeader =
    "image_path,sex,age_years,stage,roi_x,roi_y,roi_w,roi_h";

struct SubjectRecord {
  std::string image_path;
  Sex sex = Sex::Female;
  double age_years = 0.0;
  StageLabel stage = StageLabel::CS1;
  std::optional<Rect> roi;

  friend bool operator==(const SubjectRecord&, const SubjectRecord&) = default;
};

struct Manifest {
  std::vector<SubjectRecord> records;
  std::string source_tag;
  /// Directory that relative image paths are resolved against.
  std::filesystem::path root;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }

  std::filesystem::path resolve(const SubjectRecord& r) const {
    const std::filesystem::path p(r.image_path);
    return p.is_absolute() ? p : root / p;
  }
};

using StageHistogram = std::array<std::size_t, kNumStages>;

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::string format_double(double v) {
  std::array<char, 64> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

template <typename T>
bool parse_number(const std::string& s, T& out) {
  const char* end = s.data() + s.size();
  const auto res = std::from_chars(s.data(), end, out);
  return res.ec == std::errc() && res.ptr == end;
}

}  // namespace detail

/// Parses a manifest CSV. Records keep file order; relative image paths
/// resolve against the manifest's directory. Ages outside [4, 29] are
/// accepted (synthetic data may widen the range) and reported in `warnings`.
inline Manifest load_manifest(const std::filesystem::path& path,
                              std::vector<std::string>* warnings = nullptr) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest '" + path.string() + "'");

  std::string line;
  if (!std::getline(in, line)) throw Error("manifest '" + path.string() + "' is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kManifestHeader) {
    throw Error("manifest '" + path.string() + "' header must be '" + kManifestHeader + "'");
  }

  static constexpr std::array<const char*, 8> kColumns = {
      "image_path", "sex", "age_years", "stage", "roi_x", "roi_y", "roi_w", "roi_h"};

  Manifest m;
  m.source_tag = path.string();
  m.root = path.parent_path();
  std::set<std::string> seen;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fail = [&](int col, const std::string& what) {
      return Error("manifest '" + path.string() + "' line " + std::to_string(line_no) +
                   ", column '" + kColumns[static_cast<std::size_t>(col)] + "': " + what);
    };
    const auto f = detail::split_csv_line(line);
    if (f.size() != kColumns.size()) {
      throw Error("manifest '" + path.string() + "' line " + std::to_string(line_no) +
                  ": expected 8 fields, found " + std::to_string(f.size()));
    }

    SubjectRecord r;
    r.image_path = f[0];
    if (r.image_path.empty()) throw fail(0, "empty path");
    if (!seen.insert(r.image_path).second) throw fail(0, "duplicate path '" + f[0] + "'");

    const auto sex = parse_sex(f[1]);
    if (!sex) throw fail(1, "unknown sex token '" + f[1] + "' (expected F or M)");
    r.sex = *sex;

    if (!detail::parse_number(f[2], r.age_years) || !std::isfinite(r.age_years)) {
      throw fail(2, "age '" + f[2] + "' is not numeric");
    }
    if (r.age_years < 0.0) throw fail(2, "age must be non-negative");
    if (warnings && (r.age_years < kMinAgeYears || r.age_years > kMaxAgeYears)) {
      warnings->push_back("line " + std::to_string(line_no) + ": age " + f[2] +
                          " outside [4, 29]");
    }

    const auto stage = parse_stage(f[3]);
    if (!stage) throw fail(3, "unknown stage token '" + f[3] + "' (expected CS1..CS6)");
    r.stage = *stage;

    const bool any_roi = !f[4].empty() || !f[5].empty() || !f[6].empty() || !f[7].empty();
    if (any_roi) {
      std::array<int, 4> v{};
      for (int k = 0; k < 4; ++k) {
        if (!detail::parse_number(f[static_cast<std::size_t>(4 + k)],
                                  v[static_cast<std::size_t>(k)])) {
          throw fail(4 + k, "roi value '" + f[static_cast<std::size_t>(4 + k)] +
                                "' is not an integer (all four roi fields or none)");
        }
      }
      if (v[0] < 0 || v[1] < 0) throw fail(4, "roi origin must be non-negative");
      if (v[2] <= 0 || v[3] <= 0) throw fail(6, "roi size must be positive");
      r.roi = Rect{v[0], v[1], v[2], v[3]};
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

inline void save_manifest(const Manifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write manifest '" + path.string() + "'");
  out << kManifestHeader << '\n';
  for (const auto& r : m.records) {
    out << r.image_path << ',' << sex_code(r.sex) << ',' << detail::format_double(r.age_years)
        << ',' << to_string(r.stage) << ',';
    if (r.roi) {
      out << r.roi->x << ',' << r.roi->y << ',' << r.roi->width << ',' << r.roi->height;
    } else {
      out << ",,,";
    }
    out << '\n';
  }
  if (!out) throw Error("failed writing manifest '" + path.string() + "'");
}

/// Copy of `m` whose relative image paths are rewritten to be relative to
/// `new_root`, so the manifest can be saved in a different directory.
inline Manifest rebase(const Manifest& m, const std::filesystem::path& new_root) {
  Manifest out = m;
  const auto base = std::filesystem::weakly_canonical(std::filesystem::absolute(new_root));
  for (auto& r : out.records) {
    const auto abs = std::filesystem::weakly_canonical(std::filesystem::absolute(m.resolve(r)));
    r.image_path = abs.lexically_relative(base).generic_string();
  }
  out.root = new_root;
  return out;
}

inline Manifest filter_by_sex(const Manifest& m, Sex s) {
  Manifest out;
  out.source_tag = m.source_tag + ":" + sex_code(s);
  out.root = m.root;
  std::copy_if(m.records.begin(), m.records.end(), std::back_inserter(out.records),
               [s](const SubjectRecord& r) { return r.sex == s; });
  return out;
}

inline StageHistogram class_histogram(const Manifest& m) {
  StageHistogram h{};
  for (const auto& r : m.records) ++h[static_cast<std::size_t>(stage_index(r.stage))];
  return h;
}

/// Train size for one stage: round(fraction * n), exact halves go to train.
inline std::size_t stratified_train_count(std::size_t n, double train_fraction) {
  return static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n) + 0.5));
}

/// Per-stage seeded shuffle, then the first round(fraction * n) records of
/// each stage go to train. Both halves keep the input's relative order.
inline std::pair<Manifest, Manifest> stratified_split(const Manifest& m, double train_fraction,
                                                      std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw Error("train fraction must lie in (0, 1)");
  }
  std::array<std::vector<std::size_t>, kNumStages> by_stage;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    by_stage[static_cast<std::size_t>(stage_index(m.records[i].stage))].push_back(i);
  }
  std::vector<bool> in_train(m.records.size(), false);
  for (int s = 0; s < kNumStages; ++s) {
    auto& idx = by_stage[static_cast<std::size_t>(s)];
    if (idx.empty()) continue;
    if (idx.size() < 2) {
      throw Error("stage " + to_string(stage_from_index(s)) +
                  " has fewer than 2 records; cannot split");
    }
    Rng rng = make_rng({seed, static_cast<std::uint64_t>(s)});
    for (std::size_t i = idx.size() - 1; i > 0; --i) {
      std::swap(idx[i], idx[rng() % (i + 1)]);
    }
    const std::size_t n_train = stratified_train_count(idx.size(), train_fraction);
    for (std::size_t k = 0; k < n_train; ++k) in_train[idx[k]] = true;
  }
  Manifest train, test;
  train.source_tag = m.source_tag + ":train";
  test.source_tag = m.source_tag + ":test";
  train.root = test.root = m.root;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    (in_train[i] ? train : test).records.push_back(m.records[i]);
  }
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Synthetic radiograph crops

/// Age model: age = base + per_stage * stage_index + U[0, jitter).
struct AgeModel {
  double base_years = 7.0;
  double per_stage_years = 1.5;
  double jitter_years = 4.0;
};

struct SyntheticConfig {
  int per_stage_count = 100;
  int image_height = kRoiHeight;
  int image_width = kRoiWidth;
  double noise_level = 20.0;  // std-dev of additive Gaussian noise, intensity units
  std::uint64_t seed = 7;
  AgeModel age_model;
  /// Emit a 2x canvas with a stored ROI instead of a ready-made crop.
  bool with_roi = false;

  void validate() const {
    if (per_stage_count < 1) throw Error("per_stage_count must be >= 1");
    if (image_height < kPatchSize || image_width < kPatchSize) {
      throw Error("synthetic image size must be at least the 35 px patch size");
    }
    if (!(noise_level >= 0.0)) throw Error("noise_level must be >= 0");
  }
};

/// Lower-border concavity for a stage before per-image jitter, in pixels.
inline double synthetic_concavity_depth(StageLabel s) { return 1.0 * stage_index(s); }

/// Body height / width at a stage before per-image jitter.
/// Per-body rotation range standing in for patient posture.
inline constexpr double kSyntheticMaxTiltDeg = 4.0;

inline double synthetic_body_height(StageLabel s) { return 9.0 + 1.0 * stage_index(s); }
inline double synthetic_body_width(StageLabel s) { return 22.0 - 0.8 * stage_index(s); }

/// Per-image geometry, in the coordinates of the canonical crop
/// (continuous, pixel (r, c) covers [r, r+1) x [c, c+1)).
struct SyntheticScene {
  struct Body {
    double cx, cy, width, height, depth;
    double tilt_deg = 0.0;  // posture: rotation about (cx, cy)
  };
  std::array<Body, 3> bodies{};
  double body_level = 180.0;
  double background_level = 35.0;

  /// True when (y, x) lies inside any body; the lower border of each body
  /// bows upward by `depth` at its center (parabolic profile).
  bool inside(double y, double x) const {
    constexpr double kDegToRad = 3.14159265358979323846 / 180.0;
    for (const auto& b : bodies) {
      const double cs = std::cos(b.tilt_deg * kDegToRad), sn = std::sin(b.tilt_deg * kDegToRad);
      const double bx = cs * (x - b.cx) + sn * (y - b.cy);
      const double by = -sn * (x - b.cx) + cs * (y - b.cy);
      const double u = bx / (0.5 * b.width);
      if (u < -1.0 || u > 1.0) continue;
      const double top = -0.5 * b.height;
      const double bottom = 0.5 * b.height - b.depth * (1.0 - u * u);
      if (by >= top && by <= bottom) return true;
    }
    return false;
  }
};

inline SyntheticScene make_scene(StageLabel stage, Rng& rng, int height = kRoiHeight,
                                 int width = kRoiWidth) {
  SyntheticScene scene;
  const auto offsets = patch_offsets(height, kPatchSize, kNumPatches);
  const double cx = 0.5 * width + uniform(rng, -1.5, 1.5);
  for (std::size_t k = 0; k < scene.bodies.size(); ++k) {
    auto& b = scene.bodies[k];
    b.cx = cx + uniform(rng, -0.5, 0.5);
    b.cy = offsets[k] + 0.5 * kPatchSize + uniform(rng, -1.5, 1.5);
    b.height = synthetic_body_height(stage) + uniform(rng, -1.5, 1.5);
    b.width = synthetic_body_width(stage) + uniform(rng, -2.0, 2.0);
    b.depth = std::max(0.0, synthetic_concavity_depth(stage) + uniform(rng, -0.3, 0.3));
    b.tilt_deg = uniform(rng, -kSyntheticMaxTiltDeg, kSyntheticMaxTiltDeg);
  }
  scene.body_level = uniform(rng, 150.0, 210.0);
  scene.background_level = uniform(rng, 20.0, 50.0);
  return scene;
}

/// Rasterizes a scene with 4x4 supersampling. `roi` places the canonical
/// crop inside a larger canvas; pixels outside it show a bright distractor
/// band along the top and right edges.
inline ImageBuffer render_scene(const SyntheticScene& scene, int crop_h, int crop_w,
                                int canvas_h, int canvas_w, const Rect& roi) {
  constexpr int kSub = 4;
  ImageBuffer img(canvas_h, canvas_w, 1);
  const double sy = static_cast<double>(crop_h) / roi.height;
  const double sx = static_cast<double>(crop_w) / roi.width;
  for (int r = 0; r < canvas_h; ++r) {
    for (int c = 0; c < canvas_w; ++c) {
      const bool in_roi = c >= roi.x && c < roi.x + roi.width && r >= roi.y &&
                          r < roi.y + roi.height;
      if (!in_roi) {
        const bool distractor = r < roi.y / 2 || c >= roi.x + roi.width + 2;
        img.at(r, c) = static_cast<float>(distractor ? 230.0 : scene.background_level);
        continue;
      }
      int hits = 0;
      for (int i = 0; i < kSub; ++i) {
        for (int j = 0; j < kSub; ++j) {
          const double y = (r - roi.y + (i + 0.5) / kSub) * sy;
          const double x = (c - roi.x + (j + 0.5) / kSub) * sx;
          hits += scene.inside(y, x) ? 1 : 0;
        }
      }
      const double cover = static_cast<double>(hits) / (kSub * kSub);
      img.at(r, c) = static_cast<float>(scene.background_level +
                                        cover * (scene.body_level - scene.background_level));
    }
  }
  return img;
}

/// Canvas ROI used by the with-ROI mode: a 2x canvas with the crop scaled
/// by 1.6 and offset from the corner.
inline Rect synthetic_canvas_roi() { return Rect{7, 14, 56, 123}; }

/// Generates `6 * per_stage_count` labeled images plus `manifest.csv` under
/// `out_dir`. Record i has stage i % 6; sexes alternate per stage replica.
/// Every image draws from its own stream derived from (seed, i), so output
/// is byte-identical for identical configs regardless of scheduling.
inline Manifest generate_synthetic(const SyntheticConfig& cfg,
                                   const std::filesystem::path& out_dir) {
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (ec) throw Error("cannot create '" + (out_dir / "images").string() + "': " + ec.message());

  const int n = kNumStages * cfg.per_stage_count;
  Manifest m;
  m.source_tag = "synthetic:seed=" + std::to_string(cfg.seed);
  m.root = out_dir;
  m.records.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const StageLabel stage = stage_from_index(i % kNumStages);
    const int replica = i / kNumStages;
    Rng rng = make_rng({cfg.seed, static_cast<std::uint64_t>(i)});

    const SyntheticScene scene = make_scene(stage, rng, cfg.image_height, cfg.image_width);
    SubjectRecord r;
    r.sex = replica % 2 == 0 ? Sex::Female : Sex::Male;
    r.stage = stage;
    r.age_years = cfg.age_model.base_years + cfg.age_model.per_stage_years * stage_index(stage) +
                  uniform(rng, 0.0, cfg.age_model.jitter_years);

    ImageBuffer img;
    if (cfg.with_roi) {
      const Rect roi = synthetic_canvas_roi();
      img = render_scene(scene, cfg.image_height, cfg.image_width, 2 * cfg.image_height,
                         2 * cfg.image_width, roi);
      r.roi = roi;
    } else {
      img = render_scene(scene, cfg.image_height, cfg.image_width, cfg.image_height,
                         cfg.image_width, Rect{0, 0, cfg.image_width, cfg.image_height});
    }
    if (cfg.noise_level > 0.0) {
      for (float& v : img.data) {
        v = std::clamp(static_cast<float>(v + cfg.noise_level * gaussian(rng)), 0.0f, 255.0f);
      }
    }

    char name[32];
    std::snprintf(name, sizeof name, "images/img_%05d.png", i);
    r.image_path = name;
    write_png(out_dir / r.image_path, img);
    m.records.push_back(std::move(r));
  }
  save_manifest(m, out_dir / "manifest.csv");
  return m;
}

}  // namespace multipod
