#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "multipod/core.hpp"
#include "multipod/image.hpp"

namespace multipod {

inline constexpr int kRoiHeight = 77;
inline constexpr int kRoiWidth = 35;
inline constexpr int kPatchSize = 35;
inline constexpr int kNumPatches = 3;

/// Axis-aligned rectangle in source pixels.
struct Rect {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;

  friend bool operator==(const Rect&, const Rect&) = default;
};

/// The three 35x35 single-channel windows ordered top to bottom (C2, C3, C4).
struct PatchSet {
  std::array<ImageBuffer, kNumPatches> patches;

  friend bool operator==(const PatchSet&, const PatchSet&) = default;
};

inline ImageBuffer crop_roi(const ImageBuffer& img, const Rect& roi) {
  if (roi.x < 0 || roi.y < 0 || roi.width <= 0 || roi.height <= 0 ||
      roi.x + roi.width > img.width || roi.y + roi.height > img.height) {
    throw Error("roi (" + std::to_string(roi.x) + "," + std::to_string(roi.y) + "," +
                std::to_string(roi.width) + "," + std::to_string(roi.height) +
                ") outside image " + shape_string(img));
  }
  ImageBuffer out(roi.height, roi.width, img.channels);
  for (int r = 0; r < roi.height; ++r) {
    const float* src = &img.data[(static_cast<std::size_t>(roi.y + r) * img.width + roi.x) *
                                 img.channels];
    std::copy(src, src + static_cast<std::size_t>(roi.width) * img.channels,
              &out.data[static_cast<std::size_t>(r) * roi.width * img.channels]);
  }
  return out;
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
/// Same-size input is returned unchanged; constants stay exactly constant.
inline ImageBuffer resize(const ImageBuffer& img, int out_h = kRoiHeight,
                          int out_w = kRoiWidth) {
  if (img.empty()) throw Error("cannot resize a zero-sized image");
  if (out_h <= 0 || out_w <= 0) throw Error("resize target must be positive");
  if (img.height == out_h && img.width == out_w) return img;

  const double sy = static_cast<double>(img.height) / out_h;
  const double sx = static_cast<double>(img.width) / out_w;
  auto source = [](int dst, double scale, int n) {
    double s = (dst + 0.5) * scale - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(n - 1));
    const int i0 = static_cast<int>(std::floor(s));
    const int i1 = std::min(i0 + 1, n - 1);
    return std::tuple{i0, i1, static_cast<float>(s - i0)};
  };

  ImageBuffer out(out_h, out_w, img.channels);
  for (int r = 0; r < out_h; ++r) {
    const auto [r0, r1, fy] = source(r, sy, img.height);
    for (int c = 0; c < out_w; ++c) {
      const auto [c0, c1, fx] = source(c, sx, img.width);
      for (int ch = 0; ch < img.channels; ++ch) {
        const float a = img.at(r0, c0, ch), b = img.at(r0, c1, ch);
        const float d = img.at(r1, c0, ch), e = img.at(r1, c1, ch);
        const float top = a + fx * (b - a);
        const float bottom = d + fx * (e - d);
        out.at(r, c, ch) = top + fy * (bottom - top);
      }
    }
  }
  return out;
}

/// Row offsets of `n` equally spaced windows of height `patch`, the first
/// flush with the top edge and the last flush with the bottom edge.
inline std::vector<int> patch_offsets(int image_h = kRoiHeight, int patch = kPatchSize,
                                      int n = kNumPatches) {
  if (n < 2) throw Error("patch_offsets needs n >= 2");
  if (patch > image_h) {
    throw Error("patch height " + std::to_string(patch) + " exceeds image height " +
                std::to_string(image_h));
  }
  std::vector<int> offsets(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    offsets[static_cast<std::size_t>(k)] = static_cast<int>(
        std::lround(static_cast<double>(k) * (image_h - patch) / (n - 1)));
  }
  return offsets;
}

inline PatchSet extract_patches(const ImageBuffer& img) {
  if (img.height != kRoiHeight || img.width != kRoiWidth || img.channels != 1) {
    throw Error("extract_patches expects a 77x35x1 image, got " + shape_string(img));
  }
  const auto offsets = patch_offsets();
  PatchSet ps;
  for (int k = 0; k < kNumPatches; ++k) {
    ps.patches[static_cast<std::size_t>(k)] =
        crop_roi(img, Rect{0, offsets[static_cast<std::size_t>(k)], kRoiWidth, kPatchSize});
  }
  return ps;
}

/// Eval-path preprocessing of a stored image: optional ROI crop, then resize
/// to the canonical 77x35 buffer. Images without an ROI must already be 77x35.
inline ImageBuffer preprocess(const ImageBuffer& img, const std::optional<Rect>& roi) {
  if (roi) return resize(crop_roi(img, *roi));
  if (img.height != kRoiHeight || img.width != kRoiWidth) {
    throw Error("image is " + shape_string(img) + " but no ROI was given");
  }
  return img;
}

// ---------------------------------------------------------------------------
// Photometric and geometric primitives

/// Per-channel linear stretch so min -> 0 and max -> 255. Constant channels
/// and already-stretched channels are left untouched, which makes the op
/// exactly idempotent.
inline ImageBuffer autocontrast(const ImageBuffer& img) {
  ImageBuffer out = img;
  for (int ch = 0; ch < img.channels; ++ch) {
    float lo = 0.0f, hi = 0.0f;
    bool first = true;
    for (std::size_t i = static_cast<std::size_t>(ch); i < img.data.size();
         i += static_cast<std::size_t>(img.channels)) {
      const float v = img.data[i];
      if (first) {
        lo = hi = v;
        first = false;
      } else {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
    }
    if (first || hi <= lo || (lo == 0.0f && hi == 255.0f)) continue;
    const double scale = 255.0 / (static_cast<double>(hi) - lo);
    for (std::size_t i = static_cast<std::size_t>(ch); i < img.data.size();
         i += static_cast<std::size_t>(img.channels)) {
      const float v = img.data[i];
      out.data[i] = v == hi ? 255.0f
                            : std::clamp(static_cast<float>((v - lo) * scale), 0.0f, 255.0f);
    }
  }
  return out;
}

/// Integer shift by (dx, dy); content moves right/down for positive values,
/// vacated pixels are zero.
inline ImageBuffer translate(const ImageBuffer& img, int dx, int dy) {
  ImageBuffer out(img.height, img.width, img.channels, 0.0f);
  for (int r = 0; r < img.height; ++r) {
    const int sr = r - dy;
    if (sr < 0 || sr >= img.height) continue;
    for (int c = 0; c < img.width; ++c) {
      const int sc = c - dx;
      if (sc < 0 || sc >= img.width) continue;
      for (int ch = 0; ch < img.channels; ++ch) out.at(r, c, ch) = img.at(sr, sc, ch);
    }
  }
  return out;
}

inline ImageBuffer random_translate(const ImageBuffer& img, Rng& rng, int max_dx,
                                    int max_dy) {
  if (max_dx < 0 || max_dy < 0) throw Error("translation bounds must be non-negative");
  const int dx = uniform_int(rng, -max_dx, max_dx);
  const int dy = uniform_int(rng, -max_dy, max_dy);
  return translate(img, dx, dy);
}

/// Rotation about the image center by `angle_deg` (counter-clockwise on
/// screen), bilinear resampling, zero outside the source support.
inline ImageBuffer rotate(const ImageBuffer& img, double angle_deg) {
  if (angle_deg == 0.0) return img;
  constexpr double kDegToRad = 3.14159265358979323846 / 180.0;
  const double ca = std::cos(angle_deg * kDegToRad);
  const double sa = std::sin(angle_deg * kDegToRad);
  const double cy = (img.height - 1) / 2.0;
  const double cx = (img.width - 1) / 2.0;

  auto sample = [&](int r, int c, int ch) -> float {
    if (r < 0 || r >= img.height || c < 0 || c >= img.width) return 0.0f;
    return img.at(r, c, ch);
  };

  ImageBuffer out(img.height, img.width, img.channels, 0.0f);
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < img.width; ++c) {
      // Inverse map: rotate the destination point by -angle. Rows grow
      // downward, so a screen-CCW rotation flips the sign of the y term.
      const double x = c - cx, y = r - cy;
      const double sx = ca * x - sa * y + cx;
      const double sy = sa * x + ca * y + cy;
      if (sx <= -1.0 || sy <= -1.0 || sx >= img.width || sy >= img.height) continue;
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const float fx = static_cast<float>(sx - x0);
      const float fy = static_cast<float>(sy - y0);
      for (int ch = 0; ch < img.channels; ++ch) {
        const float v = (1 - fy) * ((1 - fx) * sample(y0, x0, ch) + fx * sample(y0, x0 + 1, ch)) +
                        fy * ((1 - fx) * sample(y0 + 1, x0, ch) + fx * sample(y0 + 1, x0 + 1, ch));
        out.at(r, c, ch) = v;
      }
    }
  }
  return out;
}

inline constexpr double kMaxPatchRotation = 15.0;

inline ImageBuffer rotate_patch(const ImageBuffer& patch, double angle_deg) {
  if (std::abs(angle_deg) > kMaxPatchRotation) {
    throw Error("patch rotation limited to +-15 degrees, got " + std::to_string(angle_deg));
  }
  return rotate(patch, angle_deg);
}

/// Multiplies every intensity by `factor` and clamps to [0, 255].
inline ImageBuffer scale_intensity(const ImageBuffer& img, double factor) {
  ImageBuffer out = img;
  const auto f = static_cast<float>(factor);
  for (float& v : out.data) v = std::clamp(v * f, 0.0f, 255.0f);
  return out;
}

inline ImageBuffer intensity_jitter(const ImageBuffer& img, Rng& rng, double lo = 0.8,
                                    double hi = 1.2) {
  if (!(lo > 0.0) || lo > hi) throw Error("intensity jitter needs 0 < lo <= hi");
  return scale_intensity(img, uniform(rng, lo, hi));
}

// ---------------------------------------------------------------------------
// Whole-image augmentation policies

enum class PolicyKind { None, TranslateAutoContrast, RandAugmentLite, AugMixLite };

inline std::string to_string(PolicyKind k) {
  switch (k) {
    case PolicyKind::None: return "none";
    case PolicyKind::TranslateAutoContrast: return "translate-ac";
    case PolicyKind::RandAugmentLite: return "randaug";
    case PolicyKind::AugMixLite: return "augmix";
  }
  throw Error("unknown augmentation policy");
}

inline std::optional<PolicyKind> parse_policy(std::string_view s) {
  if (s == "none") return PolicyKind::None;
  if (s == "translate-ac") return PolicyKind::TranslateAutoContrast;
  if (s == "randaug") return PolicyKind::RandAugmentLite;
  if (s == "augmix") return PolicyKind::AugMixLite;
  return std::nullopt;
}

/// Parameters of a whole-image augmentation policy.
///
/// `magnitude` (0..10) drives the RandAugmentLite and AugMixLite op
/// strengths: shift up to 0.6*M px, rotation up to 1.5*M degrees, intensity
/// factor in [1 - 0.04*M, 1 + 0.04*M]. AugMixLite mixing weights are
/// Dirichlet(1, ..., 1) and the skip weight is Beta(1, 1).
struct AugPolicy {
  PolicyKind kind = PolicyKind::None;
  int max_shift = 3;          // TranslateAutoContrast, per axis, px
  int randaug_ops = 2;        // N
  double magnitude = 5.0;     // M
  int augmix_width = 3;       // k chains
  int augmix_max_depth = 3;   // ops per chain drawn from [1, max_depth]

  void validate() const {
    if (max_shift < 0 || max_shift > 17) throw Error("max_shift must be in [0, 17]");
    if (randaug_ops < 1 || randaug_ops > 4) throw Error("randaug_ops must be in [1, 4]");
    if (magnitude < 0.0 || magnitude > 10.0) throw Error("magnitude must be in [0, 10]");
    if (augmix_width < 1 || augmix_width > 8) throw Error("augmix_width must be in [1, 8]");
    if (augmix_max_depth < 1 || augmix_max_depth > 4) {
      throw Error("augmix_max_depth must be in [1, 4]");
    }
  }
};

namespace detail {

enum class LiteOp { Translate, Rotate, AutoContrast, Jitter };

inline ImageBuffer apply_lite_op(LiteOp op, const ImageBuffer& img, double magnitude,
                                 Rng& rng) {
  switch (op) {
    case LiteOp::Translate: {
      const int m = static_cast<int>(std::lround(0.6 * magnitude));
      return random_translate(img, rng, m, m);
    }
    case LiteOp::Rotate:
      return rotate(img, uniform(rng, -1.5 * magnitude, 1.5 * magnitude));
    case LiteOp::AutoContrast:
      return autocontrast(img);
    case LiteOp::Jitter:
      return intensity_jitter(img, rng, 1.0 - 0.04 * magnitude, 1.0 + 0.04 * magnitude);
  }
  throw Error("unknown augmentation op");
}

inline LiteOp random_op(Rng& rng) { return static_cast<LiteOp>(uniform_int(rng, 0, 3)); }

}  // namespace detail

inline ImageBuffer apply_policy(const AugPolicy& policy, const ImageBuffer& img, Rng& rng) {
  switch (policy.kind) {
    case PolicyKind::None:
      return img;
    case PolicyKind::TranslateAutoContrast:
      return autocontrast(random_translate(img, rng, policy.max_shift, policy.max_shift));
    case PolicyKind::RandAugmentLite: {
      ImageBuffer out = img;
      for (int i = 0; i < policy.randaug_ops; ++i) {
        out = detail::apply_lite_op(detail::random_op(rng), out, policy.magnitude, rng);
      }
      return out;
    }
    case PolicyKind::AugMixLite: {
      std::vector<double> w(static_cast<std::size_t>(policy.augmix_width));
      double total = 0.0;
      for (double& x : w) {
        x = -std::log(1.0 - uniform(rng, 0.0, 1.0));
        total += x;
      }
      const double skip = uniform(rng, 0.0, 1.0);
      std::vector<double> mixed(img.data.size(), 0.0);
      for (double x : w) {
        ImageBuffer chain = img;
        const int depth = uniform_int(rng, 1, policy.augmix_max_depth);
        for (int d = 0; d < depth; ++d) {
          chain = detail::apply_lite_op(detail::random_op(rng), chain, policy.magnitude, rng);
        }
        for (std::size_t i = 0; i < mixed.size(); ++i) mixed[i] += (x / total) * chain.data[i];
      }
      ImageBuffer out = img;
      for (std::size_t i = 0; i < mixed.size(); ++i) {
        const double v = skip * img.data[i] + (1.0 - skip) * mixed[i];
        out.data[i] = std::clamp(static_cast<float>(v), 0.0f, 255.0f);
      }
      return out;
    }
  }
  throw Error("unknown augmentation policy kind");
}

// ---------------------------------------------------------------------------
// Patch augmentation and stacking

struct PatchAugParams {
  double max_rotation_deg = 5.0;
  double jitter_lo = 0.8;
  double jitter_hi = 1.2;
};

struct PatchAugDraw {
  double angle_deg = 0.0;
  double factor = 1.0;
};

inline PatchAugDraw sample_patch_aug(Rng& rng, const PatchAugParams& params = {}) {
  PatchAugDraw d;
  d.angle_deg = uniform(rng, -params.max_rotation_deg, params.max_rotation_deg);
  d.factor = uniform(rng, params.jitter_lo, params.jitter_hi);
  return d;
}

/// Training-only: every patch independently gets a random rotation followed
/// by a grayscale intensity jitter.
inline PatchSet augment_patchset(const PatchSet& ps, Rng& rng,
                                 const PatchAugParams& params = {}) {
  if (!(params.jitter_lo > 0.0) || params.jitter_lo > params.jitter_hi) {
    throw Error("intensity jitter needs 0 < lo <= hi");
  }
  PatchSet out;
  for (std::size_t k = 0; k < ps.patches.size(); ++k) {
    const PatchAugDraw d = sample_patch_aug(rng, params);
    out.patches[k] = scale_intensity(rotate_patch(ps.patches[k], d.angle_deg), d.factor);
  }
  return out;
}

/// Channel k of the result is patch k.
inline ImageBuffer stack_patches(const PatchSet& ps) {
  ImageBuffer out(kPatchSize, kPatchSize, kNumPatches);
  for (int k = 0; k < kNumPatches; ++k) {
    const ImageBuffer& p = ps.patches[static_cast<std::size_t>(k)];
    if (p.height != kPatchSize || p.width != kPatchSize || p.channels != 1) {
      throw Error("stack_patches expects 35x35x1 patches, got " + shape_string(p));
    }
    for (int r = 0; r < kPatchSize; ++r)
      for (int c = 0; c < kPatchSize; ++c) out.at(r, c, k) = p.at(r, c);
  }
  return out;
}

inline PatchSet unstack_patches(const ImageBuffer& stacked) {
  if (stacked.height != kPatchSize || stacked.width != kPatchSize ||
      stacked.channels != kNumPatches) {
    throw Error("unstack_patches expects 35x35x3, got " + shape_string(stacked));
  }
  PatchSet ps;
  for (int k = 0; k < kNumPatches; ++k) {
    ImageBuffer p(kPatchSize, kPatchSize, 1);
    for (int r = 0; r < kPatchSize; ++r)
      for (int c = 0; c < kPatchSize; ++c) p.at(r, c) = stacked.at(r, c, k);
    ps.patches[static_cast<std::size_t>(k)] = std::move(p);
  }
  return ps;
}

}  // namespace multipod
