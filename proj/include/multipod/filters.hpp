#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "multipod/core.hpp"
#include "multipod/image.hpp"

namespace multipod {

inline constexpr int kNumOrientations = 8;
inline constexpr int kKernelSize = 7;
inline constexpr int kKernelRadius = kKernelSize / 2;

using Kernel = std::array<double, kKernelSize * kKernelSize>;

/// Eight oriented, zero-mean, unit-norm 7x7 edge kernels.
///
/// Kernel k is the first derivative of an isotropic Gaussian (scale `sigma`)
/// taken along theta_k = k * 22.5 degrees, where theta is measured from the
/// +column axis toward +row (image coordinates, rows grow downward). Kernel
/// 0 therefore responds to intensity changing along x, kernel 4 to changes
/// along y. Coefficients are stored row-major and used as correlation
/// weights, like a convolution layer.
struct DirectionalFilterBank {
  std::array<Kernel, kNumOrientations> kernels{};
  double sigma = 1.5;
  bool trainable = true;

  static constexpr double orientation_deg(int k) { return 22.5 * k; }

  double at(int k, int r, int c) const {
    return kernels[static_cast<std::size_t>(k)][static_cast<std::size_t>(r * kKernelSize + c)];
  }
};

inline DirectionalFilterBank build_bank(double sigma = 1.5, bool trainable = true) {
  if (!(sigma > 0.0)) throw Error("filter sigma must be positive");
  constexpr double kDegToRad = 3.14159265358979323846 / 180.0;
  DirectionalFilterBank bank;
  bank.sigma = sigma;
  bank.trainable = trainable;
  for (int k = 0; k < kNumOrientations; ++k) {
    const double theta = DirectionalFilterBank::orientation_deg(k) * kDegToRad;
    const double ct = std::cos(theta), st = std::sin(theta);
    Kernel& ker = bank.kernels[static_cast<std::size_t>(k)];
    double sum = 0.0;
    for (int r = 0; r < kKernelSize; ++r) {
      for (int c = 0; c < kKernelSize; ++c) {
        const double x = c - kKernelRadius, y = r - kKernelRadius;
        const double g = std::exp(-(x * x + y * y) / (2.0 * sigma * sigma));
        const double v = (x * ct + y * st) * g;
        ker[static_cast<std::size_t>(r * kKernelSize + c)] = v;
        sum += v;
      }
    }
    const double mean = sum / (kKernelSize * kKernelSize);
    double norm2 = 0.0;
    for (double& v : ker) {
      v -= mean;
      norm2 += v * v;
    }
    const double inv = 1.0 / std::sqrt(norm2);
    for (double& v : ker) v *= inv;
  }
  return bank;
}

/// Same-size correlation of every input channel with every kernel (3 px zero
/// padding). Output channel index is `in_channel * 8 + orientation`.
inline ImageBuffer apply_bank(const ImageBuffer& img, const DirectionalFilterBank& bank) {
  if (img.height < kKernelSize || img.width < kKernelSize) {
    throw Error("image " + shape_string(img) + " is smaller than the 7x7 kernels");
  }
  const int oc = img.channels * kNumOrientations;
  ImageBuffer out(img.height, img.width, oc);
  for (int ch = 0; ch < img.channels; ++ch) {
    for (int k = 0; k < kNumOrientations; ++k) {
      for (int r = 0; r < img.height; ++r) {
        for (int c = 0; c < img.width; ++c) {
          double acc = 0.0;
          for (int i = 0; i < kKernelSize; ++i) {
            const int rr = r + i - kKernelRadius;
            if (rr < 0 || rr >= img.height) continue;
            for (int j = 0; j < kKernelSize; ++j) {
              const int cc = c + j - kKernelRadius;
              if (cc < 0 || cc >= img.width) continue;
              acc += bank.at(k, i, j) * img.at(rr, cc, ch);
            }
          }
          out.at(r, c, ch * kNumOrientations + k) = static_cast<float>(acc);
        }
      }
    }
  }
  return out;
}

/// Channel with the largest mean absolute response of a single-channel edge
/// image, measured over the interior that the zero padding cannot reach.
inline int dominant_orientation(const DirectionalFilterBank& bank, const ImageBuffer& edge_img) {
  if (edge_img.channels != 1) throw Error("dominant_orientation expects a single channel");
  if (edge_img.height <= 2 * kKernelSize || edge_img.width <= 2 * kKernelSize) {
    throw Error("edge image too small for an interior measurement");
  }
  const ImageBuffer resp = apply_bank(edge_img, bank);
  int best = 0;
  double best_score = -1.0;
  for (int k = 0; k < kNumOrientations; ++k) {
    double s = 0.0;
    for (int r = kKernelRadius; r < resp.height - kKernelRadius; ++r)
      for (int c = kKernelRadius; c < resp.width - kKernelRadius; ++c)
        s += std::abs(resp.at(r, c, k));
    if (s > best_score) {
      best_score = s;
      best = k;
    }
  }
  return best;
}

/// A straight step edge: intensity `hi` on the side the unit normal at
/// `normal_deg` points to, `lo` on the other, antialiased across the edge.
inline ImageBuffer make_step_edge(int size, double normal_deg, float lo = 0.0f,
                                  float hi = 255.0f) {
  constexpr double kDegToRad = 3.14159265358979323846 / 180.0;
  const double nx = std::cos(normal_deg * kDegToRad), ny = std::sin(normal_deg * kDegToRad);
  const double center = (size - 1) / 2.0;
  ImageBuffer img(size, size, 1);
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      const double d = (c - center) * nx + (r - center) * ny;
      const double t = std::clamp(d + 0.5, 0.0, 1.0);
      img.at(r, c) = static_cast<float>(lo + t * (hi - lo));
    }
  }
  return img;
}

}  // namespace multipod
