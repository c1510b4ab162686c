#pragma once

// Layer primitives with explicit forward/backward passes.
//
// Activations are stored channel-major, [channel][sample][row][col], so a
// convolution over the whole batch is a single GEMM and batch-norm
// statistics are contiguous per channel.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "multipod/core.hpp"

namespace multipod::nn {

/// Storage for every tensor. A fixed base alignment keeps Eigen's
/// vectorized reductions in the same order from run to run.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

enum class Mode { Train, Eval };

struct Shape4 {
  int c = 0, n = 0, h = 0, w = 0;
  friend bool operator==(const Shape4&, const Shape4&) = default;
};

template <typename T>
struct Activation {
  int c = 0, n = 0, h = 0, w = 0;
  AlignedVector<T> data;

  Activation() = default;
  Activation(int c_, int n_, int h_, int w_, T fill = T(0))
      : c(c_), n(n_), h(h_), w(w_),
        data(static_cast<std::size_t>(c_) * n_ * h_ * w_, fill) {}

  Shape4 shape() const { return {c, n, h, w}; }
  std::size_t plane() const { return static_cast<std::size_t>(n) * h * w; }
  T* channel(int ch) { return data.data() + static_cast<std::size_t>(ch) * plane(); }
  const T* channel(int ch) const {
    return data.data() + static_cast<std::size_t>(ch) * plane();
  }
  T& at(int ch, int i, int y, int x) {
    return data[((static_cast<std::size_t>(ch) * n + i) * h + y) * w + x];
  }
  T at(int ch, int i, int y, int x) const {
    return data[((static_cast<std::size_t>(ch) * n + i) * h + y) * w + x];
  }
};

/// A named trainable tensor and its gradient accumulator.
template <typename T>
struct Param {
  std::string name;
  std::vector<int> shape;
  AlignedVector<T> value;
  AlignedVector<T> grad;
  bool trainable = true;

  Param() = default;
  Param(std::string n, std::vector<int> s, bool train = true)
      : name(std::move(n)), shape(std::move(s)), trainable(train) {
    std::size_t total = 1;
    for (int d : shape) total *= static_cast<std::size_t>(d);
    value.assign(total, T(0));
    grad.assign(total, T(0));
  }
  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

/// Non-trainable state that still belongs in a checkpoint.
template <typename T>
struct Buffer {
  std::string name;
  std::vector<int> shape;
  AlignedVector<T> value;
};

// ---------------------------------------------------------------------------

/// 2-D convolution (cross-correlation) without bias. Padding may be
/// negative, which crops the input before sampling; a 1x1 stride-2 conv
/// with padding -1 samples the centers of the 3x3 stride-2 valid windows.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int in_c, int out_c, int k, int stride, int pad)
      : weight(std::move(name) + ".weight", {out_c, in_c, k, k}),
        in_c_(in_c), out_c_(out_c), k_(k), stride_(stride), pad_(pad) {}

  int out_size(int in) const { return (in + 2 * pad_ - k_) / stride_ + 1; }
  int in_channels() const { return in_c_; }
  int out_channels() const { return out_c_; }

  void init_he(Rng& rng) {
    const double stddev = std::sqrt(2.0 / (static_cast<double>(in_c_) * k_ * k_));
    for (T& v : weight.value) v = static_cast<T>(stddev * gaussian(rng));
  }

  Activation<T> forward(const Activation<T>& x, Mode mode) {
    if (x.c != in_c_) {
      throw Error(weight.name + ": expected " + std::to_string(in_c_) + " input channels, got " +
                  std::to_string(x.c));
    }
    const int oh = out_size(x.h), ow = out_size(x.w);
    if (oh <= 0 || ow <= 0) throw Error(weight.name + ": input too small");
    in_shape_ = x.shape();
    im2col(x, oh, ow);
    Activation<T> y(out_c_, x.n, oh, ow);
    const auto kdim = static_cast<Eigen::Index>(in_c_) * k_ * k_;
    const auto pdim = static_cast<Eigen::Index>(x.n) * oh * ow;
    MatMap<T>(y.data.data(), out_c_, pdim).noalias() =
        ConstMatMap<T>(weight.value.data(), out_c_, kdim) *
        ConstMatMap<T>(cols_.data(), kdim, pdim);
    cached_ = mode == Mode::Train;
    return y;
  }

  /// Accumulates the weight gradient (when trainable) and returns the input
  /// gradient, or an empty activation when `need_dx` is false.
  Activation<T> backward(const Activation<T>& dy, bool need_dx) {
    if (!cached_) throw Error(weight.name + ": backward without a training forward");
    const auto kdim = static_cast<Eigen::Index>(in_c_) * k_ * k_;
    const auto pdim = static_cast<Eigen::Index>(dy.n) * dy.h * dy.w;
    const ConstMatMap<T> dmat(dy.data.data(), out_c_, pdim);
    if (weight.trainable) {
      MatMap<T>(weight.grad.data(), out_c_, kdim).noalias() +=
          dmat * ConstMatMap<T>(cols_.data(), kdim, pdim).transpose();
    }
    cached_ = false;
    if (!need_dx) return {};
    // The column buffer is no longer needed; reuse it for the input gradient.
    MatMap<T>(cols_.data(), kdim, pdim).noalias() =
        ConstMatMap<T>(weight.value.data(), out_c_, kdim).transpose() * dmat;
    Activation<T> dx(in_shape_.c, in_shape_.n, in_shape_.h, in_shape_.w);
    col2im(dy.h, dy.w, dx);
    return dx;
  }

  void release() {
    AlignedVector<T>().swap(cols_);
    cached_ = false;
  }

  Param<T> weight;

 private:
  /// Output positions [lo, hi) along one axis whose tap `kk` lands inside
  /// an input of length `in`: 0 <= o * stride - pad + kk < in.
  void valid_range(int kk, int in, int out, int& lo, int& hi) const {
    const int a = pad_ - kk;
    lo = a <= 0 ? 0 : (a + stride_ - 1) / stride_;
    const int b = in - 1 + pad_ - kk;
    hi = b < 0 ? 0 : std::min(out, b / stride_ + 1);
    if (hi < lo) hi = lo;
  }

  void im2col(const Activation<T>& x, int oh, int ow) {
    const std::size_t pdim = static_cast<std::size_t>(x.n) * oh * ow;
    cols_.resize(static_cast<std::size_t>(in_c_) * k_ * k_ * pdim);
    T* dst = cols_.data();
    for (int ci = 0; ci < in_c_; ++ci) {
      for (int ky = 0; ky < k_; ++ky) {
        int oy_lo, oy_hi;
        valid_range(ky, x.h, oh, oy_lo, oy_hi);
        for (int kx = 0; kx < k_; ++kx, dst += pdim) {
          int ox_lo, ox_hi;
          valid_range(kx, x.w, ow, ox_lo, ox_hi);
          T* row = dst;
          for (int i = 0; i < x.n; ++i) {
            const T* src = x.data.data() + (static_cast<std::size_t>(ci) * x.n + i) * x.h * x.w;
            for (int oy = 0; oy < oh; ++oy, row += ow) {
              if (oy < oy_lo || oy >= oy_hi || ox_lo >= ox_hi) {
                std::fill(row, row + ow, T(0));
                continue;
              }
              const T* srow = src + static_cast<std::ptrdiff_t>(oy * stride_ - pad_ + ky) * x.w +
                              (kx - pad_);
              std::fill(row, row + ox_lo, T(0));
              if (stride_ == 1) {
                std::copy(srow + ox_lo, srow + ox_hi, row + ox_lo);
              } else {
                for (int ox = ox_lo; ox < ox_hi; ++ox) row[ox] = srow[ox * stride_];
              }
              std::fill(row + ox_hi, row + ow, T(0));
            }
          }
        }
      }
    }
  }

  void col2im(int oh, int ow, Activation<T>& dx) const {
    const std::size_t pdim = static_cast<std::size_t>(dx.n) * oh * ow;
    const T* src = cols_.data();
    for (int ci = 0; ci < in_c_; ++ci) {
      for (int ky = 0; ky < k_; ++ky) {
        int oy_lo, oy_hi;
        valid_range(ky, dx.h, oh, oy_lo, oy_hi);
        for (int kx = 0; kx < k_; ++kx, src += pdim) {
          int ox_lo, ox_hi;
          valid_range(kx, dx.w, ow, ox_lo, ox_hi);
          for (int i = 0; i < dx.n; ++i) {
            T* dst = dx.data.data() + (static_cast<std::size_t>(ci) * dx.n + i) * dx.h * dx.w;
            const T* base = src + static_cast<std::size_t>(i) * oh * ow;
            for (int oy = oy_lo; oy < oy_hi; ++oy) {
              const T* row = base + static_cast<std::size_t>(oy) * ow;
              T* drow = dst + static_cast<std::ptrdiff_t>(oy * stride_ - pad_ + ky) * dx.w +
                        (kx - pad_);
              if (stride_ == 1) {
                for (int ox = ox_lo; ox < ox_hi; ++ox) drow[ox] += row[ox];
              } else {
                for (int ox = ox_lo; ox < ox_hi; ++ox) drow[ox * stride_] += row[ox];
              }
            }
          }
        }
      }
    }
  }

  int in_c_ = 0, out_c_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  Shape4 in_shape_;
  AlignedVector<T> cols_;
  bool cached_ = false;
};

// ---------------------------------------------------------------------------

/// Batch normalization over (sample, row, col) per channel. Train mode uses
/// batch statistics and updates running estimates (momentum 0.1, unbiased
/// variance); Eval mode uses the running estimates only.
template <typename T>
class BatchNorm2d {
 public:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

  BatchNorm2d() = default;
  BatchNorm2d(const std::string& name, int channels)
      : gamma(name + ".gamma", {channels}), beta(name + ".beta", {channels}),
        running_mean{name + ".running_mean", {channels},
                     AlignedVector<T>(static_cast<std::size_t>(channels), T(0))},
        running_var{name + ".running_var", {channels},
                    AlignedVector<T>(static_cast<std::size_t>(channels), T(1))} {
    std::fill(gamma.value.begin(), gamma.value.end(), T(1));
  }

  Activation<T> forward(const Activation<T>& x, Mode mode) {
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    Activation<T> y(x.c, x.n, x.h, x.w);
    const auto m = static_cast<Eigen::Index>(x.plane());
    if (mode == Mode::Eval) {
      for (int ch = 0; ch < x.c; ++ch) {
        const auto c = static_cast<std::size_t>(ch);
        const double inv = 1.0 / std::sqrt(static_cast<double>(running_var.value[c]) + kEps);
        const T scale = static_cast<T>(gamma.value[c] * inv);
        const T shift =
            static_cast<T>(beta.value[c] - running_mean.value[c] * gamma.value[c] * inv);
        Eigen::Map<Arr>(y.channel(ch), m) = Eigen::Map<const Arr>(x.channel(ch), m) * scale + shift;
      }
      xhat_.clear();
      return y;
    }
    if (m < 2) throw Error(gamma.name + ": batch statistics need at least 2 values");
    xhat_.resize(x.data.size());
    inv_std_.assign(static_cast<std::size_t>(x.c), T(0));
    for (int ch = 0; ch < x.c; ++ch) {
      const auto c = static_cast<std::size_t>(ch);
      const Eigen::Map<const Arr> src(x.channel(ch), m);
      const double mean = static_cast<double>(src.sum()) / static_cast<double>(m);
      const double var =
          static_cast<double>((src - static_cast<T>(mean)).square().sum()) / static_cast<double>(m);
      const double inv = 1.0 / std::sqrt(var + kEps);
      inv_std_[c] = static_cast<T>(inv);
      Eigen::Map<Arr> xh(xhat_.data() + c * static_cast<std::size_t>(m), m);
      xh = (src - static_cast<T>(mean)) * static_cast<T>(inv);
      Eigen::Map<Arr>(y.channel(ch), m) = xh * gamma.value[c] + beta.value[c];
      running_mean.value[c] = static_cast<T>((1.0 - kMomentum) * running_mean.value[c] +
                                             kMomentum * mean);
      running_var.value[c] = static_cast<T>(
          (1.0 - kMomentum) * running_var.value[c] +
          kMomentum * var * static_cast<double>(m) / static_cast<double>(m - 1));
    }
    return y;
  }

  Activation<T> backward(const Activation<T>& dy) {
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    if (xhat_.empty()) throw Error(gamma.name + ": backward without a training forward");
    Activation<T> dx(dy.c, dy.n, dy.h, dy.w);
    const auto m = static_cast<Eigen::Index>(dy.plane());
    for (int ch = 0; ch < dy.c; ++ch) {
      const auto c = static_cast<std::size_t>(ch);
      const Eigen::Map<const Arr> g(dy.channel(ch), m);
      const Eigen::Map<const Arr> xh(xhat_.data() + c * static_cast<std::size_t>(m), m);
      const T sum_g = g.sum();
      const T sum_gx = (g * xh).sum();
      gamma.grad[c] += sum_gx;
      beta.grad[c] += sum_g;
      const T k = static_cast<T>(gamma.value[c] * static_cast<double>(inv_std_[c]) /
                                 static_cast<double>(m));
      Eigen::Map<Arr>(dx.channel(ch), m) =
          k * (static_cast<T>(m) * g - sum_g - xh * sum_gx);
    }
    return dx;
  }

  void release() {
    AlignedVector<T>().swap(xhat_);
  }

  Param<T> gamma;
  Param<T> beta;
  Buffer<T> running_mean;
  Buffer<T> running_var;

 private:
  AlignedVector<T> xhat_;
  AlignedVector<T> inv_std_;
};

// ---------------------------------------------------------------------------

template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
inline void relu_inplace(Activation<T>& x) {
  ArrMap<T> a(x.data.data(), static_cast<Eigen::Index>(x.data.size()));
  a = a.max(T(0));
}

/// Zeroes `grad` wherever the ReLU output `out` was not positive.
template <typename T>
inline void relu_backward_inplace(Activation<T>& grad, const Activation<T>& out) {
  const auto n = static_cast<Eigen::Index>(grad.data.size());
  ArrMap<T> g(grad.data.data(), n);
  g = (ConstArrMap<T>(out.data.data(), n) > T(0)).select(g, T(0));
}

template <typename T>
inline void add_inplace(Activation<T>& a, const Activation<T>& b) {
  const auto n = static_cast<Eigen::Index>(a.data.size());
  ArrMap<T>(a.data.data(), n) += ConstArrMap<T>(b.data.data(), n);
}

/// Global average pooling: returns an (n x c) matrix of per-channel means.
template <typename T>
inline RowMat<T> global_average_pool(const Activation<T>& x) {
  RowMat<T> out(x.n, x.c);
  const std::size_t hw = static_cast<std::size_t>(x.h) * x.w;
  for (int ch = 0; ch < x.c; ++ch) {
    for (int i = 0; i < x.n; ++i) {
      const T* p = x.channel(ch) + static_cast<std::size_t>(i) * hw;
      double s = 0.0;
      for (std::size_t j = 0; j < hw; ++j) s += p[j];
      out(i, ch) = static_cast<T>(s / static_cast<double>(hw));
    }
  }
  return out;
}

template <typename T>
inline Activation<T> global_average_pool_backward(const RowMat<T>& dout, const Shape4& in) {
  Activation<T> dx(in.c, in.n, in.h, in.w);
  const std::size_t hw = static_cast<std::size_t>(in.h) * in.w;
  for (int ch = 0; ch < in.c; ++ch) {
    for (int i = 0; i < in.n; ++i) {
      const T v = static_cast<T>(dout(i, ch) / static_cast<double>(hw));
      T* p = dx.channel(ch) + static_cast<std::size_t>(i) * hw;
      std::fill(p, p + hw, v);
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------

/// Affine map y = x W^T + b over rows of x.
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in, int out)
      : weight(name + ".weight", {out, in}), bias(name + ".bias", {out}), in_(in), out_(out) {}

  int in_features() const { return in_; }
  int out_features() const { return out_; }

  /// Weights uniform in +-1/sqrt(fan_in); bias zero.
  void init_uniform(Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
    for (T& v : weight.value) v = static_cast<T>(uniform(rng, -bound, bound));
    std::fill(bias.value.begin(), bias.value.end(), T(0));
  }

  RowMat<T> forward(const RowMat<T>& x, Mode mode) {
    if (x.cols() != in_) throw Error(weight.name + ": input width mismatch");
    const ConstMatMap<T> w(weight.value.data(), out_, in_);
    RowMat<T> y = x * w.transpose();
    for (Eigen::Index r = 0; r < y.rows(); ++r)
      for (int o = 0; o < out_; ++o) y(r, o) += bias.value[static_cast<std::size_t>(o)];
    if (mode == Mode::Train) x_ = x;
    return y;
  }

  RowMat<T> backward(const RowMat<T>& dy) {
    if (weight.trainable) {
      MatMap<T>(weight.grad.data(), out_, in_).noalias() += dy.transpose() * x_;
      for (int o = 0; o < out_; ++o) bias.grad[static_cast<std::size_t>(o)] += dy.col(o).sum();
    }
    return dy * ConstMatMap<T>(weight.value.data(), out_, in_);
  }

  Param<T> weight;
  Param<T> bias;

 private:
  int in_ = 0, out_ = 0;
  RowMat<T> x_;
};

}  // namespace multipod::nn
