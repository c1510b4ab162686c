#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "multipod/core.hpp"
#include "multipod/filters.hpp"
#include "multipod/nn.hpp"
#include "multipod/pipeline.hpp"

namespace multipod {

using nn::Mode;

enum class Variant { SinglePod, DuPod, TriPod, QuadPod, StackNet };

inline constexpr std::array<Variant, 5> kAllVariants = {
    Variant::SinglePod, Variant::DuPod, Variant::TriPod, Variant::QuadPod, Variant::StackNet};

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::SinglePod: return "single";
    case Variant::DuPod: return "dupod";
    case Variant::TriPod: return "tripod";
    case Variant::QuadPod: return "quadpod";
    case Variant::StackNet: return "stacknet";
  }
  throw Error("unknown variant");
}

inline std::optional<Variant> parse_variant(std::string_view s) {
  if (s == "single" || s == "singlepod") return Variant::SinglePod;
  if (s == "du" || s == "dupod") return Variant::DuPod;
  if (s == "tri" || s == "tripod") return Variant::TriPod;
  if (s == "quad" || s == "quadpod") return Variant::QuadPod;
  if (s == "stack" || s == "stacknet") return Variant::StackNet;
  return std::nullopt;
}

inline int pod_count(Variant v) {
  switch (v) {
    case Variant::SinglePod: return 1;
    case Variant::DuPod: return 2;
    case Variant::TriPod: return 3;
    case Variant::QuadPod: return 4;
    case Variant::StackNet: return 3;
  }
  throw Error("unknown variant");
}

/// Patch fed to pod `k`: patch k for the per-patch variants, with the fourth
/// QuadPod pod reusing the middle (C3) patch; -1 means the 3-channel stack.
inline int pod_patch_index(Variant v, int k) {
  if (v == Variant::StackNet) return -1;
  if (v == Variant::QuadPod && k == 3) return 1;
  return k;
}

/// Residual backbone of one pod: conv1, three stages of basic blocks, and
/// global average pooling.
struct BackboneSpec {
  std::array<int, 3> widths{16, 32, 64};
  int blocks_per_stage = 3;

  friend bool operator==(const BackboneSpec&, const BackboneSpec&) = default;
};

inline constexpr int kAgeRepeat = 6;
inline constexpr double kAgeNoiseVariance = 0.01;

struct MultiPodConfig {
  Variant variant = Variant::TriPod;
  bool use_directional_filters = true;
  bool trainable_filters = true;
  bool use_age = true;
  std::uint64_t seed = 0;
  double filter_sigma = 1.5;
  double age_scale = 0.1;
  BackboneSpec backbone;

  int pods() const { return pod_count(variant); }
  int patch_channels() const { return variant == Variant::StackNet ? kNumPatches : 1; }
  int backbone_input_channels() const {
    return patch_channels() * (use_directional_filters ? kNumOrientations : 1);
  }
  int feature_width() const { return backbone.widths[2]; }
  int fusion_inputs() const { return pods() * feature_width() + (use_age ? kAgeRepeat : 0); }

  friend bool operator==(const MultiPodConfig&, const MultiPodConfig&) = default;
};

/// The age entering the fusion head: scale * age repeated six times, plus
/// independent N(0, 0.01) noise per entry in Train mode only.
inline std::array<double, kAgeRepeat> age_feature(double age_years, Rng* rng, Mode mode,
                                                  double scale = 0.1) {
  if (!(age_years >= 0.0)) throw Error("age must be non-negative");
  std::array<double, kAgeRepeat> out{};
  const double noise_sd = std::sqrt(kAgeNoiseVariance);
  for (double& v : out) {
    v = scale * age_years;
    if (mode == Mode::Train) {
      if (rng == nullptr) throw Error("train-mode age feature needs an rng");
      v += noise_sd * gaussian(*rng);
    }
  }
  return out;
}

/// Intensities enter the network scaled from [0, 255] to [0, 1].
inline constexpr double kInputScale = 1.0 / 255.0;

/// Shapes and activations captured during a probe forward.
template <typename T>
struct PodTrace {
  std::vector<std::pair<std::string, nn::Shape4>> shapes;
  nn::Activation<T> last_stage;
  nn::RowMat<T> pooled;
};

template <typename T>
struct ForwardTrace {
  std::vector<PodTrace<T>> pods;
  nn::RowMat<T> fusion_input;
};

// ---------------------------------------------------------------------------

/// The directional bank as a layer: shared 8x1x7x7 weights applied to every
/// input channel, output channel = in_channel * 8 + orientation.
template <typename T>
class DirectionalFilterLayer {
 public:
  DirectionalFilterLayer() = default;
  DirectionalFilterLayer(const std::string& name, const DirectionalFilterBank& bank)
      : conv_(name, 1, kNumOrientations, kKernelSize, 1, kKernelRadius) {
    conv_.weight.trainable = bank.trainable;
    for (int k = 0; k < kNumOrientations; ++k)
      for (int i = 0; i < kKernelSize * kKernelSize; ++i)
        conv_.weight.value[static_cast<std::size_t>(k * kKernelSize * kKernelSize + i)] =
            static_cast<T>(bank.kernels[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)]);
  }

  nn::Param<T>& weight() { return conv_.weight; }
  const nn::Param<T>& weight() const { return conv_.weight; }

  nn::Activation<T> forward(const nn::Activation<T>& x, Mode mode) {
    in_c_ = x.c;
    nn::Activation<T> flat(1, x.c * x.n, x.h, x.w);
    flat.data = x.data;
    const nn::Activation<T> y = conv_.forward(flat, mode);
    // [k][ci][n] -> [ci][k][n]
    nn::Activation<T> out(x.c * kNumOrientations, x.n, x.h, x.w);
    const std::size_t plane = x.plane();
    for (int k = 0; k < kNumOrientations; ++k)
      for (int ci = 0; ci < x.c; ++ci)
        std::copy_n(y.data.data() + (static_cast<std::size_t>(k) * x.c + ci) * plane, plane,
                    out.channel(ci * kNumOrientations + k));
    return out;
  }

  void backward(const nn::Activation<T>& dy) {
    if (!conv_.weight.trainable) return;
    const int n = dy.n;
    nn::Activation<T> g(kNumOrientations, in_c_ * n, dy.h, dy.w);
    const std::size_t plane = dy.plane();
    for (int k = 0; k < kNumOrientations; ++k)
      for (int ci = 0; ci < in_c_; ++ci)
        std::copy_n(dy.channel(ci * kNumOrientations + k), plane,
                    g.data.data() + (static_cast<std::size_t>(k) * in_c_ + ci) * plane);
    conv_.backward(g, false);
  }

 private:
  nn::Conv2d<T> conv_;
  int in_c_ = 1;
};

/// conv-bn-relu-conv-bn plus shortcut, then relu. Downsampling blocks use a
/// 3x3 stride-2 unpadded first conv and a 1x1 stride-2 projection sampled
/// at the same window centers.
template <typename T>
class BasicBlock {
 public:
  BasicBlock() = default;
  BasicBlock(const std::string& name, int in_c, int out_c, bool downsample)
      : conv1_(name + ".conv1", in_c, out_c, 3, downsample ? 2 : 1, downsample ? 0 : 1),
        bn1_(name + ".bn1", out_c),
        conv2_(name + ".conv2", out_c, out_c, 3, 1, 1),
        bn2_(name + ".bn2", out_c) {
    if (downsample || in_c != out_c) {
      proj_.emplace(name + ".proj", in_c, out_c, 1, downsample ? 2 : 1, downsample ? -1 : 0);
      proj_bn_.emplace(name + ".proj_bn", out_c);
    }
  }

  void init(Rng& rng) {
    conv1_.init_he(rng);
    conv2_.init_he(rng);
    if (proj_) proj_->init_he(rng);
  }

  nn::Activation<T> forward(const nn::Activation<T>& x, Mode mode) {
    a_ = bn1_.forward(conv1_.forward(x, mode), mode);
    nn::relu_inplace(a_);
    nn::Activation<T> out = bn2_.forward(conv2_.forward(a_, mode), mode);
    if (proj_) {
      nn::add_inplace(out, proj_bn_->forward(proj_->forward(x, mode), mode));
    } else {
      nn::add_inplace(out, x);
    }
    nn::relu_inplace(out);
    if (mode == Mode::Train) {
      out_ = out;
    } else {
      a_ = {};
    }
    return out;
  }

  nn::Activation<T> backward(nn::Activation<T> dout) {
    nn::relu_backward_inplace(dout, out_);
    nn::Activation<T> da = conv2_.backward(bn2_.backward(dout), true);
    nn::relu_backward_inplace(da, a_);
    nn::Activation<T> dx = conv1_.backward(bn1_.backward(da), true);
    if (proj_) {
      nn::add_inplace(dx, proj_->backward(proj_bn_->backward(dout), true));
    } else {
      nn::add_inplace(dx, dout);
    }
    return dx;
  }

  template <typename F>
  void visit(F&& f) {
    f(conv1_.weight);
    f(bn1_.gamma);
    f(bn1_.beta);
    f(conv2_.weight);
    f(bn2_.gamma);
    f(bn2_.beta);
    if (proj_) {
      f(proj_->weight);
      f(proj_bn_->gamma);
      f(proj_bn_->beta);
    }
  }

  template <typename F>
  void visit_buffers(F&& f) {
    for (auto* bn : {&bn1_, &bn2_}) {
      f(bn->running_mean);
      f(bn->running_var);
    }
    if (proj_bn_) {
      f(proj_bn_->running_mean);
      f(proj_bn_->running_var);
    }
  }

 private:
  nn::Conv2d<T> conv1_;
  nn::BatchNorm2d<T> bn1_;
  nn::Conv2d<T> conv2_;
  nn::BatchNorm2d<T> bn2_;
  std::optional<nn::Conv2d<T>> proj_;
  std::optional<nn::BatchNorm2d<T>> proj_bn_;
  nn::Activation<T> a_, out_;
};

/// One parallel branch: optional directional filters, conv1, three residual
/// stages, global average pooling.
template <typename T>
class Pod {
 public:
  Pod() = default;
  Pod(const std::string& name, const MultiPodConfig& cfg) {
    if (cfg.use_directional_filters) {
      filters_.emplace(name + ".filters", build_bank(cfg.filter_sigma, cfg.trainable_filters));
    }
    const auto& w = cfg.backbone.widths;
    conv1_ = nn::Conv2d<T>(name + ".conv1", cfg.backbone_input_channels(), w[0], 3, 1, 1);
    bn1_ = nn::BatchNorm2d<T>(name + ".bn1", w[0]);
    int in_c = w[0];
    for (int s = 0; s < 3; ++s) {
      for (int b = 0; b < cfg.backbone.blocks_per_stage; ++b) {
        const bool down = s > 0 && b == 0;
        blocks_.emplace_back(name + ".stage" + std::to_string(s + 1) + ".block" + std::to_string(b),
                             in_c, w[static_cast<std::size_t>(s)], down);
        in_c = w[static_cast<std::size_t>(s)];
      }
    }
  }

  void init(Rng& rng) {
    conv1_.init_he(rng);
    for (auto& b : blocks_) b.init(rng);
  }

  /// Returns the (n x width) pooled features.
  nn::RowMat<T> forward(const nn::Activation<T>& x, Mode mode, PodTrace<T>* trace) {
    auto record = [&](const char* what, const nn::Activation<T>& a) {
      if (trace) trace->shapes.emplace_back(what, a.shape());
    };
    record("input", x);
    nn::Activation<T> h;
    if (filters_) {
      h = filters_->forward(x, mode);
      record("dirfilts", h);
      h = conv1_.forward(h, mode);
    } else {
      h = conv1_.forward(x, mode);
    }
    h = bn1_.forward(h, mode);
    nn::relu_inplace(h);
    record("conv1", h);
    if (mode == Mode::Train) conv1_out_ = h;
    const int per_stage = static_cast<int>(blocks_.size()) / 3;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      h = blocks_[b].forward(h, mode);
      if ((static_cast<int>(b) + 1) % per_stage == 0) {
        static constexpr const char* kStage[] = {"stage1", "stage2", "stage3"};
        record(kStage[(static_cast<int>(b) + 1) / per_stage - 1], h);
      }
    }
    last_shape_ = h.shape();
    nn::RowMat<T> pooled = nn::global_average_pool(h);
    if (trace) {
      trace->shapes.emplace_back("pool", nn::Shape4{static_cast<int>(pooled.cols()), x.n, 1, 1});
      trace->last_stage = h;
      trace->pooled = pooled;
    }
    return pooled;
  }

  void backward(const nn::RowMat<T>& dfeat) {
    nn::Activation<T> g = nn::global_average_pool_backward(dfeat, last_shape_);
    for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) g = it->backward(std::move(g));
    nn::relu_backward_inplace(g, conv1_out_);
    g = bn1_.backward(g);
    const bool need_dx = filters_ && filters_->weight().trainable;
    g = conv1_.backward(g, need_dx);
    if (need_dx) filters_->backward(g);
  }

  template <typename F>
  void visit(F&& f) {
    if (filters_) f(filters_->weight());
    f(conv1_.weight);
    f(bn1_.gamma);
    f(bn1_.beta);
    for (auto& b : blocks_) b.visit(f);
  }

  template <typename F>
  void visit_buffers(F&& f) {
    f(bn1_.running_mean);
    f(bn1_.running_var);
    for (auto& b : blocks_) b.visit_buffers(f);
  }

 private:
  std::optional<DirectionalFilterLayer<T>> filters_;
  nn::Conv2d<T> conv1_;
  nn::BatchNorm2d<T> bn1_;
  std::vector<BasicBlock<T>> blocks_;
  nn::Activation<T> conv1_out_;
  nn::Shape4 last_shape_;
};

// ---------------------------------------------------------------------------

/// N parallel pods whose pooled features, concatenated with the age
/// feature, feed a single affine layer producing six stage logits.
template <typename T>
class MultiPodModel {
 public:
  explicit MultiPodModel(const MultiPodConfig& cfg) : cfg_(cfg) {
    for (int k = 0; k < cfg.pods(); ++k) {
      pods_.emplace_back("pod" + std::to_string(k), cfg);
      Rng rng = make_rng({cfg.seed ^ static_cast<std::uint64_t>(k)});
      pods_.back().init(rng);
    }
    fusion_ = nn::Linear<T>("fusion", cfg.fusion_inputs(), kNumStages);
    Rng rng = make_rng({cfg.seed, 0x46555345ULL});
    fusion_.init_uniform(rng);
  }

  const MultiPodConfig& config() const { return cfg_; }
  int epoch = 0;

  /// Pod inputs for a batch, scaled to [0, 1], channel-major.
  std::vector<nn::Activation<T>> route(std::span<const PatchSet> batch) const {
    const int n = static_cast<int>(batch.size());
    std::vector<nn::Activation<T>> inputs;
    for (int k = 0; k < cfg_.pods(); ++k) {
      const int which = pod_patch_index(cfg_.variant, k);
      const int channels = which < 0 ? kNumPatches : 1;
      nn::Activation<T> x(channels, n, kPatchSize, kPatchSize);
      for (int i = 0; i < n; ++i) {
        for (int ch = 0; ch < channels; ++ch) {
          const ImageBuffer& p =
              batch[static_cast<std::size_t>(i)].patches[static_cast<std::size_t>(which < 0 ? ch : which)];
          if (p.height != kPatchSize || p.width != kPatchSize || p.channels != 1) {
            throw Error("pod input patch must be 35x35x1, got " + shape_string(p));
          }
          for (int r = 0; r < kPatchSize; ++r)
            for (int c = 0; c < kPatchSize; ++c)
              x.at(ch, i, r, c) = static_cast<T>(p.at(r, c) * kInputScale);
        }
      }
      inputs.push_back(std::move(x));
    }
    return inputs;
  }

  /// Logits (n x 6). `age` is (n x 6) from age_feature and is ignored when
  /// the config has no age input.
  nn::RowMat<T> forward(std::span<const PatchSet> batch, const nn::RowMat<T>& age, Mode mode,
                        ForwardTrace<T>* trace = nullptr) {
    return forward_routed(route(batch), age, mode, trace);
  }

  nn::RowMat<T> forward_routed(const std::vector<nn::Activation<T>>& inputs,
                               const nn::RowMat<T>& age, Mode mode,
                               ForwardTrace<T>* trace = nullptr) {
    if (static_cast<int>(inputs.size()) != cfg_.pods()) {
      throw Error("expected " + std::to_string(cfg_.pods()) + " pod inputs");
    }
    const int n = inputs.front().n;
    const int fw = cfg_.feature_width();
    nn::RowMat<T> fused(n, cfg_.fusion_inputs());
    if (trace) trace->pods.assign(pods_.size(), {});
    for (std::size_t k = 0; k < pods_.size(); ++k) {
      if (inputs[k].c != cfg_.patch_channels() || inputs[k].h != kPatchSize ||
          inputs[k].w != kPatchSize || inputs[k].n != n) {
        throw Error("pod " + std::to_string(k) + " input shape does not match the config");
      }
      fused.middleCols(static_cast<Eigen::Index>(k) * fw, fw) =
          pods_[k].forward(inputs[k], mode, trace ? &trace->pods[k] : nullptr);
    }
    if (cfg_.use_age) {
      if (age.rows() != n || age.cols() != kAgeRepeat) {
        throw Error("age features must be (batch x 6)");
      }
      fused.rightCols(kAgeRepeat) = age;
    }
    if (trace) trace->fusion_input = fused;
    return fusion_.forward(fused, mode);
  }

  /// Accumulates gradients of the loss whose logit gradient is `dlogits`
  /// into every trainable parameter. Requires a preceding Train forward.
  void backward(const nn::RowMat<T>& dlogits) {
    const nn::RowMat<T> dfused = fusion_.backward(dlogits);
    const int fw = cfg_.feature_width();
    for (std::size_t k = 0; k < pods_.size(); ++k) {
      pods_[k].backward(dfused.middleCols(static_cast<Eigen::Index>(k) * fw, fw));
    }
  }

  void zero_grad() {
    visit([](nn::Param<T>& p) { p.zero_grad(); });
  }

  /// Visits every parameter (trainable or frozen) in a fixed order.
  template <typename F>
  void visit(F&& f) {
    for (auto& p : pods_) p.visit(f);
    f(fusion_.weight);
    f(fusion_.bias);
  }

  template <typename F>
  void visit_buffers(F&& f) {
    for (auto& p : pods_) p.visit_buffers(f);
  }

  std::vector<nn::Param<T>*> parameters() {
    std::vector<nn::Param<T>*> out;
    visit([&](nn::Param<T>& p) { out.push_back(&p); });
    return out;
  }

  std::vector<nn::Buffer<T>*> buffers() {
    std::vector<nn::Buffer<T>*> out;
    visit_buffers([&](nn::Buffer<T>& b) { out.push_back(&b); });
    return out;
  }

  /// Number of trainable scalars.
  std::size_t param_count() const {
    std::size_t n = 0;
    const_cast<MultiPodModel*>(this)->visit([&](const nn::Param<T>& p) {
      if (p.trainable) n += p.size();
    });
    return n;
  }

  nn::Linear<T>& fusion() { return fusion_; }

 private:
  MultiPodConfig cfg_;
  std::vector<Pod<T>> pods_;
  nn::Linear<T> fusion_;
};

template <typename T>
std::size_t param_count(const MultiPodModel<T>& model) {
  return model.param_count();
}

template <typename T>
MultiPodModel<T> build_model(const MultiPodConfig& cfg) {
  return MultiPodModel<T>(cfg);
}

/// Argmax with ties resolved toward the lower stage index.
template <typename Row>
StageLabel argmax_stage(const Row& logits) {
  int best = 0;
  for (int k = 1; k < kNumStages; ++k) {
    if (logits(k) > logits(best)) best = k;
  }
  return stage_from_index(best);
}

}  // namespace multipod
