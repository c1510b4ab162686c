#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "multipod/checkpoint.hpp"
#include "multipod/core.hpp"
#include "multipod/dataset.hpp"
#include "multipod/evaluation.hpp"
#include "multipod/model.hpp"
#include "multipod/pipeline.hpp"

namespace multipod {

// ---------------------------------------------------------------------------
// Loss

/// -log softmax(logits)[label], stabilized by subtracting the max logit.
template <typename Row>
double cross_entropy(const Row& logits, StageLabel label) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int k = 0; k < kNumStages; ++k) {
    const double z = static_cast<double>(logits(k));
    if (!std::isfinite(z)) throw Error("cross_entropy: non-finite logit");
    mx = std::max(mx, z);
  }
  double sum = 0.0;
  for (int k = 0; k < kNumStages; ++k) sum += std::exp(static_cast<double>(logits(k)) - mx);
  return std::log(sum) + mx - static_cast<double>(logits(stage_index(label)));
}

/// Mean cross-entropy over the batch; `dlogits` receives its gradient,
/// (softmax - onehot) / n.
template <typename T>
double batch_cross_entropy(const nn::RowMat<T>& logits, std::span<const StageLabel> labels,
                           nn::RowMat<T>* dlogits) {
  const auto n = logits.rows();
  if (static_cast<std::size_t>(n) != labels.size()) throw Error("label count mismatch");
  double total = 0.0;
  if (dlogits) dlogits->resize(n, kNumStages);
  for (Eigen::Index i = 0; i < n; ++i) {
    const StageLabel y = labels[static_cast<std::size_t>(i)];
    total += cross_entropy(logits.row(i), y);
    if (dlogits) {
      double mx = logits.row(i).maxCoeff();
      double sum = 0.0;
      for (int k = 0; k < kNumStages; ++k) sum += std::exp(static_cast<double>(logits(i, k)) - mx);
      for (int k = 0; k < kNumStages; ++k) {
        const double p = std::exp(static_cast<double>(logits(i, k)) - mx) / sum;
        (*dlogits)(i, k) = static_cast<T>((p - (k == stage_index(y) ? 1.0 : 0.0)) /
                                          static_cast<double>(n));
      }
    }
  }
  return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Optimizer and schedule

struct TrainConfig {
  double lr0 = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 32;
  int epochs = 100;
  std::vector<int> milestones{25, 50, 75};
  double decay_factor = 0.1;
  std::uint64_t seed = 0;
  AugPolicy data_policy{PolicyKind::TranslateAutoContrast};
  bool patch_aug = true;
  PatchAugParams patch_aug_params;
  int workers = 1;
  /// Where run.csv, summary.json and checkpoints go; empty writes nothing.
  std::filesystem::path out_dir;
  /// Also checkpoint every k epochs when > 0.
  int checkpoint_every = 0;

  void validate() const {
    if (!(lr0 > 0.0) || !(decay_factor > 0.0)) throw Error("learning rates must be positive");
    if (momentum < 0.0 || weight_decay < 0.0) throw Error("momentum/weight decay must be >= 0");
    if (batch_size < 1 || epochs < 1) throw Error("batch size and epochs must be >= 1");
    for (std::size_t i = 0; i < milestones.size(); ++i) {
      if (milestones[i] < 0 || milestones[i] >= epochs ||
          (i > 0 && milestones[i] <= milestones[i - 1])) {
        throw Error("milestones must be strictly increasing and < epochs");
      }
    }
    if (workers < 1) throw Error("workers must be >= 1");
    data_policy.validate();
  }
};

/// The reference schedule {25, 50, 75} of a 100-epoch run, scaled to
/// `epochs` and rounded; collapsed or out-of-range milestones are dropped.
inline std::vector<int> scaled_milestones(int epochs) {
  std::vector<int> out;
  for (int m : {25, 50, 75}) {
    const int s = static_cast<int>(std::lround(m * static_cast<double>(epochs) / 100.0));
    if (s > 0 && s < epochs && (out.empty() || s > out.back())) out.push_back(s);
  }
  return out;
}

inline double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch >= cfg.epochs) {
    throw Error("epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.epochs) + ")");
  }
  const auto passed = std::count_if(cfg.milestones.begin(), cfg.milestones.end(),
                                    [epoch](int m) { return m <= epoch; });
  // dividing by (1/decay)^k keeps 0.1 -> 0.01 -> 0.001 exact for decay 0.1
  return cfg.lr0 / std::pow(1.0 / cfg.decay_factor, static_cast<double>(passed));
}

/// v <- momentum * v + (grad + wd * param); param <- param - lr * v.
template <typename T>
void sgd_step(std::span<T> params, std::span<const T> grads, std::span<T> velocity, double lr,
              double momentum, double weight_decay) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw Error("sgd_step: shape mismatch");
  }
  const T m = static_cast<T>(momentum), wd = static_cast<T>(weight_decay), a = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = m * velocity[i] + (grads[i] + wd * params[i]);
    params[i] -= a * velocity[i];
  }
}

/// Momentum buffers for every trainable parameter of one model.
template <typename T>
class SgdOptimizer {
 public:
  explicit SgdOptimizer(MultiPodModel<T>& model) : params_(model.parameters()) {
    for (const auto* p : params_) velocity_.emplace_back(p->size(), T(0));
  }

  void step(double lr, double momentum, double weight_decay) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto* p = params_[i];
      if (!p->trainable) continue;
      sgd_step<T>(p->value, p->grad, velocity_[i], lr, momentum, weight_decay);
    }
  }

 private:
  std::vector<nn::Param<T>*> params_;
  std::vector<nn::AlignedVector<T>> velocity_;
};

// ---------------------------------------------------------------------------
// Epoch loop

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double lr = 0.0;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct RunLog {
  std::vector<EpochRecord> epochs;

  const EpochRecord& final_epoch() const { return epochs.back(); }
  /// Earliest epoch with the highest test accuracy.
  const EpochRecord& best_epoch() const {
    return *std::max_element(epochs.begin(), epochs.end(),
                             [](const EpochRecord& a, const EpochRecord& b) {
                               return a.test_acc < b.test_acc;
                             });
  }
};

inline std::string run_log_csv(const RunLog& log) {
  std::string out = "epoch,train_loss,train_acc,test_acc,lr\n";
  for (const auto& e : log.epochs) {
    out += std::to_string(e.epoch) + "," + detail::format_double(e.train_loss) + "," +
           detail::format_double(e.train_acc) + "," + detail::format_double(e.test_acc) + "," +
           detail::format_double(e.lr) + "\n";
  }
  return out;
}

/// Instrumentation points, used by tests to observe the data path.
struct TrainHooks {
  /// Called once per training sample whenever augmentation runs on it.
  std::function<void(const SubjectRecord&)> on_augment;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Loads and preprocesses every record once (crop + resize).
inline std::vector<ImageBuffer> load_buffers(const Manifest& m, int workers = 1) {
  std::vector<ImageBuffer> out(m.size());
  std::vector<std::string> errors(m.size());
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      try {
        out[i] = load_record_image(m, m.records[i]);
      } catch (const Error& e) {
        errors[i] = e.what();
      }
    }
  };
  if (workers <= 1 || m.size() < 2) {
    work(0, m.size());
  } else {
    std::vector<std::thread> threads;
    const std::size_t chunk = (m.size() + static_cast<std::size_t>(workers) - 1) / static_cast<std::size_t>(workers);
    for (std::size_t b = 0; b < m.size(); b += chunk) {
      threads.emplace_back(work, b, std::min(m.size(), b + chunk));
    }
    for (auto& t : threads) t.join();
  }
  for (const auto& e : errors) {
    if (!e.empty()) throw Error(e);
  }
  return out;
}

/// Batches of a shuffled epoch order. The final partial batch is kept, but
/// a lone trailing sample joins the previous batch.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order,
                                                          int batch_size) {
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(order.size(), b + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(b),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  if (batches.size() >= 2 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng({seed, static_cast<std::uint64_t>(epoch), 0x53485546ULL});
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
  return order;
}

namespace detail {

/// One augmented training sample: a PatchSet per pod (StackNet pods get
/// independent patch-augmentation draws) and its noisy age feature.
struct PreparedSample {
  std::vector<PatchSet> per_pod;
  std::array<double, kAgeRepeat> age{};
};

template <typename T>
PreparedSample prepare_sample(const MultiPodModel<T>& model, const TrainConfig& cfg,
                              const ImageBuffer& buffer, const SubjectRecord& rec,
                              std::size_t index, int epoch) {
  Rng rng = make_rng({cfg.seed, static_cast<std::uint64_t>(epoch), index, 0x41554755ULL});
  const ImageBuffer img = apply_policy(cfg.data_policy, buffer, rng);
  const PatchSet base = extract_patches(img);
  PreparedSample s;
  const int sets = model.config().variant == Variant::StackNet ? model.config().pods() : 1;
  for (int k = 0; k < sets; ++k) {
    s.per_pod.push_back(cfg.patch_aug ? augment_patchset(base, rng, cfg.patch_aug_params) : base);
  }
  s.age = age_feature(rec.age_years, &rng, Mode::Train, model.config().age_scale);
  return s;
}

}  // namespace detail

/// Trains `model` in place with minibatch SGD and returns the per-epoch log.
/// Augmentation touches training samples only; the test set is scored each
/// epoch through the deterministic eval path. Results depend only on the
/// inputs and `cfg` (not on `cfg.workers`).
template <typename T>
RunLog train(MultiPodModel<T>& model, const Manifest& train_set, const Manifest& test_set,
             const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (train_set.empty()) throw Error("training manifest is empty");
  if (test_set.empty()) throw Error("test manifest is empty");
  const std::vector<ImageBuffer> train_buf = load_buffers(train_set, cfg.workers);
  const std::vector<ImageBuffer> test_buf = load_buffers(test_set, cfg.workers);

  if (!cfg.out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(cfg.out_dir, ec);
    if (ec) throw Error("cannot create '" + cfg.out_dir.string() + "': " + ec.message());
  }

  SgdOptimizer<T> opt(model);
  RunLog log;
  const int pods = model.config().pods();
  const bool stack = model.config().variant == Variant::StackNet;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    const auto batches = make_batches(epoch_order(train_set.size(), cfg.seed, epoch), cfg.batch_size);
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;

    for (const auto& batch : batches) {
      const int n = static_cast<int>(batch.size());
      std::vector<detail::PreparedSample> samples(batch.size());
      auto prepare = [&](std::size_t begin, std::size_t end) {
        for (std::size_t j = begin; j < end; ++j) {
          const std::size_t idx = batch[j];
          samples[j] = detail::prepare_sample(model, cfg, train_buf[idx], train_set.records[idx],
                                              idx, epoch);
        }
      };
      if (cfg.workers <= 1) {
        prepare(0, batch.size());
      } else {
        std::vector<std::thread> threads;
        const std::size_t chunk = (batch.size() + static_cast<std::size_t>(cfg.workers) - 1) /
                                  static_cast<std::size_t>(cfg.workers);
        for (std::size_t b = 0; b < batch.size(); b += chunk) {
          threads.emplace_back(prepare, b, std::min(batch.size(), b + chunk));
        }
        for (auto& t : threads) t.join();
      }
      if (hooks.on_augment) {
        for (std::size_t idx : batch) hooks.on_augment(train_set.records[idx]);
      }

      std::vector<nn::Activation<T>> inputs;
      std::vector<PatchSet> flat(batch.size());
      if (!stack) {
        for (std::size_t j = 0; j < samples.size(); ++j) flat[j] = samples[j].per_pod[0];
        inputs = model.route(flat);
      } else {
        for (int k = 0; k < pods; ++k) {
          for (std::size_t j = 0; j < samples.size(); ++j) {
            flat[j] = samples[j].per_pod[static_cast<std::size_t>(k)];
          }
          inputs.push_back(std::move(model.route(flat)[static_cast<std::size_t>(k)]));
        }
      }
      nn::RowMat<T> age(n, kAgeRepeat);
      std::vector<StageLabel> labels(batch.size());
      for (int i = 0; i < n; ++i) {
        for (int k = 0; k < kAgeRepeat; ++k) {
          age(i, k) = static_cast<T>(samples[static_cast<std::size_t>(i)].age[static_cast<std::size_t>(k)]);
        }
        labels[static_cast<std::size_t>(i)] = train_set.records[batch[static_cast<std::size_t>(i)]].stage;
      }

      model.zero_grad();
      const nn::RowMat<T> logits = model.forward_routed(inputs, age, Mode::Train);
      nn::RowMat<T> dlogits;
      const double loss = batch_cross_entropy<T>(logits, labels, &dlogits);
      if (!std::isfinite(loss)) throw Error("training diverged at epoch " + std::to_string(epoch));
      model.backward(dlogits);
      opt.step(lr, cfg.momentum, cfg.weight_decay);

      loss_sum += loss * n;
      seen += static_cast<std::size_t>(n);
      for (int i = 0; i < n; ++i) {
        if (argmax_stage(logits.row(i)) == labels[static_cast<std::size_t>(i)]) ++correct;
      }
    }

    model.epoch = epoch + 1;
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(seen);
    rec.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    rec.test_acc = evaluate_buffers(model, test_buf, test_set).accuracy;
    log.epochs.push_back(rec);
    if (hooks.on_epoch) hooks.on_epoch(rec);

    if (!cfg.out_dir.empty() && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 &&
        epoch + 1 < cfg.epochs) {
      save_checkpoint(model, cfg.out_dir / ("checkpoint_epoch" + std::to_string(epoch + 1) + ".ckpt"));
    }
  }

  if (!cfg.out_dir.empty()) {
    save_checkpoint(model, cfg.out_dir / "model.ckpt");
    std::ofstream csv(cfg.out_dir / "run.csv", std::ios::binary);
    csv << run_log_csv(log);
    nlohmann::ordered_json summary;
    summary["final_epoch"] = log.final_epoch().epoch;
    summary["final_test_acc"] = log.final_epoch().test_acc;
    summary["final_train_acc"] = log.final_epoch().train_acc;
    summary["best_epoch"] = log.best_epoch().epoch;
    summary["best_test_acc"] = log.best_epoch().test_acc;
    summary["model_config"] = describe(model.config());
    summary["params"] = model.param_count();
    std::ofstream js(cfg.out_dir / "summary.json", std::ios::binary);
    js << summary.dump(2) << '\n';
    if (!csv || !js) throw Error("failed writing run outputs to '" + cfg.out_dir.string() + "'");
  }
  return log;
}

}  // namespace multipod
