// multipod_cli: synthesize data, split, train, evaluate, sweep ablations and
// inspect filters/patches. Exit status: 0 success, 1 runtime failure, 2 bad
// command line.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "multipod/multipod.hpp"

namespace fs = std::filesystem;
using namespace multipod;

namespace {

constexpr std::uint64_t kDefaultSeed = 7;

void print_config(const std::string& cmd,
                  const std::vector<std::pair<std::string, std::string>>& fields) {
  std::cout << cmd << ": resolved config\n";
  for (const auto& [k, v] : fields) std::cout << "  " << k << " = " << v << '\n';
  std::cout.flush();
}

std::string fmt(double v) { return detail::format_double(v); }

Manifest load_with_sex(const fs::path& path, const std::string& sex) {
  std::vector<std::string> warnings;
  Manifest m = load_manifest(path, &warnings);
  if (!warnings.empty()) {
    std::cerr << "warning: " << warnings.size() << " record(s) in '" << path.string()
              << "' have ages outside [4, 29]\n";
  }
  if (!sex.empty()) m = filter_by_sex(m, *parse_sex(sex));
  if (m.empty()) throw Error("manifest '" + path.string() + "' has no records to use");
  return m;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  int per_stage = 100;
  std::uint64_t seed = kDefaultSeed;
  double noise = SyntheticConfig{}.noise_level;
  std::string out;
  bool with_roi = false;
};

int run_synth(const SynthArgs& a) {
  SyntheticConfig cfg;
  cfg.per_stage_count = a.per_stage;
  cfg.seed = a.seed;
  cfg.noise_level = a.noise;
  cfg.with_roi = a.with_roi;
  print_config("synth", {{"per_stage", std::to_string(a.per_stage)},
                         {"seed", std::to_string(a.seed)},
                         {"noise", fmt(a.noise)},
                         {"with_roi", a.with_roi ? "1" : "0"},
                         {"age_model", fmt(cfg.age_model.base_years) + "," +
                                           fmt(cfg.age_model.per_stage_years) + "," +
                                           fmt(cfg.age_model.jitter_years)},
                         {"out", a.out}});
  const Manifest m = generate_synthetic(cfg, a.out);
  std::cout << "wrote " << m.size() << " images and " << (fs::path(a.out) / "manifest.csv").string()
            << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct SplitArgs {
  std::string manifest;
  double fraction = 0.8;
  std::uint64_t seed = kDefaultSeed;
  std::string sex;
  std::string out;
};

int run_split(const SplitArgs& a) {
  print_config("split", {{"manifest", a.manifest},
                         {"fraction", fmt(a.fraction)},
                         {"seed", std::to_string(a.seed)},
                         {"sex", a.sex.empty() ? "all" : a.sex},
                         {"out", a.out}});
  const Manifest m = load_with_sex(a.manifest, a.sex);
  const auto [train, test] = stratified_split(m, a.fraction, a.seed);
  fs::create_directories(a.out);
  save_manifest(rebase(train, a.out), fs::path(a.out) / "train.csv");
  save_manifest(rebase(test, a.out), fs::path(a.out) / "test.csv");
  const auto ht = class_histogram(train), hs = class_histogram(test);
  std::cout << "stage,train,test\n";
  for (int s = 0; s < kNumStages; ++s) {
    std::cout << to_string(stage_from_index(s)) << ',' << ht[static_cast<std::size_t>(s)] << ','
              << hs[static_cast<std::size_t>(s)] << '\n';
  }
  std::cout << "train " << train.size() << ", test " << test.size() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string manifest;
  std::string test;
  std::string variant = "tripod";
  bool no_dirfilts = false;
  bool freeze_filters = false;
  bool no_age = false;
  std::string policy = "translate-ac";
  bool no_patch_aug = false;
  int epochs = 100;
  std::uint64_t seed = kDefaultSeed;
  int workers = 1;
  int checkpoint_every = 0;
  std::string sex;
  std::string out;
};

struct RunResult {
  std::size_t params = 0;
  RunLog log;
};

std::vector<std::pair<std::string, std::string>> train_fields(const MultiPodConfig& mc,
                                                              const TrainConfig& tc) {
  auto fields = config_fields(mc);
  std::string ms;
  for (int m : tc.milestones) ms += (ms.empty() ? "" : ",") + std::to_string(m);
  fields.insert(fields.end(), {{"epochs", std::to_string(tc.epochs)},
                               {"batch_size", std::to_string(tc.batch_size)},
                               {"lr0", fmt(tc.lr0)},
                               {"momentum", fmt(tc.momentum)},
                               {"weight_decay", fmt(tc.weight_decay)},
                               {"milestones", ms.empty() ? "none" : ms},
                               {"policy", to_string(tc.data_policy.kind)},
                               {"patch_aug", tc.patch_aug ? "1" : "0"},
                               {"train_seed", std::to_string(tc.seed)},
                               {"workers", std::to_string(tc.workers)}});
  return fields;
}

RunResult train_once(const MultiPodConfig& mc, const TrainConfig& tc, const Manifest& train_set,
                     const Manifest& test_set, bool verbose) {
  auto model = build_model<float>(mc);
  TrainHooks hooks;
  const auto start = std::chrono::steady_clock::now();
  if (verbose) {
    hooks.on_epoch = [&](const EpochRecord& r) {
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::printf("epoch %3d  loss %.4f  train_acc %.4f  test_acc %.4f  lr %g  (%.0fs)\n",
                  r.epoch, r.train_loss, r.train_acc, r.test_acc, r.lr, secs);
      std::fflush(stdout);
    };
  }
  RunResult res;
  res.params = model.param_count();
  res.log = train(model, train_set, test_set, tc, hooks);
  if (!tc.out_dir.empty()) {
    EvalReport rep = evaluate(model, test_set);
    export_report(rep, tc.out_dir / "eval");
  }
  return res;
}

std::pair<MultiPodConfig, TrainConfig> configs_from(const TrainArgs& a) {
  MultiPodConfig mc;
  mc.variant = *parse_variant(a.variant);
  mc.use_directional_filters = !a.no_dirfilts;
  mc.trainable_filters = !a.freeze_filters;
  mc.use_age = !a.no_age;
  mc.seed = a.seed;
  TrainConfig tc;
  tc.epochs = a.epochs;
  tc.milestones = scaled_milestones(a.epochs);
  tc.seed = a.seed;
  tc.data_policy = AugPolicy{*parse_policy(a.policy)};
  tc.patch_aug = !a.no_patch_aug;
  tc.workers = a.workers;
  tc.checkpoint_every = a.checkpoint_every;
  tc.out_dir = a.out;
  return {mc, tc};
}

int run_train(const TrainArgs& a) {
  auto [mc, tc] = configs_from(a);
  auto fields = train_fields(mc, tc);
  fields.insert(fields.begin(), {{"manifest", a.manifest}, {"test", a.test}, {"sex", a.sex.empty() ? "all" : a.sex}});
  fields.emplace_back("out", a.out);
  print_config("train", fields);
  const Manifest train_set = load_with_sex(a.manifest, a.sex);
  const Manifest test_set = load_with_sex(a.test, a.sex);
  std::cout << "train records " << train_set.size() << ", test records " << test_set.size() << '\n';
  const RunResult res = train_once(mc, tc, train_set, test_set, true);
  const auto& fin = res.log.final_epoch();
  const auto& best = res.log.best_epoch();
  std::printf("params %zu\nfinal epoch %d test_acc %.4f\nbest epoch %d test_acc %.4f\n", res.params,
              fin.epoch, fin.test_acc, best.epoch, best.test_acc);
  std::cout << "outputs in " << a.out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::string out;
};

int run_eval(const EvalArgs& a) {
  auto model = load_checkpoint<float>(a.checkpoint);
  auto fields = config_fields(model.config());
  fields.insert(fields.begin(), {{"checkpoint", a.checkpoint}, {"manifest", a.manifest}});
  fields.emplace_back("epoch", std::to_string(model.epoch));
  fields.emplace_back("out", a.out);
  print_config("eval", fields);
  const Manifest m = load_with_sex(a.manifest, "");
  const EvalReport rep = evaluate(model, m);
  export_report(rep, a.out);
  std::printf("n %zu  accuracy %.4f\n", rep.n, rep.accuracy);
  std::cout << confusion_csv(rep.confusion);
  return 0;
}

// ---------------------------------------------------------------------------

struct SweepArgs {
  std::string grid = "pods";
  std::string manifest;
  std::string test;
  int epochs = 100;
  std::uint64_t seed = kDefaultSeed;
  std::string sex;
  int workers = 1;
  std::string out;
};

struct SweepRow {
  std::string name;
  TrainArgs args;
};

std::vector<SweepRow> sweep_rows(const SweepArgs& s) {
  TrainArgs base;
  base.manifest = s.manifest;
  base.test = s.test;
  base.epochs = s.epochs;
  base.seed = s.seed;
  base.workers = s.workers;
  base.sex = s.sex;
  std::vector<SweepRow> rows;
  if (s.grid == "pods") {
    for (Variant v : kAllVariants) {
      TrainArgs a = base;
      a.variant = to_string(v);
      rows.push_back({to_string(v), a});
    }
  } else if (s.grid == "augment") {
    for (PolicyKind k : {PolicyKind::None, PolicyKind::TranslateAutoContrast,
                         PolicyKind::RandAugmentLite, PolicyKind::AugMixLite}) {
      TrainArgs a = base;
      a.policy = to_string(k);
      rows.push_back({to_string(k), a});
    }
  } else {
    for (bool filters : {true, false}) {
      for (bool paug : {true, false}) {
        TrainArgs a = base;
        a.no_dirfilts = !filters;
        a.no_patch_aug = !paug;
        rows.push_back({std::string(filters ? "filters" : "nofilters") + "_" + (paug ? "patchaug" : "nopatchaug"), a});
      }
    }
  }
  return rows;
}

int run_sweep(const SweepArgs& s) {
  print_config("sweep", {{"grid", s.grid},
                         {"manifest", s.manifest},
                         {"test", s.test},
                         {"epochs", std::to_string(s.epochs)},
                         {"seed", std::to_string(s.seed)},
                         {"sex", s.sex.empty() ? "all" : s.sex},
                         {"workers", std::to_string(s.workers)},
                         {"out", s.out}});
  const Manifest train_set = load_with_sex(s.manifest, s.sex);
  const Manifest test_set = load_with_sex(s.test, s.sex);
  fs::create_directories(s.out);
  std::string csv =
      "grid,run,variant,pods,dirfilts,policy,patch_aug,age,params,final_test_acc,best_test_acc,"
      "best_epoch,final_train_acc\n";
  for (auto& row : sweep_rows(s)) {
    row.args.out = (fs::path(s.out) / row.name).string();
    auto [mc, tc] = configs_from(row.args);
    std::cout << "== " << row.name << ": " << describe(mc) << '\n';
    const RunResult res = train_once(mc, tc, train_set, test_set, true);
    const auto& fin = res.log.final_epoch();
    const auto& best = res.log.best_epoch();
    csv += s.grid + "," + row.name + "," + to_string(mc.variant) + "," + std::to_string(mc.pods()) + "," +
           (mc.use_directional_filters ? "1" : "0") + "," + to_string(tc.data_policy.kind) + "," +
           (tc.patch_aug ? "1" : "0") + "," + (mc.use_age ? "1" : "0") + "," +
           std::to_string(res.params) + "," + fmt(fin.test_acc) + "," + fmt(best.test_acc) + "," +
           std::to_string(best.epoch) + "," + fmt(fin.train_acc) + "\n";
    std::ofstream(fs::path(s.out) / "sweep.csv", std::ios::binary) << csv;
  }
  std::cout << csv;
  return 0;
}

// ---------------------------------------------------------------------------

// Maps a signed kernel to [0, 255] with 0 at mid-gray, upscaled for viewing.
ImageBuffer kernel_tile(const DirectionalFilterBank& bank, int k, int scale) {
  double peak = 0.0;
  for (double v : bank.kernels[static_cast<std::size_t>(k)]) peak = std::max(peak, std::abs(v));
  ImageBuffer tile(kKernelSize * scale, kKernelSize * scale, 1);
  for (int r = 0; r < tile.height; ++r)
    for (int c = 0; c < tile.width; ++c)
      tile.at(r, c) = static_cast<float>(127.5 + 127.5 * bank.at(k, r / scale, c / scale) / peak);
  return tile;
}

int run_filters(double sigma, const std::string& out) {
  print_config("filters", {{"sigma", fmt(sigma)}, {"out", out}});
  const DirectionalFilterBank bank = build_bank(sigma, true);
  fs::create_directories(out);
  std::ofstream csv(fs::path(out) / "kernels.csv", std::ios::binary);
  csv << "kernel,theta_deg,row,col,value\n";
  constexpr int kScale = 8, kGap = 4;
  ImageBuffer mosaic(kKernelSize * kScale, kNumOrientations * (kKernelSize * kScale + kGap) - kGap, 1,
                     255.0f);
  for (int k = 0; k < kNumOrientations; ++k) {
    for (int r = 0; r < kKernelSize; ++r)
      for (int c = 0; c < kKernelSize; ++c)
        csv << k << ',' << fmt(DirectionalFilterBank::orientation_deg(k)) << ',' << r << ',' << c << ','
            << fmt(bank.at(k, r, c)) << '\n';
    const ImageBuffer tile = kernel_tile(bank, k, kScale);
    char name[32];
    std::snprintf(name, sizeof name, "kernel_%d.png", k);
    write_png(fs::path(out) / name, tile);
    for (int r = 0; r < tile.height; ++r)
      for (int c = 0; c < tile.width; ++c) mosaic.at(r, k * (tile.width + kGap) + c) = tile.at(r, c);
  }
  write_png(fs::path(out) / "bank.png", mosaic);
  if (!csv) throw Error("failed writing kernels.csv");
  std::cout << "wrote kernels.csv, kernel_0..7.png and bank.png to " << out << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

int run_patches(const std::string& image, const std::string& roi_text, std::uint64_t seed,
                int previews, const std::string& out) {
  print_config("patches", {{"image", image},
                           {"roi", roi_text.empty() ? "none" : roi_text},
                           {"seed", std::to_string(seed)},
                           {"previews", std::to_string(previews)},
                           {"out", out}});
  const ImageBuffer src = read_png(image);
  std::optional<Rect> roi;
  if (!roi_text.empty()) {
    std::vector<int> v;
    std::istringstream in(roi_text);
    for (std::string f; std::getline(in, f, ',');) v.push_back(std::stoi(f));
    if (v.size() != 4) throw Error("--roi expects x,y,w,h");
    roi = Rect{v[0], v[1], v[2], v[3]};
  } else if (src.height != kRoiHeight || src.width != kRoiWidth) {
    roi = Rect{0, 0, src.width, src.height};
    std::cout << "image is " << shape_string(src) << "; resizing the whole image to 77x35\n";
  }
  const ImageBuffer buf = preprocess(src, roi);
  const PatchSet ps = extract_patches(buf);
  fs::create_directories(out);
  write_png(fs::path(out) / "roi.png", buf);
  static constexpr const char* kNames[] = {"c2", "c3", "c4"};
  for (int k = 0; k < kNumPatches; ++k) {
    write_png(fs::path(out) / (std::string(kNames[k]) + ".png"), ps.patches[static_cast<std::size_t>(k)]);
  }
  for (int i = 0; i < previews; ++i) {
    Rng rng = make_rng({seed, static_cast<std::uint64_t>(i)});
    const PatchSet aug = augment_patchset(ps, rng);
    for (int k = 0; k < kNumPatches; ++k) {
      write_png(fs::path(out) / (std::string(kNames[k]) + "_aug" + std::to_string(i) + ".png"),
                aug.patches[static_cast<std::size_t>(k)]);
    }
  }
  std::cout << "wrote roi.png, c2/c3/c4.png and " << previews << " augmented preview set(s) to "
            << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MultiPod network toolkit: synthetic data, training, evaluation and inspection"};
  app.require_subcommand(1);

  auto add_seed = [](CLI::App* cmd, std::uint64_t& seed) {
    cmd->add_option("--seed", seed, "Random seed")->envname("MULTIPOD_SEED")->capture_default_str();
  };
  const auto sex_check = CLI::IsMember({"F", "M"});
  const auto variant_check = CLI::IsMember({"single", "dupod", "tripod", "quadpod", "stacknet"});

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Generate a labeled synthetic dataset");
  c_synth->add_option("--per-stage", synth.per_stage, "Images per stage")
      ->check(CLI::PositiveNumber)->capture_default_str();
  add_seed(c_synth, synth.seed);
  c_synth->add_option("--noise", synth.noise, "Std-dev of additive noise (intensity units)")
      ->check(CLI::NonNegativeNumber)->capture_default_str();
  c_synth->add_option("--out", synth.out, "Output directory")->required();
  c_synth->add_flag("--with-roi", synth.with_roi, "Emit 154x70 canvases with a stored ROI");

  SplitArgs split;
  auto* c_split = app.add_subcommand("split", "Stratified train/test split of a manifest");
  c_split->add_option("--manifest", split.manifest, "Input manifest CSV")->required()->check(CLI::ExistingFile);
  c_split->add_option("--fraction", split.fraction, "Train fraction in (0, 1)")
      ->check(CLI::Range(0.0, 1.0))->capture_default_str();
  add_seed(c_split, split.seed);
  c_split->add_option("--sex", split.sex, "Keep only F or M records")->check(sex_check);
  c_split->add_option("--out", split.out, "Directory for train.csv and test.csv")->required();

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a model and log per-epoch accuracy");
  c_train->add_option("--manifest", tr.manifest, "Training manifest CSV")->required()->check(CLI::ExistingFile);
  c_train->add_option("--test", tr.test, "Test manifest CSV")->required()->check(CLI::ExistingFile);
  c_train->add_option("--variant", tr.variant, "single|dupod|tripod|quadpod|stacknet")
      ->check(variant_check)->capture_default_str();
  c_train->add_flag("--no-dirfilts", tr.no_dirfilts, "Disable the directional filter bank");
  c_train->add_flag("--freeze-filters", tr.freeze_filters, "Keep the filter bank fixed");
  c_train->add_flag("--no-age", tr.no_age, "Drop the age feature");
  c_train->add_option("--policy", tr.policy, "none|translate-ac|randaug|augmix")
      ->check(CLI::IsMember({"none", "translate-ac", "randaug", "augmix"}))->capture_default_str();
  c_train->add_flag("--no-patch-aug", tr.no_patch_aug, "Disable per-patch augmentation");
  c_train->add_option("--epochs", tr.epochs, "Epochs (milestones scale with this)")
      ->check(CLI::PositiveNumber)->capture_default_str();
  add_seed(c_train, tr.seed);
  c_train->add_option("--workers", tr.workers, "Data-pipeline threads")
      ->check(CLI::PositiveNumber)->capture_default_str();
  c_train->add_option("--checkpoint-every", tr.checkpoint_every, "Extra checkpoint every k epochs (0: off)")
      ->check(CLI::NonNegativeNumber)->capture_default_str();
  c_train->add_option("--sex", tr.sex, "Train and test on F or M records only")->check(sex_check);
  c_train->add_option("--out", tr.out, "Run directory")->required();

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  c_eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--manifest", ev.manifest, "Manifest CSV")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--out", ev.out, "Report directory")->required();

  SweepArgs sw;
  auto* c_sweep = app.add_subcommand("sweep", "Train an ablation grid and tabulate the results");
  c_sweep->set_config("--config", "", "Flat key=value file with sweep options; flags override it");
  c_sweep->add_option("--grid", sw.grid, "pods|augment|filters")
      ->check(CLI::IsMember({"pods", "augment", "filters"}))->capture_default_str();
  c_sweep->add_option("--manifest", sw.manifest, "Training manifest CSV")->required()->check(CLI::ExistingFile);
  c_sweep->add_option("--test", sw.test, "Test manifest CSV")->required()->check(CLI::ExistingFile);
  c_sweep->add_option("--epochs", sw.epochs, "Epochs per run")->check(CLI::PositiveNumber)->capture_default_str();
  add_seed(c_sweep, sw.seed);
  c_sweep->add_option("--sex", sw.sex, "Use F or M records only")->check(sex_check);
  c_sweep->add_option("--workers", sw.workers, "Data-pipeline threads")
      ->check(CLI::PositiveNumber)->capture_default_str();
  c_sweep->add_option("--out", sw.out, "Sweep directory (sweep.csv plus one run dir per row)")->required();

  double sigma = 1.5;
  std::string filters_out;
  auto* c_filters = app.add_subcommand("filters", "Export the directional filter bank");
  c_filters->add_option("--sigma", sigma, "Gaussian scale of the kernels")
      ->check(CLI::PositiveNumber)->capture_default_str();
  c_filters->add_option("--out", filters_out, "Output directory")->required();

  std::string patch_image, patch_roi, patches_out;
  std::uint64_t patch_seed = kDefaultSeed;
  int previews = 4;
  auto* c_patches = app.add_subcommand("patches", "Write the C2/C3/C4 patches of an image");
  c_patches->add_option("--image", patch_image, "Input PNG")->required()->check(CLI::ExistingFile);
  c_patches->add_option("--roi", patch_roi, "ROI as x,y,w,h (default: whole image)");
  add_seed(c_patches, patch_seed);
  c_patches->add_option("--previews", previews, "Augmented preview sets to write")
      ->check(CLI::NonNegativeNumber)->capture_default_str();
  c_patches->add_option("--out", patches_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*c_synth) return run_synth(synth);
    if (*c_split) return run_split(split);
    if (*c_train) return run_train(tr);
    if (*c_eval) return run_eval(ev);
    if (*c_sweep) return run_sweep(sw);
    if (*c_filters) return run_filters(sigma, filters_out);
    if (*c_patches) return run_patches(patch_image, patch_roi, patch_seed, previews, patches_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
