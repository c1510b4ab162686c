#pragma once

// Checkpoint layout:
//
//   multipod-checkpoint\n
//   key=value\n ...            (format_version, config, seed, epoch, tensors)
//   end_header\n
//   tensors, each: u32 name_len, name bytes, u32 rank, u32 dims[rank],
//                  f32 values[prod(dims)]      (all little-endian)
//
// Parameters come first in model visit order, then batch-norm buffers.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "multipod/core.hpp"
#include "multipod/dataset.hpp"
#include "multipod/model.hpp"

namespace multipod {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointMagic = "multipod-checkpoint";

/// Flat key/value description of a config, in a fixed key order.
inline std::vector<std::pair<std::string, std::string>> config_fields(const MultiPodConfig& cfg) {
  const auto& w = cfg.backbone.widths;
  return {
      {"variant", to_string(cfg.variant)},
      {"pod_count", std::to_string(cfg.pods())},
      {"use_directional_filters", cfg.use_directional_filters ? "1" : "0"},
      {"trainable_filters", cfg.trainable_filters ? "1" : "0"},
      {"use_age", cfg.use_age ? "1" : "0"},
      {"seed", std::to_string(cfg.seed)},
      {"filter_sigma", detail::format_double(cfg.filter_sigma)},
      {"age_scale", detail::format_double(cfg.age_scale)},
      {"widths", std::to_string(w[0]) + "," + std::to_string(w[1]) + "," + std::to_string(w[2])},
      {"blocks_per_stage", std::to_string(cfg.backbone.blocks_per_stage)},
  };
}

inline std::string describe(const MultiPodConfig& cfg) {
  std::string out;
  for (const auto& [k, v] : config_fields(cfg)) {
    if (!out.empty()) out += ' ';
    out += k + "=" + v;
  }
  return out;
}

/// True when two configs build structurally identical networks.
inline bool same_architecture(const MultiPodConfig& a, const MultiPodConfig& b) {
  return a.variant == b.variant && a.use_directional_filters == b.use_directional_filters &&
         a.trainable_filters == b.trainable_filters && a.use_age == b.use_age &&
         a.backbone == b.backbone && a.filter_sigma == b.filter_sigma &&
         a.age_scale == b.age_scale;
}

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) {
    throw Error("checkpoint '" + path + "' is truncated or corrupt");
  }
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

template <typename T>
void put_tensor(std::ostream& out, const std::string& name, const std::vector<int>& shape,
                const nn::AlignedVector<T>& values) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (int d : shape) put_u32(out, static_cast<std::uint32_t>(d));
  for (T v : values) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

inline bool parse_bool_field(const std::string& v) { return v == "1" || v == "true"; }

inline MultiPodConfig config_from_fields(const std::map<std::string, std::string>& kv,
                                         const std::string& path) {
  auto get = [&](const std::string& key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw Error("checkpoint '" + path + "' header lacks '" + key + "'");
    return it->second;
  };
  MultiPodConfig cfg;
  const auto variant = parse_variant(get("variant"));
  if (!variant) throw Error("checkpoint '" + path + "' has unknown variant");
  cfg.variant = *variant;
  cfg.use_directional_filters = parse_bool_field(get("use_directional_filters"));
  cfg.trainable_filters = parse_bool_field(get("trainable_filters"));
  cfg.use_age = parse_bool_field(get("use_age"));
  if (!parse_number(get("seed"), cfg.seed) || !parse_number(get("filter_sigma"), cfg.filter_sigma) ||
      !parse_number(get("age_scale"), cfg.age_scale) ||
      !parse_number(get("blocks_per_stage"), cfg.backbone.blocks_per_stage)) {
    throw Error("checkpoint '" + path + "' has a malformed numeric header field");
  }
  const auto w = split_csv_line(get("widths"));
  if (w.size() != 3) throw Error("checkpoint '" + path + "' has malformed widths");
  for (std::size_t i = 0; i < 3; ++i) {
    if (!parse_number(w[i], cfg.backbone.widths[i])) {
      throw Error("checkpoint '" + path + "' has malformed widths");
    }
  }
  if (std::to_string(cfg.pods()) != get("pod_count")) {
    throw Error("checkpoint '" + path + "' pod_count disagrees with its variant");
  }
  return cfg;
}

}  // namespace detail

/// Writes every parameter and buffer as float32. Output bytes depend only
/// on the model state.
template <typename T>
void save_checkpoint(MultiPodModel<T>& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint '" + path.string() + "'");
  const auto params = model.parameters();
  const auto buffers = model.buffers();
  out << kCheckpointMagic << '\n';
  out << "format_version=" << kCheckpointVersion << '\n';
  for (const auto& [k, v] : config_fields(model.config())) out << k << '=' << v << '\n';
  out << "epoch=" << model.epoch << '\n';
  out << "tensors=" << params.size() + buffers.size() << '\n';
  out << "end_header\n";
  for (const auto* p : params) detail::put_tensor(out, p->name, p->shape, p->value);
  for (const auto* b : buffers) detail::put_tensor(out, b->name, b->shape, b->value);
  if (!out) throw Error("failed writing checkpoint '" + path.string() + "'");
}

/// Reads a checkpoint and rebuilds the model it describes. Fails on a
/// version mismatch, a truncated file, or tensors that disagree with the
/// declared config.
template <typename T = float>
MultiPodModel<T> load_checkpoint(const std::filesystem::path& path) {
  const std::string ps = path.string();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + ps + "'");
  std::string line;
  if (!std::getline(in, line) || line != kCheckpointMagic) {
    throw Error("'" + ps + "' is not a multipod checkpoint");
  }
  std::map<std::string, std::string> kv;
  bool ended = false;
  while (std::getline(in, line)) {
    if (line == "end_header") {
      ended = true;
      break;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("checkpoint '" + ps + "' has a malformed header");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (!ended) throw Error("checkpoint '" + ps + "' is truncated or corrupt (header)");
  if (kv["format_version"] != std::to_string(kCheckpointVersion)) {
    throw Error("checkpoint '" + ps + "' has format version '" + kv["format_version"] +
                "', expected " + std::to_string(kCheckpointVersion));
  }
  const MultiPodConfig cfg = detail::config_from_fields(kv, ps);
  MultiPodModel<T> model(cfg);
  if (!detail::parse_number(kv["epoch"], model.epoch)) {
    throw Error("checkpoint '" + ps + "' has a malformed epoch");
  }
  std::size_t count = 0;
  if (!detail::parse_number(kv["tensors"], count)) {
    throw Error("checkpoint '" + ps + "' has a malformed tensor count");
  }

  std::map<std::string, std::pair<const std::vector<int>*, nn::AlignedVector<T>*>> slots;
  for (auto* p : model.parameters()) slots[p->name] = {&p->shape, &p->value};
  for (auto* b : model.buffers()) slots[b->name] = {&b->shape, &b->value};
  if (count != slots.size()) {
    throw Error("checkpoint '" + ps + "' holds " + std::to_string(count) +
                " tensors but its config needs " + std::to_string(slots.size()));
  }

  for (std::size_t t = 0; t < count; ++t) {
    const std::uint32_t len = detail::get_u32(in, ps);
    if (len > 4096) throw Error("checkpoint '" + ps + "' is corrupt (tensor name)");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw Error("checkpoint '" + ps + "' is truncated or corrupt");
    const auto it = slots.find(name);
    if (it == slots.end()) throw Error("checkpoint '" + ps + "' has unexpected tensor '" + name + "'");
    const std::uint32_t rank = detail::get_u32(in, ps);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(detail::get_u32(in, ps));
    if (shape != *it->second.first) {
      throw Error("checkpoint '" + ps + "' tensor '" + name + "' shape disagrees with its config");
    }
    for (T& v : *it->second.second) {
      v = static_cast<T>(std::bit_cast<float>(detail::get_u32(in, ps)));
    }
    slots.erase(it);
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw Error("checkpoint '" + ps + "' has trailing bytes");
  }
  return model;
}

/// As above, and additionally requires the stored architecture to equal
/// `expected`.
template <typename T = float>
MultiPodModel<T> load_checkpoint(const std::filesystem::path& path,
                                 const MultiPodConfig& expected) {
  MultiPodModel<T> model = load_checkpoint<T>(path);
  if (!same_architecture(model.config(), expected)) {
    throw Error("checkpoint '" + path.string() + "' config mismatch: stored {" +
                describe(model.config()) + "} vs expected {" + describe(expected) + "}");
  }
  return model;
}

}  // namespace multipod
