#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

namespace multipod {

/// Every recoverable failure in the library is reported with this type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Cervical maturation stage, ordinal CS1 < ... < CS6.
enum class StageLabel : int { CS1 = 0, CS2, CS3, CS4, CS5, CS6 };

inline constexpr int kNumStages = 6;

inline constexpr std::array<StageLabel, kNumStages> kAllStages = {
    StageLabel::CS1, StageLabel::CS2, StageLabel::CS3,
    StageLabel::CS4, StageLabel::CS5, StageLabel::CS6};

inline constexpr int stage_index(StageLabel s) { return static_cast<int>(s); }

inline StageLabel stage_from_index(int i) {
  if (i < 0 || i >= kNumStages) {
    throw Error("stage index out of range: " + std::to_string(i));
  }
  return static_cast<StageLabel>(i);
}

inline std::string to_string(StageLabel s) {
  return "CS" + std::to_string(stage_index(s) + 1);
}

inline std::optional<StageLabel> parse_stage(std::string_view token) {
  if (token.size() != 3 || token[0] != 'C' || token[1] != 'S') return std::nullopt;
  const int digit = token[2] - '0';
  if (digit < 1 || digit > kNumStages) return std::nullopt;
  return static_cast<StageLabel>(digit - 1);
}

enum class Sex { Female, Male };

inline char sex_code(Sex s) { return s == Sex::Female ? 'F' : 'M'; }

inline std::optional<Sex> parse_sex(std::string_view token) {
  if (token == "F") return Sex::Female;
  if (token == "M") return Sex::Male;
  return std::nullopt;
}

/// The single generator type used for all randomness. It is always passed
/// explicitly; nothing in the library touches a global RNG.
using Rng = std::mt19937_64;

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Mixes an ordered tuple of integers (seed, epoch, index, ...) into one
/// stream seed. Streams for different tuples are independent for practical
/// purposes, so per-record work can be scheduled in any order.
inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x243F6A8885A308D3ULL;
  for (std::uint64_t p : parts) h = splitmix64(h ^ splitmix64(p));
  return h;
}

inline Rng make_rng(std::initializer_list<std::uint64_t> parts) {
  return Rng(derive_seed(parts));
}

/// Uniform real in [lo, hi) built directly from the engine's bits so the
/// stream is identical across standard library implementations.
inline double uniform(Rng& rng, double lo, double hi) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

/// Uniform integer in [lo, hi].
inline int uniform_int(Rng& rng, int lo, int hi) {
  const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(rng() % span);
}

/// Standard normal via Box-Muller (portable, unlike std::normal_distribution).
inline double gaussian(Rng& rng) {
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  double u1 = uniform(rng, 0.0, 1.0);
  while (u1 <= 0.0) u1 = uniform(rng, 0.0, 1.0);
  const double u2 = uniform(rng, 0.0, 1.0);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(kTwoPi * u2);
}

}  // namespace multipod
