// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace cdnet {

using Rng = std::mt19937_64;

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent stream seed for (master seed, purpose, index).
constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t purpose,
                                    std::uint64_t index = 0) {
  return splitmix64(splitmix64(master ^ splitmix64(purpose)) + index);
}

// Stream tags for derive_seed.
enum SeedPurpose : std::uint64_t {
  kSeedData = 1,
  kSeedInit = 2,
  kSeedPretrain = 3,
  kSeedFinetune = 4,
  kSeedEval = 5,
};

// Line-delimited structured log record on stderr: {"level":..,"msg":..}.
void log_record(std::string_view level, std::string_view msg);
inline void log_warning(std::string_view msg) { log_record("warning", msg); }

// Silences log_record (tests).
void set_logging(bool enabled);

}  // namespace cdnet
