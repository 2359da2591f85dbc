// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fedsim {

using Rng = std::mt19937_64;

// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derives an independent stream seed from a base seed and a list of
// coordinates such as (client id, round, purpose). Order matters.
inline std::uint64_t derive_seed(std::uint64_t base,
                                 std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = mix64(base);
  for (std::uint64_t p : parts) h = mix64(h ^ mix64(p + 0x632be59bd9b4e019ULL));
  return h;
}

inline Rng make_rng(std::uint64_t base,
                    std::initializer_list<std::uint64_t> parts) {
  return Rng(derive_seed(base, parts));
}

// Stream purposes used with derive_seed.
enum class Stream : std::uint64_t {
  teacher_init = 1,
  student_init = 2,
  aux_init = 3,
  aux_redraw = 4,
  client_sampling = 5,
  local_update = 6,
  dp_noise = 7,
  partition = 8,
  split = 9,
  synth = 10,
  faults = 11,
  global_init = 12,
};

constexpr std::uint64_t tag(Stream s) noexcept {
  return static_cast<std::uint64_t>(s);
}

}  // namespace fedsim
