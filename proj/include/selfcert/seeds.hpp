#pragma once

// SPDX-License-Identifier: Apache-2.0

// Counter-based seed derivation.
//
// Every random decision in a run is keyed by a path of integers hung off the
// run seed:
//
//   run_seed
//     -> problem_seed   = derive(derive(run_seed, hash64(problem_id)), repeat)
//     -> chain_seed     = derive(problem_seed, chain_index)      (one per
//                         self-consistency chain; index 0 for single-
//                         trajectory strategies)
//     -> step_seed      = derive(chain_seed, step_index)
//     -> candidate_seed = derive(step_seed, candidate_index)
//
// derive() is a SplitMix64 finalizer over (seed ^ rotated tag), so sibling
// streams are decorrelated and the whole tree is reproducible bit-for-bit
// regardless of worker scheduling.

#include <cstdint>
#include <string_view>

namespace selfcert::seeds {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += kGolden;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Child stream seed for integer tag `tag` under `seed`.
constexpr std::uint64_t derive(std::uint64_t seed, std::uint64_t tag) {
  return splitmix64(seed ^ (tag * kGolden + 0x243f6a8885a308d3ULL));
}

/// FNV-1a over bytes; used to fold string identifiers into the seed tree.
constexpr std::uint64_t hash64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t problem_seed(std::uint64_t run_seed, std::string_view problem_id,
                                     int repeat) {
  return derive(derive(run_seed, hash64(problem_id)), static_cast<std::uint64_t>(repeat));
}

}  // namespace selfcert::seeds
