/*
 * Copyright 2026 The AU-CVT Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstdint>
#include <cstdio>
#include <initializer_list>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace aucvt {

/// 64-bit FNV-1a. Stable across platforms, used for config fingerprints and
/// for deriving per-parameter seeds.
inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Engine seeded from a list of 64-bit words via seed_seq.
inline std::mt19937_64 make_rng(std::initializer_list<std::uint64_t> words) {
  std::vector<std::uint32_t> seeds;
  for (std::uint64_t w : words) {
    seeds.push_back(static_cast<std::uint32_t>(w));
    seeds.push_back(static_cast<std::uint32_t>(w >> 32));
  }
  std::seed_seq seq(seeds.begin(), seeds.end());
  return std::mt19937_64(seq);
}

}  // namespace aucvt
