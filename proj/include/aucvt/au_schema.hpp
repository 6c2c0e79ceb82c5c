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

// Canonical AU and expression vocabularies shared by the model and data code.

#pragma once

#include <algorithm>
#include <array>
#include <bitset>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "aucvt/errors.hpp"

namespace aucvt {

inline constexpr std::size_t kNumAUs = 21;
inline constexpr std::size_t kNumExpressions = 6;

/// The 21 expression-related AUs, ascending. Slot i of every AU vector and of
/// the model's AU logits refers to kCanonicalAUs[i].
inline constexpr std::array<int, kNumAUs> kCanonicalAUs = {
    1, 2, 4, 5, 6, 7, 9, 10, 12, 14, 15, 16, 17, 18, 20, 22, 23, 24, 25, 26, 27};

/// AUs an OpenFace pseudo-labelling pass provides presence codes for.
inline constexpr std::array<int, 16> kOpenFaceAUs = {1,  2,  4,  5,  6,  7,  9,  10,
                                                     12, 14, 15, 17, 20, 23, 25, 26};

inline constexpr std::array<std::string_view, kNumExpressions> kExpressionNames = {
    "anger", "disgust", "fear", "happiness", "sadness", "surprise"};

inline std::optional<std::size_t> find_au_index(int au) {
  auto it = std::lower_bound(kCanonicalAUs.begin(), kCanonicalAUs.end(), au);
  if (it == kCanonicalAUs.end() || *it != au) return std::nullopt;
  return static_cast<std::size_t>(it - kCanonicalAUs.begin());
}

inline std::size_t au_index(int au) {
  auto i = find_au_index(au);
  if (!i) throw ConfigError("AU" + std::to_string(au) + " is not one of the 21 canonical AUs");
  return *i;
}

inline std::optional<int> expression_id(std::string_view name) {
  for (std::size_t i = 0; i < kExpressionNames.size(); ++i) {
    if (kExpressionNames[i] == name) return static_cast<int>(i);
  }
  return std::nullopt;
}

using AUMask = std::bitset<kNumAUs>;

inline AUMask all_au_mask() { return AUMask().set(); }

inline AUMask openface_au_mask() {
  AUMask m;
  for (int au : kOpenFaceAUs) m.set(au_index(au));
  return m;
}

/// 21 presence flags plus which of them are actually annotated.
struct AUVector {
  AUMask values;
  AUMask mask;

  bool valid() const { return (values & ~mask).none(); }

  friend bool operator==(const AUVector&, const AUVector&) = default;
};

}  // namespace aucvt
