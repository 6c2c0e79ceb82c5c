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

// Tensor container: "AUCVT1\0" | u8 rank | rank x u64 LE extents | f64 LE payload.

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "aucvt/tensor.hpp"

namespace aucvt {

inline constexpr std::array<char, 7> kTensorMagic = {'A', 'U', 'C', 'V', 'T', '1', '\0'};

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(b, 8);
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw SchemaError("tensor container truncated");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

}  // namespace detail

/// Bytes one tensor occupies in the container format.
inline std::uint64_t encoded_size(const Tensor& t) {
  return kTensorMagic.size() + 1 + 8 * t.rank() + 8 * t.numel();
}

inline void write_tensor(std::ostream& os, const Tensor& t) {
  if (t.rank() > 255) throw DimensionError("write_tensor: rank exceeds 255");
  os.write(kTensorMagic.data(), kTensorMagic.size());
  os.put(static_cast<char>(t.rank()));
  for (std::size_t e : t.shape()) detail::put_u64(os, e);
  for (double v : t.data()) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
  if (!os) throw SchemaError("write_tensor: stream error");
}

inline Tensor read_tensor(std::istream& is) {
  std::array<char, 7> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kTensorMagic) {
    throw SchemaError("tensor container: bad header");
  }
  int rank = is.get();
  if (rank == std::char_traits<char>::eof()) throw SchemaError("tensor container truncated");
  Shape shape(static_cast<std::size_t>(rank));
  for (auto& e : shape) {
    e = detail::get_u64(is);
    if (e == 0) throw SchemaError("tensor container: zero extent");
  }
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = std::bit_cast<double>(detail::get_u64(is));
  return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw SchemaError("cannot open " + path + " for writing");
  write_tensor(os, t);
}

inline Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw SchemaError("cannot open " + path);
  return read_tensor(is);
}

}  // namespace aucvt
