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

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace aucvt {

/// Shapes that do not fit together (matmul inner dims, kernel vs input, ...).
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A caller broke an operation's precondition (non-scalar loss, empty batch).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Non-finite values where finite ones are required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A facial region that rasterizes to nothing, or a token grid that does not
/// match the token count.
struct GeometryError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Structural problems with an input file: missing columns, checkpoint that
/// does not match its config, bad container header.
struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A problem with one row of a CSV input. `row()` is 1-based and counts the
/// header line.
class RowError : public std::runtime_error {
 public:
  RowError(const std::string& file, std::size_t row, const std::string& what)
      : std::runtime_error(file + ":" + std::to_string(row) + ": " + what),
        row_(row) {}

  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

struct DecodeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

}  // namespace aucvt
