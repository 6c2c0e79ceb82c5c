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

// Central finite differences, the independent oracle for every backward rule.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "aucvt/ops.hpp"

namespace aucvt {

/// (f(x + eps e_i) - f(x - eps e_i)) / 2 eps for every element of x. `f` sees
/// a perturbed copy; x itself is untouched.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double eps = 1e-5) {
  Tensor probe = x.detach();
  std::span<double> v = probe.mutable_data();
  std::vector<double> g(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double orig = v[i];
    v[i] = orig + eps;
    double up = f(probe);
    v[i] = orig - eps;
    double down = f(probe);
    v[i] = orig;
    g[i] = (up - down) / (2.0 * eps);
  }
  return Tensor(x.shape(), std::move(g));
}

/// Same, for a closure that reads x (typically a parameter) directly. The
/// data of x is perturbed in place and restored.
inline std::vector<double> finite_diff_grad_inplace(const std::function<double()>& f,
                                                    const Tensor& x, double eps = 1e-5) {
  std::span<double> v = x.mutable_data();
  std::vector<double> g(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double orig = v[i];
    v[i] = orig + eps;
    double up = f();
    v[i] = orig - eps;
    double down = f();
    v[i] = orig;
    g[i] = (up - down) / (2.0 * eps);
  }
  return g;
}

/// max|analytic - numeric| / max(1, max|numeric|)
inline double gradient_rel_error(const std::vector<double>& analytic,
                                 const std::vector<double>& numeric) {
  double diff = 0.0, scale = 1.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max(scale, std::abs(numeric[i]));
  }
  return diff / scale;
}

struct GradCheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::string worst_input;
  std::size_t checked_values = 0;
};

/// Runs backward once on `loss_fn()` and compares the gradient of every named
/// input against central differences of the same closure.
inline GradCheckResult check_gradients(std::string name, const std::function<Tensor()>& loss_fn,
                                       const std::vector<std::pair<std::string, Tensor>>& inputs,
                                       double eps = 1e-5) {
  for (const auto& [_, t] : inputs) t.zero_grad();
  loss_fn().backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& [_, t] : inputs) analytic.push_back(t.grad());

  GradCheckResult result;
  result.name = std::move(name);
  auto value = [&] { return loss_fn().item(); };
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<double> numeric = finite_diff_grad_inplace(value, inputs[i].second, eps);
    double err = gradient_rel_error(analytic[i], numeric);
    result.checked_values += numeric.size();
    if (err >= result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_input = inputs[i].first;
    }
  }
  return result;
}

/// Uniform(-1, 1) tensor from a fixed seed; the usual gradient-check input.
inline Tensor random_tensor(Shape shape, std::uint64_t seed, bool requires_grad = true,
                            double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// sum(out * R) for a fixed random R: turns any tensor-valued map into a
/// scalar whose gradient exercises every output element.
inline Tensor projection_loss(const Tensor& out, std::uint64_t seed = 7) {
  return sum(mul(out, random_tensor(out.shape(), seed, false)));
}

}  // namespace aucvt
