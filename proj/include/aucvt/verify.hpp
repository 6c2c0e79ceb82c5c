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

// The finite-difference gradient suite behind `aucvt gradcheck`.

#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "aucvt/gradcheck.hpp"
#include "aucvt/layers.hpp"
#include "aucvt/model.hpp"
#include "aucvt/train.hpp"

namespace aucvt {

inline constexpr double kGradTolerance = 1e-4;
inline constexpr double kGradEps = 1e-5;

/// Overwrites every parameter with Uniform(-scale, scale) draws so no check
/// runs at a degenerate point (zero biases, unit norms).
inline void randomize_params(const LayerParams& p, std::uint64_t seed, double scale = 0.5) {
  for (const auto& [path, t] : p.all()) {
    auto rng = make_rng({seed, fnv1a64(path)});
    for (double& v : t.mutable_data()) v = scale * (2.0 * uniform01(rng) - 1.0);
  }
}

inline std::vector<std::pair<std::string, Tensor>> named_params(const LayerParams& p) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [path, t] : p.all()) out.emplace_back(path, t);
  return out;
}

/// Reduced geometry for the end-to-end check: the toy input size and stage
/// layout with narrow widths, so every parameter scalar can be probed.
inline ModelConfig gradcheck_model_config() {
  ModelConfig c = ModelConfig::toy();
  c.stem_widths = {4, 8, 8};
  c.embed_dim = 8;
  c.ffn_expansion = 2;
  return c;
}

inline GradCheckResult check_end_to_end(std::uint64_t seed = 1) {
  Model m = build_model(gradcheck_model_config(), seed);
  randomize_params(m.params, seed + 1, 0.3);
  Tensor images = random_tensor({2, 3, 32, 32}, seed + 2, false, 0.0, 1.0);
  BatchLabels labels{{2, std::nullopt}, {std::nullopt, AUVector{AUMask(0x0f0f0f), all_au_mask()}}};
  labels.expression[1] = 5;
  return check_gradients(
      "end_to_end",
      [&] { return joint_loss(forward(m, images), labels, {1.0, 1.0}); },
      named_params(m.params), kGradEps);
}

/// One result per layer, loss and the end-to-end toy model.
inline std::vector<GradCheckResult> run_gradient_suite(std::uint64_t seed = 1) {
  std::vector<GradCheckResult> out;
  auto in = [&](Shape s, std::uint64_t k) { return random_tensor(std::move(s), seed * 1000 + k); };

  {
    LayerParams p(seed);
    LinearParams l = make_linear(p, "linear", 5, 4);
    randomize_params(p, seed);
    Tensor x = in({3, 5}, 1);
    auto inputs = named_params(p);
    inputs.emplace_back("x", x);
    out.push_back(check_gradients("linear", [&] { return projection_loss(linear(x, l)); }, inputs, kGradEps));
  }
  {
    Tensor x = in({2, 6, 5}, 2), w = in({3, 2, 3, 3}, 3);
    out.push_back(check_gradients("conv2d", [&] { return projection_loss(conv2d(x, w, 2, 1)); },
                                  {{"x", x}, {"w", w}}, kGradEps));
  }
  {
    Tensor x = in({3, 5, 4}, 4), w = in({3, 3, 3}, 5);
    out.push_back(check_gradients("depthwise_conv2d",
                                  [&] { return projection_loss(depthwise_conv2d(x, w, 1)); },
                                  {{"x", x}, {"w", w}}, kGradEps));
  }
  {
    Tensor x = in({4, 6}, 6), g = in({6}, 7), b = in({6}, 8);
    out.push_back(check_gradients("layernorm", [&] { return projection_loss(layernorm(x, g, b)); },
                                  {{"x", x}, {"gamma", g}, {"beta", b}}, kGradEps));
  }
  {
    LayerParams p(seed);
    AttentionConfig cfg{8, 2};
    AttentionParams a = make_attention(p, "mhsa", cfg);
    randomize_params(p, seed);
    Tensor x = in({5, 8}, 9);
    auto inputs = named_params(p);
    inputs.emplace_back("x", x);
    out.push_back(check_gradients("mhsa", [&] { return projection_loss(mhsa(x, cfg, a)); }, inputs, kGradEps));
  }
  {
    LayerParams p(seed);
    ConvFFNParams f = make_conv_ffn(p, "conv_ffn", 4, 2);
    randomize_params(p, seed);
    Tensor x = in({6, 4}, 10);
    auto inputs = named_params(p);
    inputs.emplace_back("x", x);
    out.push_back(check_gradients("conv_ffn", [&] { return projection_loss(conv_ffn(x, {2, 3}, 2, f)); },
                                  inputs, kGradEps));
  }
  {
    LayerParams p(seed);
    PatchMergeParams pm = make_patch_merge(p, "patch_merge", 3);
    randomize_params(p, seed);
    Tensor x = in({8, 3}, 11);
    auto inputs = named_params(p);
    inputs.emplace_back("x", x);
    out.push_back(check_gradients("patch_merge",
                                  [&] { return projection_loss(patch_merge(x, {2, 4}, pm).first); },
                                  inputs, kGradEps));
  }
  {
    LayerParams p(seed);
    AttentionConfig cfg{4, 2};
    BlockParams b = make_block(p, "block", cfg, 2);
    randomize_params(p, seed);
    Tensor x = in({4, 4}, 12);
    auto inputs = named_params(p);
    inputs.emplace_back("x", x);
    out.push_back(check_gradients("transformer_block",
                                  [&] { return projection_loss(transformer_block(x, {2, 2}, cfg, 2, b)); },
                                  inputs, kGradEps));
  }
  {
    LayerParams p(seed);
    StemParams s = make_stem(p, "stem", 3, {2, 3});
    randomize_params(p, seed);
    Tensor x = in({3, 8, 8}, 13);
    auto inputs = named_params(p);
    inputs.emplace_back("x", x);
    out.push_back(check_gradients("cnn_stem", [&] { return projection_loss(cnn_stem(x, s)); }, inputs, kGradEps));
  }
  {
    Tensor l = in({7}, 14), r = in({7}, 15);
    out.push_back(check_gradients("symmetric_maxout",
                                  [&] { return projection_loss(symmetric_maxout(l, r)); },
                                  {{"left", l}, {"right", r}}, kGradEps));
  }
  {
    Tensor z = in({4, 6}, 16);
    std::vector<std::optional<int>> y = {0, std::nullopt, 3, 5};
    out.push_back(check_gradients("cross_entropy", [&] { return cross_entropy(z, y); }, {{"logits", z}}, kGradEps));
  }
  {
    Tensor z = in({3, 5}, 17);
    std::vector<double> t = {1, 0, 0, 1, 1, 0, 1, 0, 1, 0, 0, 0, 1, 1, 1};
    std::vector<std::uint8_t> mask = {1, 1, 0, 1, 1, 1, 1, 1, 0, 1, 0, 1, 1, 1, 1};
    out.push_back(check_gradients("bce_with_logits", [&] { return bce_with_logits(z, t, mask); },
                                  {{"logits", z}}, kGradEps));
  }
  {
    ModelConfig c = gradcheck_model_config();
    LayerParams p(seed);
    std::vector<LinearParams> heads;
    for (const auto& spec : c.au_patches) {
      heads.push_back(make_linear(p, "au." + spec.name, 8, spec.aus.size()));
    }
    randomize_params(p, seed);
    Tensor tokens = in({16, 8}, 18);
    auto inputs = named_params(p);
    inputs.emplace_back("tokens", tokens);
    out.push_back(check_gradients("au_branch",
                                  [&] { return projection_loss(au_branch(tokens, {4, 4}, heads, c)); },
                                  inputs, kGradEps));
  }
  out.push_back(check_end_to_end(seed));
  return out;
}

inline const GradCheckResult& worst_result(const std::vector<GradCheckResult>& results) {
  return *std::max_element(results.begin(), results.end(),
                           [](const auto& a, const auto& b) { return a.max_rel_error < b.max_rel_error; });
}

}  // namespace aucvt
