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

#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <random>
#include <set>

#include "aucvt/gradcheck.hpp"
#include "aucvt/model.hpp"

namespace aucvt {
namespace {

/// Toy geometry with narrow widths so the tests stay fast.
ModelConfig small_toy() {
  ModelConfig c = ModelConfig::toy();
  c.stem_widths = {4, 8, 8};
  c.embed_dim = 8;
  c.ffn_expansion = 2;
  return c;
}

Tensor random_images(std::size_t b, std::size_t h, std::size_t w, std::uint64_t seed) {
  return random_tensor({b, 3, h, w}, seed, false, 0.0, 1.0);
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

TEST(ModelConfigTest, ReferenceAndToyStageShapes) {
  ModelConfig ref = ModelConfig::reference();
  ref.validate();
  EXPECT_EQ(stage_shape(ref, 1), (StageShape{14, 14, 256}));
  EXPECT_EQ(stage_shape(ref, 2), (StageShape{7, 7, 512}));
  ModelConfig toy = ModelConfig::toy();
  EXPECT_EQ(stage_shape(toy, 1), (StageShape{4, 4, 32}));
  EXPECT_EQ(stage_shape(toy, 2), (StageShape{2, 2, 64}));
  EXPECT_THROW(stage_shape(toy, 0), ConfigError);
  EXPECT_THROW(stage_shape(toy, 3), ConfigError);
}

TEST(ModelConfigTest, FirstStageEqualsStemGrid) {
  for (std::size_t h : {16u, 32u, 64u, 112u}) {
    ModelConfig c = small_toy();
    c.input_h = c.input_w = h;
    c.stage_depths = {1};
    StageShape s = stage_shape(c, 1);
    EXPECT_EQ(s.h, h / 8);
    EXPECT_EQ(s.w, h / 8);
    EXPECT_EQ(s.dim, c.embed_dim);
  }
}

TEST(ModelConfigTest, RejectsInvalidConfigs) {
  auto expect_bad = [](auto mutate) {
    ModelConfig c = small_toy();
    mutate(c);
    EXPECT_THROW(c.validate(), ConfigError);
  };
  expect_bad([](ModelConfig& c) { c.input_h = 36; });               // not divisible by R
  expect_bad([](ModelConfig& c) { c.input_h = c.input_w = 48; c.stage_depths = {1, 1, 1}; });
  expect_bad([](ModelConfig& c) { c.downsample = 6; });
  expect_bad([](ModelConfig& c) { c.stage_heads = {3, 3}; });        // 8 % 3 != 0
  expect_bad([](ModelConfig& c) { c.stage_heads = {1}; });
  expect_bad([](ModelConfig& c) { c.stem_widths = {4, 8}; });
  expect_bad([](ModelConfig& c) { c.au_patches[1].aus = {1, 2, 5}; });
  expect_bad([](ModelConfig& c) { c.au_patches[6].aus.push_back(30); });
  expect_bad([](ModelConfig& c) { c.au_patches[5].aus = {10}; });    // nose steals a mouth AU
  expect_bad([](ModelConfig& c) { c.au_patches.pop_back(); });
  expect_bad([](ModelConfig& c) { c.au_patches[0].x0 = 0.6; });
  expect_bad([](ModelConfig& c) { c.canonical_au_order = {2, 1}; });
  expect_bad([](ModelConfig& c) { c.stem_activation = "gelu"; });
  expect_bad([](ModelConfig& c) {  // isolated box
    for (auto& p : c.au_patches) {
      if (p.name == "between_eyebrow") p.x0 = 0.0, p.x1 = 0.1, p.y0 = 0.0, p.y1 = 0.1;
      if (p.name == "left_eye") p.y0 = 0.2;
    }
  });
}

TEST(ModelConfigTest, DefaultPatchesCoverCanonicalAUs) {
  ModelConfig c = ModelConfig::reference();
  std::vector<int> order = c.resolved_au_order();
  EXPECT_TRUE(std::equal(order.begin(), order.end(), kCanonicalAUs.begin(), kCanonicalAUs.end()));
  std::map<int, std::set<std::string>> owners;
  for (const auto& p : c.au_patches) {
    for (int au : p.aus) owners[au].insert(p.name);
  }
  for (const auto& [au, names] : owners) {
    if (names.size() == 1) continue;
    EXPECT_TRUE((names == std::set<std::string>{"left_eye", "right_eye"}) ||
                (names == std::set<std::string>{"left_cheek", "right_cheek"}))
        << "AU" << au;
  }
  EXPECT_EQ(au_index(9), 6u);
  EXPECT_EQ(au_index(27), 20u);
}

TEST(BuildModelTest, SameSeedSameParameters) {
  Model a = build_model(small_toy(), 42), b = build_model(small_toy(), 42);
  Model c = build_model(small_toy(), 43);
  ASSERT_EQ(a.params.size(), b.params.size());
  bool differs = false;
  for (const auto& [path, t] : a.params.all()) {
    EXPECT_TRUE(bit_equal(t, b.params.at(path))) << path;
    differs = differs || !bit_equal(t, c.params.at(path));
  }
  EXPECT_TRUE(differs);
}

TEST(BuildModelTest, EmotionOnlyModelSharesValues) {
  ModelConfig cfg = small_toy();
  Model full = build_model(cfg, 7);
  cfg.au_branch = false;
  Model emo = build_model(cfg, 7);
  EXPECT_LT(emo.params.size(), full.params.size());
  for (const auto& [path, t] : emo.params.all()) EXPECT_TRUE(bit_equal(t, full.params.at(path)));
}

TEST(ForwardTest, OutputWidthsAndRuntimeShapes) {
  Model m = build_model(ModelConfig::toy(), 1);
  ModelOutput out = forward(m, random_images(2, 32, 32, 2));
  EXPECT_EQ(out.emotion_logits.shape(), (Shape{2, 6}));
  EXPECT_EQ(out.au_logits.shape(), (Shape{2, 21}));
  ASSERT_EQ(out.stage_shapes.size(), 2u);
  for (std::size_t k = 1; k <= 2; ++k) EXPECT_EQ(out.stage_shapes[k - 1], stage_shape(m.cfg, k));
  EXPECT_THROW(forward(m, random_images(1, 16, 16, 3)), DimensionError);
}

TEST(ForwardTest, ShapeLawHoldsAcrossConfigs) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 6; ++trial) {
    ModelConfig c = small_toy();
    std::size_t stages = 1 + rng() % 2;
    c.stage_depths.assign(stages, 1);
    c.downsample = trial % 2 ? 4 : 8;
    c.stem_widths.assign(c.stem_stages(), 4);
    c.input_h = c.downsample * 4 * (1 + rng() % 2);
    c.input_w = c.downsample * 4 * (1 + rng() % 2);
    Model m = build_model(c, rng());
    ModelOutput out = forward(m, random_images(1, c.input_h, c.input_w, rng()));
    for (std::size_t k = 1; k <= stages; ++k) {
      EXPECT_EQ(out.stage_shapes[k - 1], stage_shape(c, k)) << "trial " << trial;
    }
  }
}

TEST(ForwardTest, DuplicatedSampleDuplicatesRows) {
  Model m = build_model(small_toy(), 4);
  Tensor one = random_images(1, 32, 32, 5);
  std::vector<double> two(one.data().begin(), one.data().end());
  two.insert(two.end(), one.data().begin(), one.data().end());
  ModelOutput out = forward(m, Tensor({2, 3, 32, 32}, two));
  for (std::size_t j = 0; j < 6; ++j) {
    EXPECT_EQ(out.emotion_logits[j], out.emotion_logits[6 + j]);
  }
  for (std::size_t j = 0; j < 21; ++j) EXPECT_EQ(out.au_logits[j], out.au_logits[21 + j]);
}

TEST(ForwardTest, ZeroHeadGivesZeroEmotionLogits) {
  Model m = build_model(small_toy(), 6);
  for (const Tensor& t : {m.emotion_head.weight, m.emotion_head.bias}) {
    std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
  }
  ModelOutput out = forward(m, random_images(3, 32, 32, 7));
  for (double v : out.emotion_logits.data()) EXPECT_EQ(v, 0.0);
}

TEST(ForwardTest, EmotionOnlyModelHasNoAULogits) {
  ModelConfig c = small_toy();
  c.au_branch = false;
  ModelOutput out = forward(build_model(c, 1), random_images(1, 32, 32, 2));
  EXPECT_FALSE(out.au_logits.defined());
  EXPECT_EQ(out.emotion_logits.shape(), (Shape{1, 6}));
}

TEST(Seq2ImgTest, RoundTripAndPermutation) {
  Tensor tokens = random_tensor({196, 8}, 8, false);
  Tensor fmap = seq2img(tokens, {14, 14});
  EXPECT_EQ(fmap.shape(), (Shape{8, 14, 14}));
  EXPECT_TRUE(bit_equal(img2seq(fmap), tokens));
  Tensor img = random_tensor({8, 14, 14}, 9, false);
  EXPECT_TRUE(bit_equal(seq2img(img2seq(img), {14, 14}), img));

  // Swapping tokens n and m swaps the corresponding grid cells.
  std::vector<std::size_t> idx(196 * 8);
  std::iota(idx.begin(), idx.end(), 0);
  const std::size_t n = 17, m = 150;
  for (std::size_t c = 0; c < 8; ++c) std::swap(idx[n * 8 + c], idx[m * 8 + c]);
  Tensor swapped = seq2img(gather(tokens, {196, 8}, idx), {14, 14});
  for (std::size_t c = 0; c < 8; ++c) {
    EXPECT_EQ(swapped[c * 196 + (n / 14) * 14 + n % 14], fmap[c * 196 + (m / 14) * 14 + m % 14]);
    EXPECT_EQ(swapped[c * 196 + (m / 14) * 14 + m % 14], fmap[c * 196 + (n / 14) * 14 + n % 14]);
  }
}

TEST(AUPatchTest, RasterizationRule) {
  AUPatchSpec mouth{"mouth", 0.05, 0.95, 0.50, 1.00, {25}, ""};
  CellRange r = rasterize(mouth, {14, 14});
  EXPECT_EQ(r.r0, 7u);
  EXPECT_EQ(r.r1, 14u);  // rows 7..13
  EXPECT_EQ(r.c0, 0u);
  EXPECT_EQ(r.c1, 14u);  // cols 0..13

  Tensor fmap = random_tensor({3, 14, 14}, 10, false);
  Tensor v = extract_au_patch(fmap, mouth);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0.0;
    for (std::size_t y = 7; y < 14; ++y) {
      for (std::size_t x = 0; x < 14; ++x) s += fmap[(c * 14 + y) * 14 + x];
    }
    EXPECT_NEAR(v[c], s / 98.0, 1e-15);
  }
}

TEST(AUPatchTest, FullBoxIsGlobalAverageAndConstantMapIsConstant) {
  Tensor fmap = random_tensor({2, 5, 7}, 11, false);
  Tensor g = extract_au_patch(fmap, {"nose", 0, 1, 0, 1, {9}, ""});
  for (std::size_t c = 0; c < 2; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < 35; ++i) s += fmap[c * 35 + i];
    EXPECT_NEAR(g[c], s / 35.0, 1e-15);
  }
  Tensor flat = Tensor::full({4, 14, 14}, 0.625);
  for (const auto& spec : default_au_patches()) {
    Tensor v = extract_au_patch(flat, spec);
    for (double x : v.data()) EXPECT_DOUBLE_EQ(x, 0.625);
  }
  EXPECT_THROW(extract_au_patch(flat, {"nose", 0.5, 0.5 + 1e-12, 0, 1, {9}, ""}), GeometryError);
}

TEST(AUBranchTest, LogitBookkeeping) {
  ModelConfig c = small_toy();
  std::size_t raw = 0;
  for (const auto& p : c.au_patches) raw += p.aus.size();
  EXPECT_EQ(raw, 26u);
  Model m = build_model(c, 12);
  Tensor out = au_branch(random_tensor({16, 8}, 13, false), {4, 4}, m.au_heads, c);
  EXPECT_EQ(out.shape(), (Shape{1, 21}));

  for (const auto& h : m.au_heads) std::fill(h.weight.mutable_data().begin(), h.weight.mutable_data().end(), 0.0);
  Tensor zero = au_branch(random_tensor({16, 8}, 14, false), {4, 4}, m.au_heads, c);
  for (double v : zero.data()) EXPECT_EQ(v, 0.0);
}

TEST(AUBranchTest, SlotsFollowCanonicalOrder) {
  // Bias-only heads: each patch emits its own AU ids, so the output slot i
  // must read kCanonicalAUs[i] (maxout of identical mirror values).
  ModelConfig c = small_toy();
  Model m = build_model(c, 15);
  for (std::size_t i = 0; i < c.au_patches.size(); ++i) {
    const auto& h = m.au_heads[i];
    std::fill(h.weight.mutable_data().begin(), h.weight.mutable_data().end(), 0.0);
    for (std::size_t j = 0; j < c.au_patches[i].aus.size(); ++j) {
      h.bias.mutable_data()[j] = c.au_patches[i].aus[j];
    }
  }
  Tensor out = au_branch(random_tensor({16, 8}, 16, false), {4, 4}, m.au_heads, c);
  for (std::size_t i = 0; i < kNumAUs; ++i) EXPECT_EQ(out[i], kCanonicalAUs[i]);
}

TEST(SymmetricMaxoutTest, HandCaseAndCommutativity) {
  Tensor y = symmetric_maxout(Tensor({2}, {0.3, -1}), Tensor({2}, {0.7, -2}));
  EXPECT_EQ(y[0], 0.7);
  EXPECT_EQ(y[1], -1.0);
  std::mt19937_64 rng(17);
  for (int i = 0; i < 200; ++i) {
    Tensor a = random_tensor({4}, rng(), false), b = random_tensor({4}, rng(), false);
    EXPECT_TRUE(bit_equal(symmetric_maxout(a, b), symmetric_maxout(b, a)));
  }
  EXPECT_THROW(symmetric_maxout(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);
}

TEST(SymmetricMaxoutTest, GradientGoesToLargerSide) {
  Tensor a({3}, {0.5, -1.0, 2.0}, true), b({3}, {0.1, 0.3, 2.0}, true);
  sum(symmetric_maxout(a, b)).backward();
  EXPECT_EQ(a.grad(), (std::vector<double>{1, 0, 1}));  // tie -> left
  EXPECT_EQ(b.grad(), (std::vector<double>{0, 1, 0}));

  Tensor l = random_tensor({6}, 18), r = random_tensor({6}, 19);
  auto res = check_gradients("maxout", [&] { return projection_loss(symmetric_maxout(l, r)); },
                             {{"left", l}, {"right", r}});
  EXPECT_LE(res.max_rel_error, 1e-8);
}

TEST(AUBranchTest, MirrorSwapLeavesOutputUnchanged) {
  ModelConfig c = small_toy();
  Model m = build_model(c, 20);
  Tensor tokens = random_tensor({16, 8}, 21, false);
  Tensor before = au_branch(tokens, {4, 4}, m.au_heads, c);

  // Swap the boxes of each mirror pair (the inputs) and the head parameters.
  ModelConfig swapped = c;
  std::vector<LinearParams> heads = m.au_heads;
  auto idx = [&](const std::string& n) {
    for (std::size_t i = 0; i < c.au_patches.size(); ++i) {
      if (c.au_patches[i].name == n) return i;
    }
    return std::size_t{0};
  };
  for (auto [l, r] : {std::pair{"left_eye", "right_eye"}, {"left_cheek", "right_cheek"}}) {
    AUPatchSpec& a = swapped.au_patches[idx(l)];
    AUPatchSpec& b = swapped.au_patches[idx(r)];
    std::swap(a.x0, b.x0), std::swap(a.x1, b.x1), std::swap(a.y0, b.y0), std::swap(a.y1, b.y1);
    std::swap(heads[idx(l)], heads[idx(r)]);
  }
  Tensor after = au_branch(tokens, {4, 4}, heads, swapped);
  EXPECT_TRUE(bit_equal(before, after));
}

TEST(ModelGradientTest, EndToEndMatchesFiniteDifferencesOnSampledEntries) {
  // Full coverage runs in the gradcheck suite; here every parameter tensor is
  // probed at a handful of entries.
  ModelConfig c = small_toy();
  c.stem_widths = {2, 2, 4};
  Model m = build_model(c, 22);
  Tensor images = random_images(1, 32, 32, 23);
  auto loss = [&] {
    ModelOutput o = forward(m, images);
    return add(sum(mul(o.emotion_logits, random_tensor({1, 6}, 1, false))),
               sum(mul(o.au_logits, random_tensor({1, 21}, 2, false))));
  };
  m.params.zero_grad();
  loss().backward();
  double worst = 0.0;
  for (const auto& [path, t] : m.params.all()) {
    std::vector<double> g = t.grad();
    for (std::size_t i = 0; i < t.numel(); i += std::max<std::size_t>(1, t.numel() / 3)) {
      double orig = t.mutable_data()[i];
      t.mutable_data()[i] = orig + 1e-5;
      double up = loss().item();
      t.mutable_data()[i] = orig - 1e-5;
      double down = loss().item();
      t.mutable_data()[i] = orig;
      double fd = (up - down) / 2e-5;
      worst = std::max(worst, std::abs(fd - g[i]) / std::max(1.0, std::abs(fd)));
    }
  }
  EXPECT_LE(worst, 1e-4);
}

}  // namespace
}  // namespace aucvt
