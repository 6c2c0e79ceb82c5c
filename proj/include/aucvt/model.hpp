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

// The AU-supervised convolutional vision transformer.
//
//   image -> CNN stem -> 1x1 patch tokens -> stage 1 -> merge -> stage 2 ...
//                                               |                    |
//                                               |     flatten -> FC -> emotion logits
//                                               v
//            seq2img -> 7 facial regions -> mean pool -> per-region FC
//                    -> symmetric maxout (eyes, cheeks) -> 21 AU logits
//
// The AU branch taps the stage-1 tokens, before any merge, so its feature
// map has the stem's spatial resolution.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <tuple>
#include <string>
#include <vector>

#include "aucvt/au_schema.hpp"
#include "aucvt/layers.hpp"

namespace aucvt {

/// One facial region as a fractional box over the feature map, with the AUs
/// its classifier predicts.
struct AUPatchSpec {
  std::string name;
  double x0 = 0.0, x1 = 1.0, y0 = 0.0, y1 = 1.0;
  std::vector<int> aus;
  std::string mirror_of;  // empty unless this region mirrors another

  friend bool operator==(const AUPatchSpec&, const AUPatchSpec&) = default;
};

inline const std::vector<std::string>& au_patch_names() {
  static const std::vector<std::string> names = {"left_eye",   "right_eye", "left_cheek",
                                                 "right_cheek", "between_eyebrow", "nose",
                                                 "mouth"};
  return names;
}

inline std::vector<AUPatchSpec> default_au_patches() {
  const std::vector<int> eye = {1, 2, 5, 7};
  return {
      {"left_eye", 0.00, 0.50, 0.15, 0.50, eye, ""},
      {"right_eye", 0.50, 1.00, 0.15, 0.50, eye, "left_eye"},
      {"left_cheek", 0.00, 0.45, 0.40, 0.75, {6}, ""},
      {"right_cheek", 0.55, 1.00, 0.40, 0.75, {6}, "left_cheek"},
      {"between_eyebrow", 0.35, 0.65, 0.05, 0.40, {4}, ""},
      {"nose", 0.30, 0.70, 0.30, 0.70, {9}, ""},
      {"mouth", 0.05, 0.95, 0.50, 1.00,
       {10, 12, 14, 15, 16, 17, 18, 20, 22, 23, 24, 25, 26, 27}, ""},
  };
}

struct StageShape {
  std::size_t h = 0, w = 0, dim = 0;
  friend bool operator==(const StageShape&, const StageShape&) = default;
};

struct ModelConfig {
  std::size_t input_h = 112;
  std::size_t input_w = 112;
  std::size_t downsample = 8;        // R, a power of two; one stride-2 conv per factor 2
  std::size_t stem_channels = 1024;  // C_b
  std::vector<std::size_t> stem_widths;  // per stem conv; derived from stem_channels if empty
  std::size_t embed_dim = 256;           // C
  std::vector<std::size_t> stage_depths = {2, 2};
  std::vector<std::size_t> stage_heads;  // dim/64 per stage if empty
  std::size_t ffn_expansion = 4;
  std::size_t num_classes = kNumExpressions;
  bool au_branch = true;
  std::vector<AUPatchSpec> au_patches = default_au_patches();
  std::vector<int> canonical_au_order;  // union of patch AUs if empty
  double norm_eps = 1e-5;
  std::string stem_activation = "relu";
  std::string ffn_activation = "gelu";

  static ModelConfig reference() { return ModelConfig{}; }

  static ModelConfig toy() {
    ModelConfig c;
    c.input_h = c.input_w = 32;
    c.stem_channels = 64;
    c.embed_dim = 32;
    c.stage_depths = {1, 1};
    return c;
  }

  std::size_t num_stages() const { return stage_depths.size(); }
  std::size_t stem_stages() const {
    std::size_t n = 0;
    for (std::size_t r = downsample; r > 1; r >>= 1) ++n;
    return n;
  }
  Grid stem_grid() const { return {input_h / downsample, input_w / downsample}; }
  std::size_t stage_dim(std::size_t k) const { return embed_dim << (k - 1); }

  std::vector<std::size_t> resolved_stem_widths() const {
    if (!stem_widths.empty()) return stem_widths;
    std::size_t n = stem_stages();
    std::vector<std::size_t> w(n);
    for (std::size_t i = 0; i < n; ++i) {
      w[i] = std::max<std::size_t>(1, stem_channels >> (n - 1 - i));
    }
    return w;
  }

  std::size_t heads_for(std::size_t k) const {
    return stage_heads.empty() ? default_heads(stage_dim(k)) : stage_heads.at(k - 1);
  }

  std::vector<int> resolved_au_order() const {
    if (!canonical_au_order.empty()) return canonical_au_order;
    std::set<int> all;
    for (const auto& p : au_patches) all.insert(p.aus.begin(), p.aus.end());
    return {all.begin(), all.end()};
  }

  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Rows floor(y0*h) .. ceil(y1*h)-1 and columns floor(x0*w) .. ceil(x1*w)-1,
/// as half-open ranges.
struct CellRange {
  std::size_t r0, r1, c0, c1;
};

inline CellRange rasterize(const AUPatchSpec& spec, Grid grid) {
  // The nudge keeps products like 0.3 * 10 = 3.0000000000000004 on their
  // intended cell boundary.
  constexpr double nudge = 1e-9;
  auto lo = [&](double f, std::size_t n) {
    return static_cast<std::size_t>(std::clamp(std::floor(f * n + nudge), 0.0, double(n)));
  };
  auto hi = [&](double f, std::size_t n) {
    return static_cast<std::size_t>(std::clamp(std::ceil(f * n - nudge), 0.0, double(n)));
  };
  CellRange r{lo(spec.y0, grid.h), hi(spec.y1, grid.h), lo(spec.x0, grid.w),
              hi(spec.x1, grid.w)};
  if (r.r0 >= r.r1 || r.c0 >= r.c1) {
    throw GeometryError("AU patch '" + spec.name + "' rasterizes to an empty region on a " +
                        std::to_string(grid.h) + "x" + std::to_string(grid.w) + " grid");
  }
  return r;
}

inline void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (input_h == 0 || input_w == 0) fail("input size must be positive");
  if (downsample < 2 || (downsample & (downsample - 1))) {
    fail("downsample " + std::to_string(downsample) + " must be a power of two >= 2");
  }
  if (input_h % downsample || input_w % downsample) {
    fail("input " + std::to_string(input_h) + "x" + std::to_string(input_w) +
         " not divisible by downsample " + std::to_string(downsample));
  }
  if (resolved_stem_widths().size() != stem_stages()) {
    fail("stem_widths needs one entry per stride-2 stage (" + std::to_string(stem_stages()) + ")");
  }
  for (std::size_t w : resolved_stem_widths()) {
    if (w == 0) fail("stem widths must be positive");
  }
  if (embed_dim == 0) fail("embed_dim must be positive");
  if (stage_depths.empty()) fail("at least one stage is required");
  if (!stage_heads.empty() && stage_heads.size() != stage_depths.size()) {
    fail("stage_heads and stage_depths differ in length");
  }
  for (std::size_t d : stage_depths) {
    if (d == 0) fail("stage depths must be >= 1");
  }
  std::size_t factor = std::size_t{1} << (num_stages() - 1);
  Grid g = stem_grid();
  if (g.h % factor || g.w % factor) {
    fail("stem grid " + std::to_string(g.h) + "x" + std::to_string(g.w) +
         " cannot be halved " + std::to_string(num_stages() - 1) + " times");
  }
  for (std::size_t k = 1; k <= num_stages(); ++k) {
    std::size_t heads = heads_for(k);
    if (heads == 0 || stage_dim(k) % heads) {
      fail("stage " + std::to_string(k) + " dim " + std::to_string(stage_dim(k)) +
           " not divisible by " + std::to_string(heads) + " heads");
    }
  }
  if (ffn_expansion == 0) fail("ffn_expansion must be >= 1");
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (norm_eps <= 0.0) fail("norm_eps must be positive");
  if (stem_activation != "relu") fail("stem_activation must be \"relu\"");
  if (ffn_activation != "gelu") fail("ffn_activation must be \"gelu\"");
  if (!au_branch) return;

  std::map<std::string, const AUPatchSpec*> by_name;
  for (const auto& p : au_patches) {
    const auto& names = au_patch_names();
    if (std::find(names.begin(), names.end(), p.name) == names.end()) {
      fail("unknown AU patch '" + p.name + "'");
    }
    if (!by_name.emplace(p.name, &p).second) fail("duplicate AU patch '" + p.name + "'");
    if (!(p.x0 < p.x1 && p.y0 < p.y1) || p.x0 < 0 || p.y0 < 0 || p.x1 > 1 || p.y1 > 1) {
      fail("AU patch '" + p.name + "' box must satisfy 0 <= x0 < x1 <= 1, 0 <= y0 < y1 <= 1");
    }
    if (p.aus.empty()) fail("AU patch '" + p.name + "' has no AUs");
    for (int au : p.aus) {
      if (!find_au_index(au)) fail("AU patch '" + p.name + "' lists non-canonical AU" + std::to_string(au));
    }
    rasterize(p, g);
  }
  if (by_name.size() != au_patch_names().size()) fail("all 7 AU patches must be configured");

  std::map<std::string, std::string> pair_of;
  for (const auto& p : au_patches) {
    if (p.mirror_of.empty()) continue;
    auto it = by_name.find(p.mirror_of);
    if (it == by_name.end() || !it->second->mirror_of.empty()) {
      fail("AU patch '" + p.name + "' mirrors an unknown or mirrored patch");
    }
    if (it->second->aus != p.aus) fail("mirror pair '" + p.name + "' has different AU lists");
    if (pair_of.count(p.mirror_of)) fail("patch '" + p.mirror_of + "' is mirrored twice");
    pair_of[p.mirror_of] = p.name;
    pair_of[p.name] = p.mirror_of;
  }

  auto overlaps = [](const AUPatchSpec& a, const AUPatchSpec& b) {
    return std::min(a.x1, b.x1) > std::max(a.x0, b.x0) &&
           std::min(a.y1, b.y1) > std::max(a.y0, b.y0);
  };
  std::map<int, std::vector<std::string>> owners;
  for (const auto& p : au_patches) {
    bool any = false;
    for (const auto& q : au_patches) any = any || (&p != &q && overlaps(p, q));
    if (!any) fail("AU patch '" + p.name + "' overlaps no other patch");
    for (int au : p.aus) owners[au].push_back(p.name);
  }
  for (const auto& [au, names] : owners) {
    if (names.size() == 1) continue;
    if (names.size() != 2 || pair_of.count(names[0]) == 0 || pair_of.at(names[0]) != names[1]) {
      fail("AU" + std::to_string(au) + " is assigned to regions that are not a mirror pair");
    }
  }

  std::vector<int> order = resolved_au_order();
  std::vector<int> uni;
  for (const auto& [au, _] : owners) uni.push_back(au);
  if (!std::is_sorted(order.begin(), order.end()) ||
      std::adjacent_find(order.begin(), order.end()) != order.end()) {
    fail("canonical_au_order must be strictly ascending");
  }
  if (order != uni) fail("canonical_au_order must equal the union of patch AU lists");
}

/// Token grid and width at the end of stage k (1-based), before any merge
/// into stage k+1.
inline StageShape stage_shape(const ModelConfig& cfg, std::size_t k) {
  if (k < 1 || k > cfg.num_stages()) {
    throw ConfigError("stage index " + std::to_string(k) + " outside 1.." +
                      std::to_string(cfg.num_stages()));
  }
  Grid g = cfg.stem_grid();
  std::size_t f = std::size_t{1} << (k - 1);
  return {g.h / f, g.w / f, cfg.stage_dim(k)};
}

struct StageParams {
  bool has_merge = false;
  PatchMergeParams merge;
  std::vector<BlockParams> blocks;
};

struct Model {
  ModelConfig cfg;
  LayerParams params;
  StemParams stem;
  LinearParams embed;  // C_b -> C, the 1x1 patch projection
  Tensor pos_embed;    // [N x C]
  std::vector<StageParams> stages;
  LinearParams emotion_head;            // flattened final tokens -> classes
  std::vector<LinearParams> au_heads;  // parallel to cfg.au_patches
};

struct ModelOutput {
  Tensor emotion_logits;  // [B x classes]
  Tensor au_logits;       // [B x 21]; undefined without an AU branch
  std::vector<StageShape> stage_shapes;  // observed on the first sample
};

inline Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model m{cfg, LayerParams(seed), {}, {}, {}, {}, {}, {}};
  LayerParams& p = m.params;
  std::vector<std::size_t> widths = cfg.resolved_stem_widths();
  m.stem = make_stem(p, "stem", 3, widths);
  m.embed = make_linear(p, "embed", widths.back(), cfg.embed_dim);
  Grid g = cfg.stem_grid();
  m.pos_embed = p.trunc_normal("pos_embed", {g.size(), cfg.embed_dim});
  for (std::size_t k = 1; k <= cfg.num_stages(); ++k) {
    std::string prefix = "stages." + std::to_string(k - 1);
    StageParams s;
    if (k > 1) {
      s.has_merge = true;
      s.merge = make_patch_merge(p, prefix + ".merge", cfg.stage_dim(k - 1));
    }
    AttentionConfig acfg{cfg.stage_dim(k), cfg.heads_for(k)};
    for (std::size_t b = 0; b < cfg.stage_depths[k - 1]; ++b) {
      s.blocks.push_back(
          make_block(p, prefix + ".blocks." + std::to_string(b), acfg, cfg.ffn_expansion));
    }
    m.stages.push_back(std::move(s));
  }
  StageShape last = stage_shape(cfg, cfg.num_stages());
  m.emotion_head = make_linear(p, "head", last.h * last.w * last.dim, cfg.num_classes);
  if (cfg.au_branch) {
    for (const auto& spec : cfg.au_patches) {
      m.au_heads.push_back(make_linear(p, "au." + spec.name, cfg.embed_dim, spec.aus.size()));
    }
  }
  return m;
}

/// Mean of each channel over the cells the region covers: [C x h x w] -> [C].
inline Tensor extract_au_patch(const Tensor& fmap, const AUPatchSpec& spec) {
  detail::require_rank("extract_au_patch", fmap, 3);
  CellRange r = rasterize(spec, {fmap.dim(1), fmap.dim(2)});
  return region_mean(fmap, r.r0, r.r1, r.c0, r.c1);
}

/// Element-wise max of the logits of two mirrored regions.
inline Tensor symmetric_maxout(const Tensor& left, const Tensor& right) {
  if (left.shape() != right.shape()) {
    throw DimensionError("symmetric_maxout: width mismatch " + shape_str(left.shape()) +
                         " vs " + shape_str(right.shape()));
  }
  return maximum(left, right);
}

/// Stage-1 tokens [N x C] of one sample -> AU logits [1 x |canonical order|].
inline Tensor au_branch(const Tensor& stage1_tokens, Grid grid,
                        const std::vector<LinearParams>& heads, const ModelConfig& cfg) {
  if (heads.size() != cfg.au_patches.size()) {
    throw ConfigError("au_branch: " + std::to_string(heads.size()) + " heads for " +
                      std::to_string(cfg.au_patches.size()) + " patches");
  }
  Tensor fmap = seq2img(stage1_tokens, grid);
  std::map<std::string, Tensor> raw;
  for (std::size_t i = 0; i < heads.size(); ++i) {
    const AUPatchSpec& spec = cfg.au_patches[i];
    Tensor pooled = reshape(extract_au_patch(fmap, spec), {1, fmap.dim(0)});
    raw[spec.name] = linear(pooled, heads[i]);
  }

  // Fold each mirror into its partner; the partner (the left side) is the
  // first maxout argument.
  std::vector<Tensor> parts;
  std::vector<int> part_aus;
  for (const auto& spec : cfg.au_patches) {
    if (!spec.mirror_of.empty()) continue;
    Tensor logits = raw.at(spec.name);
    for (const auto& other : cfg.au_patches) {
      if (other.mirror_of == spec.name) logits = symmetric_maxout(logits, raw.at(other.name));
    }
    parts.push_back(logits);
    part_aus.insert(part_aus.end(), spec.aus.begin(), spec.aus.end());
  }
  Tensor joined = concat(parts, 1);
  std::vector<int> order = cfg.resolved_au_order();
  std::vector<std::size_t> idx;
  for (int au : order) {
    auto it = std::find(part_aus.begin(), part_aus.end(), au);
    idx.push_back(static_cast<std::size_t>(it - part_aus.begin()));
  }
  return gather(joined, {1, order.size()}, std::move(idx));
}

namespace detail {

struct SampleOutput {
  Tensor emotion;  // [1 x classes]
  Tensor au;       // [1 x 21] or undefined
  std::vector<StageShape> shapes;
};

inline SampleOutput forward_sample(const Model& m, const Tensor& image) {
  const ModelConfig& cfg = m.cfg;
  Tensor x = affine(image, 2.0, -1.0);  // [0,1] -> [-1,1]
  Tensor tokens = linear(img2seq(cnn_stem(x, m.stem)), m.embed);
  tokens = add(tokens, m.pos_embed);
  Grid grid = cfg.stem_grid();
  SampleOutput out;
  for (std::size_t k = 1; k <= cfg.num_stages(); ++k) {
    const StageParams& s = m.stages[k - 1];
    if (s.has_merge) std::tie(tokens, grid) = patch_merge(tokens, grid, s.merge);
    AttentionConfig acfg{cfg.stage_dim(k), cfg.heads_for(k)};
    for (const BlockParams& b : s.blocks) {
      tokens = transformer_block(tokens, grid, acfg, cfg.ffn_expansion, b);
    }
    out.shapes.push_back({grid.h, grid.w, tokens.dim(1)});
    if (k == 1 && cfg.au_branch) out.au = au_branch(tokens, grid, m.au_heads, cfg);
  }
  out.emotion = linear(reshape(tokens, {1, tokens.numel()}), m.emotion_head);
  return out;
}

}  // namespace detail

/// Runs both branches on every image of a [B x 3 x H x W] batch with pixel
/// values in [0, 1].
inline ModelOutput forward(const Model& m, const Tensor& batch) {
  const ModelConfig& cfg = m.cfg;
  if (batch.rank() != 4 || batch.dim(1) != 3 || batch.dim(2) != cfg.input_h ||
      batch.dim(3) != cfg.input_w) {
    throw DimensionError("forward: batch " + shape_str(batch.shape()) + " for model input 3x" +
                         std::to_string(cfg.input_h) + "x" + std::to_string(cfg.input_w));
  }
  const std::size_t b = batch.dim(0), per = batch.numel() / b;
  std::vector<Tensor> emo, au;
  ModelOutput out;
  for (std::size_t i = 0; i < b; ++i) {
    Tensor image;
    if (batch.requires_grad()) {
      std::vector<std::size_t> idx(per);
      std::iota(idx.begin(), idx.end(), i * per);
      image = gather(batch, {3, cfg.input_h, cfg.input_w}, std::move(idx));
    } else {
      image = Tensor({3, cfg.input_h, cfg.input_w},
                     std::vector<double>(batch.data().begin() + i * per,
                                         batch.data().begin() + (i + 1) * per));
    }
    detail::SampleOutput s = detail::forward_sample(m, image);
    emo.push_back(s.emotion);
    if (s.au.defined()) au.push_back(s.au);
    if (i == 0) out.stage_shapes = std::move(s.shapes);
  }
  out.emotion_logits = b == 1 ? emo.front() : concat(emo, 0);
  if (!au.empty()) out.au_logits = b == 1 ? au.front() : concat(au, 0);
  return out;
}

}  // namespace aucvt
