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

// Parameterized building blocks: linear maps, multi-head self-attention, the
// convolutional feed-forward block, 2x2 patch merging, pre-norm transformer
// blocks and the strided CNN stem.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "aucvt/hash.hpp"
#include "aucvt/ops.hpp"

namespace aucvt {

/// Owns every trainable tensor under a unique dot-separated path. Each
/// parameter draws its initial values from an engine seeded by
/// (init_seed, path), so adding or removing a layer never changes the values
/// of the others.
class LayerParams {
 public:
  explicit LayerParams(std::uint64_t init_seed = 0) : init_seed_(init_seed) {}

  std::uint64_t init_seed() const { return init_seed_; }

  const Tensor& add(const std::string& path, Tensor t) {
    if (!t.requires_grad()) t = Tensor(t.shape(), t.values(), true);
    auto [it, inserted] = tensors_.emplace(path, std::move(t));
    if (!inserted) throw ConfigError("duplicate parameter path '" + path + "'");
    return it->second;
  }

  const Tensor& zeros(const std::string& path, Shape shape) {
    return add(path, Tensor::zeros(std::move(shape), true));
  }

  const Tensor& ones(const std::string& path, Shape shape) {
    return add(path, Tensor::full(std::move(shape), 1.0, true));
  }

  /// Normal(0, std) redrawn outside +-2 std.
  const Tensor& trunc_normal(const std::string& path, Shape shape, double stddev = 0.02) {
    auto rng = engine(path);
    std::normal_distribution<double> nd(0.0, stddev);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) {
      do x = nd(rng);
      while (std::abs(x) > 2.0 * stddev);
    }
    return add(path, Tensor(std::move(shape), std::move(v), true));
  }

  /// He-uniform: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
  const Tensor& kaiming_uniform(const std::string& path, Shape shape, std::size_t fan_in) {
    auto rng = engine(path);
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = u(rng);
    return add(path, Tensor(std::move(shape), std::move(v), true));
  }

  bool contains(const std::string& path) const { return tensors_.count(path) != 0; }

  const Tensor& at(const std::string& path) const {
    auto it = tensors_.find(path);
    if (it == tensors_.end()) throw ConfigError("unknown parameter path '" + path + "'");
    return it->second;
  }

  const std::map<std::string, Tensor>& all() const { return tensors_; }
  std::size_t size() const { return tensors_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.numel();
    return n;
  }

  void zero_grad() const {
    for (const auto& [_, t] : tensors_) t.zero_grad();
  }

 private:
  std::mt19937_64 engine(const std::string& path) const {
    return make_rng({init_seed_, fnv1a64(path)});
  }

  std::uint64_t init_seed_;
  std::map<std::string, Tensor> tensors_;
};

struct Grid {
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t size() const { return h * w; }
  friend bool operator==(const Grid&, const Grid&) = default;
};

// ---------------------------------------------------------------------------
// Token <-> feature map

/// Tokens [N x C] in row-major grid order -> feature map [C x h x w].
inline Tensor seq2img(const Tensor& tokens, Grid grid) {
  detail::require_rank("seq2img", tokens, 2);
  if (tokens.dim(0) != grid.size()) {
    throw GeometryError("seq2img: " + std::to_string(tokens.dim(0)) + " tokens for a " +
                        std::to_string(grid.h) + "x" + std::to_string(grid.w) + " grid");
  }
  return reshape(transpose(tokens), {tokens.dim(1), grid.h, grid.w});
}

/// Feature map [C x h x w] -> tokens [h*w x C].
inline Tensor img2seq(const Tensor& fmap) {
  detail::require_rank("img2seq", fmap, 3);
  return transpose(reshape(fmap, {fmap.dim(0), fmap.dim(1) * fmap.dim(2)}));
}

// ---------------------------------------------------------------------------
// Linear

struct LinearParams {
  Tensor weight;  // [d_in x d_out]
  Tensor bias;    // [d_out], undefined when the layer has no bias
};

inline LinearParams make_linear(LayerParams& p, const std::string& prefix, std::size_t d_in,
                                std::size_t d_out, bool bias = true) {
  LinearParams l;
  l.weight = p.trunc_normal(prefix + ".weight", {d_in, d_out});
  if (bias) l.bias = p.zeros(prefix + ".bias", {d_out});
  return l;
}

/// x W + b
inline Tensor linear(const Tensor& x, const LinearParams& p) {
  detail::require_rank("linear", x, 2);
  if (x.dim(1) != p.weight.dim(0)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(p.weight.shape()));
  }
  Tensor y = matmul(x, p.weight);
  return p.bias.defined() ? add_bias(y, p.bias) : y;
}

struct NormParams {
  Tensor gamma;
  Tensor beta;
};

inline NormParams make_norm(LayerParams& p, const std::string& prefix, std::size_t d) {
  return {p.ones(prefix + ".gamma", {d}), p.zeros(prefix + ".beta", {d})};
}

inline Tensor layernorm(const Tensor& x, const NormParams& p, double eps = 1e-5) {
  return layernorm(x, p.gamma, p.beta, eps);
}

// ---------------------------------------------------------------------------
// Multi-head self-attention

struct AttentionConfig {
  std::size_t dim = 0;
  std::size_t heads = 1;

  std::size_t head_dim() const { return dim / heads; }

  void validate() const {
    if (dim == 0 || heads == 0 || dim % heads != 0) {
      throw ConfigError("attention: dim " + std::to_string(dim) + " not divisible by " +
                        std::to_string(heads) + " heads");
    }
  }
};

/// dim/64, at least one head.
inline std::size_t default_heads(std::size_t dim) { return std::max<std::size_t>(1, dim / 64); }

struct AttentionParams {
  LinearParams q, k, v, out;
};

inline AttentionParams make_attention(LayerParams& p, const std::string& prefix,
                                      const AttentionConfig& cfg) {
  cfg.validate();
  return {make_linear(p, prefix + ".q", cfg.dim, cfg.dim),
          make_linear(p, prefix + ".k", cfg.dim, cfg.dim),
          make_linear(p, prefix + ".v", cfg.dim, cfg.dim),
          make_linear(p, prefix + ".out", cfg.dim, cfg.dim)};
}

/// Unmasked scaled dot-product attention over all tokens, heads concatenated
/// and projected. If `attention` is given it receives one [N x N] weight
/// matrix per head.
inline Tensor mhsa(const Tensor& tokens, const AttentionConfig& cfg, const AttentionParams& p,
                   std::vector<Tensor>* attention = nullptr) {
  cfg.validate();
  detail::require_rank("mhsa", tokens, 2);
  if (tokens.dim(1) != cfg.dim) {
    throw DimensionError("mhsa: tokens " + shape_str(tokens.shape()) + " for dim " +
                         std::to_string(cfg.dim));
  }
  Tensor q = linear(tokens, p.q), k = linear(tokens, p.k), v = linear(tokens, p.v);
  const std::size_t hd = cfg.head_dim();
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    Tensor qh = slice_cols(q, h * hd, (h + 1) * hd);
    Tensor kh = slice_cols(k, h * hd, (h + 1) * hd);
    Tensor vh = slice_cols(v, h * hd, (h + 1) * hd);
    Tensor weights = softmax(scale(matmul(qh, transpose(kh)), scale_factor), 1);
    if (attention) attention->push_back(weights);
    heads.push_back(matmul(weights, vh));
  }
  Tensor merged = heads.size() == 1 ? heads.front() : concat(heads, 1);
  return linear(merged, p.out);
}

// ---------------------------------------------------------------------------
// Conv-FFN

struct ConvFFNParams {
  LinearParams expand;   // d -> e*d
  Tensor dw_weight;      // [e*d x 3 x 3]
  Tensor dw_bias;        // [e*d]
  LinearParams restore;  // e*d -> d
};

inline ConvFFNParams make_conv_ffn(LayerParams& p, const std::string& prefix, std::size_t dim,
                                   std::size_t expansion) {
  if (expansion == 0) throw ConfigError("conv_ffn: expansion must be >= 1");
  std::size_t hidden = dim * expansion;
  ConvFFNParams f;
  f.expand = make_linear(p, prefix + ".expand", dim, hidden);
  f.dw_weight = p.kaiming_uniform(prefix + ".dw.weight", {hidden, 3, 3}, 9);
  f.dw_bias = p.zeros(prefix + ".dw.bias", {hidden});
  f.restore = make_linear(p, prefix + ".restore", hidden, dim);
  return f;
}

/// expand -> tokens to grid -> depthwise 3x3 -> GELU -> grid to tokens -> restore.
inline Tensor conv_ffn(const Tensor& tokens, Grid grid, std::size_t expansion,
                       const ConvFFNParams& p) {
  detail::require_rank("conv_ffn", tokens, 2);
  if (tokens.dim(0) != grid.size()) {
    throw GeometryError("conv_ffn: " + std::to_string(tokens.dim(0)) + " tokens for grid " +
                        std::to_string(grid.h) + "x" + std::to_string(grid.w));
  }
  if (p.expand.weight.dim(1) != expansion * tokens.dim(1)) {
    throw DimensionError("conv_ffn: expansion " + std::to_string(expansion) +
                         " does not match expand weight " + shape_str(p.expand.weight.shape()));
  }
  Tensor hidden = seq2img(linear(tokens, p.expand), grid);
  hidden = gelu(add_channel_bias(depthwise_conv2d(hidden, p.dw_weight, 1), p.dw_bias));
  return linear(img2seq(hidden), p.restore);
}

// ---------------------------------------------------------------------------
// Patch merging

struct PatchMergeParams {
  LinearParams proj;  // 4C -> 2C, no bias
};

inline PatchMergeParams make_patch_merge(LayerParams& p, const std::string& prefix,
                                         std::size_t dim) {
  return {make_linear(p, prefix + ".proj", 4 * dim, 2 * dim, false)};
}

/// Each 2x2 neighbourhood, read top-left, top-right, bottom-left,
/// bottom-right, is concatenated to 4C and projected to 2C.
inline std::pair<Tensor, Grid> patch_merge(const Tensor& tokens, Grid grid,
                                           const PatchMergeParams& p) {
  detail::require_rank("patch_merge", tokens, 2);
  if (tokens.dim(0) != grid.size()) {
    throw GeometryError("patch_merge: " + std::to_string(tokens.dim(0)) + " tokens for grid " +
                        std::to_string(grid.h) + "x" + std::to_string(grid.w));
  }
  if (grid.h % 2 || grid.w % 2) {
    throw GeometryError("patch_merge: grid " + std::to_string(grid.h) + "x" +
                        std::to_string(grid.w) + " is not even");
  }
  const std::size_t c = tokens.dim(1);
  Grid out{grid.h / 2, grid.w / 2};
  std::vector<std::size_t> idx;
  idx.reserve(tokens.numel());
  for (std::size_t i = 0; i < out.h; ++i) {
    for (std::size_t j = 0; j < out.w; ++j) {
      for (auto [dy, dx] : {std::pair{0, 0}, {0, 1}, {1, 0}, {1, 1}}) {
        std::size_t t = (2 * i + dy) * grid.w + (2 * j + dx);
        for (std::size_t ch = 0; ch < c; ++ch) idx.push_back(t * c + ch);
      }
    }
  }
  Tensor grouped = gather(tokens, {out.size(), 4 * c}, std::move(idx));
  return {linear(grouped, p.proj), out};
}

// ---------------------------------------------------------------------------
// Transformer block

struct BlockParams {
  NormParams norm1;
  AttentionParams attn;
  NormParams norm2;
  ConvFFNParams ffn;
};

inline BlockParams make_block(LayerParams& p, const std::string& prefix,
                              const AttentionConfig& cfg, std::size_t expansion) {
  BlockParams b;
  b.norm1 = make_norm(p, prefix + ".norm1", cfg.dim);
  b.attn = make_attention(p, prefix + ".attn", cfg);
  b.norm2 = make_norm(p, prefix + ".norm2", cfg.dim);
  b.ffn = make_conv_ffn(p, prefix + ".ffn", cfg.dim, expansion);
  return b;
}

/// Pre-norm residual: y = x + MHSA(LN(x)); out = y + ConvFFN(LN(y)).
inline Tensor transformer_block(const Tensor& tokens, Grid grid, const AttentionConfig& cfg,
                                std::size_t expansion, const BlockParams& p) {
  Tensor y = add(tokens, mhsa(layernorm(tokens, p.norm1), cfg, p.attn));
  return add(y, conv_ffn(layernorm(y, p.norm2), grid, expansion, p.ffn));
}

// ---------------------------------------------------------------------------
// CNN stem

struct StemParams {
  std::vector<Tensor> weights;  // [out x in x 3 x 3] per stage
  std::vector<Tensor> biases;
};

inline StemParams make_stem(LayerParams& p, const std::string& prefix, std::size_t in_channels,
                            const std::vector<std::size_t>& widths) {
  StemParams s;
  std::size_t in = in_channels;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    std::string name = prefix + ".conv" + std::to_string(i + 1);
    s.weights.push_back(p.kaiming_uniform(name + ".weight", {widths[i], in, 3, 3}, in * 9));
    s.biases.push_back(p.zeros(name + ".bias", {widths[i]}));
    in = widths[i];
  }
  return s;
}

/// One stride-2 3x3 conv + ReLU per stage: [3 x H x W] -> [C_b x H/R x W/R]
/// with R = 2^stages.
inline Tensor cnn_stem(const Tensor& image, const StemParams& p) {
  detail::require_rank("cnn_stem", image, 3);
  const std::size_t r = std::size_t{1} << p.weights.size();
  if (image.dim(1) % r || image.dim(2) % r) {
    throw DimensionError("cnn_stem: input " + shape_str(image.shape()) +
                         " is not divisible by downsample " + std::to_string(r));
  }
  Tensor x = image;
  for (std::size_t i = 0; i < p.weights.size(); ++i) {
    x = relu(add_channel_bias(conv2d(x, p.weights[i], 2, 1), p.biases[i]));
  }
  return x;
}

}  // namespace aucvt
