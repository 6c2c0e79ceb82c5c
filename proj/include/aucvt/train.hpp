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

// Joint loss, optimizer, learning-rate schedule, augmentation, metrics and
// the training loop.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aucvt/au_schema.hpp"
#include "aucvt/errors.hpp"
#include "aucvt/hash.hpp"
#include "aucvt/model.hpp"
#include "aucvt/ops.hpp"

namespace aucvt {

// ---------------------------------------------------------------------------
// Loss

struct LossWeights {
  double alpha = 1.0;  // cross-entropy
  double beta = 1.0;   // AU binary cross-entropy

  void validate() const {
    if (!(alpha >= 0.0) || !(beta >= 0.0)) {
      throw ConfigError("loss weights must be non-negative");
    }
  }
};

/// Per-sample labels of one batch. Either kind may be absent per sample.
struct BatchLabels {
  std::vector<std::optional<int>> expression;
  std::vector<std::optional<AUVector>> au;

  std::size_t size() const { return expression.size(); }
};

/// The loss together with the weighted value of each term.
struct LossTerms {
  Tensor total;
  double ce = 0.0;   // alpha * CE
  double bce = 0.0;  // beta * BCE
};

/// alpha * CE + beta * BCE. A term whose weight is zero is left out of the
/// graph; a term with no eligible entries is a constant zero.
inline LossTerms joint_loss_terms(const ModelOutput& out, const BatchLabels& labels,
                                  const LossWeights& w) {
  w.validate();
  const std::size_t b = out.emotion_logits.dim(0);
  if (labels.expression.size() != b || labels.au.size() != b) {
    throw DimensionError("joint_loss: " + std::to_string(labels.expression.size()) + "/" +
                         std::to_string(labels.au.size()) + " labels for batch of " +
                         std::to_string(b));
  }
  bool any = false;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels.expression[i] || (labels.au[i] && labels.au[i]->mask.any())) any = true;
  }
  if (!any) throw ContractError("joint_loss: batch carries no labels");

  LossTerms t;
  std::vector<Tensor> parts;
  if (w.alpha != 0.0) {
    Tensor ce = scale(cross_entropy(out.emotion_logits, labels.expression), w.alpha);
    t.ce = ce.item();
    parts.push_back(ce);
  }
  if (w.beta != 0.0 && out.au_logits.defined()) {
    std::vector<double> target(b * kNumAUs, 0.0);
    std::vector<std::uint8_t> mask(b * kNumAUs, 0);
    for (std::size_t i = 0; i < b; ++i) {
      if (!labels.au[i]) continue;
      for (std::size_t j = 0; j < kNumAUs; ++j) {
        mask[i * kNumAUs + j] = labels.au[i]->mask[j];
        target[i * kNumAUs + j] = labels.au[i]->values[j] ? 1.0 : 0.0;
      }
    }
    Tensor bce = scale(bce_with_logits(out.au_logits, target, mask), w.beta);
    t.bce = bce.item();
    parts.push_back(bce);
  }
  if (parts.empty()) {
    t.total = Tensor::scalar(0.0);
  } else {
    t.total = parts.size() == 1 ? parts[0] : add(parts[0], parts[1]);
  }
  return t;
}

inline Tensor joint_loss(const ModelOutput& out, const BatchLabels& labels,
                         const LossWeights& w) {
  return joint_loss_terms(out, labels, w).total;
}

// ---------------------------------------------------------------------------
// Schedule and optimizer

/// Linear warm-up followed by cosine decay, both measured in steps.
struct LRSchedule {
  double base_lr = 1e-4;
  std::size_t warmup_epochs = 3;
  std::size_t cosine_epochs = 7;
  std::size_t steps_per_epoch = 1;

  std::size_t warmup_steps() const { return warmup_epochs * steps_per_epoch; }
  std::size_t cosine_steps() const { return cosine_epochs * steps_per_epoch; }
  std::size_t total_steps() const { return warmup_steps() + cosine_steps(); }

  void validate() const {
    if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
    if (steps_per_epoch == 0) throw ConfigError("steps_per_epoch must be positive");
    if (total_steps() == 0) throw ConfigError("schedule has no epochs");
  }
};

inline double lr_at(std::size_t step, const LRSchedule& s) {
  const std::size_t warm = s.warmup_steps(), cos_steps = s.cosine_steps();
  if (step < warm) {
    return s.base_lr * static_cast<double>(step + 1) / static_cast<double>(warm);
  }
  if (cos_steps == 0) return s.base_lr;
  std::size_t t = std::min(step - warm, cos_steps);
  double frac = static_cast<double>(t) / static_cast<double>(cos_steps);
  return s.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

struct SGDConfig {
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

/// Velocity buffers keyed by parameter path.
using MomentumState = std::map<std::string, std::vector<double>>;

/// v <- mu v + (g + wd w); w <- w - lr v, for every parameter.
inline void sgd_step(const LayerParams& params, double lr, const SGDConfig& opt,
                     MomentumState& velocity) {
  for (const auto& [path, t] : params.all()) {
    if (!t.has_grad()) throw ContractError("sgd_step: parameter '" + path + "' has no gradient");
  }
  for (const auto& [path, t] : params.all()) {
    auto& v = velocity[path];
    if (v.empty()) v.assign(t.numel(), 0.0);
    if (v.size() != t.numel()) {
      throw ContractError("sgd_step: velocity for '" + path + "' has wrong size");
    }
    std::span<double> w = t.mutable_data();
    std::span<double> g = t.mutable_grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = opt.momentum * v[i] + (g[i] + opt.weight_decay * w[i]);
      w[i] -= lr * v[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  double flip_p = 0.5;
  double gray_p = 0.1;
  double blur_p = 0.5;
  std::size_t blur_kernel = 5;
  double sigma_min = 0.1;
  double sigma_max = 2.0;

  static AugmentConfig none() { return {0.0, 0.0, 0.0, 5, 0.1, 2.0}; }

  void validate() const {
    for (double p : {flip_p, gray_p, blur_p}) {
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("augmentation probability outside [0, 1]");
    }
    if (blur_kernel % 2 == 0) throw ConfigError("blur kernel size must be odd");
    if (!(sigma_min > 0.0 && sigma_min <= sigma_max)) throw ConfigError("bad blur sigma range");
  }
};

/// Uniform double in [0, 1) from the top 53 bits.
inline double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline Tensor hflip(const Tensor& img) {
  detail::require_rank("hflip", img, 3);
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  std::vector<double> out(img.numel());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        out[(ch * h + y) * w + x] = img[(ch * h + y) * w + (w - 1 - x)];
      }
    }
  }
  return Tensor(img.shape(), std::move(out));
}

/// Every channel replaced by 0.299 R + 0.587 G + 0.114 B.
inline Tensor grayscale(const Tensor& img) {
  detail::require_rank("grayscale", img, 3);
  if (img.dim(0) != 3) throw DimensionError("grayscale: expected 3 channels, got " + shape_str(img.shape()));
  const std::size_t n = img.dim(1) * img.dim(2);
  std::vector<double> out(img.numel());
  for (std::size_t i = 0; i < n; ++i) {
    double y = 0.299 * img[i] + 0.587 * img[n + i] + 0.114 * img[2 * n + i];
    out[i] = out[n + i] = out[2 * n + i] = y;
  }
  return Tensor(img.shape(), std::move(out));
}

/// Half-sample symmetric reflection of index p into [0, n).
inline std::size_t reflect_index(std::ptrdiff_t p, std::size_t n) {
  const auto period = static_cast<std::ptrdiff_t>(2 * n);
  std::ptrdiff_t q = ((p % period) + period) % period;
  return static_cast<std::size_t>(q < static_cast<std::ptrdiff_t>(n) ? q : period - 1 - q);
}

/// Separable Gaussian blur with a normalized kernel and symmetric padding.
inline Tensor gaussian_blur(const Tensor& img, double sigma, std::size_t kernel = 5) {
  detail::require_rank("gaussian_blur", img, 3);
  const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(kernel / 2);
  std::vector<double> k(kernel);
  double total = 0.0;
  for (std::ptrdiff_t i = -r; i <= r; ++i) {
    k[i + r] = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
    total += k[i + r];
  }
  for (double& v : k) v /= total;

  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  std::vector<double> tmp(img.numel()), out(img.numel());
  for (std::size_t ch = 0; ch < c; ++ch) {
    const std::size_t base = ch * h * w;
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        double s = 0.0;
        for (std::ptrdiff_t i = -r; i <= r; ++i) {
          s += k[i + r] * img[base + y * w + reflect_index(static_cast<std::ptrdiff_t>(x) + i, w)];
        }
        tmp[base + y * w + x] = s;
      }
    }
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        double s = 0.0;
        for (std::ptrdiff_t i = -r; i <= r; ++i) {
          s += k[i + r] * tmp[base + reflect_index(static_cast<std::ptrdiff_t>(y) + i, h) * w + x];
        }
        out[base + y * w + x] = s;
      }
    }
  }
  return Tensor(img.shape(), std::move(out));
}

/// Random flip, grayscale and blur. Four variates are drawn on every call so
/// the stream position does not depend on which transforms fired.
inline Tensor augment(const Tensor& image, std::mt19937_64& rng, const AugmentConfig& cfg) {
  double u_flip = uniform01(rng), u_gray = uniform01(rng), u_blur = uniform01(rng);
  double sigma = cfg.sigma_min + (cfg.sigma_max - cfg.sigma_min) * uniform01(rng);
  Tensor out = image;
  if (u_flip < cfg.flip_p) out = hflip(out);
  if (u_gray < cfg.gray_p) out = grayscale(out);
  if (u_blur < cfg.blur_p) out = gaussian_blur(out, sigma, cfg.blur_kernel);
  if (out.node_ptr() == image.node_ptr()) return image;
  for (double& v : out.mutable_data()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

namespace detail {

inline void require_metric_input(const char* fn, const std::vector<int>& preds,
                                 const std::vector<int>& labels, int num_classes) {
  if (preds.empty()) throw ContractError(std::string(fn) + ": empty input");
  if (preds.size() != labels.size()) {
    throw ContractError(std::string(fn) + ": " + std::to_string(preds.size()) +
                        " predictions for " + std::to_string(labels.size()) + " labels");
  }
  if (num_classes <= 0) return;
  for (const auto* v : {&preds, &labels}) {
    for (int id : *v) {
      if (id < 0 || id >= num_classes) {
        throw ContractError(std::string(fn) + ": class id " + std::to_string(id) + " out of range");
      }
    }
  }
}

}  // namespace detail

inline double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
  detail::require_metric_input("accuracy", preds, labels, 0);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

/// Unweighted mean over all classes of 2TP / (2TP + FP + FN), 0 for an empty
/// denominator.
inline double macro_f1(const std::vector<int>& preds, const std::vector<int>& labels,
                       int num_classes = static_cast<int>(kNumExpressions)) {
  detail::require_metric_input("macro_f1", preds, labels, num_classes);
  std::vector<std::size_t> tp(num_classes), fp(num_classes), fn(num_classes);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] == labels[i]) {
      ++tp[preds[i]];
    } else {
      ++fp[preds[i]];
      ++fn[labels[i]];
    }
  }
  double total = 0.0;
  for (int c = 0; c < num_classes; ++c) {
    std::size_t den = 2 * tp[c] + fp[c] + fn[c];
    if (den) total += 2.0 * static_cast<double>(tp[c]) / static_cast<double>(den);
  }
  return total / num_classes;
}

inline std::vector<int> argmax_rows(const Tensor& logits) {
  detail::require_rank("argmax_rows", logits, 2);
  const std::size_t b = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = logits.data().data() + i * k;
    out[i] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

/// A decoded image in [0, 1] with its labels.
struct Example {
  Tensor image;  // [3 x H x W]
  std::optional<int> expression;
  std::optional<AUVector> au;
};

using Dataset = std::vector<Example>;

struct TrainOptions {
  LRSchedule schedule;
  LossWeights loss;
  SGDConfig optimizer;
  AugmentConfig augment;
  std::size_t batch_size = 16;
  std::size_t aux_per_batch = 8;  // auxiliary samples per batch when an auxiliary set exists
  std::uint64_t seed = 0;

  void validate() const {
    schedule.validate();
    loss.validate();
    augment.validate();
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (aux_per_batch >= batch_size) throw ConfigError("aux_per_batch must leave room for target samples");
  }
};

struct HistoryRow {
  std::size_t step = 0;
  double lr = 0.0, loss = 0.0, ce = 0.0, bce = 0.0, acc = 0.0, f1 = 0.0;

  friend bool operator==(const HistoryRow&, const HistoryRow&) = default;
};

struct TrainState {
  std::size_t step = 0;  // next step to run
  MomentumState velocity;
};

/// Called after every step; `epoch_end` is set on the last step of an epoch.
using StepHook = std::function<void(const TrainState&, const HistoryRow&, bool epoch_end)>;

namespace detail {

/// Index of the `draw`-th sample taken from a set of `n`: each consecutive
/// pass over the set is a fresh seeded permutation.
inline std::size_t draw_index(std::uint64_t seed, std::uint64_t stream, std::size_t n,
                              std::uint64_t draw) {
  std::uint64_t pass = draw / n;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  auto rng = make_rng({seed, stream, pass});
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng() % i]);
  return perm[draw % n];
}

inline Tensor stack_images(const std::vector<Tensor>& images) {
  std::vector<double> data;
  data.reserve(images.size() * images.front().numel());
  for (const Tensor& t : images) data.insert(data.end(), t.data().begin(), t.data().end());
  Shape s = images.front().shape();
  s.insert(s.begin(), images.size());
  return Tensor(std::move(s), std::move(data));
}

}  // namespace detail

/// Runs steps state.step .. total_steps-1. Batches interleave target and
/// auxiliary samples; sample order and augmentation are pure functions of
/// (seed, step, slot) so a resumed run continues bit-identically.
inline std::vector<HistoryRow> train_loop(Model& model, const Dataset& target, const Dataset& aux,
                                          const TrainOptions& opt, TrainState& state,
                                          const StepHook& hook = {}) {
  opt.validate();
  if (target.empty()) throw ContractError("train_loop: target dataset is empty");
  for (const Example& e : target) {
    if (!e.expression) throw ContractError("train_loop: target sample without expression label");
  }
  const std::size_t n_aux = aux.empty() ? 0 : opt.aux_per_batch;
  const std::size_t n_target = opt.batch_size - n_aux;
  const std::size_t total = opt.schedule.total_steps();

  std::vector<HistoryRow> history;
  for (; state.step < total; ++state.step) {
    const std::size_t step = state.step;
    std::vector<Tensor> images;
    BatchLabels labels;
    std::size_t t_used = 0, a_used = 0;
    for (std::size_t slot = 0; slot < opt.batch_size; ++slot) {
      bool from_aux = a_used < n_aux && (t_used >= n_target || slot % 2 == 1);
      const Example& e =
          from_aux ? aux[detail::draw_index(opt.seed, 2, aux.size(), step * n_aux + a_used++)]
                   : target[detail::draw_index(opt.seed, 1, target.size(), step * n_target + t_used++)];
      auto rng = make_rng({opt.seed, 3, step, slot});
      images.push_back(augment(e.image, rng, opt.augment));
      labels.expression.push_back(e.expression);
      labels.au.push_back(e.au);
    }

    ModelOutput out = forward(model, detail::stack_images(images));
    LossTerms loss = joint_loss_terms(out, labels, opt.loss);
    model.params.zero_grad();
    loss.total.backward();
    double lr = lr_at(step, opt.schedule);
    sgd_step(model.params, lr, opt.optimizer, state.velocity);

    std::vector<int> preds, truth;
    std::vector<int> all_preds = argmax_rows(out.emotion_logits);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (!labels.expression[i]) continue;
      preds.push_back(all_preds[i]);
      truth.push_back(*labels.expression[i]);
    }
    HistoryRow row{step, lr, loss.total.item(), loss.ce, loss.bce, 0.0, 0.0};
    if (!preds.empty()) {
      row.acc = accuracy(preds, truth);
      row.f1 = macro_f1(preds, truth, static_cast<int>(model.cfg.num_classes));
    }
    history.push_back(row);
    bool epoch_end = (step + 1) % opt.schedule.steps_per_epoch == 0;
    if (hook) {
      TrainState after{step + 1, state.velocity};
      hook(after, row, epoch_end);
    }
  }
  return history;
}

struct EvalResult {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<int> predictions;
};

/// Un-augmented predictions on every expression-labelled example.
inline EvalResult evaluate(const Model& model, const Dataset& data, std::size_t batch_size = 16) {
  std::vector<int> preds, truth;
  std::vector<const Example*> pending;
  auto flush = [&] {
    if (pending.empty()) return;
    std::vector<Tensor> images;
    for (const Example* e : pending) images.push_back(e->image);
    std::vector<int> p = argmax_rows(forward(model, detail::stack_images(images)).emotion_logits);
    for (std::size_t i = 0; i < pending.size(); ++i) {
      preds.push_back(p[i]);
      truth.push_back(*pending[i]->expression);
    }
    pending.clear();
  };
  for (const Example& e : data) {
    if (!e.expression) continue;
    pending.push_back(&e);
    if (pending.size() == batch_size) flush();
  }
  flush();
  if (preds.empty()) throw ContractError("evaluate: no expression-labelled samples");
  EvalResult r;
  r.accuracy = accuracy(preds, truth);
  r.macro_f1 = macro_f1(preds, truth, static_cast<int>(model.cfg.num_classes));
  r.predictions = std::move(preds);
  return r;
}

// ---------------------------------------------------------------------------
// History CSV

inline std::string format_history_row(const HistoryRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f", r.step, r.lr, r.loss, r.ce,
                r.bce, r.acc, r.f1);
  return buf;
}

inline void write_history(std::ostream& os, const std::vector<HistoryRow>& rows,
                          const std::string& comment) {
  if (!comment.empty()) os << "# " << comment << '\n';
  os << "step,lr,loss,ce,bce,acc,f1\n";
  for (const HistoryRow& r : rows) os << format_history_row(r) << '\n';
}

}  // namespace aucvt
