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

// JSON run configuration.
//
//   {
//     "model":     {"preset": "toy", "embed_dim": 32, ...},
//     "schedule":  {"base_lr": 0.01, "warmup_epochs": 3, "cosine_epochs": 60},
//     "loss":      {"alpha": 1.0, "beta": 1.0},
//     "optimizer": {"momentum": 0.9, "weight_decay": 0.0005},
//     "batch":     {"size": 16, "auxiliary": 8},
//     "augment":   {"flip_p": 0.5, "gray_p": 0.1, "blur_p": 0.5, ...},
//     "seed": 0,
//     "data":      {"target": "train.csv", "auxiliary": "aux.csv", "val": "val.csv"},
//     "output":    {"checkpoint_dir": "runs/toy", "history": "runs/toy/history.csv"}
//   }
//
// Every section and key is optional. Relative paths resolve against the
// config file's directory. Unknown keys are rejected.

#pragma once

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "aucvt/errors.hpp"
#include "aucvt/hash.hpp"
#include "aucvt/model.hpp"
#include "aucvt/train.hpp"

namespace aucvt {

using json = nlohmann::json;

namespace detail {

inline void reject_unknown_keys(const json& j, const std::string& where,
                                const std::set<std::string>& known) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read_key(const json& j, const char* key, T& out, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// ModelConfig

inline json to_json(const AUPatchSpec& p) {
  json j = {{"name", p.name}, {"x0", p.x0}, {"x1", p.x1}, {"y0", p.y0}, {"y1", p.y1}, {"aus", p.aus}};
  if (!p.mirror_of.empty()) j["mirror_of"] = p.mirror_of;
  return j;
}

inline AUPatchSpec patch_from_json(const json& j) {
  detail::reject_unknown_keys(j, "au_patches entry", {"name", "x0", "x1", "y0", "y1", "aus", "mirror_of"});
  AUPatchSpec p;
  const std::string w = "au_patches entry";
  detail::read_key(j, "name", p.name, w);
  detail::read_key(j, "x0", p.x0, w);
  detail::read_key(j, "x1", p.x1, w);
  detail::read_key(j, "y0", p.y0, w);
  detail::read_key(j, "y1", p.y1, w);
  detail::read_key(j, "aus", p.aus, w);
  detail::read_key(j, "mirror_of", p.mirror_of, w);
  return p;
}

inline json to_json(const ModelConfig& c) {
  json patches = json::array();
  for (const auto& p : c.au_patches) patches.push_back(to_json(p));
  return {{"input_h", c.input_h},
          {"input_w", c.input_w},
          {"downsample", c.downsample},
          {"stem_channels", c.stem_channels},
          {"stem_widths", c.stem_widths},
          {"embed_dim", c.embed_dim},
          {"stage_depths", c.stage_depths},
          {"stage_heads", c.stage_heads},
          {"ffn_expansion", c.ffn_expansion},
          {"num_classes", c.num_classes},
          {"au_branch", c.au_branch},
          {"au_patches", patches},
          {"canonical_au_order", c.canonical_au_order},
          {"norm_eps", c.norm_eps},
          {"stem_activation", c.stem_activation},
          {"ffn_activation", c.ffn_activation}};
}

/// Starts from `preset` ("reference" or "toy", default reference) and
/// overrides the keys present. The result is validated.
inline ModelConfig model_config_from_json(const json& j) {
  detail::reject_unknown_keys(
      j, "model",
      {"preset", "input_h", "input_w", "downsample", "stem_channels", "stem_widths", "embed_dim",
       "stage_depths", "stage_heads", "ffn_expansion", "num_classes", "au_branch", "au_patches",
       "canonical_au_order", "norm_eps", "stem_activation", "ffn_activation"});
  std::string preset = "reference";
  detail::read_key(j, "preset", preset, "model");
  ModelConfig c;
  if (preset == "toy") {
    c = ModelConfig::toy();
  } else if (preset != "reference") {
    throw ConfigError("unknown model preset '" + preset + "'");
  }
  const std::string w = "model";
  detail::read_key(j, "input_h", c.input_h, w);
  detail::read_key(j, "input_w", c.input_w, w);
  detail::read_key(j, "downsample", c.downsample, w);
  detail::read_key(j, "stem_channels", c.stem_channels, w);
  detail::read_key(j, "stem_widths", c.stem_widths, w);
  detail::read_key(j, "embed_dim", c.embed_dim, w);
  detail::read_key(j, "stage_depths", c.stage_depths, w);
  detail::read_key(j, "stage_heads", c.stage_heads, w);
  detail::read_key(j, "ffn_expansion", c.ffn_expansion, w);
  detail::read_key(j, "num_classes", c.num_classes, w);
  detail::read_key(j, "au_branch", c.au_branch, w);
  detail::read_key(j, "canonical_au_order", c.canonical_au_order, w);
  detail::read_key(j, "norm_eps", c.norm_eps, w);
  detail::read_key(j, "stem_activation", c.stem_activation, w);
  detail::read_key(j, "ffn_activation", c.ffn_activation, w);
  if (auto it = j.find("au_patches"); it != j.end()) {
    if (!it->is_array()) throw ConfigError("model.au_patches must be an array");
    c.au_patches.clear();
    for (const json& p : *it) c.au_patches.push_back(patch_from_json(p));
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// RunConfig

struct RunConfig {
  ModelConfig model = ModelConfig::toy();
  TrainOptions train;
  std::size_t steps_per_epoch = 0;  // 0: one pass over the target set
  std::string target_manifest, aux_manifest, val_manifest;
  std::string checkpoint_dir = "checkpoints";
  std::string history;  // default <checkpoint_dir>/history.csv
  std::filesystem::path base_dir;  // directory relative paths resolve against

  std::filesystem::path resolve(const std::string& p) const {
    if (p.empty()) return {};
    std::filesystem::path q(p);
    return q.is_absolute() ? q : (base_dir / q).lexically_normal();
  }

  std::filesystem::path history_path() const {
    return history.empty() ? resolve(checkpoint_dir) / "history.csv" : resolve(history);
  }
};

/// The configuration without its output locations: everything that
/// influences the numbers a run produces.
inline json to_json(const RunConfig& r, bool include_outputs = true) {
  const TrainOptions& t = r.train;
  const AugmentConfig& a = t.augment;
  json j = {
      {"model", to_json(r.model)},
      {"schedule",
       {{"base_lr", t.schedule.base_lr},
        {"warmup_epochs", t.schedule.warmup_epochs},
        {"cosine_epochs", t.schedule.cosine_epochs},
        {"steps_per_epoch", r.steps_per_epoch}}},
      {"loss", {{"alpha", t.loss.alpha}, {"beta", t.loss.beta}}},
      {"optimizer", {{"momentum", t.optimizer.momentum}, {"weight_decay", t.optimizer.weight_decay}}},
      {"batch", {{"size", t.batch_size}, {"auxiliary", t.aux_per_batch}}},
      {"augment",
       {{"flip_p", a.flip_p},
        {"gray_p", a.gray_p},
        {"blur_p", a.blur_p},
        {"blur_kernel", a.blur_kernel},
        {"sigma_min", a.sigma_min},
        {"sigma_max", a.sigma_max}}},
      {"seed", t.seed},
      {"data", {{"target", r.target_manifest}, {"auxiliary", r.aux_manifest}, {"val", r.val_manifest}}}};
  if (include_outputs) j["output"] = {{"checkpoint_dir", r.checkpoint_dir}, {"history", r.history}};
  return j;
}

inline RunConfig run_config_from_json(const json& j, const std::filesystem::path& base_dir = {}) {
  detail::reject_unknown_keys(j, "config", {"model", "schedule", "loss", "optimizer", "batch",
                                            "augment", "seed", "data", "output"});
  RunConfig r;
  r.base_dir = base_dir;
  TrainOptions& t = r.train;
  auto section = [&](const char* name, const std::set<std::string>& keys) -> json {
    auto it = j.find(name);
    if (it == j.end()) return json::object();
    detail::reject_unknown_keys(*it, name, keys);
    return *it;
  };
  if (auto it = j.find("model"); it != j.end()) r.model = model_config_from_json(*it);

  json s = section("schedule", {"base_lr", "warmup_epochs", "cosine_epochs", "steps_per_epoch"});
  detail::read_key(s, "base_lr", t.schedule.base_lr, "schedule");
  detail::read_key(s, "warmup_epochs", t.schedule.warmup_epochs, "schedule");
  detail::read_key(s, "cosine_epochs", t.schedule.cosine_epochs, "schedule");
  detail::read_key(s, "steps_per_epoch", r.steps_per_epoch, "schedule");

  json l = section("loss", {"alpha", "beta"});
  detail::read_key(l, "alpha", t.loss.alpha, "loss");
  detail::read_key(l, "beta", t.loss.beta, "loss");

  json o = section("optimizer", {"momentum", "weight_decay"});
  detail::read_key(o, "momentum", t.optimizer.momentum, "optimizer");
  detail::read_key(o, "weight_decay", t.optimizer.weight_decay, "optimizer");

  json b = section("batch", {"size", "auxiliary"});
  detail::read_key(b, "size", t.batch_size, "batch");
  detail::read_key(b, "auxiliary", t.aux_per_batch, "batch");

  json a = section("augment", {"flip_p", "gray_p", "blur_p", "blur_kernel", "sigma_min", "sigma_max"});
  detail::read_key(a, "flip_p", t.augment.flip_p, "augment");
  detail::read_key(a, "gray_p", t.augment.gray_p, "augment");
  detail::read_key(a, "blur_p", t.augment.blur_p, "augment");
  detail::read_key(a, "blur_kernel", t.augment.blur_kernel, "augment");
  detail::read_key(a, "sigma_min", t.augment.sigma_min, "augment");
  detail::read_key(a, "sigma_max", t.augment.sigma_max, "augment");

  detail::read_key(j, "seed", t.seed, "config");

  json d = section("data", {"target", "auxiliary", "val"});
  detail::read_key(d, "target", r.target_manifest, "data");
  detail::read_key(d, "auxiliary", r.aux_manifest, "data");
  detail::read_key(d, "val", r.val_manifest, "data");

  json out = section("output", {"checkpoint_dir", "history"});
  detail::read_key(out, "checkpoint_dir", r.checkpoint_dir, "output");
  detail::read_key(out, "history", r.history, "output");

  // steps_per_epoch is only known once the data is loaded; validate the rest.
  LRSchedule probe = t.schedule;
  probe.steps_per_epoch = std::max<std::size_t>(1, r.steps_per_epoch);
  TrainOptions check = t;
  check.schedule = probe;
  check.validate();
  return r;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j, path.parent_path());
}

/// FNV-1a of the canonical JSON of everything but the seed and outputs.
inline std::string config_hash(const RunConfig& r) {
  json j = to_json(r, false);
  j.erase("seed");
  return hex64(fnv1a64(j.dump()));
}

inline std::string model_config_hash(const ModelConfig& c) { return hex64(fnv1a64(to_json(c).dump())); }

}  // namespace aucvt
