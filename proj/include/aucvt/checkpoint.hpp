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

// Checkpoint directories.
//
//   <dir>/latest                 name of the newest epoch directory
//   <dir>/epoch_0003/weights.bin parameters, then velocities, as concatenated
//                                tensor containers in parameter-path order
//   <dir>/epoch_0003/manifest.json
//                                config, seed, step, and per-tensor offsets

#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "aucvt/config.hpp"
#include "aucvt/model.hpp"
#include "aucvt/serialize.hpp"
#include "aucvt/train.hpp"

namespace aucvt {

inline constexpr const char* kCheckpointFormat = "aucvt-checkpoint-1";

struct CheckpointInfo {
  std::filesystem::path dir;  // the epoch directory
  std::string config_hash;
  std::uint64_t seed = 0;
  std::size_t step = 0;
  json run_config;  // as written by the training run; may be null
};

inline std::string epoch_dir_name(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch_%04zu", epoch);
  return buf;
}

/// Writes <root>/epoch_NNNN and points <root>/latest at it.
inline std::filesystem::path save_checkpoint(const std::filesystem::path& root, std::size_t epoch,
                                             const Model& model, const TrainState& state,
                                             const RunConfig& cfg) {
  namespace fs = std::filesystem;
  fs::path dir = root / epoch_dir_name(epoch);
  fs::create_directories(dir);
  json tensors = json::array(), velocity = json::array();
  {
    std::ofstream bin(dir / "weights.bin", std::ios::binary);
    if (!bin) throw SchemaError("cannot write " + (dir / "weights.bin").string());
    std::uint64_t offset = 0;
    for (const auto& [path, t] : model.params.all()) {
      tensors.push_back({{"path", path}, {"offset", offset}, {"shape", t.shape()}});
      write_tensor(bin, t);
      offset += encoded_size(t);
    }
    for (const auto& [path, t] : model.params.all()) {
      auto it = state.velocity.find(path);
      Tensor v(t.shape(), it == state.velocity.end() ? std::vector<double>(t.numel(), 0.0) : it->second);
      velocity.push_back({{"path", path}, {"offset", offset}});
      write_tensor(bin, v);
      offset += encoded_size(v);
    }
  }
  json manifest = {{"format", kCheckpointFormat},
                   {"config_hash", config_hash(cfg)},
                   {"seed", cfg.train.seed},
                   {"step", state.step},
                   {"epoch", epoch},
                   {"model", to_json(model.cfg)},
                   {"run", to_json(cfg, false)},
                   {"tensors", tensors},
                   {"velocity", velocity}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
  std::ofstream(root / "latest") << epoch_dir_name(epoch) << '\n';
  return dir;
}

/// Accepts either an epoch directory or a checkpoint root with `latest`.
inline std::filesystem::path resolve_checkpoint(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  if (fs::exists(path / "manifest.json")) return path;
  std::ifstream latest(path / "latest");
  std::string name;
  if (latest >> name && fs::exists(path / name / "manifest.json")) return path / name;
  throw SchemaError("no checkpoint at '" + path.string() + "'");
}

/// Rebuilds the model stored at `path`. `velocity`, when given, receives the
/// optimizer state. Any disagreement between the stored tensors and the
/// stored config raises SchemaError.
inline Model load_checkpoint(const std::filesystem::path& path, CheckpointInfo* info = nullptr,
                             MomentumState* velocity = nullptr) {
  std::filesystem::path dir = resolve_checkpoint(path);
  json m;
  try {
    std::ifstream in(dir / "manifest.json");
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw SchemaError("checkpoint manifest unreadable: " + std::string(e.what()));
  }
  if (m.value("format", "") != kCheckpointFormat) throw SchemaError("unknown checkpoint format");
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(m.at("model"));
  } catch (const std::exception& e) {
    throw SchemaError(std::string("checkpoint model config invalid: ") + e.what());
  }
  Model model = build_model(cfg, m.value("seed", std::uint64_t{0}));

  std::ifstream bin(dir / "weights.bin", std::ios::binary);
  if (!bin) throw SchemaError("missing " + (dir / "weights.bin").string());
  std::string blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  auto read_at = [&](std::uint64_t offset) {
    if (offset >= blob.size()) throw SchemaError("checkpoint offset beyond weights.bin");
    std::istringstream is(blob.substr(offset));
    return read_tensor(is);
  };

  std::size_t seen = 0;
  for (const json& e : m.at("tensors")) {
    std::string p = e.at("path");
    if (!model.params.contains(p)) throw SchemaError("checkpoint tensor '" + p + "' is not in the model");
    const Tensor& dst = model.params.at(p);
    Tensor src = read_at(e.at("offset"));
    if (src.shape() != dst.shape()) {
      throw SchemaError("checkpoint tensor '" + p + "' has shape " + shape_str(src.shape()) +
                        ", model expects " + shape_str(dst.shape()));
    }
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
    ++seen;
  }
  if (seen != model.params.size()) {
    throw SchemaError("checkpoint holds " + std::to_string(seen) + " tensors, model has " +
                      std::to_string(model.params.size()));
  }
  if (velocity) {
    velocity->clear();
    for (const json& e : m.at("velocity")) {
      std::string p = e.at("path");
      Tensor v = read_at(e.at("offset"));
      if (!model.params.contains(p) || v.numel() != model.params.at(p).numel()) {
        throw SchemaError("checkpoint velocity '" + p + "' does not match the model");
      }
      (*velocity)[p] = v.values();
    }
  }
  if (info) {
    info->dir = dir;
    info->config_hash = m.value("config_hash", "");
    info->seed = m.value("seed", std::uint64_t{0});
    info->step = m.value("step", std::size_t{0});
    info->run_config = m.value("run", json());
  }
  return model;
}

}  // namespace aucvt
