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

// Subcommand implementations. Each returns a process exit code:
// 0 success, 1 verification or metric failure, 2 usage or configuration error.

#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "aucvt/checkpoint.hpp"
#include "aucvt/config.hpp"
#include "aucvt/data.hpp"
#include "aucvt/train.hpp"
#include "aucvt/verify.hpp"

namespace aucvt::cli {

enum ExitCode : int { kSuccess = 0, kVerificationFailure = 1, kUsageError = 2 };

/// Runs `fn`, mapping library exceptions to exit code 2 with a message.
inline int guarded(std::ostream& err, const std::function<int()>& fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  }
}

inline std::string header_line(const std::string& hash, std::uint64_t seed) {
  return "config_hash=" + hash + " seed=" + std::to_string(seed);
}

inline std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

/// Decodes every image of a manifest at the model's input size.
inline Dataset load_dataset(const Manifest& m, const ModelConfig& cfg) {
  Dataset out;
  const std::size_t edge = std::max(cfg.input_h, cfg.input_w);
  for (const Sample& s : m.samples) {
    out.push_back({decode_and_resize(m.resolve(s), edge, cfg.input_h, cfg.input_w), s.expression, s.au});
  }
  return out;
}

/// Reads a history CSV written by write_history, keeping rows with
/// step < `before`.
inline std::vector<HistoryRow> read_history(const std::filesystem::path& path, std::size_t before) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot read history '" + path.string() + "'");
  std::vector<HistoryRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("step,", 0) == 0) continue;
    HistoryRow r;
    if (std::sscanf(line.c_str(), "%zu,%lf,%lf,%lf,%lf,%lf,%lf", &r.step, &r.lr, &r.loss, &r.ce, &r.bce,
                    &r.acc, &r.f1) != 7) {
      throw SchemaError("malformed history line '" + line + "'");
    }
    if (r.step < before) rows.push_back(r);
  }
  if (rows.size() != before) {
    throw SchemaError("history '" + path.string() + "' has " + std::to_string(rows.size()) +
                      " rows before step " + std::to_string(before));
  }
  return rows;
}

/// Rewrites the history file from the formatted rows so a resumed run
/// produces the same bytes as an uninterrupted one.
inline void save_history(const std::filesystem::path& path, const std::vector<HistoryRow>& rows,
                         const std::string& header) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw SchemaError("cannot write history '" + path.string() + "'");
  write_history(out, rows, header);
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::filesystem::path config;
  std::optional<std::uint64_t> seed;
  std::string checkpoint_dir;  // overrides output.checkpoint_dir
  bool resume = false;
};

inline int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
  RunConfig cfg;
  try {
    cfg = load_run_config(args.config);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  }
  if (args.seed) cfg.train.seed = *args.seed;
  if (!args.checkpoint_dir.empty()) {
    cfg.checkpoint_dir = std::filesystem::absolute(args.checkpoint_dir).string();
    cfg.history.clear();
  }
  if (cfg.target_manifest.empty()) {
    err << "error: config has no data.target manifest\n";
    return kUsageError;
  }
  for (const std::string& p : {cfg.target_manifest, cfg.aux_manifest, cfg.val_manifest}) {
    if (!p.empty() && !std::filesystem::exists(cfg.resolve(p))) {
      err << "error: manifest not found: " << cfg.resolve(p).string() << '\n';
      return kUsageError;
    }
  }

  return guarded(err, [&] {
    Manifest target_m = load_manifest(cfg.resolve(cfg.target_manifest));
    Dataset target = load_dataset(target_m, cfg.model);
    Dataset aux;
    if (!cfg.aux_manifest.empty()) aux = load_dataset(load_manifest(cfg.resolve(cfg.aux_manifest)), cfg.model);
    if (target.empty()) throw ContractError("target manifest is empty");

    TrainOptions opt = cfg.train;
    const std::size_t per_step = opt.batch_size - (aux.empty() ? 0 : opt.aux_per_batch);
    opt.schedule.steps_per_epoch =
        cfg.steps_per_epoch ? cfg.steps_per_epoch : (target.size() + per_step - 1) / per_step;
    const std::string hash = config_hash(cfg);
    const std::string header = header_line(hash, opt.seed);
    const std::filesystem::path ckpt_root = cfg.resolve(cfg.checkpoint_dir);
    const std::filesystem::path history_path = cfg.history_path();

    Model model = build_model(cfg.model, opt.seed);
    TrainState state;
    std::vector<HistoryRow> rows;
    if (args.resume && std::filesystem::exists(ckpt_root / "latest")) {
      CheckpointInfo info;
      model = load_checkpoint(ckpt_root, &info, &state.velocity);
      if (info.config_hash != hash || info.seed != opt.seed) {
        throw SchemaError("checkpoint " + info.dir.string() + " was written with " +
                          header_line(info.config_hash, info.seed) + ", this run is " + header);
      }
      state.step = info.step;
      rows = read_history(history_path, state.step);
      out << "# resuming from " << info.dir.string() << " at step " << state.step << '\n';
    }

    auto hook = [&](const TrainState& s, const HistoryRow& r, bool epoch_end) {
      rows.push_back(r);
      if (!epoch_end) return;
      save_checkpoint(ckpt_root, s.step / opt.schedule.steps_per_epoch, model, s, cfg);
      save_history(history_path, rows, header);
    };
    train_loop(model, target, aux, opt, state, hook);
    save_history(history_path, rows, header);

    out << "# " << header << '\n';
    out << "steps=" << rows.size() << " history=" << history_path.string() << '\n';
    if (!rows.empty()) out << "final_loss=" << fixed6(rows.back().loss) << '\n';
    Dataset eval_set = target;
    std::string split = "train";
    if (!cfg.val_manifest.empty()) {
      eval_set = load_dataset(load_manifest(cfg.resolve(cfg.val_manifest)), cfg.model);
      split = "val";
    }
    EvalResult r = evaluate(model, eval_set);
    out << split << " macro_f1=" << fixed6(r.macro_f1) << " accuracy=" << fixed6(r.accuracy) << '\n';
    return static_cast<int>(kSuccess);
  });
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path manifest;
  std::filesystem::path config;  // optional; must match the checkpoint
};

inline int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    CheckpointInfo info;
    Model model = load_checkpoint(args.checkpoint, &info);
    if (!args.config.empty()) {
      RunConfig cfg = load_run_config(args.config);
      if (to_json(cfg.model) != to_json(model.cfg)) {
        throw SchemaError("model config in '" + args.config.string() + "' does not match checkpoint " +
                          info.dir.string());
      }
    }
    Manifest m = load_manifest(args.manifest);
    if (m.samples.empty()) throw ContractError("manifest '" + args.manifest.string() + "' is empty");
    EvalResult r = evaluate(model, load_dataset(m, model.cfg));
    out << "# " << header_line(info.config_hash, info.seed) << '\n';
    out << "macro_f1=" << fixed6(r.macro_f1) << " accuracy=" << fixed6(r.accuracy)
        << " samples=" << r.predictions.size() << '\n';
    return static_cast<int>(kSuccess);
  });
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckArgs {
  std::uint64_t seed = 1;
  std::string corrupt_op;  // test hook: scale this op's backward rule
};

inline int cmd_gradcheck(const GradcheckArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    struct Restore {
      std::string saved = detail::corrupted_op();
      ~Restore() { detail::corrupted_op() = saved; }
    } restore;
    detail::corrupted_op() = args.corrupt_op;
    std::vector<GradCheckResult> results = run_gradient_suite(args.seed);

    out << "# " << header_line(model_config_hash(gradcheck_model_config()), args.seed) << '\n';
    bool ok = true;
    for (const auto& r : results) {
      bool pass = r.max_rel_error <= kGradTolerance;
      ok = ok && pass;
      char line[256];
      std::snprintf(line, sizeof line, "%-4s %-18s max_rel_error=%.3e values=%zu worst_input=%s",
                    pass ? "ok" : "FAIL", r.name.c_str(), r.max_rel_error, r.checked_values,
                    r.worst_input.c_str());
      out << line << '\n';
    }
    const GradCheckResult& worst = worst_result(results);
    char line[256];
    std::snprintf(line, sizeof line, "worst: %s (%s) max_rel_error=%.3e tolerance=%.0e",
                  worst.name.c_str(), worst.worst_input.c_str(), worst.max_rel_error, kGradTolerance);
    out << line << '\n';
    if (!ok) {
      for (const auto& r : results) {
        if (!(r.max_rel_error <= kGradTolerance)) {
          err << "gradient check failed: " << r.name << " max_rel_error=" << r.max_rel_error << '\n';
        }
      }
      return static_cast<int>(kVerificationFailure);
    }
    return static_cast<int>(kSuccess);
  });
}

// ---------------------------------------------------------------------------
// convert-au

inline int cmd_convert_au(const std::filesystem::path& openface_csv, const std::filesystem::path& image_dir,
                          const std::filesystem::path& out_manifest, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    std::vector<OpenFaceRow> rows = parse_openface_csv(openface_csv);
    Manifest m = openface_manifest(rows, image_dir);
    std::ifstream in(openface_csv, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::string hash = hex64(fnv1a64(bytes + '\n' + image_dir.generic_string()));
    if (out_manifest.has_parent_path()) std::filesystem::create_directories(out_manifest.parent_path());
    save_manifest(out_manifest, m, header_line(hash, 0));
    out << "# " << header_line(hash, 0) << '\n';
    out << "rows=" << m.samples.size() << " manifest=" << out_manifest.string() << '\n';
    return static_cast<int>(kSuccess);
  });
}

// ---------------------------------------------------------------------------
// predict

struct PredictArgs {
  std::filesystem::path checkpoint;
  std::filesystem::path image;
};

inline int cmd_predict(const PredictArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    CheckpointInfo info;
    Model model = load_checkpoint(args.checkpoint, &info);
    const ModelConfig& c = model.cfg;
    Tensor img = decode_and_resize(args.image, std::max(c.input_h, c.input_w), c.input_h, c.input_w);
    std::vector<double> data = img.values();
    ModelOutput o = forward(model, Tensor({1, 3, c.input_h, c.input_w}, std::move(data)));
    Tensor probs = softmax(o.emotion_logits, 1);
    int cls = argmax_rows(o.emotion_logits)[0];

    nlohmann::ordered_json j;
    j["expression"] = cls < static_cast<int>(kNumExpressions) ? std::string(kExpressionNames[cls])
                                                               : std::to_string(cls);
    nlohmann::ordered_json p = nlohmann::ordered_json::object();
    for (std::size_t k = 0; k < probs.numel(); ++k) {
      std::string name = k < kNumExpressions ? std::string(kExpressionNames[k]) : std::to_string(k);
      p[name] = std::stod(fixed6(probs[k]));
    }
    j["probabilities"] = p;
    if (o.au_logits.defined()) {
      nlohmann::ordered_json au = nlohmann::ordered_json::object();
      for (std::size_t k = 0; k < kNumAUs; ++k) {
        double s = 1.0 / (1.0 + std::exp(-o.au_logits[k]));
        au["AU" + std::to_string(kCanonicalAUs[k])] = std::stod(fixed6(s));
      }
      j["au_probabilities"] = au;
    }
    out << "# " << header_line(info.config_hash, info.seed) << '\n' << j.dump() << '\n';
    return static_cast<int>(kSuccess);
  });
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::filesystem::path dir;
  std::size_t per_class = 8;
  std::size_t aux_per_class = 0;
  std::size_t size = 32;
  std::uint64_t seed = 0;
};

inline int cmd_synth(const SynthArgs& args, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (args.per_class == 0 || args.size == 0) throw ConfigError("per-class and size must be positive");
    write_synthetic_dataset(args.dir, args.per_class, args.size, args.seed, args.aux_per_class);
    out << "# seed=" << args.seed << '\n';
    out << "target=" << (args.dir / "target.csv").string() << " images=" << args.per_class * kNumExpressions
        << '\n';
    if (args.aux_per_class) {
      out << "auxiliary=" << (args.dir / "auxiliary.csv").string()
          << " images=" << args.aux_per_class * kNumExpressions << '\n';
    }
    return static_cast<int>(kSuccess);
  });
}

}  // namespace aucvt::cli
