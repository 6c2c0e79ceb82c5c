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

#include <CLI11.hpp>

#include <iostream>

#include "aucvt/cli.hpp"

int main(int argc, char** argv) {
  using namespace aucvt::cli;
  CLI::App app{"aucvt: AU-supervised convolutional vision transformer"};
  app.require_subcommand(1);

  TrainArgs train;
  std::uint64_t train_seed = 0;
  auto* train_cmd = app.add_subcommand("train", "Train from a JSON run config");
  train_cmd->add_option("--config", train.config, "Run config JSON")->required();
  auto* seed_opt = train_cmd->add_option("--seed", train_seed, "Override the config seed");
  train_cmd->add_option("--checkpoint", train.checkpoint_dir, "Override the checkpoint directory");
  train_cmd->add_flag("--resume", train.resume, "Continue from the latest checkpoint");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Macro-F1 and accuracy of a checkpoint on a manifest");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Checkpoint directory")->required();
  eval_cmd->add_option("--manifest", eval.manifest, "Manifest CSV")->required();
  eval_cmd->add_option("--config", eval.config, "Run config that must match the checkpoint");

  GradcheckArgs grad;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every backward rule");
  grad_cmd->add_option("--seed", grad.seed, "Seed for inputs and parameters");
  grad_cmd->add_option("--corrupt-op", grad.corrupt_op, "Test hook: scale this op's backward by 1.5")
      ->group("");

  std::string of_csv, of_images, of_out;
  auto* conv_cmd = app.add_subcommand("convert-au", "OpenFace CSV to an auxiliary manifest");
  conv_cmd->add_option("openface_csv", of_csv, "OpenFace output CSV")->required();
  conv_cmd->add_option("image_dir", of_images, "Directory holding the frame images")->required();
  conv_cmd->add_option("out_manifest", of_out, "Manifest to write")->required();

  PredictArgs pred;
  auto* pred_cmd = app.add_subcommand("predict", "Expression and AU probabilities for one image");
  pred_cmd->add_option("--checkpoint", pred.checkpoint, "Checkpoint directory")->required();
  pred_cmd->add_option("image", pred.image, "PNG image")->required();

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Write a procedurally generated labelled dataset");
  synth_cmd->add_option("dir", synth.dir, "Output directory")->required();
  synth_cmd->add_option("--per-class", synth.per_class, "Target images per expression");
  synth_cmd->add_option("--aux-per-class", synth.aux_per_class, "AU-labelled images per expression");
  synth_cmd->add_option("--size", synth.size, "Image side length");
  synth_cmd->add_option("--seed", synth.seed, "Generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kSuccess : kUsageError;
  }

  if (*train_cmd) {
    if (*seed_opt) train.seed = train_seed;
    return cmd_train(train, std::cout, std::cerr);
  }
  if (*eval_cmd) return cmd_eval(eval, std::cout, std::cerr);
  if (*grad_cmd) return cmd_gradcheck(grad, std::cout, std::cerr);
  if (*conv_cmd) return cmd_convert_au(of_csv, of_images, of_out, std::cout, std::cerr);
  if (*pred_cmd) return cmd_predict(pred, std::cout, std::cerr);
  if (*synth_cmd) return cmd_synth(synth, std::cout, std::cerr);
  return kUsageError;
}
