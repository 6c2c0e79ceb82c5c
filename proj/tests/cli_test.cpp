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

// Runs the aucvt binary end to end.

#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "aucvt/data.hpp"

namespace aucvt {
namespace {

namespace fs = std::filesystem;

struct Outcome {
  int code = -1;
  std::string out;  // stdout and stderr interleaved
};

Outcome run(const std::string& args) {
  std::string cmd = std::string(AUCVT_CLI_PATH) + " " + args + " 2>&1";
  Outcome r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("aucvt_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string q(const fs::path& p) const { return "'" + p.string() + "'"; }

  // A two-epoch toy run over 12 synthetic images: one step per epoch.
  fs::path tiny_config(const std::string& name, const std::string& target) {
    fs::path p = dir_ / name;
    std::ofstream(p) << R"({"model": {"preset": "toy"},
      "schedule": {"base_lr": 0.01, "warmup_epochs": 1, "cosine_epochs": 1},
      "batch": {"size": 12, "auxiliary": 0},
      "seed": 4,
      "data": {"target": ")" << target << R"("},
      "output": {"checkpoint_dir": "runs"}})";
    return p;
  }

  fs::path dir_;
};

TEST_F(CliTest, UsageErrorsExitTwo) {
  EXPECT_EQ(run("").code, 2);
  EXPECT_EQ(run("frobnicate").code, 2);
  EXPECT_EQ(run("train").code, 2);
  EXPECT_EQ(run("gradcheck --seed notanumber").code, 2);
  EXPECT_EQ(run("--help").code, 0);
}

TEST_F(CliTest, MissingConfigOrManifestNamesThePath) {
  Outcome r = run("train --config " + q(dir_ / "absent.json"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("absent.json"), std::string::npos) << r.out;

  fs::path cfg = tiny_config("c.json", "nowhere/target.csv");
  r = run("train --config " + q(cfg));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("nowhere/target.csv"), std::string::npos) << r.out;
}

TEST_F(CliTest, InvalidConfigExitsTwo) {
  fs::path p = dir_ / "bad.json";
  std::ofstream(p) << R"({"model": {"preset": "toy", "embed_dim": 30, "stage_heads": [4, 4]}})";
  EXPECT_EQ(run("train --config " + q(p)).code, 2);
  std::ofstream(p) << R"({"shedule": {}})";
  EXPECT_EQ(run("train --config " + q(p)).code, 2);
}

TEST_F(CliTest, GradcheckPassesAndDetectsCorruption) {
  Outcome ok = run("gradcheck");
  EXPECT_EQ(ok.code, 0) << ok.out;
  EXPECT_EQ(ok.out.find("FAIL"), std::string::npos);
  EXPECT_NE(ok.out.find("config_hash="), std::string::npos);

  Outcome bad = run("gradcheck --corrupt-op layernorm");
  EXPECT_EQ(bad.code, 1) << bad.out;
  EXPECT_NE(bad.out.find("FAIL layernorm"), std::string::npos) << bad.out;
  EXPECT_NE(bad.out.find("gradient check failed: layernorm"), std::string::npos);
}

TEST_F(CliTest, ConvertAuWritesSixteenAuMasks) {
  std::string h = "frame, face_id, timestamp, confidence, success";
  for (int au : kOpenFaceAUs) {
    char buf[16];
    std::snprintf(buf, sizeof buf, ", AU%02d_c", au);
    h += buf;
  }
  std::ofstream csv(dir_ / "of.csv");
  csv << h << '\n';
  for (int f = 1; f <= 3; ++f) {
    csv << f << ",0,0.0,0.9,1";
    for (std::size_t k = 0; k < kOpenFaceAUs.size(); ++k) csv << (k == static_cast<std::size_t>(f) ? ",1" : ",0");
    csv << '\n';
  }
  csv.close();

  Outcome r = run("convert-au " + q(dir_ / "of.csv") + " " + q(dir_ / "frames") + " " + q(dir_ / "aux.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("rows=3"), std::string::npos);
  Manifest m = load_manifest(dir_ / "aux.csv", false);
  ASSERT_EQ(m.samples.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    const Sample& s = m.samples[i];
    EXPECT_EQ(s.source, SampleSource::kAuxiliary);
    EXPECT_FALSE(s.expression.has_value());
    ASSERT_TRUE(s.au.has_value());
    EXPECT_EQ(s.au->mask, openface_au_mask());
    EXPECT_EQ(s.au->values.count(), 1u);
    EXPECT_EQ(m.resolve(s), dir_ / "frames" / frame_image_name(std::to_string(i + 1)));
  }

  std::ofstream(dir_ / "broken.csv") << "frame,AU01_c\n1,1\n";
  r = run("convert-au " + q(dir_ / "broken.csv") + " " + q(dir_) + " " + q(dir_ / "x.csv"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("AU02_c"), std::string::npos) << r.out;
}

TEST_F(CliTest, TrainEvalPredictRoundTrip) {
  ASSERT_EQ(run("synth " + q(dir_ / "data") + " --per-class 2").code, 0);
  fs::path cfg = tiny_config("run.json", "data/target.csv");

  Outcome a = run("train --config " + q(cfg));
  ASSERT_EQ(a.code, 0) << a.out;
  EXPECT_NE(a.out.find("steps=2"), std::string::npos) << a.out;
  EXPECT_NE(a.out.find("seed=4"), std::string::npos);
  ASSERT_TRUE(fs::exists(dir_ / "runs" / "epoch_0002" / "weights.bin"));
  std::string history = slurp(dir_ / "runs" / "history.csv");
  std::string weights = slurp(dir_ / "runs" / "epoch_0002" / "weights.bin");

  Outcome b = run("train --config " + q(cfg) + " --checkpoint " + q(dir_ / "again"));
  ASSERT_EQ(b.code, 0) << b.out;
  EXPECT_EQ(slurp(dir_ / "again" / "history.csv"), history);
  EXPECT_EQ(slurp(dir_ / "again" / "epoch_0002" / "weights.bin"), weights);

  Outcome c = run("train --config " + q(cfg) + " --seed 5 --checkpoint " + q(dir_ / "other"));
  ASSERT_EQ(c.code, 0);
  EXPECT_NE(slurp(dir_ / "other" / "epoch_0002" / "weights.bin"), weights);

  Outcome e = run("eval --checkpoint " + q(dir_ / "runs") + " --manifest " + q(dir_ / "data" / "target.csv"));
  ASSERT_EQ(e.code, 0) << e.out;
  EXPECT_NE(e.out.find("samples=12"), std::string::npos) << e.out;

  fs::path ref = dir_ / "ref.json";
  std::ofstream(ref) << R"({"model": {"preset": "reference"}})";
  e = run("eval --checkpoint " + q(dir_ / "runs") + " --manifest " + q(dir_ / "data" / "target.csv") +
          " --config " + q(ref));
  EXPECT_EQ(e.code, 2);

  fs::path image = dir_ / "data" / load_manifest(dir_ / "data" / "target.csv").samples[0].image_path;
  Outcome p = run("predict --checkpoint " + q(dir_ / "runs") + " " + q(image));
  ASSERT_EQ(p.code, 0) << p.out;
  std::string body = p.out.substr(p.out.find('\n') + 1);
  nlohmann::json j = nlohmann::json::parse(body);
  double total = 0.0;
  for (const auto& [k, v] : j.at("probabilities").items()) total += v.get<double>();
  EXPECT_NEAR(total, 1.0, 1e-5);
  EXPECT_EQ(j.at("au_probabilities").size(), kNumAUs);
}

TEST_F(CliTest, ResumeReproducesTheUninterruptedRun) {
  ASSERT_EQ(run("synth " + q(dir_ / "data") + " --per-class 2").code, 0);
  fs::path cfg = tiny_config("run.json", "data/target.csv");
  ASSERT_EQ(run("train --config " + q(cfg)).code, 0);
  std::string history = slurp(dir_ / "runs" / "history.csv");
  std::string weights = slurp(dir_ / "runs" / "epoch_0002" / "weights.bin");

  fs::remove_all(dir_ / "runs" / "epoch_0002");
  std::ofstream(dir_ / "runs" / "latest") << "epoch_0001\n";
  Outcome r = run("train --config " + q(cfg) + " --resume");
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("resuming"), std::string::npos);
  EXPECT_EQ(slurp(dir_ / "runs" / "history.csv"), history);
  EXPECT_EQ(slurp(dir_ / "runs" / "epoch_0002" / "weights.bin"), weights);

  std::ofstream(dir_ / "runs" / "latest") << "epoch_0001\n";
  r = run("train --config " + q(cfg) + " --resume --seed 9");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("seed=4"), std::string::npos) << r.out;
}

}  // namespace
}  // namespace aucvt
