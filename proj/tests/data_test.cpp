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

#include <fstream>
#include <random>
#include <sstream>

#include "aucvt/data.hpp"

namespace aucvt {
namespace {

class DataTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("aucvt_data_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  fs::path write(const std::string& name, const std::string& body) {
    fs::path p = dir_ / name;
    std::ofstream(p) << body;
    return p;
  }

  /// Expects `fn` to raise RowError for line `row`.
  template <typename Fn>
  void expect_row_error(Fn fn, std::size_t row) {
    try {
      fn();
      ADD_FAILURE() << "expected RowError at row " << row;
    } catch (const RowError& e) {
      EXPECT_EQ(e.row(), row) << e.what();
    }
  }

  fs::path dir_;
};

std::string openface_header(bool spaced = false) {
  std::string h = "frame,face_id,timestamp,confidence,success";
  for (int au : {1, 2, 4, 5, 6, 7, 9, 10, 12, 14, 15, 17, 20, 23, 25, 26, 45}) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "AU%02d_r", au);
    h += spaced ? ", " : ",";
    h += buf;
  }
  for (int au : {1, 2, 4, 5, 6, 7, 9, 10, 12, 14, 15, 17, 20, 23, 25, 26, 28, 45}) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "AU%02d_c", au);
    h += spaced ? ", " : ",";
    h += buf;
  }
  return h;
}

/// A row with the given presence bits for the 16 AUs plus AU28/AU45 set.
std::string openface_row(int frame, const std::vector<int>& present) {
  std::string r = std::to_string(frame) + ",0,0.0,0.98,1";
  for (int i = 0; i < 17; ++i) r += ",2.50";
  for (int au : {1, 2, 4, 5, 6, 7, 9, 10, 12, 14, 15, 17, 20, 23, 25, 26}) {
    bool on = std::find(present.begin(), present.end(), au) != present.end();
    r += on ? ",1.00" : ",0.00";
  }
  r += ",1.00,1.00";
  return r;
}

TEST(AUSchemaTest, CanonicalIndexIsABijection) {
  std::set<std::size_t> seen;
  for (int au = 0; au <= 30; ++au) {
    if (auto i = find_au_index(au)) {
      EXPECT_EQ(kCanonicalAUs[*i], au);
      seen.insert(*i);
    }
  }
  EXPECT_EQ(seen.size(), 21u);
  EXPECT_EQ(au_index(1), 0u);
  EXPECT_EQ(au_index(9), 6u);
  EXPECT_EQ(au_index(27), 20u);
  EXPECT_THROW(au_index(3), ConfigError);
  EXPECT_EQ(openface_au_mask().count(), 16u);
}

TEST(AUSchemaTest, SelectSubset) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100; ++i) {
    AUVector v{AUMask(rng()), all_au_mask()};
    std::vector<int> all(kCanonicalAUs.begin(), kCanonicalAUs.end());
    EXPECT_EQ(select_au_subset(v, all), v);
    AUVector none = select_au_subset(v, {});
    EXPECT_TRUE(none.mask.none());
    EXPECT_TRUE(none.values.none());
    AUVector of = select_au_subset(v, {kOpenFaceAUs.begin(), kOpenFaceAUs.end()});
    EXPECT_EQ(of.mask.count(), 16u);
    EXPECT_TRUE(of.valid());
    EXPECT_EQ(of.values, v.values & openface_au_mask());
  }
  EXPECT_THROW(select_au_subset({}, {28}), ConfigError);
}

TEST_F(DataTest, ManifestRows) {
  fs::path p = write("m.csv",
                     "path,expression,aus\n"
                     "img/a.png,happiness,\n"
                     "img/b.png,,1+2+25\n"
                     "img/c.png,anger,4\n");
  Manifest m = load_manifest(p, false);
  ASSERT_EQ(m.samples.size(), 3u);
  EXPECT_EQ(m.samples[0].expression, 3);
  EXPECT_FALSE(m.samples[0].au);
  ASSERT_TRUE(m.samples[1].au);
  AUMask expect;
  expect.set(au_index(1)).set(au_index(2)).set(au_index(25));
  EXPECT_EQ(m.samples[1].au->values, expect);
  EXPECT_EQ(m.samples[1].au->mask, expect);
  EXPECT_FALSE(m.samples[1].expression);
  EXPECT_EQ(m.samples[2].expression, 0);
  EXPECT_EQ(m.root, dir_);
  EXPECT_EQ(m.split, "train");
}

TEST_F(DataTest, ManifestMaskColumnAndDirectives) {
  fs::path p = write("m.csv",
                     "# split=val source=auxiliary config_hash=00 seed=1\n"
                     "path,expression,aus,au_mask\n"
                     "a.png,,,openface16\n"
                     "# a comment row\n"
                     "b.png,sadness,1+4,raf21\n"
                     "c.png,,12,6+12\n");
  Manifest m = load_manifest(p, false);
  EXPECT_EQ(m.split, "val");
  ASSERT_EQ(m.samples.size(), 3u);
  EXPECT_EQ(m.samples[0].source, SampleSource::kAuxiliary);
  EXPECT_EQ(m.samples[0].au->mask, openface_au_mask());
  EXPECT_TRUE(m.samples[0].au->values.none());
  EXPECT_EQ(m.samples[1].au->mask, all_au_mask());
  EXPECT_EQ(m.samples[2].au->mask.count(), 2u);
}

TEST_F(DataTest, ManifestRowErrors) {
  const std::string h = "path,expression,aus\n";
  expect_row_error([&] { load_manifest(write("a.csv", h + "x.png,joy,\n"), false); }, 2);
  expect_row_error([&] { load_manifest(write("b.csv", h + "x.png,anger,\ny.png,,1+x\n"), false); }, 3);
  expect_row_error([&] { load_manifest(write("c.csv", h + "x.png,,3\n"), false); }, 2);
  expect_row_error([&] { load_manifest(write("d.csv", h + "x.png,,\n"), false); }, 2);
  expect_row_error([&] { load_manifest(write("e.csv", h + "x.png,anger,\n./x.png,fear,\n"), false); }, 3);
  expect_row_error([&] { load_manifest(write("f.csv", h + "../x.png,anger,\n"), false); }, 2);
  expect_row_error([&] { load_manifest(write("g.csv", h + "x.png,anger\n"), false); }, 2);
  expect_row_error([&] { load_manifest(write("h.csv", "path,expr,aus\n"), false); }, 1);
  expect_row_error([&] { load_manifest(write("i.csv", "path,expression,aus,au_mask\nx.png,,1+2,1\n"), false); }, 2);
  expect_row_error([&] { load_manifest(write("j.csv", h + "\n#\nmissing.png,anger,\n")); }, 4);
  EXPECT_THROW(load_manifest(dir_ / "nope.csv"), SchemaError);
}

TEST_F(DataTest, ManifestEmitRoundTrip) {
  std::mt19937_64 rng(2);
  Manifest m;
  m.root = dir_;
  m.split = "val";
  for (int i = 0; i < 200; ++i) {
    Sample s;
    s.image_path = "img/" + std::to_string(i) + ".png";
    int kind = static_cast<int>(rng() % 3);
    if (kind != 1) s.expression = static_cast<int>(rng() % 6);
    if (kind != 0) {
      AUMask mask = rng() % 3 == 0 ? openface_au_mask() : rng() % 2 ? all_au_mask() : AUMask(rng());
      if (mask.none()) mask.set(0);
      s.au = AUVector{AUMask(rng()) & mask, mask};
    }
    m.samples.push_back(std::move(s));
  }
  save_manifest(dir_ / "out.csv", m, "seed=4");
  Manifest back = load_manifest(dir_ / "out.csv", false);
  EXPECT_EQ(back.split, "val");
  EXPECT_EQ(back.samples, m.samples);
}

TEST_F(DataTest, OpenFaceFieldMapping) {
  fs::path p = write("of.csv", openface_header(true) + "\n" + openface_row(1, {1}) + "\n" +
                                   openface_row(2, {}) + "\n" + openface_row(3, {2, 12, 26}) + "\n");
  auto rows = parse_openface_csv(p);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].frame, "1");
  EXPECT_TRUE(rows[0].au.values[au_index(1)]);
  EXPECT_FALSE(rows[0].au.values[au_index(2)]);
  EXPECT_EQ(rows[0].au.values.count(), 1u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.au.mask, openface_au_mask());
    EXPECT_TRUE(r.au.valid());
  }
  EXPECT_TRUE(rows[1].au.values.none());
  EXPECT_EQ(rows[2].au.values.count(), 3u);
}

TEST_F(DataTest, OpenFaceErrors) {
  std::string h = openface_header();
  std::string no_au17 = h;
  no_au17.replace(no_au17.find("AU17_c"), 6, "AU19_c");
  try {
    parse_openface_csv(write("a.csv", no_au17 + "\n"));
    FAIL();
  } catch (const SchemaError& e) {
    EXPECT_NE(std::string(e.what()).find("AU17_c"), std::string::npos);
  }
  std::string bad = openface_row(2, {});
  bad.replace(bad.rfind(",0.00"), 5, ",0.50");
  expect_row_error([&] { parse_openface_csv(write("b.csv", h + "\n" + openface_row(1, {}) + "\n" + bad + "\n")); }, 3);
  expect_row_error([&] { parse_openface_csv(write("c.csv", h + "\n1,0,0\n")); }, 2);
}

TEST_F(DataTest, OpenFaceToManifestRoundTrip) {
  std::mt19937_64 rng(3);
  std::string body = openface_header(true) + "\n";
  for (int f = 1; f <= 30; ++f) {
    std::vector<int> present;
    for (int au : kOpenFaceAUs) {
      if (rng() % 3 == 0) present.push_back(au);
    }
    body += openface_row(f, present) + "\n";
  }
  auto rows = parse_openface_csv(write("of.csv", body));
  fs::create_directories(dir_ / "out");
  Manifest m = openface_manifest(rows, dir_ / "frames");
  save_manifest(dir_ / "out" / "aux.csv", m);
  Manifest back = load_manifest(dir_ / "out" / "aux.csv", false);
  ASSERT_EQ(back.samples.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(*back.samples[i].au, rows[i].au);
    EXPECT_EQ(back.samples[i].au->mask.count(), 16u);
    EXPECT_EQ(back.samples[i].source, SampleSource::kAuxiliary);
  }
  EXPECT_EQ(back.samples[0].image_path, "000001.png");
  EXPECT_EQ(back.resolve(back.samples[0]), dir_ / "frames" / "000001.png");
}

RGBImage solid(std::size_t w, std::size_t h, std::array<std::uint8_t, 3> rgb) {
  RGBImage img{w, h, {}};
  for (std::size_t i = 0; i < w * h; ++i) img.pixels.insert(img.pixels.end(), rgb.begin(), rgb.end());
  return img;
}

TEST_F(DataTest, ResizeGeometry) {
  write_png(dir_ / "wide.png", solid(448, 224, {10, 20, 30}));
  Tensor t = decode_and_resize(dir_ / "wide.png");
  EXPECT_EQ(t.shape(), (Shape{3, 112, 112}));
  for (std::size_t i = 0; i < 112 * 112; ++i) {
    ASSERT_EQ(t[i], 10 / 255.0);
    ASSERT_EQ(t[112 * 112 + i], 20 / 255.0);
    ASSERT_EQ(t[2 * 112 * 112 + i], 30 / 255.0);
  }
  write_png(dir_ / "tall.png", solid(50, 90, {0, 0, 0}));
  EXPECT_EQ(decode_and_resize(dir_ / "tall.png", 32).shape(), (Shape{3, 32, 32}));
}

TEST_F(DataTest, SameSizeIsPixelExact) {
  std::mt19937_64 rng(4);
  RGBImage img{112, 112, std::vector<std::uint8_t>(112 * 112 * 3)};
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng());
  write_png(dir_ / "x.png", img);
  Tensor t = decode_and_resize(dir_ / "x.png");
  for (std::size_t y = 0; y < 112; ++y) {
    for (std::size_t x = 0; x < 112; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        ASSERT_EQ(t[(c * 112 + y) * 112 + x], img.pixels[(y * 112 + x) * 3 + c] / 255.0);
      }
    }
  }
  EXPECT_EQ(to_rgb(t).pixels, img.pixels);
}

TEST_F(DataTest, CenterCropKeepsMiddle) {
  // Left third red, middle third green, right third blue; the crop of the
  // 3:1 image keeps only green.
  RGBImage img{336, 112, {}};
  for (std::size_t y = 0; y < 112; ++y) {
    for (std::size_t x = 0; x < 336; ++x) {
      std::array<std::uint8_t, 3> px{0, 0, 0};
      px[x / 112] = 255;
      img.pixels.insert(img.pixels.end(), px.begin(), px.end());
    }
  }
  write_png(dir_ / "bands.png", img);
  Tensor t = decode_and_resize(dir_ / "bands.png");
  for (std::size_t i = 0; i < 112 * 112; ++i) {
    ASSERT_EQ(t[i], 0.0);
    ASSERT_EQ(t[112 * 112 + i], 1.0);
  }
}

TEST_F(DataTest, DecodeErrors) {
  write("junk.png", "not a png");
  EXPECT_THROW(decode_and_resize(dir_ / "junk.png"), DecodeError);
  EXPECT_THROW(decode_and_resize(dir_ / "missing.png"), DecodeError);
  png_image g{};
  g.version = PNG_IMAGE_VERSION;
  g.width = g.height = 4;
  g.format = PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> px(16, 100);
  ASSERT_TRUE(png_image_write_to_file(&g, (dir_ / "gray.png").c_str(), 0, px.data(), 0, nullptr));
  EXPECT_THROW(decode_and_resize(dir_ / "gray.png"), DecodeError);
}

TEST_F(DataTest, SyntheticDataset) {
  write_synthetic_dataset(dir_ / "synth", 2, 32, 7, 1);
  Manifest t = load_manifest(dir_ / "synth" / "target.csv");
  Manifest a = load_manifest(dir_ / "synth" / "auxiliary.csv");
  EXPECT_EQ(t.samples.size(), 12u);
  EXPECT_EQ(a.samples.size(), 6u);
  for (const Sample& s : a.samples) {
    EXPECT_EQ(s.source, SampleSource::kAuxiliary);
    EXPECT_EQ(s.au->mask, openface_au_mask());
    EXPECT_TRUE(s.au->valid());
  }
  Tensor img = decode_and_resize(t.resolve(t.samples[0]), 32);
  Tensor ref = synthetic_image(0, 0, 32, 7);
  for (std::size_t i = 0; i < img.numel(); ++i) ASSERT_NEAR(img[i], ref[i], 0.5 / 255 + 1e-12);
  EXPECT_EQ(synthetic_image(3, 1, 16, 9).values(), synthetic_image(3, 1, 16, 9).values());
}

}  // namespace
}  // namespace aucvt
