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

// Dataset manifests, OpenFace AU ingestion and PNG image I/O.
//
// Manifest CSV:
//
//   # split=train source=target root=.   (optional directives)
//   path,expression,aus[,au_mask]
//   img/a.png,happiness,
//   img/b.png,,1+2+25
//   img/c.png,,4,openface16
//
// `aus` lists the AUs that are present. `au_mask` lists the AUs that are
// annotated: `raf21`, `openface16` or a `+`-joined list. Without it the mask
// equals the listed AUs. Image paths are relative to the manifest root: the
// manifest's directory, or the `root=` directive resolved against it.

#pragma once

#include <png.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "aucvt/au_schema.hpp"
#include "aucvt/errors.hpp"
#include "aucvt/hash.hpp"
#include "aucvt/tensor.hpp"

namespace aucvt {

namespace fs = std::filesystem;

enum class SampleSource { kTarget, kAuxiliary };

struct Sample {
  std::string image_path;  // relative to the manifest root
  std::optional<int> expression;
  std::optional<AUVector> au;
  SampleSource source = SampleSource::kTarget;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct Manifest {
  fs::path root;
  std::vector<Sample> samples;
  std::string split = "train";

  fs::path resolve(const Sample& s) const { return root / s.image_path; }
};

// ---------------------------------------------------------------------------
// Small text helpers

inline std::string_view trim(std::string_view s) {
  const char* ws = " \t\r\n";
  auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

inline std::vector<std::string> split_fields(std::string_view line, char sep = ',') {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find(sep, start);
    out.emplace_back(trim(line.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::optional<long long> parse_int(std::string_view s) {
  long long v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

// ---------------------------------------------------------------------------
// AU fields

/// Parses a `+`-joined AU list into a canonical bit set.
inline AUMask parse_au_list(std::string_view field) {
  AUMask m;
  if (trim(field).empty()) return m;
  for (const std::string& tok : split_fields(field, '+')) {
    auto v = parse_int(tok);
    if (!v) throw ConfigError("malformed AU id '" + tok + "'");
    auto idx = find_au_index(static_cast<int>(*v));
    if (!idx) throw ConfigError("AU" + tok + " is not one of the 21 canonical AUs");
    if (m[*idx]) throw ConfigError("AU" + tok + " listed twice");
    m.set(*idx);
  }
  return m;
}

inline std::string format_au_list(const AUMask& m) {
  std::string out;
  for (std::size_t i = 0; i < kNumAUs; ++i) {
    if (!m[i]) continue;
    if (!out.empty()) out += '+';
    out += std::to_string(kCanonicalAUs[i]);
  }
  return out;
}

inline AUMask parse_au_mask(std::string_view field) {
  std::string_view f = trim(field);
  if (f == "raf21") return all_au_mask();
  if (f == "openface16") return openface_au_mask();
  return parse_au_list(f);
}

inline std::string format_au_mask(const AUMask& m) {
  if (m == all_au_mask()) return "raf21";
  if (m == openface_au_mask()) return "openface16";
  return format_au_list(m);
}

/// Restricts the annotated set to `keep`; newly unannotated values are cleared.
inline AUVector select_au_subset(const AUVector& vec, const std::vector<int>& keep) {
  AUMask k;
  for (int au : keep) k.set(au_index(au));
  return {vec.values & k, vec.mask & k};
}

// ---------------------------------------------------------------------------
// Manifest I/O

inline std::string source_name(SampleSource s) {
  return s == SampleSource::kTarget ? "target" : "auxiliary";
}

namespace detail {

inline void apply_directives(std::string_view comment, const fs::path& dir, Manifest& m,
                             SampleSource& source) {
  std::istringstream is{std::string(comment)};
  std::string tok;
  while (is >> tok) {
    auto eq = tok.find('=');
    if (eq == std::string::npos) continue;
    std::string key = tok.substr(0, eq), value = tok.substr(eq + 1);
    if (key == "split") m.split = value;
    if (key == "root") m.root = (dir / value).lexically_normal();
    if (key == "source") source = value == "auxiliary" ? SampleSource::kAuxiliary : SampleSource::kTarget;
  }
}

inline bool escapes_root(const fs::path& p) {
  if (p.is_absolute() || p.has_root_name()) return true;
  int depth = 0;
  for (const auto& part : p.lexically_normal()) {
    if (part == "..") {
      if (--depth < 0) return true;
    } else if (part != ".") {
      ++depth;
    }
  }
  return false;
}

}  // namespace detail

/// Parses a manifest. Problems with a row raise RowError carrying the line
/// number; `check_files` also requires every image to exist.
inline Manifest load_manifest(const fs::path& path, bool check_files = true) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open manifest '" + path.string() + "'");
  const std::string file = path.string();
  Manifest m;
  m.root = path.parent_path();
  SampleSource source = SampleSource::kTarget;
  std::set<std::string> seen;
  std::optional<std::size_t> mask_col;
  bool header = false;
  std::string line;
  for (std::size_t row = 1; std::getline(in, line); ++row) {
    std::string_view t = trim(line);
    if (t.empty()) continue;
    if (t.front() == '#') {
      if (!header) detail::apply_directives(t.substr(1), path.parent_path(), m, source);
      continue;
    }
    std::vector<std::string> f = split_fields(t);
    if (!header) {
      if (f.size() < 3 || f[0] != "path" || f[1] != "expression" || f[2] != "aus" ||
          f.size() > 4 || (f.size() == 4 && f[3] != "au_mask")) {
        throw RowError(file, row, "expected header 'path,expression,aus[,au_mask]'");
      }
      if (f.size() == 4) mask_col = 3;
      header = true;
      continue;
    }
    const std::size_t want = mask_col ? 4 : 3;
    if (f.size() != want) {
      throw RowError(file, row, "expected " + std::to_string(want) + " fields, got " +
                                    std::to_string(f.size()));
    }
    Sample s;
    s.source = source;
    s.image_path = f[0];
    if (s.image_path.empty()) throw RowError(file, row, "empty image path");
    if (detail::escapes_root(s.image_path)) {
      throw RowError(file, row, "path '" + s.image_path + "' leaves the manifest directory");
    }
    if (!seen.insert(fs::path(s.image_path).lexically_normal().string()).second) {
      throw RowError(file, row, "duplicate path '" + s.image_path + "'");
    }
    if (!f[1].empty()) {
      s.expression = expression_id(f[1]);
      if (!s.expression) throw RowError(file, row, "unknown expression '" + f[1] + "'");
    }
    try {
      AUMask values = parse_au_list(f[2]);
      bool has_mask = mask_col && !f[3].empty();
      if (has_mask || values.any()) {
        AUMask mask = has_mask ? parse_au_mask(f[3]) : values;
        if ((values & ~mask).any()) throw ConfigError("aus outside au_mask");
        s.au = AUVector{values, mask};
      }
    } catch (const ConfigError& e) {
      throw RowError(file, row, e.what());
    }
    if (!s.expression && !s.au) throw RowError(file, row, "row has neither expression nor AU labels");
    if (check_files && !fs::exists(m.resolve(s))) {
      throw RowError(file, row, "image '" + m.resolve(s).string() + "' not found");
    }
    m.samples.push_back(std::move(s));
  }
  if (!header) throw SchemaError(file + ": missing header line");
  return m;
}

/// Writes a manifest in the format `load_manifest` reads. `comment` is
/// appended to the leading directive line; a non-empty `root` is written as
/// the root directive.
inline void emit_manifest(std::ostream& os, const Manifest& m, const std::string& comment = "",
                          const std::string& root = "") {
  SampleSource source = m.samples.empty() ? SampleSource::kTarget : m.samples.front().source;
  os << "# split=" << m.split << " source=" << source_name(source);
  if (!root.empty()) os << " root=" << root;
  if (!comment.empty()) os << ' ' << comment;
  os << "\npath,expression,aus,au_mask\n";
  for (const Sample& s : m.samples) {
    if (s.source != source) throw ContractError("emit_manifest: mixed sample sources");
    os << s.image_path << ',';
    if (s.expression) os << kExpressionNames.at(*s.expression);
    os << ',';
    if (s.au) os << format_au_list(s.au->values) << ',' << format_au_mask(s.au->mask);
    else os << ',';
    os << '\n';
  }
}

/// Saves `m` at `path`, recording m.root relative to the file's directory.
inline void save_manifest(const fs::path& path, const Manifest& m, const std::string& comment = "") {
  std::ofstream out(path);
  if (!out) throw SchemaError("cannot write manifest '" + path.string() + "'");
  fs::path dir = fs::absolute(path).parent_path().lexically_normal();
  fs::path rel = fs::absolute(m.root).lexically_normal().lexically_relative(dir);
  std::string root = rel.empty() || rel == "." ? "" : rel.generic_string();
  if (root.find_first_of(" \t") != std::string::npos) {
    throw ContractError("manifest root '" + root + "' contains whitespace");
  }
  emit_manifest(out, m, comment, root);
}

// ---------------------------------------------------------------------------
// OpenFace CSV

struct OpenFaceRow {
  std::string frame;
  AUVector au;  // mask is exactly the 16 OpenFace AUs
};

/// Reads the AUxx_c presence columns of an OpenFace output file. Other
/// columns, including intensities and AUs outside the 16, are ignored.
inline std::vector<OpenFaceRow> parse_openface_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open OpenFace CSV '" + path.string() + "'");
  const std::string file = path.string();
  std::string line;
  std::size_t row = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++row;
    if (!trim(line).empty()) {
      header = split_fields(line);
      break;
    }
  }
  if (header.empty()) throw SchemaError(file + ": empty file");
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col.emplace(header[i], i);
  std::vector<std::pair<std::size_t, std::size_t>> au_cols;  // (column, canonical index)
  for (int au : kOpenFaceAUs) {
    char name[16];
    std::snprintf(name, sizeof name, "AU%02d_c", au);
    auto it = col.find(name);
    if (it == col.end()) throw SchemaError(file + ": missing column " + name);
    au_cols.emplace_back(it->second, au_index(au));
  }
  std::optional<std::size_t> frame_col;
  if (auto it = col.find("frame"); it != col.end()) frame_col = it->second;

  std::vector<OpenFaceRow> out;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    std::vector<std::string> f = split_fields(line);
    if (f.size() != header.size()) {
      throw RowError(file, row, "expected " + std::to_string(header.size()) + " fields, got " +
                                    std::to_string(f.size()));
    }
    OpenFaceRow r;
    r.frame = frame_col ? f[*frame_col] : std::to_string(out.size() + 1);
    r.au.mask = openface_au_mask();
    for (auto [c, idx] : au_cols) {
      double v = 0.0;
      auto [p, ec] = std::from_chars(f[c].data(), f[c].data() + f[c].size(), v);
      if (ec != std::errc() || p != f[c].data() + f[c].size() || (v != 0.0 && v != 1.0)) {
        throw RowError(file, row, header[c] + " value '" + f[c] + "' is not 0 or 1");
      }
      r.au.values[idx] = v == 1.0;
    }
    out.push_back(std::move(r));
  }
  return out;
}

/// Image file name used for an OpenFace frame id: integer ids are zero-padded
/// to six digits.
inline std::string frame_image_name(const std::string& frame) {
  if (auto v = parse_int(frame); v && *v >= 0) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06lld.png", *v);
    return buf;
  }
  return frame + ".png";
}

/// Builds an auxiliary manifest rooted at `image_dir` from OpenFace rows.
inline Manifest openface_manifest(const std::vector<OpenFaceRow>& rows, const fs::path& image_dir) {
  Manifest m;
  m.root = image_dir;
  for (const OpenFaceRow& r : rows) {
    Sample s;
    s.image_path = frame_image_name(r.frame);
    s.au = r.au;
    s.source = SampleSource::kAuxiliary;
    m.samples.push_back(std::move(s));
  }
  return m;
}

// ---------------------------------------------------------------------------
// PNG

/// 8-bit RGB pixels, row-major, interleaved.
struct RGBImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;
};

inline RGBImage read_png(const fs::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
    throw DecodeError("cannot decode '" + path.string() + "': " + img.message);
  }
  if (!(img.format & PNG_FORMAT_FLAG_COLOR) || (img.format & PNG_FORMAT_FLAG_LINEAR)) {
    png_image_free(&img);
    throw DecodeError("'" + path.string() + "' is not an 8-bit RGB image");
  }
  img.format = PNG_FORMAT_RGB;
  RGBImage out;
  out.width = img.width;
  out.height = img.height;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  png_color black{0, 0, 0};
  if (!png_image_finish_read(&img, &black, out.pixels.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw DecodeError("cannot decode '" + path.string() + "': " + msg);
  }
  return out;
}

inline void write_png(const fs::path& path, const RGBImage& image) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.string().c_str(), 0, image.pixels.data(), 0, nullptr)) {
    throw DecodeError("cannot write '" + path.string() + "': " + img.message);
  }
}

/// Quantizes a [3 x H x W] tensor in [0, 1] to 8 bits.
inline RGBImage to_rgb(const Tensor& t) {
  if (t.rank() != 3 || t.dim(0) != 3) throw DimensionError("to_rgb: expected 3xHxW, got " + shape_str(t.shape()));
  RGBImage img{t.dim(2), t.dim(1), {}};
  const std::size_t n = img.width * img.height;
  img.pixels.resize(3 * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      img.pixels[3 * i + c] = static_cast<std::uint8_t>(std::lround(std::clamp(t[c * n + i], 0.0, 1.0) * 255.0));
    }
  }
  return img;
}

/// Bilinear resize (half-pixel centers) so the short edge equals
/// `short_edge`, then a center crop to crop_h x crop_w (default square).
/// Returns [3 x crop_h x crop_w] with values v / 255.
inline Tensor resize_and_crop(const RGBImage& img, std::size_t short_edge, std::size_t crop_h = 0,
                              std::size_t crop_w = 0) {
  if (!crop_h) crop_h = short_edge;
  if (!crop_w) crop_w = short_edge;
  const std::size_t h = img.height, w = img.width;
  std::size_t nh, nw;
  if (h <= w) {
    nh = short_edge;
    nw = static_cast<std::size_t>(std::llround(static_cast<double>(w) * short_edge / h));
  } else {
    nw = short_edge;
    nh = static_cast<std::size_t>(std::llround(static_cast<double>(h) * short_edge / w));
  }
  if (crop_h > nh || crop_w > nw) {
    throw DimensionError("crop " + std::to_string(crop_h) + "x" + std::to_string(crop_w) +
                         " exceeds resized image " + std::to_string(nh) + "x" + std::to_string(nw));
  }
  const std::size_t oy = (nh - crop_h) / 2, ox = (nw - crop_w) / 2;
  const double sy = static_cast<double>(h) / nh, sx = static_cast<double>(w) / nw;
  auto coord = [](std::size_t dst, double s, std::size_t n, std::size_t& i0, std::size_t& i1, double& f) {
    double src = std::clamp((dst + 0.5) * s - 0.5, 0.0, static_cast<double>(n - 1));
    i0 = static_cast<std::size_t>(src);
    i1 = std::min(i0 + 1, n - 1);
    f = src - i0;
  };
  std::vector<double> out(3 * crop_h * crop_w);
  for (std::size_t y = 0; y < crop_h; ++y) {
    std::size_t y0, y1;
    double fy;
    coord(y + oy, sy, h, y0, y1, fy);
    for (std::size_t x = 0; x < crop_w; ++x) {
      std::size_t x0, x1;
      double fx;
      coord(x + ox, sx, w, x0, x1, fx);
      for (std::size_t c = 0; c < 3; ++c) {
        auto px = [&](std::size_t yy, std::size_t xx) -> double { return img.pixels[(yy * w + xx) * 3 + c]; };
        double top = px(y0, x0) + fx * (px(y0, x1) - px(y0, x0));
        double bot = px(y1, x0) + fx * (px(y1, x1) - px(y1, x0));
        out[(c * crop_h + y) * crop_w + x] = (top + fy * (bot - top)) / 255.0;
      }
    }
  }
  return Tensor({3, crop_h, crop_w}, std::move(out));
}

inline Tensor decode_and_resize(const fs::path& path, std::size_t short_edge = 112,
                                std::size_t crop_h = 0, std::size_t crop_w = 0) {
  return resize_and_crop(read_png(path), short_edge, crop_h, crop_w);
}

// ---------------------------------------------------------------------------
// Synthetic data

/// AUs present in the prototypical display of each expression.
inline AUMask prototype_aus(int expression) {
  static const std::array<std::vector<int>, kNumExpressions> table = {{
      {4, 5, 7, 23},              // anger
      {9, 15, 16},                // disgust
      {1, 2, 4, 5, 7, 20, 26},    // fear
      {6, 12, 25},                // happiness
      {1, 4, 15},                 // sadness
      {1, 2, 5, 26},              // surprise
  }};
  AUMask m;
  for (int au : table.at(expression)) m.set(au_index(au));
  return m;
}

/// A procedurally generated [3 x size x size] image whose color and stripe
/// pattern depend on the class; `variant` jitters phase, frequency and noise.
inline Tensor synthetic_image(int cls, std::uint64_t variant, std::size_t size, std::uint64_t seed) {
  auto rng = make_rng({seed, static_cast<std::uint64_t>(cls), variant});
  auto u = [&] { return static_cast<double>(rng() >> 11) * 0x1.0p-53; };
  const double hue = cls / static_cast<double>(kNumExpressions);
  std::array<double, 3> base;
  for (std::size_t c = 0; c < 3; ++c) {
    base[c] = 0.5 + 0.35 * std::cos(2.0 * std::numbers::pi * (hue + c / 3.0));
  }
  const double angle = std::numbers::pi * cls / kNumExpressions;
  const double freq = (2.0 + cls % 3) * (0.9 + 0.2 * u());
  const double phase = 2.0 * std::numbers::pi * u();
  std::vector<double> out(3 * size * size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      double px = x / static_cast<double>(size), py = y / static_cast<double>(size);
      double s = std::sin(2.0 * std::numbers::pi * freq * (px * std::cos(angle) + py * std::sin(angle)) + phase);
      for (std::size_t c = 0; c < 3; ++c) {
        double v = base[c] + 0.2 * s + 0.05 * (u() - 0.5);
        out[(c * size + y) * size + x] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return Tensor({3, size, size}, std::move(out));
}

/// Writes `per_class` images per expression plus manifests: `target.csv`
/// with expression labels and, when `aux_per_class` > 0, `auxiliary.csv` with
/// OpenFace-masked prototype AU labels.
inline void write_synthetic_dataset(const fs::path& dir, std::size_t per_class, std::size_t size,
                                    std::uint64_t seed, std::size_t aux_per_class = 0) {
  fs::create_directories(dir / "img");
  Manifest target, aux;
  target.root = aux.root = dir;
  for (int cls = 0; cls < static_cast<int>(kNumExpressions); ++cls) {
    for (std::size_t i = 0; i < per_class + aux_per_class; ++i) {
      std::string name = "img/" + std::string(kExpressionNames[cls]) + "_" + std::to_string(i) + ".png";
      write_png(dir / name, to_rgb(synthetic_image(cls, i, size, seed)));
      Sample s;
      s.image_path = name;
      if (i < per_class) {
        s.expression = cls;
        target.samples.push_back(std::move(s));
      } else {
        s.source = SampleSource::kAuxiliary;
        s.au = AUVector{prototype_aus(cls) & openface_au_mask(), openface_au_mask()};
        aux.samples.push_back(std::move(s));
      }
    }
  }
  std::string tag = "seed=" + std::to_string(seed);
  save_manifest(dir / "target.csv", target, tag);
  if (aux_per_class) save_manifest(dir / "auxiliary.csv", aux, tag);
}

}  // namespace aucvt
