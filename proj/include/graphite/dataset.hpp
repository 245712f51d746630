/*
 * Copyright 2026 The GRAPHITE Authors
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

// Feature dataset on disk:
//
//   <root>/manifest.json
//   <root>/<core_id>/level<m>.csv   grid_row,grid_col,f0,...,f<D-1>
//   <root>/<core_id>/mask.png       8-bit gray on the common grid, 0 or 255
//
// plus the seeded synthetic core generator.

#pragma once

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "graphite/checkpoint.hpp"
#include "graphite/error.hpp"
#include "graphite/graph.hpp"
#include "graphite/milnet.hpp"
#include "graphite/png.hpp"
#include "graphite/saliency.hpp"

namespace graphite {

inline constexpr int kDatasetFormatVersion = 1;

/// Patches of one level: grid cells and their features (row i of
/// `features` belongs to cells[i]).
struct LevelPatches {
  std::vector<PatchCell> cells;
  Tensor features;  // N x D
};

struct CoreRecord {
  std::string id;
  int label = 0;
  std::int64_t width = 0;   // level-0 pixels
  std::int64_t height = 0;
  std::string split = "train";
  std::vector<LevelPatches> levels;
  std::optional<std::vector<std::uint8_t>> mask;  // grid_w * grid_h, values 0/1
};

struct FeatureDataset {
  std::size_t feature_dim = 0;
  int num_levels = 0;
  int patch_size = kPatchSize;
  int raster_downsample = 16;
  std::vector<CoreRecord> cores;

  std::size_t grid_width(const CoreRecord& c) const {
    return static_cast<std::size_t>(c.width / raster_downsample);
  }
  std::size_t grid_height(const CoreRecord& c) const {
    return static_cast<std::size_t>(c.height / raster_downsample);
  }

  std::vector<const CoreRecord*> split(const std::string& name) const {
    std::vector<const CoreRecord*> out;
    for (const auto& c : cores)
      if (c.split == name) out.push_back(&c);
    return out;
  }
};

inline bool operator==(const PatchCell& a, const PatchCell& b) { return a.row == b.row && a.col == b.col; }

inline bool same_contents(const FeatureDataset& a, const FeatureDataset& b) {
  if (a.feature_dim != b.feature_dim || a.num_levels != b.num_levels || a.patch_size != b.patch_size ||
      a.raster_downsample != b.raster_downsample || a.cores.size() != b.cores.size())
    return false;
  for (std::size_t i = 0; i < a.cores.size(); ++i) {
    const auto &x = a.cores[i], &y = b.cores[i];
    if (x.id != y.id || x.label != y.label || x.width != y.width || x.height != y.height ||
        x.split != y.split || x.mask != y.mask || x.levels.size() != y.levels.size())
      return false;
    for (std::size_t m = 0; m < x.levels.size(); ++m) {
      const auto &p = x.levels[m], &q = y.levels[m];
      if (p.cells != q.cells || p.features.rows != q.features.rows ||
          p.features.cols != q.features.cols || p.features.data != q.features.data)
        return false;
    }
  }
  return true;
}

/// Level-0 patches as a MIL bag.
inline Bag core_bag(const CoreRecord& c) { return {c.id, c.levels.at(0).features, c.label}; }

/// Patch nodes of every level, for graph construction.
inline std::vector<std::vector<PatchNode>> core_patch_nodes(const CoreRecord& c) {
  std::vector<std::vector<PatchNode>> out(c.levels.size());
  for (std::size_t m = 0; m < c.levels.size(); ++m)
    for (const auto& cell : c.levels[m].cells)
      out[m].push_back(make_patch(static_cast<int>(m), cell.row, cell.col, c.id));
  return out;
}

/// All-level features stacked in the graph's canonical node order.
inline Tensor node_features(const CoreRecord& c, const HierarchicalGraph& g) {
  const std::size_t d = c.levels.at(0).features.cols;
  Tensor out(g.size(), d);
  for (std::size_t m = 0; m < c.levels.size(); ++m) {
    const auto& lp = c.levels[m];
    for (std::size_t i = 0; i < lp.cells.size(); ++i) {
      auto it = std::find_if(g.nodes.begin(), g.nodes.end(), [&](const PatchNode& n) {
        return n.level == static_cast<int>(m) && n.grid_row == lp.cells[i].row && n.grid_col == lp.cells[i].col;
      });
      if (it == g.nodes.end()) throw ValidationError("node_features: patch missing from graph of core " + c.id);
      std::copy_n(lp.features.data.begin() + static_cast<std::ptrdiff_t>(i * d), d,
                  out.data.begin() + static_cast<std::ptrdiff_t>(it->node_id * d));
    }
  }
  return out;
}

namespace detail {

inline bool valid_core_id(const std::string& id) {
  if (id.empty() || id == "." || id == "..") return false;
  return std::all_of(id.begin(), id.end(), [](char ch) {
    return std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-' || ch == '.';
  });
}

inline void validate_core(const FeatureDataset& ds, const CoreRecord& c) {
  auto fail = [&](const std::string& msg) { return ValidationError("core " + c.id + ": " + msg); };
  if (c.label != 0 && c.label != 1) throw fail("label must be 0 or 1");
  if (c.split != "train" && c.split != "test") throw fail("split must be 'train' or 'test'");
  if (c.width <= 0 || c.height <= 0) throw fail("extent must be positive");
  if (c.levels.size() != static_cast<std::size_t>(ds.num_levels)) {
    throw fail(std::to_string(c.levels.size()) + " levels, manifest says " + std::to_string(ds.num_levels));
  }
  if (c.levels[0].cells.empty()) throw fail("missing level-0 patches");
  for (std::size_t m = 0; m < c.levels.size(); ++m) {
    const auto& lp = c.levels[m];
    if (lp.features.rows != lp.cells.size()) throw fail("feature rows do not match patch count");
    if (!lp.cells.empty() && lp.features.cols != ds.feature_dim) {
      throw fail("level " + std::to_string(m) + " has feature dim " + std::to_string(lp.features.cols) +
                 ", manifest says " + std::to_string(ds.feature_dim));
    }
    const std::int64_t span = static_cast<std::int64_t>(ds.patch_size) << m;
    std::set<std::pair<int, int>> seen;
    for (const auto& cell : lp.cells) {
      if (cell.row < 0 || cell.col < 0 || (cell.row + 1) * span > c.height || (cell.col + 1) * span > c.width) {
        throw fail("level " + std::to_string(m) + " patch (" + std::to_string(cell.row) + ", " +
                   std::to_string(cell.col) + ") lies outside the core extent");
      }
      if (!seen.insert({cell.row, cell.col}).second) {
        throw fail("duplicate level " + std::to_string(m) + " patch (" + std::to_string(cell.row) + ", " +
                   std::to_string(cell.col) + ")");
      }
    }
    for (double v : lp.features.data)
      if (!std::isfinite(v)) throw fail("non-finite feature at level " + std::to_string(m));
  }
  if (c.mask && c.mask->size() != ds.grid_width(c) * ds.grid_height(c)) {
    throw fail("mask does not match the " + std::to_string(ds.grid_width(c)) + "x" +
               std::to_string(ds.grid_height(c)) + " grid");
  }
}

inline LevelPatches read_level_csv(const std::filesystem::path& path, const std::string& core_id,
                                   std::size_t dim) {
  std::ifstream is(path);
  if (!is) throw ValidationError("core " + core_id + ": missing " + path.filename().string());
  LevelPatches lp;
  std::vector<double> values;
  std::string line;
  std::size_t lineno = 0;
  const std::string where = "core " + core_id + " " + path.filename().string() + " line ";
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1 && line.rfind("grid_row", 0) == 0) continue;
    if (line.empty()) continue;
    const char* p = line.data();
    const char* end = p + line.size();
    std::size_t field = 0;
    PatchCell cell;
    while (true) {
      std::from_chars_result r{};
      if (field == 0) r = std::from_chars(p, end, cell.row);
      else if (field == 1) r = std::from_chars(p, end, cell.col);
      else {
        double v = 0.0;
        r = std::from_chars(p, end, v);
        values.push_back(v);
      }
      if (r.ec != std::errc()) {
        throw ValidationError(where + std::to_string(lineno) + ": bad value in column " + std::to_string(field + 1));
      }
      ++field;
      p = r.ptr;
      if (p == end) break;
      if (*p != ',') throw ValidationError(where + std::to_string(lineno) + ": expected ','");
      ++p;
    }
    if (field != dim + 2) {
      throw ValidationError(where + std::to_string(lineno) + ": " + std::to_string(field - 2) +
                            " features, manifest says " + std::to_string(dim));
    }
    lp.cells.push_back(cell);
  }
  lp.features = Tensor(lp.cells.size(), dim);
  lp.features.data = std::move(values);
  return lp;
}

inline void write_level_csv(const std::filesystem::path& path, const LevelPatches& lp) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeError("cannot write " + path.string());
  os << "grid_row,grid_col";
  for (std::size_t j = 0; j < lp.features.cols; ++j) os << ",f" << j;
  os << '\n';
  for (std::size_t i = 0; i < lp.cells.size(); ++i) {
    os << lp.cells[i].row << ',' << lp.cells[i].col;
    for (std::size_t j = 0; j < lp.features.cols; ++j)
      os << ',' << format_double(lp.features.data[i * lp.features.cols + j]);
    os << '\n';
  }
  if (!os) throw RuntimeError("write failed for " + path.string());
}

}  // namespace detail

inline void validate_dataset(const FeatureDataset& ds) {
  if (ds.feature_dim == 0) throw ValidationError("dataset: feature_dim must be positive");
  if (ds.num_levels < 1) throw ValidationError("dataset: at least one level required");
  if (ds.patch_size != kPatchSize) {
    throw ValidationError("dataset: patch_size " + std::to_string(ds.patch_size) + " unsupported (expected " +
                          std::to_string(kPatchSize) + ")");
  }
  if (ds.raster_downsample < 1) throw ValidationError("dataset: raster_downsample must be >= 1");
  std::set<std::string> ids;
  for (const auto& c : ds.cores) {
    if (!detail::valid_core_id(c.id)) throw ValidationError("dataset: invalid core id '" + c.id + "'");
    if (!ids.insert(c.id).second) throw ValidationError("dataset: duplicate core id " + c.id);
    detail::validate_core(ds, c);
  }
}

inline FeatureDataset load_dataset(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  const fs::path manifest_path = root / "manifest.json";
  if (!fs::exists(manifest_path)) throw ValidationError("no manifest in " + root.string());
  nlohmann::json j;
  try {
    std::ifstream is(manifest_path);
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest.json: " + std::string(e.what()));
  }
  FeatureDataset ds;
  try {
    const int version = j.at("format_version").get<int>();
    if (version != kDatasetFormatVersion) {
      throw ValidationError("manifest.json: unsupported format_version " + std::to_string(version));
    }
    ds.feature_dim = j.at("feature_dim").get<std::size_t>();
    ds.num_levels = j.at("levels").get<int>();
    ds.patch_size = j.at("patch_size").get<int>();
    ds.raster_downsample = j.at("raster_downsample").get<int>();
    if (ds.num_levels < 1) throw ValidationError("manifest.json: levels must be >= 1");
    for (const auto& jc : j.at("cores")) {
      CoreRecord c;
      c.id = jc.at("id").get<std::string>();
      if (!detail::valid_core_id(c.id)) throw ValidationError("manifest.json: invalid core id '" + c.id + "'");
      c.label = jc.at("label").get<int>();
      c.width = jc.at("width").get<std::int64_t>();
      c.height = jc.at("height").get<std::int64_t>();
      c.split = jc.value("split", std::string("train"));
      const fs::path dir = root / c.id;
      if (!fs::is_directory(dir)) throw ValidationError("core " + c.id + ": missing directory");
      for (int m = 0; m < ds.num_levels; ++m) {
        c.levels.push_back(
            detail::read_level_csv(dir / ("level" + std::to_string(m) + ".csv"), c.id, ds.feature_dim));
      }
      if (jc.value("has_mask", false)) {
        const GrayImage img = read_gray_png((dir / "mask.png").string());
        if (img.width != ds.grid_width(c) || img.height != ds.grid_height(c)) {
          throw ValidationError("core " + c.id + ": mask " + std::to_string(img.width) + "x" +
                                std::to_string(img.height) + " does not align with the " +
                                std::to_string(ds.grid_width(c)) + "x" + std::to_string(ds.grid_height(c)) +
                                " grid");
        }
        std::vector<std::uint8_t> mask(img.pixels.size());
        for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = img.pixels[i] >= 128 ? 1 : 0;
        c.mask = std::move(mask);
      }
      ds.cores.push_back(std::move(c));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest.json: " + std::string(e.what()));
  }
  validate_dataset(ds);
  return ds;
}

inline void save_dataset(const FeatureDataset& ds, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  validate_dataset(ds);
  fs::create_directories(root);
  nlohmann::ordered_json j;
  j["format_version"] = kDatasetFormatVersion;
  j["feature_dim"] = ds.feature_dim;
  j["levels"] = ds.num_levels;
  j["patch_size"] = ds.patch_size;
  j["raster_downsample"] = ds.raster_downsample;
  j["cores"] = nlohmann::ordered_json::array();
  for (const auto& c : ds.cores) {
    j["cores"].push_back({{"id", c.id},
                          {"label", c.label},
                          {"width", c.width},
                          {"height", c.height},
                          {"split", c.split},
                          {"has_mask", c.mask.has_value()}});
    const fs::path dir = root / c.id;
    fs::create_directories(dir);
    for (std::size_t m = 0; m < c.levels.size(); ++m)
      detail::write_level_csv(dir / ("level" + std::to_string(m) + ".csv"), c.levels[m]);
    if (c.mask) {
      GrayImage img{ds.grid_width(c), ds.grid_height(c), *c.mask};
      for (auto& p : img.pixels) p = p ? 255 : 0;
      write_gray_png((dir / "mask.png").string(), img);
    }
  }
  std::ofstream os(root / "manifest.json", std::ios::binary);
  if (!os) throw RuntimeError("cannot write " + (root / "manifest.json").string());
  os << j.dump(2) << '\n';
}

struct SynthConfig {
  std::size_t n_train = 60;
  std::size_t n_test = 20;
  int grid_cols = 8;  // level-0 patches per row
  int grid_rows = 8;
  std::size_t feature_dim = 32;
  int levels = 3;
  double mu = 1.0;
  double sigma_f = 0.3;
  double coarse_noise = 0.1;
  double blob_min_radius = 1.5;  // semi-axes, in level-0 patches
  double blob_max_radius = 2.5;
  double tumour_fraction = 0.5;
  int raster_downsample = 16;
  std::uint64_t seed = 0;
};

namespace detail {

// Both labels in a split of size n (when n >= 2).
inline std::vector<int> split_labels(std::size_t n, double fraction) {
  auto pos = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(n)));
  if (n >= 2) pos = std::clamp<std::size_t>(pos, 1, n - 1);
  std::vector<int> labels(n, 0);
  // Interleave so core order does not group classes.
  for (std::size_t k = 0; k < pos; ++k) labels[k * n / pos] = 1;
  return labels;
}

}  // namespace detail

/// Seeded synthetic cores. Tumour cores carry one rotated elliptical blob of
/// level-0 patches with features from N(+mu, sigma_f); all other patches
/// draw from N(-mu, sigma_f). A coarser patch is the mean of its level-0
/// children plus N(0, coarse_noise). Masks mark blob patch footprints.
inline FeatureDataset synth_generate(const SynthConfig& cfg) {
  if (cfg.n_train + cfg.n_test < 2) throw ValidationError("synth: at least two cores required");
  if (cfg.n_train < 2) throw ValidationError("synth: the training split needs both labels (n_train >= 2)");
  if (!(cfg.sigma_f > 0.0)) throw ValidationError("synth: sigma_f must be positive");
  if (cfg.coarse_noise < 0.0) throw ValidationError("synth: coarse_noise must be >= 0");
  if (cfg.grid_cols < 1 || cfg.grid_rows < 1) throw ValidationError("synth: grid must be at least 1x1");
  if (cfg.feature_dim == 0) throw ValidationError("synth: feature_dim must be positive");
  if (cfg.levels < 1) throw ValidationError("synth: levels must be >= 1");
  if (!(cfg.tumour_fraction > 0.0 && cfg.tumour_fraction < 1.0)) {
    throw ValidationError("synth: tumour_fraction must lie in (0, 1)");
  }
  if (!(cfg.blob_min_radius > 0.0) || cfg.blob_max_radius < cfg.blob_min_radius) {
    throw ValidationError("synth: need 0 < blob_min_radius <= blob_max_radius");
  }
  if (2.0 * cfg.blob_max_radius > std::min(cfg.grid_cols, cfg.grid_rows)) {
    throw ValidationError("synth: blob diameter " + format_double(2.0 * cfg.blob_max_radius) +
                          " patches exceeds the " + std::to_string(cfg.grid_cols) + "x" +
                          std::to_string(cfg.grid_rows) + " grid");
  }
  const std::int64_t span_top = static_cast<std::int64_t>(kPatchSize) << (cfg.levels - 1);
  if (cfg.grid_cols * static_cast<std::int64_t>(kPatchSize) < span_top ||
      cfg.grid_rows * static_cast<std::int64_t>(kPatchSize) < span_top) {
    throw ValidationError("synth: grid too small for " + std::to_string(cfg.levels) + " levels");
  }

  FeatureDataset ds;
  ds.feature_dim = cfg.feature_dim;
  ds.num_levels = cfg.levels;
  ds.raster_downsample = cfg.raster_downsample;
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto train_labels = detail::split_labels(cfg.n_train, cfg.tumour_fraction);
  const auto test_labels = detail::split_labels(cfg.n_test, cfg.tumour_fraction);
  const std::size_t d = cfg.feature_dim;

  for (std::size_t k = 0; k < cfg.n_train + cfg.n_test; ++k) {
    CoreRecord c;
    const bool is_train = k < cfg.n_train;
    char name[32];
    std::snprintf(name, sizeof name, "core%03zu", k);
    c.id = name;
    c.split = is_train ? "train" : "test";
    c.label = is_train ? train_labels[k] : test_labels[k - cfg.n_train];
    c.width = static_cast<std::int64_t>(cfg.grid_cols) * kPatchSize;
    c.height = static_cast<std::int64_t>(cfg.grid_rows) * kPatchSize;

    // Blob membership per level-0 patch, by patch center in patch units.
    std::vector<std::uint8_t> tumour(static_cast<std::size_t>(cfg.grid_rows * cfg.grid_cols), 0);
    if (c.label == 1) {
      const double a = cfg.blob_min_radius + (cfg.blob_max_radius - cfg.blob_min_radius) * unit(rng);
      const double b = cfg.blob_min_radius + (cfg.blob_max_radius - cfg.blob_min_radius) * unit(rng);
      const double theta = std::numbers::pi * unit(rng);
      const double rmax = std::max(a, b);
      const double cx = rmax + (cfg.grid_cols - 2.0 * rmax) * unit(rng);
      const double cy = rmax + (cfg.grid_rows - 2.0 * rmax) * unit(rng);
      const double ct = std::cos(theta), st = std::sin(theta);
      for (int r = 0; r < cfg.grid_rows; ++r)
        for (int col = 0; col < cfg.grid_cols; ++col) {
          const double dx = col + 0.5 - cx, dy = r + 0.5 - cy;
          const double u = dx * ct + dy * st, v = -dx * st + dy * ct;
          if ((u * u) / (a * a) + (v * v) / (b * b) <= 1.0) tumour[static_cast<std::size_t>(r * cfg.grid_cols + col)] = 1;
        }
      // A thin ellipse may miss every center; keep the nearest patch.
      if (std::find(tumour.begin(), tumour.end(), 1) == tumour.end()) {
        const int r = std::clamp(static_cast<int>(cy), 0, cfg.grid_rows - 1);
        const int col = std::clamp(static_cast<int>(cx), 0, cfg.grid_cols - 1);
        tumour[static_cast<std::size_t>(r * cfg.grid_cols + col)] = 1;
      }
    }

    LevelPatches l0;
    l0.features = Tensor(static_cast<std::size_t>(cfg.grid_rows * cfg.grid_cols), d);
    for (int r = 0; r < cfg.grid_rows; ++r)
      for (int col = 0; col < cfg.grid_cols; ++col) {
        const auto i = static_cast<std::size_t>(r * cfg.grid_cols + col);
        l0.cells.push_back({r, col});
        const double mean = tumour[i] ? cfg.mu : -cfg.mu;
        for (std::size_t j = 0; j < d; ++j) l0.features.data[i * d + j] = mean + cfg.sigma_f * noise(rng);
      }
    c.levels.push_back(std::move(l0));

    for (int m = 1; m < cfg.levels; ++m) {
      const int f = 1 << m;
      const int rows = cfg.grid_rows / f, cols = cfg.grid_cols / f;
      LevelPatches lp;
      lp.features = Tensor(static_cast<std::size_t>(rows * cols), d);
      const auto& base = c.levels[0].features.data;
      for (int r = 0; r < rows; ++r)
        for (int col = 0; col < cols; ++col) {
          const auto i = static_cast<std::size_t>(r * cols + col);
          lp.cells.push_back({r, col});
          for (std::size_t j = 0; j < d; ++j) {
            double s = 0.0;
            for (int rr = r * f; rr < (r + 1) * f; ++rr)
              for (int cc = col * f; cc < (col + 1) * f; ++cc)
                s += base[static_cast<std::size_t>(rr * cfg.grid_cols + cc) * d + j];
            lp.features.data[i * d + j] = s / (f * f) + cfg.coarse_noise * noise(rng);
          }
        }
      c.levels.push_back(std::move(lp));
    }

    const std::size_t gw = ds.grid_width(c), gh = ds.grid_height(c);
    std::vector<std::uint8_t> mask(gw * gh, 0);
    for (int r = 0; r < cfg.grid_rows; ++r)
      for (int col = 0; col < cfg.grid_cols; ++col) {
        if (!tumour[static_cast<std::size_t>(r * cfg.grid_cols + col)]) continue;
        const std::size_t x0 = static_cast<std::size_t>(col) * kPatchSize / cfg.raster_downsample;
        const std::size_t x1 = static_cast<std::size_t>(col + 1) * kPatchSize / cfg.raster_downsample;
        const std::size_t y0 = static_cast<std::size_t>(r) * kPatchSize / cfg.raster_downsample;
        const std::size_t y1 = static_cast<std::size_t>(r + 1) * kPatchSize / cfg.raster_downsample;
        for (std::size_t y = y0; y < std::min(y1, gh); ++y)
          for (std::size_t x = x0; x < std::min(x1, gw); ++x) mask[y * gw + x] = 1;
      }
    c.mask = std::move(mask);
    ds.cores.push_back(std::move(c));
  }
  validate_dataset(ds);
  return ds;
}

}  // namespace graphite
