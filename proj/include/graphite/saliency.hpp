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

// Saliency rasters and their fusion.
//
// All maps share one grid: level-0 pixels divided by `raster_downsample`.
// Smoothing widths are given in grid cells.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "graphite/autodiff.hpp"
#include "graphite/error.hpp"
#include "graphite/graph.hpp"
#include "graphite/milnet.hpp"

namespace graphite {

struct RasterMap {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> values;
  bool normalized = false;

  RasterMap() = default;
  RasterMap(std::size_t w, std::size_t h, double fill = 0.0) : width(w), height(h), values(w * h, fill) {}

  double& at(std::size_t x, std::size_t y) { return values[y * width + x]; }
  double at(std::size_t x, std::size_t y) const { return values[y * width + x]; }
  std::size_t size() const { return values.size(); }
};

inline void require_same_dims(const char* op, const RasterMap& a, const RasterMap& b) {
  if (a.width != b.width || a.height != b.height) {
    throw ValidationError(std::string(op) + ": grid " + std::to_string(a.width) + "x" +
                          std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                          std::to_string(b.height));
  }
}

struct FusionConfig {
  std::vector<double> rho{0.5, 0.3, 0.2};
  std::vector<double> level_sigma{1.0, 2.0, 4.0};
  std::vector<double> base{0.6, 0.3, 0.1};  // combined, MIL, gradient
  double percentile = 90.0;
  double mil_sigma = 2.0;
  double gradient_sigma = 1.0;
  double norm_epsilon = 1e-8;
  int raster_downsample = 16;
};

/// A patch-level score to paint onto the grid.
struct ScoredPatch {
  int level = 0;
  int row = 0;
  int col = 0;
  double score = 0.0;
};

/// Paints each patch's score over its level-0 footprint. Cells covered by
/// several patches take the mean; uncovered cells stay 0.
inline RasterMap rasterize(std::span<const ScoredPatch> patches, std::size_t width,
                           std::size_t height, int downsample) {
  if (downsample < 1) throw ValidationError("rasterize: downsample must be >= 1");
  RasterMap out(width, height);
  std::vector<double> count(width * height, 0.0);
  for (std::size_t k = 0; k < patches.size(); ++k) {
    const ScoredPatch& p = patches[k];
    if (!std::isfinite(p.score)) {
      throw ValidationError("rasterize: non-finite score for patch " + std::to_string(k));
    }
    const std::int64_t span = static_cast<std::int64_t>(kPatchSize) << p.level;
    const std::int64_t x0 = p.col * span / downsample;
    const std::int64_t y0 = p.row * span / downsample;
    const std::int64_t x1 = std::max(x0 + 1, (p.col + 1) * span / downsample);
    const std::int64_t y1 = std::max(y0 + 1, (p.row + 1) * span / downsample);
    if (x0 < 0 || y0 < 0 || x1 > static_cast<std::int64_t>(width) ||
        y1 > static_cast<std::int64_t>(height)) {
      throw ValidationError("rasterize: footprint of patch " + std::to_string(k) + " (level " +
                            std::to_string(p.level) + ", row " + std::to_string(p.row) + ", col " +
                            std::to_string(p.col) + ") leaves the " + std::to_string(width) + "x" +
                            std::to_string(height) + " grid");
    }
    for (std::int64_t y = y0; y < y1; ++y)
      for (std::int64_t x = x0; x < x1; ++x) {
        const auto i = static_cast<std::size_t>(y) * width + static_cast<std::size_t>(x);
        out.values[i] += p.score;
        count[i] += 1.0;
      }
  }
  for (std::size_t i = 0; i < out.size(); ++i)
    if (count[i] > 0.0) out.values[i] /= count[i];
  return out;
}

/// Normalized 1-D Gaussian kernel with radius ceil(3 sigma).
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw ValidationError("gaussian_kernel: sigma must be positive");
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double s = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    s += v;
  }
  for (double& v : k) v /= s;
  return k;
}

namespace detail {

// Half-sample symmetric reflection: ... c b a | a b c ... | c b a ...
inline std::size_t reflect_index(std::int64_t i, std::int64_t n) {
  const std::int64_t period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < n ? i : period - 1 - i);
}

}  // namespace detail

/// Separable Gaussian smoothing with reflective boundaries.
inline RasterMap gaussian_smooth(const RasterMap& in, double sigma) {
  const auto kernel = gaussian_kernel(sigma);
  const auto radius = static_cast<std::int64_t>(kernel.size() / 2);
  const auto w = static_cast<std::int64_t>(in.width);
  const auto h = static_cast<std::int64_t>(in.height);
  RasterMap tmp(in.width, in.height), out(in.width, in.height);
  if (in.size() == 0) return out;
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (std::int64_t k = -radius; k <= radius; ++k)
        s += kernel[static_cast<std::size_t>(k + radius)] *
             in.values[static_cast<std::size_t>(y) * in.width + detail::reflect_index(x + k, w)];
      tmp.values[static_cast<std::size_t>(y) * in.width + static_cast<std::size_t>(x)] = s;
    }
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x) {
      double s = 0.0;
      for (std::int64_t k = -radius; k <= radius; ++k)
        s += kernel[static_cast<std::size_t>(k + radius)] *
             tmp.values[detail::reflect_index(y + k, h) * in.width + static_cast<std::size_t>(x)];
      out.values[static_cast<std::size_t>(y) * in.width + static_cast<std::size_t>(x)] = s;
    }
  return out;
}

/// (v - min) / (max - min + eps). A constant map becomes all zeros.
inline RasterMap normalize_minmax(const RasterMap& in, double eps = 1e-8) {
  RasterMap out = in;
  if (in.size() == 0) return out;
  const auto [lo, hi] = std::minmax_element(in.values.begin(), in.values.end());
  const double mn = *lo, range = *hi - *lo + eps;
  for (double& v : out.values) v = (v - mn) / range;
  out.normalized = true;
  return out;
}

inline std::vector<double> normalize_minmax(std::span<const double> v, double eps = 1e-8) {
  std::vector<double> out(v.begin(), v.end());
  if (out.empty()) return out;
  const auto [lo, hi] = std::minmax_element(out.begin(), out.end());
  const double mn = *lo, range = *hi - *lo + eps;
  for (double& x : out) x = (x - mn) / range;
  return out;
}

/// Min-max normalization of a per-patch score vector with epsilon relative to
/// the largest magnitude, so vectors of tiny scale keep their full range.
inline std::vector<double> normalize_scores(std::span<const double> v, double eps = 1e-8) {
  double scale = 0.0;
  for (double x : v) scale = std::max(scale, std::abs(x));
  if (scale == 0.0) return std::vector<double>(v.size(), 0.0);
  return normalize_minmax(v, eps * scale);
}

/// Map counterpart of normalize_scores: epsilon scales with the largest
/// magnitude, so rescaling every input leaves the result unchanged.
inline RasterMap normalize_relative(const RasterMap& in, double eps = 1e-8) {
  double scale = 0.0;
  for (double x : in.values) scale = std::max(scale, std::abs(x));
  if (scale == 0.0) {
    RasterMap out(in.width, in.height);
    out.normalized = true;
    return out;
  }
  return normalize_minmax(in, eps * scale);
}

/// M_combined = sum_m rho_m * Gaussian(A_m, sigma_m).
inline RasterMap multilevel_fuse(std::span<const RasterMap> levels, const FusionConfig& cfg) {
  if (levels.empty()) throw ValidationError("multilevel_fuse: no level maps");
  if (levels.size() > cfg.rho.size() || levels.size() > cfg.level_sigma.size()) {
    throw ValidationError("multilevel_fuse: " + std::to_string(levels.size()) +
                          " level maps but weights for " + std::to_string(cfg.rho.size()));
  }
  RasterMap out(levels.front().width, levels.front().height);
  for (std::size_t m = 0; m < levels.size(); ++m) {
    require_same_dims("multilevel_fuse", levels.front(), levels[m]);
    const RasterMap s = gaussian_smooth(levels[m], cfg.level_sigma[m]);
    for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += cfg.rho[m] * s.values[i];
  }
  return out;
}

/// Linear-interpolation percentile (q in [0, 100]) of unsorted values.
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ValidationError("percentile: empty input");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

/// C = mean of the values strictly above the q-th percentile; the maximum when
/// no value is strictly above it.
inline double confidence_score(const RasterMap& map, double q = 90.0) {
  if (map.size() == 0) throw ValidationError("confidence_score: empty map");
  const double p = percentile(map.values, q);
  double s = 0.0;
  std::size_t n = 0;
  for (double v : map.values)
    if (v > p) {
      s += v;
      ++n;
    }
  if (n == 0) return *std::max_element(map.values.begin(), map.values.end());
  return s / static_cast<double>(n);
}

struct FusionResult {
  RasterMap map;                     // min-max normalized
  std::vector<double> confidences;
  std::vector<double> weights;       // v
};

/// Confidence-weighted fusion: v_k = base_k * C_k / sum_j C_j with the base
/// coefficients rescaled to sum to 1, then min-max normalization. If every
/// confidence is zero the weights fall back to the rescaled base coefficients.
inline FusionResult confidence_fuse(std::span<const RasterMap> maps, std::span<const double> base,
                                    const FusionConfig& cfg) {
  if (maps.empty() || maps.size() != base.size()) {
    throw ValidationError("confidence_fuse: " + std::to_string(maps.size()) + " maps for " +
                          std::to_string(base.size()) + " base coefficients");
  }
  const double base_sum = std::accumulate(base.begin(), base.end(), 0.0);
  if (!(base_sum > 0.0)) throw ValidationError("confidence_fuse: base coefficients must sum > 0");
  FusionResult r;
  double total = 0.0;
  for (const auto& m : maps) {
    require_same_dims("confidence_fuse", maps.front(), m);
    r.confidences.push_back(confidence_score(m, cfg.percentile));
    total += r.confidences.back();
  }
  for (std::size_t k = 0; k < maps.size(); ++k) {
    const double b = base[k] / base_sum;
    r.weights.push_back(total == 0.0 ? b : b * r.confidences[k] / total);
  }
  RasterMap fused(maps.front().width, maps.front().height);
  for (std::size_t k = 0; k < maps.size(); ++k)
    for (std::size_t i = 0; i < fused.size(); ++i) fused.values[i] += r.weights[k] * maps[k].values[i];
  r.map = normalize_relative(fused, cfg.norm_epsilon);
  return r;
}

/// Three-way fusion of the multilevel, MIL and gradient maps with the
/// configured base coefficients (0.6, 0.3, 0.1 by default).
inline FusionResult confidence_fuse(const RasterMap& combined, const RasterMap& mil,
                                    const RasterMap& gradient, const FusionConfig& cfg) {
  const RasterMap maps[] = {combined, mil, gradient};
  return confidence_fuse(maps, std::span<const double>(cfg.base.data(), 3), cfg);
}

enum class Variant { Base, V1, V2 };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::Base: return "base";
    case Variant::V1: return "v1";
    case Variant::V2: return "v2";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "base") return Variant::Base;
  if (s == "v1") return Variant::V1;
  if (s == "v2") return Variant::V2;
  throw ValidationError("unknown variant '" + s + "' (expected base, v1 or v2)");
}

/// Inputs of the variant ladder; MIL and gradient maps are already smoothed.
struct VariantInputs {
  std::optional<RasterMap> combined;
  std::optional<RasterMap> mil;
  std::optional<RasterMap> gradient;
};

/// Base: normalized M_combined. V1: fusion of {combined, MIL}. V2: fusion of
/// {combined, MIL, gradient}.
inline FusionResult graphite_variant(Variant variant, const VariantInputs& in, const FusionConfig& cfg) {
  auto need = [&](const std::optional<RasterMap>& m, const char* what) -> const RasterMap& {
    if (!m) {
      throw ValidationError("graphite_variant: variant " + to_string(variant) + " requires the " +
                            what + " map");
    }
    return *m;
  };
  switch (variant) {
    case Variant::Base: {
      FusionResult r;
      r.map = normalize_relative(need(in.combined, "combined"), cfg.norm_epsilon);
      r.confidences = {confidence_score(*in.combined, cfg.percentile)};
      r.weights = {1.0};
      return r;
    }
    case Variant::V1: {
      const RasterMap maps[] = {need(in.combined, "combined"), need(in.mil, "MIL")};
      const double base[] = {cfg.base[0], cfg.base[1]};
      FusionResult r = confidence_fuse(maps, base, cfg);
      // Two-way weights are reported summing to 1; min-max makes the fused
      // map independent of that common factor.
      const double total = r.weights[0] + r.weights[1];
      if (total > 0.0) {
        for (double& w : r.weights) w /= total;
        RasterMap fused(maps[0].width, maps[0].height);
        for (std::size_t i = 0; i < fused.size(); ++i)
          fused.values[i] = r.weights[0] * maps[0].values[i] + r.weights[1] * maps[1].values[i];
        r.map = normalize_relative(fused, cfg.norm_epsilon);
      }
      return r;
    }
    case Variant::V2:
      return confidence_fuse(need(in.combined, "combined"), need(in.mil, "MIL"),
                             need(in.gradient, "gradient"), cfg);
  }
  throw ValidationError("graphite_variant: unknown variant");
}

/// Grid cell of one level-0 patch of a bag (row i of the bag's patch matrix).
struct PatchCell {
  int row = 0;
  int col = 0;
};

namespace detail {

inline RasterMap paint_level0(std::span<const double> scores, std::span<const PatchCell> cells,
                              std::size_t width, std::size_t height, int downsample) {
  if (scores.size() != cells.size()) {
    throw ValidationError("saliency: " + std::to_string(scores.size()) + " scores for " +
                          std::to_string(cells.size()) + " patch cells");
  }
  std::vector<ScoredPatch> patches;
  for (std::size_t i = 0; i < cells.size(); ++i)
    patches.push_back({0, cells[i].row, cells[i].col, scores[i]});
  return rasterize(patches, width, height, downsample);
}

}  // namespace detail

/// MIL attention map: alpha per level-0 patch, min-max normalized, painted.
/// Smoothing is left to the fusion step.
inline RasterMap mil_attention_map(const MilModel& model, const Bag& bag,
                                   std::span<const PatchCell> cells, std::size_t width,
                                   std::size_t height, int downsample) {
  const auto alpha = attention_weights(model, bag);
  return detail::paint_level0(normalize_scores(alpha), cells, width, height, downsample);
}

/// Per-patch L2 norm of d(y_hat)/d(projected patch embedding), one backward
/// pass. Stands in for CNN FullGrad on precomputed features.
inline std::vector<double> gradient_patch_saliency(const MilModel& model, const Bag& bag) {
  Tape t;
  Tensor embedded = project_patches(t, model, t.constant(bag.patches)).value();
  Var e = t.param(embedded);
  auto [z, alpha] = mil_attention(t, model, e);
  Var y = classify_core(t, model, z);
  t.backward(y);
  const auto& g = *embedded.grad;
  std::vector<double> out(embedded.rows, 0.0);
  for (std::size_t i = 0; i < embedded.rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < embedded.cols; ++j) s += g[i * embedded.cols + j] * g[i * embedded.cols + j];
    out[i] = std::sqrt(s);
  }
  return out;
}

inline RasterMap gradient_saliency_map(const MilModel& model, const Bag& bag,
                                       std::span<const PatchCell> cells, std::size_t width,
                                       std::size_t height, int downsample) {
  const auto g = gradient_patch_saliency(model, bag);
  return detail::paint_level0(normalize_scores(g), cells, width, height, downsample);
}

/// Per-level maps A_m from per-node level scores: each level is painted at
/// its own footprint and min-max normalized.
inline std::vector<RasterMap> level_maps(const HierarchicalGraph& g, std::span<const double> node_scores,
                                         std::size_t width, std::size_t height, int downsample,
                                         double eps = 1e-8) {
  std::vector<RasterMap> out;
  for (int m = 0; m < g.num_levels; ++m) {
    std::vector<ScoredPatch> patches;
    for (const auto& n : g.nodes)
      if (n.level == m) patches.push_back({m, n.grid_row, n.grid_col, node_scores[n.node_id]});
    out.push_back(normalize_minmax(rasterize(patches, width, height, downsample), eps));
  }
  return out;
}

}  // namespace graphite
