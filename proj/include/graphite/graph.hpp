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

// Multiscale patch grids and the hierarchical patch graph.
//
// Level m halves the resolution of level m-1, so one level-m pixel spans 2^m
// level-0 pixels. Every level is tiled by non-overlapping 224x224 patches and
// node centers are kept in level-local pixels.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "graphite/error.hpp"

namespace graphite {

inline constexpr int kPatchSize = 224;

struct PatchNode {
  std::size_t node_id = 0;
  std::string core_id;
  int level = 0;
  int grid_row = 0;
  int grid_col = 0;
  double center_x = 0.0;
  double center_y = 0.0;
  std::vector<double> embedding;
};

inline PatchNode make_patch(int level, int row, int col, std::string core_id = {}) {
  PatchNode p;
  p.core_id = std::move(core_id);
  p.level = level;
  p.grid_row = row;
  p.grid_col = col;
  p.center_x = col * kPatchSize + kPatchSize / 2;
  p.center_y = row * kPatchSize + kPatchSize / 2;
  return p;
}

/// Patches of one level for a core whose level-0 extent is width x height
/// pixels. Incomplete boundary patches are dropped; an empty result means
/// the level holds no full patch.
inline std::vector<PatchNode> build_level_grid(std::int64_t width, std::int64_t height, int level,
                                               const std::string& core_id = {}) {
  if (level < 0) throw ValidationError("build_level_grid: negative level");
  if (width < 0 || height < 0) throw ValidationError("build_level_grid: negative extent");
  const std::int64_t span = static_cast<std::int64_t>(kPatchSize) << level;
  const std::int64_t cols = width / span;
  const std::int64_t rows = height / span;
  std::vector<PatchNode> out;
  out.reserve(static_cast<std::size_t>(rows * cols));
  for (std::int64_t r = 0; r < rows; ++r) {
    for (std::int64_t c = 0; c < cols; ++c) {
      PatchNode p = make_patch(level, static_cast<int>(r), static_cast<int>(c), core_id);
      p.node_id = out.size();
      out.push_back(std::move(p));
    }
  }
  return out;
}

/// Euclidean distance between same-level centers in units of one patch.
inline double spatial_distance(const PatchNode& a, const PatchNode& b) {
  if (a.level != b.level) {
    throw ValidationError("spatial_distance: nodes on levels " + std::to_string(a.level) +
                          " and " + std::to_string(b.level));
  }
  const double dx = a.center_x - b.center_x;
  const double dy = a.center_y - b.center_y;
  return std::sqrt(dx * dx + dy * dy) / kPatchSize;
}

/// Distance in the finer level's pixels after mapping the coarser center
/// onto the finer grid (scale 2^delta).
inline double scale_distance(const PatchNode& coarse, const PatchNode& fine) {
  if (coarse.level <= fine.level) {
    throw ValidationError("scale_distance: coarse level " + std::to_string(coarse.level) +
                          " must exceed fine level " + std::to_string(fine.level));
  }
  const double factor = std::ldexp(1.0, coarse.level - fine.level);
  const double dx = coarse.center_x * factor - fine.center_x;
  const double dy = coarse.center_y * factor - fine.center_y;
  return std::sqrt(dx * dx + dy * dy);
}

struct CrossEdge {
  std::size_t coarse = 0;
  std::size_t fine = 0;
  int delta = 0;

  friend bool operator==(const CrossEdge&, const CrossEdge&) = default;
  friend auto operator<=>(const CrossEdge&, const CrossEdge&) = default;
};

struct GraphThresholds {
  double spatial = 1.5;
  double scale = 1.0;
};

/// Patch graph of one core. Nodes are sorted by (level, row, col) and
/// node_id equals the position in `nodes`. Spatial edges are stored once as
/// (smaller id, larger id); cross edges as (coarse, fine).
struct HierarchicalGraph {
  std::vector<PatchNode> nodes;
  std::vector<std::pair<std::size_t, std::size_t>> spatial_edges;
  std::vector<CrossEdge> cross_edges;
  int num_levels = 0;

  std::size_t size() const { return nodes.size(); }

  std::vector<std::size_t> level_members(int level) const {
    std::vector<std::size_t> out;
    for (const auto& n : nodes)
      if (n.level == level) out.push_back(n.node_id);
    return out;
  }
};

namespace detail {

struct CellKey {
  int row, col;
  bool operator==(const CellKey&) const = default;
};
struct CellHash {
  std::size_t operator()(const CellKey& k) const noexcept {
    return std::hash<std::int64_t>()((static_cast<std::int64_t>(k.row) << 32) ^
                                     static_cast<std::uint32_t>(k.col));
  }
};
using CellIndex = std::unordered_map<CellKey, std::size_t, CellHash>;

}  // namespace detail

/// Builds the hierarchical graph from per-level patch lists. Nodes are sorted
/// canonically first, so the result does not depend on input order. Edge
/// discovery walks a per-level cell index instead of testing every pair.
inline HierarchicalGraph build_hierarchical_graph(const std::vector<std::vector<PatchNode>>& levels,
                                                  const GraphThresholds& thresholds = {}) {
  if (!(thresholds.spatial > 0.0) || !(thresholds.scale > 0.0)) {
    throw ValidationError("build_hierarchical_graph: thresholds must be positive");
  }
  HierarchicalGraph g;
  for (const auto& lvl : levels)
    for (const auto& n : lvl) {
      if (n.level < 0) throw ValidationError("build_hierarchical_graph: negative level");
      g.nodes.push_back(n);
      g.num_levels = std::max(g.num_levels, n.level + 1);
    }
  if (g.nodes.empty()) throw ValidationError("build_hierarchical_graph: every level is empty");
  g.num_levels = std::max<int>(g.num_levels, static_cast<int>(levels.size()));

  std::sort(g.nodes.begin(), g.nodes.end(), [](const PatchNode& a, const PatchNode& b) {
    return std::tie(a.level, a.grid_row, a.grid_col) < std::tie(b.level, b.grid_row, b.grid_col);
  });
  std::vector<detail::CellIndex> index(static_cast<std::size_t>(g.num_levels));
  for (std::size_t i = 0; i < g.nodes.size(); ++i) {
    PatchNode& n = g.nodes[i];
    n.node_id = i;
    auto [it, inserted] = index[static_cast<std::size_t>(n.level)].emplace(
        detail::CellKey{n.grid_row, n.grid_col}, i);
    if (!inserted) {
      throw ValidationError("build_hierarchical_graph: duplicate patch at level " +
                            std::to_string(n.level) + " row " + std::to_string(n.grid_row) +
                            " col " + std::to_string(n.grid_col));
    }
  }

  // Intrascale: same-level centers sit on a 224 px lattice, so a neighbor
  // within `spatial` patch units is at most ceil(spatial) cells away.
  const int reach = static_cast<int>(std::ceil(thresholds.spatial));
  for (const PatchNode& a : g.nodes) {
    const auto& cells = index[static_cast<std::size_t>(a.level)];
    for (int dr = -reach; dr <= reach; ++dr) {
      for (int dc = -reach; dc <= reach; ++dc) {
        auto it = cells.find({a.grid_row + dr, a.grid_col + dc});
        if (it == cells.end() || it->second <= a.node_id) continue;
        if (spatial_distance(a, g.nodes[it->second]) <= thresholds.spatial) {
          g.spatial_edges.emplace_back(a.node_id, it->second);
        }
      }
    }
  }

  // Interscale: project each coarse center onto every finer level and scan the
  // fine cells inside the radius.
  const double radius = thresholds.scale * kPatchSize;
  for (const PatchNode& c : g.nodes) {
    for (int fine = 0; fine < c.level; ++fine) {
      const auto& cells = index[static_cast<std::size_t>(fine)];
      if (cells.empty()) continue;
      const double f = std::ldexp(1.0, c.level - fine);
      const double x = c.center_x * f;
      const double y = c.center_y * f;
      const double half = kPatchSize / 2.0;
      const int c0 = static_cast<int>(std::floor((x - radius - half) / kPatchSize));
      const int c1 = static_cast<int>(std::ceil((x + radius - half) / kPatchSize));
      const int r0 = static_cast<int>(std::floor((y - radius - half) / kPatchSize));
      const int r1 = static_cast<int>(std::ceil((y + radius - half) / kPatchSize));
      for (int r = r0; r <= r1; ++r) {
        for (int col = c0; col <= c1; ++col) {
          auto it = cells.find({r, col});
          if (it == cells.end()) continue;
          if (scale_distance(c, g.nodes[it->second]) <= radius) {
            g.cross_edges.push_back({c.node_id, it->second, c.level - fine});
          }
        }
      }
    }
  }
  std::sort(g.spatial_edges.begin(), g.spatial_edges.end());
  std::sort(g.cross_edges.begin(), g.cross_edges.end());
  return g;
}

/// Parent of every node: the cross-edge neighbor one level coarser with the
/// smallest scale distance (ties to the lower id); nullopt when absent.
inline std::vector<std::optional<std::size_t>> parent_map(const HierarchicalGraph& g) {
  std::vector<std::optional<std::size_t>> parent(g.size());
  std::vector<double> best(g.size(), std::numeric_limits<double>::infinity());
  for (const CrossEdge& e : g.cross_edges) {
    if (e.delta != 1) continue;
    const double d = scale_distance(g.nodes[e.coarse], g.nodes[e.fine]);
    if (d < best[e.fine] || (d == best[e.fine] && parent[e.fine] && e.coarse < *parent[e.fine])) {
      best[e.fine] = d;
      parent[e.fine] = e.coarse;
    }
  }
  return parent;
}

/// One SAN position: a chain of aligned nodes, at most one per level.
struct AlignedPosition {
  std::vector<std::optional<std::size_t>> node_at_level;
};

/// Aligns nodes across levels. Each finest-level node starts a position that
/// follows the parent chain upward; a coarser node reached by no chain starts
/// its own position.
inline std::vector<AlignedPosition> align_positions(const HierarchicalGraph& g) {
  const auto parent = parent_map(g);
  std::vector<bool> covered(g.size(), false);
  std::vector<AlignedPosition> out;
  for (int level = 0; level < g.num_levels; ++level) {
    for (const PatchNode& n : g.nodes) {
      if (n.level != level || covered[n.node_id]) continue;
      AlignedPosition pos;
      pos.node_at_level.assign(static_cast<std::size_t>(g.num_levels), std::nullopt);
      std::optional<std::size_t> cur = n.node_id;
      while (cur) {
        covered[*cur] = true;
        pos.node_at_level[static_cast<std::size_t>(g.nodes[*cur].level)] = *cur;
        cur = parent[*cur];
      }
      out.push_back(std::move(pos));
    }
  }
  return out;
}

}  // namespace graphite
