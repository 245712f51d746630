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


// Independent reference implementations shared by the unit tests and the
// acceptance binary. Nothing here reuses the library's fast paths.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "graphite/gatsan.hpp"
#include "graphite/graph.hpp"
#include "graphite/metrics.hpp"
#include "graphite/milnet.hpp"

namespace oracle {

using namespace graphite;

// ---------------------------------------------------------------- graph

/// Random 3-level layout: each level-m cell of a random base grid is kept
/// with a random probability. At most `max_nodes` nodes, at least one.
inline std::vector<std::vector<PatchNode>> random_layout(std::mt19937_64& rng, std::size_t max_nodes = 100,
                                                         int levels = 3) {
  std::uniform_int_distribution<int> dim(1, 9);
  std::uniform_real_distribution<double> keep_p(0.3, 1.0), u(0.0, 1.0);
  for (;;) {
    const int w = dim(rng), h = dim(rng);
    const double p = keep_p(rng);
    std::vector<std::vector<PatchNode>> out(static_cast<std::size_t>(levels));
    std::size_t total = 0;
    for (int m = 0; m < levels; ++m) {
      const int lw = std::max(1, w >> m), lh = std::max(1, h >> m);
      for (int r = 0; r < lh; ++r)
        for (int c = 0; c < lw; ++c)
          if (u(rng) < p) {
            out[static_cast<std::size_t>(m)].push_back(make_patch(m, r, c, "layout"));
            ++total;
          }
    }
    // Shuffle so the builder cannot rely on input order.
    for (auto& lvl : out) std::shuffle(lvl.begin(), lvl.end(), rng);
    if (total > 0 && total <= max_nodes) return out;
  }
}

struct EdgeKey {
  int level_a, row_a, col_a, level_b, row_b, col_b;
  auto operator<=>(const EdgeKey&) const = default;
};

inline EdgeKey key_of(const PatchNode& a, const PatchNode& b) {
  return {a.level, a.grid_row, a.grid_col, b.level, b.grid_row, b.grid_col};
}

/// All-pairs threshold test. Spatial edges are keyed with the
/// lexicographically smaller endpoint first; cross edges as (coarse, fine).
inline std::pair<std::set<EdgeKey>, std::set<EdgeKey>> brute_force_edges(
    const std::vector<std::vector<PatchNode>>& levels, double spatial, double scale) {
  std::vector<PatchNode> all;
  for (const auto& l : levels) all.insert(all.end(), l.begin(), l.end());
  std::set<EdgeKey> sp, cr;
  for (std::size_t i = 0; i < all.size(); ++i) {
    for (std::size_t j = 0; j < all.size(); ++j) {
      if (i == j) continue;
      const PatchNode& a = all[i];
      const PatchNode& b = all[j];
      if (a.level == b.level) {
        const double dx = (a.center_x - b.center_x) / kPatchSize;
        const double dy = (a.center_y - b.center_y) / kPatchSize;
        if (std::sqrt(dx * dx + dy * dy) <= spatial) {
          sp.insert(key_of(a, b) < key_of(b, a) ? key_of(a, b) : key_of(b, a));
        }
      } else if (a.level > b.level) {
        const double f = std::pow(2.0, a.level - b.level);
        const double dx = a.center_x * f - b.center_x;
        const double dy = a.center_y * f - b.center_y;
        if (std::sqrt(dx * dx + dy * dy) <= scale * kPatchSize) cr.insert(key_of(a, b));
      }
    }
  }
  return {sp, cr};
}

inline std::pair<std::set<EdgeKey>, std::set<EdgeKey>> built_edges(const HierarchicalGraph& g) {
  std::set<EdgeKey> sp, cr;
  for (auto [a, b] : g.spatial_edges) {
    const auto& na = g.nodes[a];
    const auto& nb = g.nodes[b];
    sp.insert(key_of(na, nb) < key_of(nb, na) ? key_of(na, nb) : key_of(nb, na));
  }
  for (const auto& e : g.cross_edges) cr.insert(key_of(g.nodes[e.coarse], g.nodes[e.fine]));
  return {sp, cr};
}

/// Runs `trials` random layouts over a few threshold pairs; returns the
/// number of mismatching graphs.
inline int graph_oracle_mismatches(int trials, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::pair<double, double> thresholds[] = {{1.5, 1.0}, {1.0, 0.5}, {2.3, 2.0}, {0.9, 0.6}};
  int bad = 0;
  for (int k = 0; k < trials; ++k) {
    const auto layout = random_layout(rng);
    const auto [s, c] = thresholds[static_cast<std::size_t>(k) % std::size(thresholds)];
    const auto g = build_hierarchical_graph(layout, {s, c});
    if (built_edges(g) != brute_force_edges(layout, s, c)) ++bad;
    // Duplicate-free edge lists.
    std::set<std::pair<std::size_t, std::size_t>> uniq(g.spatial_edges.begin(), g.spatial_edges.end());
    if (uniq.size() != g.spatial_edges.size()) ++bad;
  }
  return bad;
}

// -------------------------------------------------------------- metrics

inline ScoredPixels random_pixels(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> size(2, 300), levels(2, 40);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ScoredPixels px;
  const int n = size(rng);
  // Quantized scores force many ties.
  const int q = levels(rng);
  const double prevalence = 0.05 + 0.9 * u(rng);
  for (int i = 0; i < n; ++i) {
    const bool pos = u(rng) < prevalence;
    const double shift = pos ? 0.3 * u(rng) : 0.0;
    px.scores.push_back(std::floor(std::min(0.999, u(rng) * 0.8 + shift) * q) / q);
    px.truth.push_back(pos ? 1 : 0);
  }
  px.truth[0] = 1;
  px.truth[1] = 0;
  return px;
}

/// Mann-Whitney U / (P N), ties counted one half.
inline double rank_auroc(const ScoredPixels& px) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < px.size(); ++i) {
    if (!px.truth[i]) continue;
    for (std::size_t j = 0; j < px.size(); ++j) {
      if (px.truth[j]) continue;
      pairs += 1.0;
      if (px.scores[i] > px.scores[j]) wins += 1.0;
      else if (px.scores[i] == px.scores[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

/// Recomputes precision and recall from scratch at every distinct score and
/// sums precision times recall increments in order of increasing recall.
inline double exhaustive_ap(const ScoredPixels& px) {
  std::vector<double> ts(px.scores.begin(), px.scores.end());
  std::sort(ts.begin(), ts.end(), std::greater<>());
  ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
  double positives = 0.0;
  for (auto t : px.truth) positives += t;
  double ap = 0.0, prev_recall = 0.0;
  for (double t : ts) {
    double tp = 0.0, fp = 0.0;
    for (std::size_t i = 0; i < px.size(); ++i)
      if (px.scores[i] >= t) (px.truth[i] ? tp : fp) += 1.0;
    const double recall = tp / positives;
    ap += (recall - prev_recall) * (tp / (tp + fp));
    prev_recall = recall;
  }
  return ap;
}

// ---------------------------------------------------- miniature models

inline Tensor random_tensor(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(r, c);
  for (double& v : t.data) v = n(rng);
  return t;
}

inline MilModelConfig mini_mil_config() { return {4, 4, 4, 4, 4, 4}; }

/// Two labelled bags of 3 patches each with D = 4.
inline std::vector<Bag> mini_bags(std::mt19937_64& rng) {
  return {{"a", random_tensor(3, 4, rng), 1}, {"b", random_tensor(3, 4, rng), 0}};
}

/// Max relative error of the full Stage-1 BCE gradient.
inline double stage1_grad_error(std::uint64_t seed, std::size_t* param_count = nullptr) {
  std::mt19937_64 rng(seed);
  MilModel model(mini_mil_config(), seed);
  const auto bags = mini_bags(rng);
  ParamList params = model.parameters();
  if (param_count) *param_count = count_parameters(params);
  std::vector<Tensor*> ptrs;
  for (auto& p : params) ptrs.push_back(p.tensor);
  const std::vector<int> labels{bags[0].label, bags[1].label};
  return grad_check(
      [&](Tape& t) {
        std::vector<Var> probs;
        for (const auto& b : bags) probs.push_back(mil_forward(t, model, b).probability);
        return bce_loss(concat_rows(probs), labels);
      },
      ptrs);
}

/// 1x4 level-0 row under a 1x2 level-1 row: 6 nodes. The wider scale
/// threshold gives every fine node two cross neighbours, so no cross-edge
/// softmax is trivially 1.
inline HierarchicalGraph mini_graph() {
  std::vector<std::vector<PatchNode>> levels(2);
  for (int c = 0; c < 4; ++c) levels[0].push_back(make_patch(0, 0, c, "mini"));
  for (int c = 0; c < 2; ++c) levels[1].push_back(make_patch(1, 0, c, "mini"));
  return build_hierarchical_graph(levels, {1.5, 2.0});
}

inline GatConfig mini_gat_config() {
  GatConfig g;
  g.in_dim = 4;
  g.heads = 2;
  g.head_dim = 4;
  g.out_dim = 4;
  return g;
}

/// Stage-2 total loss rebuilt from the public pieces with the scalewise
/// level weights pinned to `weights`. Finite differences must hold them
/// fixed, since the training loss treats them as constants.
inline Var stage2_loss_pinned(Tape& t, Stage2Model& model, const GraphSample& sample,
                              const Stage2LossConfig& cfg, std::span<const double> weights) {
  Var h = gat_forward(t, model.gat, sample.graph, t.constant(sample.features)).features;
  const auto levels = san_level_attention(t, model.san, sample.graph, sample.positions, h);
  Var c = san_cross_weights(t, model.san, sample.graph, h);
  Var g = mean_rows(san_fuse(levels, c, h));
  std::vector<Var> rows;
  for (int m = 0; m < sample.graph.num_levels; ++m) {
    auto members = sample.graph.level_members(m);
    if (!members.empty()) rows.push_back(gather_rows(h, members));
  }
  return add(infomax_loss(h, g, cfg.tau), scalewise_loss(rows, weights, cfg.tau, cfg.scale_loss_contrastive));
}

struct Stage2Mini {
  Stage2Model model;
  GraphSample sample;
  std::vector<double> weights;  // c^m at the base point
};

inline Stage2Mini stage2_mini(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Stage2Mini m{Stage2Model(mini_gat_config(), 2, seed), {}, {}};
  const auto graph = mini_graph();
  m.sample = make_graph_sample("mini", graph, random_tensor(graph.size(), 4, rng));
  Tape t;
  for (double w : stage2_forward(t, m.model, m.sample, {}).cross_weights.value().data) m.weights.push_back(w);
  return m;
}

/// Max relative error of the full Stage-2 loss gradient over every
/// parameter except the cross-scale scorer bias. That bias shifts every
/// cross-scale logit equally, so the softmax cancels it and its true
/// gradient is exactly zero; a relative error is meaningless there.
inline double stage2_grad_error(std::uint64_t seed, bool contrastive,
                                std::size_t* param_count = nullptr) {
  Stage2Mini mini = stage2_mini(seed);
  ParamList params = mini.model.parameters();
  if (param_count) *param_count = count_parameters(params);
  std::vector<Tensor*> ptrs;
  for (auto& p : params)
    if (p.name != "san.cross.bias") ptrs.push_back(p.tensor);
  const Stage2LossConfig cfg{0.5, contrastive};
  return grad_check(
      [&](Tape& t) { return stage2_loss_pinned(t, mini.model, mini.sample, cfg, mini.weights); }, ptrs);
}

// ------------------------------------------------- softmax invariants

/// Largest |sum - 1| over every softmax group of `forwards` randomized
/// Stage-1 and Stage-2 forwards.
inline double softmax_sum_deviation(int forwards, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> small(1, 6);
  std::uniform_real_distribution<double> spread(0.1, 5.0);
  double worst = 0.0;
  auto track = [&](double s) { worst = std::max(worst, std::abs(s - 1.0)); };
  for (int k = 0; k < forwards; ++k) {
    const double sc = spread(rng);
    // MIL alpha.
    {
      MilModelConfig cfg{static_cast<std::size_t>(small(rng)), 5, 4, 3, 4, 3};
      MilModel model(cfg, rng());
      Bag bag{"x", random_tensor(static_cast<std::size_t>(small(rng) * 5), cfg.input_dim, rng, sc), 1};
      Tape t;
      double s = 0.0;
      for (double a : mil_forward(t, model, bag).alpha.value().data) s += a;
      track(s);
    }
    // GAT psi, SAN s^m and c^m.
    {
      const auto layout = random_layout(rng, 40);
      auto graph = build_hierarchical_graph(layout);
      GatConfig gc;
      gc.in_dim = 3;
      gc.heads = static_cast<std::size_t>(small(rng) % 3 + 1);
      gc.head_dim = 3;
      gc.out_dim = 4;
      Stage2Model model(gc, 3, rng());
      const GraphSample sample = make_graph_sample("x", graph, random_tensor(graph.size(), 3, rng, sc));
      Tape t;
      const auto f = stage2_forward(t, model, sample, {});
      const auto& nb = f.gat.neighborhoods;
      auto per_target = [&](const std::vector<Var>& psis, const std::vector<std::size_t>& target) {
        for (const Var& psi : psis) {
          std::vector<double> sums(graph.size(), 0.0);
          std::vector<bool> seen(graph.size(), false);
          for (std::size_t e = 0; e < target.size(); ++e) {
            sums[target[e]] += psi.value().data[e];
            seen[target[e]] = true;
          }
          for (std::size_t i = 0; i < graph.size(); ++i)
            if (seen[i]) track(sums[i]);
        }
      };
      per_target(f.gat.psi_spatial, nb.spatial_target);
      per_target(f.gat.psi_cross, nb.cross_target);
      std::vector<double> pos(f.levels.num_positions, 0.0);
      for (std::size_t e = 0; e < f.levels.entry_position.size(); ++e)
        pos[f.levels.entry_position[e]] += f.levels.scores.value().data[e];
      for (double s : pos) track(s);
      double c = 0.0;
      for (double v : f.cross_weights.value().data) c += v;
      track(c);
    }
  }
  return worst;
}

}  // namespace oracle
