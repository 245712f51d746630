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

// Stage 2: dual edge-type graph attention, scalewise attention and the
// self-supervised InfoMax + scalewise objective.
//
// Per head and edge type t in {spatial, cross}:
//   e_ij   = LeakyReLU(a_t . [W_t h_i || W_t h_j])
//   psi_ij = softmax of e_ij over the type-t neighbourhood of i
//   h'_i   = sum_spatial psi_ij W_s h_j + sum_cross psi_ij W_c h_j
// Heads are concatenated and mixed by an affine combiner.
//
// The SAN scores every node with its level's scorer a^m, normalizes the
// scores across the levels of one aligned position (s^m_i), and mixes
// levels with cross-scale weights c^m = softmax over levels of a scorer
// applied to each level's mean feature.

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "graphite/autodiff.hpp"
#include "graphite/graph.hpp"
#include "graphite/milnet.hpp"
#include "graphite/nn.hpp"

namespace graphite {

struct GatConfig {
  std::size_t in_dim = 128;
  std::size_t heads = 4;
  std::size_t head_dim = 32;
  std::size_t out_dim = 128;
  double leaky_slope = 0.2;
  bool self_loops = true;
};

struct GatHead {
  Linear w_spatial, w_cross;
  Tensor a_spatial, a_cross;  // 2*head_dim x 1
};

struct GatLayer {
  GatConfig config;
  std::vector<GatHead> heads;
  Linear combiner;

  GatLayer() = default;
  explicit GatLayer(const GatConfig& cfg) : config(cfg), combiner(cfg.heads * cfg.head_dim, cfg.out_dim) {
    if (cfg.heads == 0) throw ValidationError("GatLayer: at least one head required");
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      heads.push_back({Linear(cfg.in_dim, cfg.head_dim), Linear(cfg.in_dim, cfg.head_dim),
                       Tensor(2 * cfg.head_dim, 1), Tensor(2 * cfg.head_dim, 1)});
    }
  }

  void init(std::mt19937_64& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(2 * config.head_dim + 1));
    std::uniform_real_distribution<double> u(-limit, limit);
    for (auto& h : heads) {
      h.w_spatial.init(rng);
      h.w_cross.init(rng);
      for (double& v : h.a_spatial.data) v = u(rng);
      for (double& v : h.a_cross.data) v = u(rng);
    }
    combiner.init(rng);
  }

  void collect(ParamList& out) {
    for (std::size_t h = 0; h < heads.size(); ++h) {
      const std::string p = "gat.head" + std::to_string(h);
      heads[h].w_spatial.collect(p + ".w_spatial", out);
      heads[h].w_cross.collect(p + ".w_cross", out);
      out.push_back({p + ".a_spatial", &heads[h].a_spatial});
      out.push_back({p + ".a_cross", &heads[h].a_cross});
    }
    combiner.collect("gat.combiner", out);
  }
};

struct SanModel {
  std::vector<Linear> level_scorers;  // a^m: E -> 1
  Linear cross_scorer;                // pooled level feature -> 1

  SanModel() = default;
  SanModel(std::size_t levels, std::size_t dim) : level_scorers(levels, Linear(dim, 1)), cross_scorer(dim, 1) {
    if (levels == 0) throw ValidationError("SanModel: at least one level required");
  }

  std::size_t num_levels() const { return level_scorers.size(); }

  void init(std::mt19937_64& rng) {
    for (auto& l : level_scorers) l.init(rng);
    cross_scorer.init(rng);
  }

  void collect(ParamList& out) {
    for (std::size_t m = 0; m < level_scorers.size(); ++m)
      level_scorers[m].collect("san.level" + std::to_string(m), out);
    cross_scorer.collect("san.cross", out);
  }
};

inline Var bind(Tape& t, Tensor& x) { return t.param(x); }
inline Var bind(Tape& t, const Tensor& x) { return t.constant(x); }

/// Directed (target <- source) neighbour lists per edge type. Spatial edges
/// and cross edges are both used in each direction; self-loops join the
/// spatial type when enabled.
struct TypedNeighborhoods {
  std::vector<std::size_t> spatial_target, spatial_source;
  std::vector<std::size_t> cross_target, cross_source;
};

inline TypedNeighborhoods neighborhoods(const HierarchicalGraph& g, bool self_loops) {
  std::vector<std::pair<std::size_t, std::size_t>> sp, cr;
  for (auto [a, b] : g.spatial_edges) {
    sp.emplace_back(a, b);
    sp.emplace_back(b, a);
  }
  if (self_loops)
    for (std::size_t i = 0; i < g.size(); ++i) sp.emplace_back(i, i);
  for (const CrossEdge& e : g.cross_edges) {
    cr.emplace_back(e.coarse, e.fine);
    cr.emplace_back(e.fine, e.coarse);
  }
  std::sort(sp.begin(), sp.end());
  std::sort(cr.begin(), cr.end());
  TypedNeighborhoods nb;
  for (auto [t, s] : sp) {
    nb.spatial_target.push_back(t);
    nb.spatial_source.push_back(s);
  }
  for (auto [t, s] : cr) {
    nb.cross_target.push_back(t);
    nb.cross_source.push_back(s);
  }
  return nb;
}

struct GatOutput {
  Var features;                   // |V| x out_dim
  std::vector<Var> head_outputs;  // |V| x head_dim each
  std::vector<Var> psi_spatial;   // per head, one row per spatial (target, source)
  std::vector<Var> psi_cross;     // per head, one row per cross (target, source)
  TypedNeighborhoods neighborhoods;
};

namespace detail {

// Aggregates one edge type for one head; returns the |V| x head_dim sum and
// the attention coefficients.
template <class LinearT, class TensorT>
std::pair<Var, Var> typed_attention(Tape& t, LinearT& w, TensorT& a, Var x,
                                    const std::vector<std::size_t>& target,
                                    const std::vector<std::size_t>& source, std::size_t n,
                                    double slope) {
  Var wh = apply(t, w, x);
  Var wt = gather_rows(wh, target);
  Var ws = gather_rows(wh, source);
  Var logits = leaky_relu(matmul(concat_cols({wt, ws}), bind(t, a)), slope);
  Var psi = segment_softmax(logits, target, n);
  Var agg = scatter_add_rows(mul_col(ws, psi), target, n);
  return {agg, psi};
}

}  // namespace detail

template <class L>
concept GatLayerRef = std::same_as<std::remove_const_t<L>, GatLayer>;

template <GatLayerRef L>
GatOutput gat_forward(Tape& t, L& layer, const HierarchicalGraph& g, Var features) {
  if (features.cols() != layer.config.in_dim) {
    throw ValidationError("gat_forward: expected feature width " +
                          std::to_string(layer.config.in_dim) + ", got " +
                          std::to_string(features.cols()));
  }
  if (g.size() == 0 || features.rows() != g.size()) {
    throw ValidationError("gat_forward: " + std::to_string(features.rows()) +
                          " feature rows for a graph of " + std::to_string(g.size()) + " nodes");
  }
  GatOutput out;
  out.neighborhoods = neighborhoods(g, layer.config.self_loops);
  const auto& nb = out.neighborhoods;
  const std::size_t n = g.size();
  for (auto& head : layer.heads) {
    std::optional<Var> h;
    if (!nb.spatial_target.empty()) {
      auto [agg, psi] = detail::typed_attention(t, head.w_spatial, head.a_spatial, features,
                                                nb.spatial_target, nb.spatial_source, n,
                                                layer.config.leaky_slope);
      h = agg;
      out.psi_spatial.push_back(psi);
    }
    if (!nb.cross_target.empty()) {
      auto [agg, psi] = detail::typed_attention(t, head.w_cross, head.a_cross, features,
                                                nb.cross_target, nb.cross_source, n,
                                                layer.config.leaky_slope);
      h = h ? add(*h, agg) : agg;
      out.psi_cross.push_back(psi);
    }
    if (!h) h = t.constant(Tensor(n, layer.config.head_dim));
    out.head_outputs.push_back(*h);
  }
  out.features = apply(t, layer.combiner, concat_cols(out.head_outputs));
  return out;
}

/// s^m_i for every (position, level) entry that has an aligned node.
struct SanLevelScores {
  Var scores;  // entries x 1
  std::vector<std::size_t> entry_position;
  std::vector<int> entry_level;
  std::vector<std::size_t> entry_node;
  std::size_t num_positions = 0;
};

template <class S>
concept SanModelRef = std::same_as<std::remove_const_t<S>, SanModel>;

template <SanModelRef S>
SanLevelScores san_level_attention(Tape& t, S& san, const HierarchicalGraph& g,
                                   std::span<const AlignedPosition> positions, Var features) {
  if (static_cast<std::size_t>(g.num_levels) > san.num_levels()) {
    throw ValidationError("san_level_attention: graph has " + std::to_string(g.num_levels) +
                          " levels, SAN has " + std::to_string(san.num_levels()));
  }
  std::vector<Var> per_level;
  std::vector<std::size_t> row_of_node(g.size(), 0);
  std::size_t offset = 0;
  for (int m = 0; m < g.num_levels; ++m) {
    auto members = g.level_members(m);
    if (members.empty()) continue;
    for (std::size_t k = 0; k < members.size(); ++k) row_of_node[members[k]] = offset + k;
    offset += members.size();
    per_level.push_back(apply(t, san.level_scorers[static_cast<std::size_t>(m)],
                              gather_rows(features, members)));
  }
  SanLevelScores out;
  out.num_positions = positions.size();
  std::vector<std::size_t> rows;
  for (std::size_t p = 0; p < positions.size(); ++p) {
    for (std::size_t m = 0; m < positions[p].node_at_level.size(); ++m) {
      if (const auto& node = positions[p].node_at_level[m]) {
        out.entry_position.push_back(p);
        out.entry_level.push_back(static_cast<int>(m));
        out.entry_node.push_back(*node);
        rows.push_back(row_of_node[*node]);
      }
    }
  }
  Var logits = gather_rows(concat_rows(per_level), rows);
  out.scores = segment_softmax(logits, out.entry_position, positions.size());
  return out;
}

/// Cross-scale weights c^m (num_levels x 1), softmax over non-empty levels;
/// empty levels get weight 0.
template <SanModelRef S>
Var san_cross_weights(Tape& t, S& san, const HierarchicalGraph& g, Var features) {
  std::vector<Var> pooled;
  std::vector<std::size_t> level_row(static_cast<std::size_t>(g.num_levels), 0);
  std::vector<std::size_t> present;
  for (int m = 0; m < g.num_levels; ++m) {
    auto members = g.level_members(m);
    if (members.empty()) continue;
    present.push_back(static_cast<std::size_t>(m));
    pooled.push_back(mean_rows(gather_rows(features, members)));
  }
  Var c = softmax(apply(t, san.cross_scorer, concat_rows(pooled)), 0);
  return scatter_add_rows(c, present, static_cast<std::size_t>(g.num_levels));
}

/// h^multi_p = sum_m c^m s^m_p h^m_p, one row per aligned position.
inline Var san_fuse(const SanLevelScores& levels, Var cross_weights, Var features) {
  std::vector<std::size_t> lv(levels.entry_level.begin(), levels.entry_level.end());
  Var w = mul(levels.scores, gather_rows(cross_weights, lv));
  Var h = gather_rows(features, levels.entry_node);
  return scatter_add_rows(mul_col(h, w), levels.entry_position, levels.num_positions);
}

/// Contrastive InfoMax loss of node embeddings (n x E) against a graph
/// embedding (1 x E). Similarities are cosines divided by tau; the positive
/// pair is (h_i, g) and the negatives are (h_i, h_j), j != i.
inline Var infomax_loss(Var nodes, Var graph_embedding, double tau) {
  if (!(tau > 0.0)) throw ValidationError("infomax_loss: temperature must be positive");
  if (nodes.rows() == 0) throw ValidationError("infomax_loss: no nodes");
  if (graph_embedding.rows() != 1 || graph_embedding.cols() != nodes.cols()) {
    detail::shape_error("infomax_loss", nodes.value(), graph_embedding.value());
  }
  Tape& t = nodes.tape();
  const std::size_t n = nodes.rows();
  Var hn = l2_normalize_rows(nodes);
  Var gn = l2_normalize_rows(graph_embedding);
  Var negatives = scale(matmul(hn, transpose(hn)), 1.0 / tau);     // n x n
  Var positives = scale(matmul(hn, transpose(gn)), 1.0 / tau);     // n x 1
  Tensor off_diag(n, n, 1.0), eye(n, n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    off_diag(i, i) = 0.0;
    eye(i, i) = 1.0;
  }
  Var eye_v = t.constant(eye);
  // Row i holds the positive logit on the diagonal and negatives elsewhere.
  Var logits = add(mul(negatives, t.constant(std::move(off_diag))), mul_col(eye_v, positives));
  Var log_ratio = sum(mul(log_softmax(logits, 1), eye_v));
  return scale(log_ratio, -1.0 / static_cast<double>(n));
}

inline constexpr double kScaleLossEpsilon = 1e-8;

/// Mean pairwise cosine similarity between two sets of rows.
inline Var mean_pairwise_similarity(Var a, Var b) {
  return sum(mul(mean_rows(l2_normalize_rows(a)), mean_rows(l2_normalize_rows(b))));
}

/// Mean cosine similarity over distinct pairs within one set; 0 when the set
/// has a single row.
inline Var mean_intra_similarity(Var a) {
  const std::size_t n = a.rows();
  Tape& t = a.tape();
  if (n < 2) return t.constant(Tensor::scalar(0.0));
  Var an = l2_normalize_rows(a);
  // sum_{i != j} <a_i, a_j> = |sum_i a_i|^2 - sum_i |a_i|^2
  Var s = matmul(t.constant(Tensor(1, n, 1.0)), an);
  Var all = sum(mul(s, s));
  Var diag = sum(mul(an, an));
  return scale(sub(all, diag), 1.0 / static_cast<double>(n * (n - 1)));
}

/// Scalewise consistency loss over level pairs m < l:
///   -sum w_m w_l log(exp(sim/tau) / (exp(sim/tau) + 1e-8))
/// with sim the mean pairwise cosine similarity of the two levels. With
/// `contrastive` set, exp(mean intra-level similarity of level m / tau) joins
/// the denominator as a negative term.
inline Var scalewise_loss(std::span<const Var> levels, std::span<const double> weights, double tau,
                          bool contrastive = false) {
  if (!(tau > 0.0)) throw ValidationError("scalewise_loss: temperature must be positive");
  if (levels.empty()) throw ValidationError("scalewise_loss: no levels");
  if (weights.size() != levels.size()) {
    throw ValidationError("scalewise_loss: " + std::to_string(weights.size()) + " weights for " +
                          std::to_string(levels.size()) + " levels");
  }
  Tape& t = levels.front().tape();
  Var total = t.constant(Tensor::scalar(0.0));
  for (std::size_t m = 0; m < levels.size(); ++m) {
    for (std::size_t l = m + 1; l < levels.size(); ++l) {
      const double w = weights[m] * weights[l];
      if (w == 0.0) continue;
      Var logit = scale(mean_pairwise_similarity(levels[m], levels[l]), 1.0 / tau);
      Var denom = add_scalar(exp(logit), kScaleLossEpsilon);
      if (contrastive) denom = add(denom, exp(scale(mean_intra_similarity(levels[m]), 1.0 / tau)));
      Var term = sub(logit, log(denom));
      total = add(total, scale(term, -w));
    }
  }
  return total;
}

struct Stage2LossConfig {
  double tau = 0.5;
  bool scale_loss_contrastive = false;
};

struct Stage2Model {
  GatLayer gat;
  SanModel san;

  Stage2Model() = default;
  Stage2Model(const GatConfig& gat_cfg, std::size_t levels, std::uint64_t seed)
      : gat(gat_cfg), san(levels, gat_cfg.out_dim) {
    std::mt19937_64 rng(seed);
    gat.init(rng);
    san.init(rng);
  }

  ParamList parameters() {
    ParamList out;
    gat.collect(out);
    san.collect(out);
    return out;
  }
};

/// A core prepared for Stage 2: graph, Stage-1 projected node features in
/// node order, and SAN alignment.
struct GraphSample {
  std::string core_id;
  HierarchicalGraph graph;
  Tensor features;
  std::vector<AlignedPosition> positions;
};

inline GraphSample make_graph_sample(std::string core_id, HierarchicalGraph graph, Tensor features) {
  if (features.rows != graph.size()) {
    throw ValidationError("make_graph_sample: " + std::to_string(features.rows) +
                          " feature rows for " + std::to_string(graph.size()) + " nodes in core " +
                          core_id);
  }
  auto positions = align_positions(graph);
  return {std::move(core_id), std::move(graph), std::move(features), std::move(positions)};
}

struct Stage2Forward {
  GatOutput gat;
  SanLevelScores levels;
  Var cross_weights;
  Var multi;
  Var graph_embedding;
  Var infomax;
  Var scale;
  Var total;
};

template <class M>
concept Stage2ModelRef = std::same_as<std::remove_const_t<M>, Stage2Model>;

/// Full Stage-2 pass. InfoMax contrasts every GAT node embedding against the
/// graph embedding g = mean over positions of h^multi; the scalewise loss
/// weights level pairs with the current c^m values, taken as constants.
template <Stage2ModelRef M>
Stage2Forward stage2_forward(Tape& t, M& model, const GraphSample& sample,
                             const Stage2LossConfig& cfg) {
  Stage2Forward f;
  Var x = t.constant(sample.features);
  f.gat = gat_forward(t, model.gat, sample.graph, x);
  Var h = f.gat.features;
  f.levels = san_level_attention(t, model.san, sample.graph, sample.positions, h);
  f.cross_weights = san_cross_weights(t, model.san, sample.graph, h);
  f.multi = san_fuse(f.levels, f.cross_weights, h);
  f.graph_embedding = mean_rows(f.multi);
  f.infomax = infomax_loss(h, f.graph_embedding, cfg.tau);

  std::vector<Var> level_rows;
  std::vector<double> weights;
  for (int m = 0; m < sample.graph.num_levels; ++m) {
    auto members = sample.graph.level_members(m);
    if (members.empty()) continue;
    level_rows.push_back(gather_rows(h, members));
    weights.push_back(f.cross_weights.value().data[static_cast<std::size_t>(m)]);
  }
  f.scale = scalewise_loss(level_rows, weights, cfg.tau, cfg.scale_loss_contrastive);
  f.total = add(f.infomax, f.scale);
  return f;
}

/// Per-node level attention: the mean of s^m over the positions aligned to
/// the node.
inline std::vector<double> level_node_scores(const SanLevelScores& levels, std::size_t num_nodes) {
  std::vector<double> sum(num_nodes, 0.0), count(num_nodes, 0.0);
  const auto& s = levels.scores.value().data;
  for (std::size_t e = 0; e < s.size(); ++e) {
    sum[levels.entry_node[e]] += s[e];
    count[levels.entry_node[e]] += 1.0;
  }
  for (std::size_t i = 0; i < num_nodes; ++i)
    if (count[i] > 0.0) sum[i] /= count[i];
  return sum;
}

/// Per-node level scorer output a^m(h^m_i), where m is the node's level.
/// Unlike s^m it does not depend on the other levels at the same position.
inline std::vector<double> level_node_logits(const SanModel& san, const HierarchicalGraph& g,
                                             const Tensor& features) {
  if (features.rows != g.size()) throw ValidationError("level_node_logits: feature rows do not match nodes");
  std::vector<double> out(g.size(), 0.0);
  for (const auto& n : g.nodes) {
    const Linear& l = san.level_scorers.at(static_cast<std::size_t>(n.level));
    double s = l.bias.data[0];
    for (std::size_t j = 0; j < features.cols; ++j) s += features.data[n.node_id * features.cols + j] * l.weight.data[j];
    out[n.node_id] = s;
  }
  return out;
}

struct Stage2Config {
  double learning_rate = 5e-4;
  std::size_t batch_graphs = 12;
  int max_epochs = 100;
  int patience = 4;
  std::uint64_t seed = 0;
  double validation_fraction = 0.2;
  Stage2LossConfig loss;
  AdamConfig adam;
};

struct Stage2Result {
  Stage2Model model;
  TrainHistory history;
  double initial_train_loss = 0.0;
  double final_train_loss = 0.0;
};

inline double evaluate_stage2(const Stage2Model& model, std::span<const GraphSample> samples,
                              const Stage2LossConfig& cfg) {
  double s = 0.0;
  for (const auto& g : samples) {
    Tape t;
    s += stage2_forward(t, model, g, cfg).total.item();
  }
  return s / static_cast<double>(samples.size());
}

/// Self-supervised Stage-2 training with Adam and early stopping on a seeded
/// validation split of the graphs. A single graph trains and validates on
/// itself.
inline Stage2Result train_stage2(std::span<const GraphSample> samples, const GatConfig& gat_cfg,
                                 std::size_t levels, const Stage2Config& cfg) {
  if (samples.empty()) throw ValidationError("train_stage2: empty graph set");
  if (!(cfg.learning_rate > 0.0) || cfg.batch_graphs == 0) {
    throw ValidationError("train_stage2: learning rate and batch size must be positive");
  }
  std::mt19937_64 rng(cfg.seed ^ 0x5851f42d4c957f2dULL);
  std::vector<std::size_t> idx(samples.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  auto n_val = static_cast<std::size_t>(
      std::lround(cfg.validation_fraction * static_cast<double>(samples.size())));
  if (samples.size() >= 2) n_val = std::clamp<std::size_t>(n_val, 1, samples.size() - 1);
  else n_val = 0;
  std::vector<GraphSample> train, val;
  std::vector<std::size_t> vi(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> ti(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  std::sort(vi.begin(), vi.end());
  std::sort(ti.begin(), ti.end());
  for (auto i : ti) train.push_back(samples[i]);
  for (auto i : vi) val.push_back(samples[i]);
  if (val.empty()) val = train;

  Stage2Result result{Stage2Model(gat_cfg, levels, cfg.seed), {}, 0.0, 0.0};
  Stage2Model& model = result.model;
  ParamList params = model.parameters();
  AdamState state(params);
  EarlyStopping stopper(cfg.patience);

  result.initial_train_loss = evaluate_stage2(model, train, cfg.loss);
  result.history.initial_validation_loss = evaluate_stage2(model, val, cfg.loss);
  auto best = snapshot(params);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_graphs) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_graphs);
      Tape t;
      std::vector<Var> losses;
      for (std::size_t i = start; i < stop; ++i)
        losses.push_back(stage2_forward(t, model, train[order[i]], cfg.loss).total);
      Var loss = mean(concat_rows(losses));
      zero_grads(params);
      t.backward(loss);
      adam_step(params, state, cfg.learning_rate, cfg.adam);
      loss_sum += loss.item() * static_cast<double>(stop - start);
    }
    const double val_loss = evaluate_stage2(model, val, cfg.loss);
    if (!std::isfinite(val_loss)) throw RuntimeError("train_stage2: validation loss diverged");
    result.history.epochs.push_back({epoch, loss_sum / static_cast<double>(train.size()), val_loss});
    const bool stop = stopper.update(val_loss);
    if (stopper.improved()) best = snapshot(params);
    if (stop) break;
  }
  zero_grads(params);
  restore(params, best);
  result.history.best_epoch = stopper.best_epoch();
  result.history.best_validation_loss = stopper.best();
  result.final_train_loss = evaluate_stage2(model, train, cfg.loss);
  return result;
}

}  // namespace graphite
