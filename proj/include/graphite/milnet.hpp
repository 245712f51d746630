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

// Stage 1: attention-based multiple-instance classifier over the patches of
// one core.
//
//   patches (N x D) -> patch projector D->512->128
//                   -> q, k, v (128 -> d_k) ; alpha = softmax_i(q_i . k_i / sqrt(d_k))
//                   -> z = sum_i alpha_i v_i
//                   -> patient projector 128->512->128 -> sigmoid(W p + b)
//
// Each patch is scored by its own q_i . k_i product (a gated self-score, not
// pairwise attention).

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "graphite/autodiff.hpp"
#include "graphite/nn.hpp"

namespace graphite {

/// One core as a MIL bag: N patch feature rows and a binary label.
struct Bag {
  std::string core_id;
  Tensor patches;  // N x D
  int label = 0;
};

struct MilModelConfig {
  std::size_t input_dim = 512;
  std::size_t projector_hidden = 512;
  std::size_t embed_dim = 128;
  std::size_t key_dim = 128;
  std::size_t patient_hidden = 512;
  std::size_t patient_dim = 128;
};

struct MilModel {
  MilModelConfig config;
  Linear projector1, projector2;
  Linear query, key, value;
  Linear patient1, patient2;
  Linear classifier;

  MilModel() = default;
  explicit MilModel(const MilModelConfig& cfg)
      : config(cfg),
        projector1(cfg.input_dim, cfg.projector_hidden),
        projector2(cfg.projector_hidden, cfg.embed_dim),
        query(cfg.embed_dim, cfg.key_dim),
        key(cfg.embed_dim, cfg.key_dim),
        value(cfg.embed_dim, cfg.embed_dim),
        patient1(cfg.embed_dim, cfg.patient_hidden),
        patient2(cfg.patient_hidden, cfg.patient_dim),
        classifier(cfg.patient_dim, 1) {}

  MilModel(const MilModelConfig& cfg, std::uint64_t seed) : MilModel(cfg) {
    std::mt19937_64 rng(seed);
    for (Linear* l : layers()) l->init(rng);
  }

  std::vector<Linear*> layers() {
    return {&projector1, &projector2, &query,    &key,
            &value,      &patient1,   &patient2, &classifier};
  }

  ParamList parameters() {
    ParamList out;
    projector1.collect("patch_projector.0", out);
    projector2.collect("patch_projector.1", out);
    query.collect("attention.query", out);
    key.collect("attention.key", out);
    value.collect("attention.value", out);
    patient1.collect("patient_projector.0", out);
    patient2.collect("patient_projector.1", out);
    classifier.collect("classifier", out);
    return out;
  }
};

template <class M>
concept MilModelRef = std::same_as<std::remove_const_t<M>, MilModel>;

/// Binds a layer either as trainable parameters (mutable model) or as
/// constants (const model).
inline Var apply(Tape& t, Linear& l, Var x) {
  return add_bias(matmul(x, t.param(l.weight)), t.param(l.bias));
}
inline Var apply(Tape& t, const Linear& l, Var x) {
  return add_bias(matmul(x, t.constant(l.weight)), t.constant(l.bias));
}

/// Patch projector: N x D -> N x embed_dim.
template <MilModelRef M>
Var project_patches(Tape& t, M& model, Var patches) {
  if (patches.cols() != model.config.input_dim) {
    throw ValidationError("project_patches: expected feature width " +
                          std::to_string(model.config.input_dim) + ", got " +
                          std::to_string(patches.cols()));
  }
  return apply(t, model.projector2, relu(apply(t, model.projector1, patches)));
}

struct MilAttention {
  Var z;      // 1 x embed_dim
  Var alpha;  // N x 1
};

template <MilModelRef M>
MilAttention mil_attention(Tape& t, M& model, Var embeddings) {
  if (embeddings.rows() == 0) throw ValidationError("mil_attention: empty bag");
  Var q = apply(t, model.query, embeddings);
  Var k = apply(t, model.key, embeddings);
  Var v = apply(t, model.value, embeddings);
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(model.config.key_dim));
  Var scores = scale(sum_cols(mul(q, k)), inv_sqrt_dk);
  Var alpha = softmax(scores, 0);
  Var z = matmul(transpose(alpha), v);
  return {z, alpha};
}

/// Probability that the core holds tumour: sigmoid(classifier(patient(z))).
template <MilModelRef M>
Var classify_core(Tape& t, M& model, Var z) {
  Var p = apply(t, model.patient2, relu(apply(t, model.patient1, z)));
  return sigmoid(apply(t, model.classifier, p));
}

struct MilForward {
  Var embeddings;
  Var alpha;
  Var z;
  Var probability;  // 1 x 1
};

template <MilModelRef M>
MilForward mil_forward(Tape& t, M& model, const Bag& bag) {
  Var x = t.constant(bag.patches);
  Var e = project_patches(t, model, x);
  auto [z, alpha] = mil_attention(t, model, e);
  return {e, alpha, z, classify_core(t, model, z)};
}

inline constexpr double kBceClamp = 1e-7;

/// Mean binary cross-entropy; predictions (K x 1) are clamped into
/// [1e-7, 1 - 1e-7].
inline Var bce_loss(Var predictions, std::span<const int> labels) {
  if (predictions.cols() != 1 || predictions.rows() != labels.size()) {
    throw ValidationError("bce_loss: " + std::to_string(labels.size()) +
                          " labels for predictions of shape " + shape_str(predictions.value()));
  }
  if (labels.empty()) throw ValidationError("bce_loss: no predictions");
  Tape& t = predictions.tape();
  Tensor y(labels.size(), 1), not_y(labels.size(), 1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ValidationError("bce_loss: labels must be 0 or 1");
    y.data[i] = labels[i];
    not_y.data[i] = 1.0 - labels[i];
  }
  Var p = clamp(predictions, kBceClamp, 1.0 - kBceClamp);
  Var pos = mul(t.constant(std::move(y)), log(p));
  Var negv = mul(t.constant(std::move(not_y)), log(add_scalar(neg(p), 1.0)));
  return neg(mean(add(pos, negv)));
}

/// Value-only helpers on an immutable model.
inline double predict(const MilModel& model, const Bag& bag) {
  Tape t;
  return mil_forward(t, model, bag).probability.item();
}

inline std::vector<double> attention_weights(const MilModel& model, const Bag& bag) {
  Tape t;
  return mil_forward(t, model, bag).alpha.value().data;
}

inline Tensor embed_patches(const MilModel& model, const Tensor& patches) {
  Tape t;
  return project_patches(t, model, t.constant(patches)).value();
}

struct Stage1Config {
  double learning_rate = 1e-3;
  std::size_t batch_bags = 12;
  int max_epochs = 150;
  int patience = 4;
  std::uint64_t seed = 0;
  AdamConfig adam;
};

struct Stage1Result {
  MilModel model;
  TrainHistory history;
};

/// Mean BCE of an immutable model over a set of bags.
inline double evaluate_bce(const MilModel& model, std::span<const Bag> bags) {
  Tape t;
  std::vector<Var> probs;
  std::vector<int> labels;
  for (const Bag& b : bags) {
    probs.push_back(mil_forward(t, model, b).probability);
    labels.push_back(b.label);
  }
  return bce_loss(concat_rows(probs), labels).item();
}

/// Splits bags into (train, validation) with `fraction` of each label in
/// validation. Each class keeps at least one bag on each side when it has two
/// or more.
inline std::pair<std::vector<Bag>, std::vector<Bag>> stratified_split(std::span<const Bag> bags,
                                                                      double fraction,
                                                                      std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Bag> train, val;
  for (int label : {0, 1}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < bags.size(); ++i)
      if (bags[i].label == label) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    auto n_val = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(idx.size())));
    if (idx.size() >= 2) n_val = std::clamp<std::size_t>(n_val, 1, idx.size() - 1);
    std::vector<std::size_t> v(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::size_t> tr(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
    std::sort(v.begin(), v.end());
    std::sort(tr.begin(), tr.end());
    for (auto i : v) val.push_back(bags[i]);
    for (auto i : tr) train.push_back(bags[i]);
  }
  return {std::move(train), std::move(val)};
}

/// Minibatch Adam on the mean BCE with early stopping on validation loss.
/// Returns the weights of the best validation epoch.
inline Stage1Result train_stage1(std::span<const Bag> train, std::span<const Bag> validation,
                                 const MilModelConfig& model_config, const Stage1Config& cfg) {
  if (train.empty() || validation.empty()) {
    throw ValidationError("train_stage1: training and validation splits must be non-empty");
  }
  bool has0 = false, has1 = false;
  for (const Bag& b : train) {
    if (b.patches.rows == 0) throw ValidationError("train_stage1: bag " + b.core_id + " is empty");
    (b.label == 1 ? has1 : has0) = true;
  }
  if (!has0 || !has1) {
    throw ValidationError("train_stage1: training split must contain both labels");
  }
  if (!(cfg.learning_rate > 0.0) || cfg.batch_bags == 0) {
    throw ValidationError("train_stage1: learning rate and batch size must be positive");
  }

  Stage1Result result{MilModel(model_config, cfg.seed), {}};
  MilModel& model = result.model;
  ParamList params = model.parameters();
  AdamState state(params);
  EarlyStopping stopper(cfg.patience);
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);

  result.history.initial_validation_loss = evaluate_bce(model, validation);
  auto best = snapshot(params);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_bags) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_bags);
      Tape t;
      std::vector<Var> probs;
      std::vector<int> labels;
      for (std::size_t i = start; i < stop; ++i) {
        const Bag& b = train[order[i]];
        probs.push_back(mil_forward(t, model, b).probability);
        labels.push_back(b.label);
      }
      Var loss = bce_loss(concat_rows(probs), labels);
      zero_grads(params);
      t.backward(loss);
      adam_step(params, state, cfg.learning_rate, cfg.adam);
      loss_sum += loss.item() * static_cast<double>(stop - start);
    }
    const double val_loss = evaluate_bce(model, validation);
    if (!std::isfinite(val_loss)) throw RuntimeError("train_stage1: validation loss diverged");
    result.history.epochs.push_back({epoch, loss_sum / static_cast<double>(train.size()), val_loss});
    const bool stop = stopper.update(val_loss);
    if (stopper.improved()) best = snapshot(params);
    if (stop) break;
  }
  zero_grads(params);
  restore(params, best);
  result.history.best_epoch = stopper.best_epoch();
  result.history.best_validation_loss = stopper.best();
  return result;
}

}  // namespace graphite
