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

#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "graphite/autodiff.hpp"

namespace graphite {

/// Named reference to a learnable tensor, in a stable order.
struct NamedParam {
  std::string name;
  Tensor* tensor;
};
using ParamList = std::vector<NamedParam>;

/// Affine map x W + b with W stored in x out.
struct Linear {
  Tensor weight;
  Tensor bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out) : weight(in, out), bias(1, out) {}

  std::size_t in_features() const { return weight.rows; }
  std::size_t out_features() const { return weight.cols; }

  /// Glorot-uniform weights in +-sqrt(6 / (in + out)); zero bias.
  void init(std::mt19937_64& rng) {
    const double limit =
        std::sqrt(6.0 / static_cast<double>(weight.rows + weight.cols));
    std::uniform_real_distribution<double> u(-limit, limit);
    for (double& w : weight.data) w = u(rng);
    std::fill(bias.data.begin(), bias.data.end(), 0.0);
  }

  void collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".weight", &weight});
    out.push_back({prefix + ".bias", &bias});
  }
};

inline void zero_grads(const ParamList& params) {
  for (const auto& p : params) p.tensor->zero_grad();
}

inline std::size_t count_parameters(const ParamList& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor->size();
  return n;
}

/// Deep copy of parameter values, used to keep the best epoch's weights.
inline std::vector<std::vector<double>> snapshot(const ParamList& params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.tensor->data);
  return out;
}

inline void restore(const ParamList& params, const std::vector<std::vector<double>>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor->data = values[i];
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// First and second moment buffers for every parameter.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;

  explicit AdamState(const ParamList& params) {
    for (const auto& p : params) {
      m.emplace_back(p.tensor->size(), 0.0);
      v.emplace_back(p.tensor->size(), 0.0);
    }
  }
};

/// One bias-corrected Adam update from the grads stored on each parameter.
/// A parameter without a grad buffer is treated as having zero gradient.
inline void adam_step(const ParamList& params, AdamState& state, double learning_rate,
                      const AdamConfig& cfg = {}) {
  if (state.m.size() != params.size()) {
    throw ValidationError("adam_step: optimizer state does not match parameter list");
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor& p = *params[k].tensor;
    if (state.m[k].size() != p.size()) {
      throw ValidationError("adam_step: moment buffer shape mismatch for " + params[k].name);
    }
    if (p.grad) {
      for (std::size_t i = 0; i < p.grad->size(); ++i) {
        if (!std::isfinite((*p.grad)[i])) {
          throw RuntimeError("adam_step: non-finite gradient in parameter " + params[k].name +
                             " at entry " + std::to_string(i));
        }
      }
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k].tensor;
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = p.grad ? (*p.grad)[i] : 0.0;
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p.data[i] -= learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    }
  }
}

/// Tracks the best validation loss; signals a stop after `patience`
/// consecutive epochs without strict improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {
    if (patience < 1) throw ValidationError("EarlyStopping: patience must be >= 1");
  }

  /// Returns true when training should stop.
  bool update(double validation_loss) {
    ++epoch_;
    if (validation_loss < best_) {
      best_ = validation_loss;
      best_epoch_ = epoch_;
      stale_ = 0;
      improved_ = true;
    } else {
      ++stale_;
      improved_ = false;
    }
    return stale_ >= patience_;
  }

  bool improved() const { return improved_; }
  double best() const { return best_; }
  int best_epoch() const { return best_epoch_; }
  int epochs_seen() const { return epoch_; }

 private:
  int patience_;
  int epoch_ = 0;
  int best_epoch_ = 0;
  int stale_ = 0;
  bool improved_ = false;
  double best_ = std::numeric_limits<double>::infinity();
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double validation_loss = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double initial_validation_loss = 0.0;
  double best_validation_loss = 0.0;
};

}  // namespace graphite
