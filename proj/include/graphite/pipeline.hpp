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

// End-to-end orchestration: configuration, the two training stages,
// per-core saliency, evaluation, and artifact emission with a run manifest.

#pragma once

#include <openssl/evp.h>

#include <json.hpp>

#include <atomic>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "graphite/checkpoint.hpp"
#include "graphite/dataset.hpp"
#include "graphite/gatsan.hpp"
#include "graphite/graph.hpp"
#include "graphite/metrics.hpp"
#include "graphite/milnet.hpp"
#include "graphite/png.hpp"
#include "graphite/saliency.hpp"

namespace graphite {

inline constexpr const char* kOutputRootEnv = "GRAPHITE_OUTPUT_ROOT";

/// Every tunable of a run. JSON keys and CLI flags use the field names.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string variant = "v2";
  std::string output_dir;  // empty: $GRAPHITE_OUTPUT_ROOT or ./graphite_out

  double spatial_threshold = 1.5;
  double scale_threshold = 1.0;

  std::vector<double> rho{0.5, 0.3, 0.2};
  std::vector<double> level_sigma{1.0, 2.0, 4.0};
  std::vector<double> base_weights{0.6, 0.3, 0.1};
  double percentile = 90.0;
  double mil_sigma = 2.0;
  double gradient_sigma = 1.0;

  double stage1_lr = 1e-3;
  std::size_t stage1_batch = 12;
  int stage1_max_epochs = 150;
  int stage1_patience = 4;
  double stage1_validation_fraction = 0.2;
  std::size_t projector_hidden = 512;
  std::size_t embed_dim = 128;
  std::size_t key_dim = 128;
  std::size_t patient_hidden = 512;
  std::size_t patient_dim = 128;

  double stage2_lr = 5e-4;
  std::size_t stage2_batch = 12;
  int stage2_max_epochs = 100;
  int stage2_patience = 4;
  double stage2_validation_fraction = 0.2;
  std::size_t gat_heads = 4;
  std::size_t gat_head_dim = 32;
  std::size_t gat_out_dim = 128;
  double tau = 0.5;
  bool scale_loss_contrastive = false;

  double grid_start = 0.01;
  double grid_stop = 0.99;
  double grid_step = 0.01;
  double operating_threshold = 0.5;
  std::string pooling = "pooled";

  std::size_t workers = 0;  // 0: hardware concurrency
  bool skip_train = false;
  std::string checkpoint_dir;  // empty: <output_dir>/checkpoints

  void validate() const {
    auto positive = [](double v, const char* name) {
      if (!(v > 0.0)) throw ValidationError(std::string("config: ") + name + " must be > 0");
    };
    parse_variant(variant);
    positive(spatial_threshold, "spatial_threshold");
    positive(scale_threshold, "scale_threshold");
    positive(stage1_lr, "stage1_lr");
    positive(stage2_lr, "stage2_lr");
    positive(tau, "tau");
    positive(mil_sigma, "mil_sigma");
    positive(gradient_sigma, "gradient_sigma");
    positive(grid_step, "grid_step");
    if (stage1_batch == 0 || stage2_batch == 0) throw ValidationError("config: batch sizes must be > 0");
    if (stage1_max_epochs < 1 || stage2_max_epochs < 1) throw ValidationError("config: max_epochs must be >= 1");
    if (stage1_patience < 1 || stage2_patience < 1) throw ValidationError("config: patience must be >= 1");
    for (double f : {stage1_validation_fraction, stage2_validation_fraction})
      if (!(f > 0.0 && f < 1.0)) throw ValidationError("config: validation fractions must lie in (0, 1)");
    if (rho.size() != level_sigma.size()) throw ValidationError("config: rho and level_sigma lengths differ");
    for (double s : level_sigma) positive(s, "level_sigma");
    if (base_weights.size() != 3) throw ValidationError("config: base_weights needs 3 entries");
    if (percentile < 0.0 || percentile > 100.0) throw ValidationError("config: percentile must lie in [0, 100]");
    if (pooling != "pooled" && pooling != "macro") throw ValidationError("config: pooling must be pooled or macro");
    if (gat_heads == 0 || gat_head_dim == 0 || gat_out_dim == 0 || embed_dim == 0 || key_dim == 0 ||
        projector_hidden == 0 || patient_hidden == 0 || patient_dim == 0)
      throw ValidationError("config: layer sizes must be > 0");
    grid().validate();
  }

  ThresholdGrid grid() const { return {grid_start, grid_stop, grid_step, operating_threshold}; }
  GraphThresholds thresholds() const { return {spatial_threshold, scale_threshold}; }
  Pooling pooling_mode() const { return pooling == "macro" ? Pooling::Macro : Pooling::Pooled; }

  FusionConfig fusion(int raster_downsample) const {
    FusionConfig f;
    f.rho = rho;
    f.level_sigma = level_sigma;
    f.base = base_weights;
    f.percentile = percentile;
    f.mil_sigma = mil_sigma;
    f.gradient_sigma = gradient_sigma;
    f.raster_downsample = raster_downsample;
    return f;
  }

  MilModelConfig mil_config(std::size_t input_dim) const {
    return {input_dim, projector_hidden, embed_dim, key_dim, patient_hidden, patient_dim};
  }

  GatConfig gat_config() const {
    GatConfig g;
    g.in_dim = embed_dim;
    g.heads = gat_heads;
    g.head_dim = gat_head_dim;
    g.out_dim = gat_out_dim;
    return g;
  }

  Stage1Config stage1() const {
    Stage1Config s;
    s.learning_rate = stage1_lr;
    s.batch_bags = stage1_batch;
    s.max_epochs = stage1_max_epochs;
    s.patience = stage1_patience;
    s.seed = seed;
    return s;
  }

  Stage2Config stage2() const {
    Stage2Config s;
    s.learning_rate = stage2_lr;
    s.batch_graphs = stage2_batch;
    s.max_epochs = stage2_max_epochs;
    s.patience = stage2_patience;
    s.seed = seed + 1;
    s.validation_fraction = stage2_validation_fraction;
    s.loss = {tau, scale_loss_contrastive};
    return s;
  }

  std::filesystem::path resolved_output() const {
    if (!output_dir.empty()) return output_dir;
    if (const char* env = std::getenv(kOutputRootEnv); env && *env) return env;
    return "graphite_out";
  }
  std::filesystem::path resolved_checkpoints() const {
    return checkpoint_dir.empty() ? resolved_output() / "checkpoints" : std::filesystem::path(checkpoint_dir);
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(
    RunConfig, seed, variant, output_dir, spatial_threshold, scale_threshold, rho, level_sigma, base_weights,
    percentile, mil_sigma, gradient_sigma, stage1_lr, stage1_batch, stage1_max_epochs, stage1_patience,
    stage1_validation_fraction, projector_hidden, embed_dim, key_dim, patient_hidden, patient_dim, stage2_lr,
    stage2_batch, stage2_max_epochs, stage2_patience, stage2_validation_fraction, gat_heads, gat_head_dim,
    gat_out_dim, tau, scale_loss_contrastive, grid_start, grid_stop, grid_step, operating_threshold, pooling,
    workers, skip_train, checkpoint_dir)

/// Reads a JSON config; unknown keys are rejected so typos do not pass
/// silently.
inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config " + path + ": " + e.what());
  }
  const nlohmann::json known = RunConfig{};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key())) throw ValidationError("config " + path + ": unknown key '" + it.key() + "'");
  try {
    return j.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config " + path + ": " + e.what());
  }
}

/// Config echo for the run manifest; location fields are left out so that
/// runs in different directories can be compared.
inline nlohmann::ordered_json config_echo(const RunConfig& cfg) {
  nlohmann::json j = cfg;
  j.erase("output_dir");
  j.erase("checkpoint_dir");
  j.erase("workers");
  nlohmann::ordered_json out;
  for (auto it = j.begin(); it != j.end(); ++it) out[it.key()] = it.value();
  return out;
}

inline std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw RuntimeError("cannot read " + path.string() + " for hashing");
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw RuntimeError("sha256 init failed");
  std::vector<char> buf(1 << 16);
  while (is) {
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (is.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return hex.str();
}

/// Runs fn(i) for i in [0, n) on up to `workers` threads. The first
/// exception, by index, is rethrown after all workers finish.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, std::max<std::size_t>(n, 1));
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Wraps an exception with a stage tag, keeping its exit-code class.
template <class F>
auto with_stage(const char* stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ValidationError& e) {
    throw ValidationError(std::string(stage) + ": " + e.what());
  } catch (const RuntimeError& e) {
    throw RuntimeError(std::string(stage) + ": " + e.what());
  } catch (const std::exception& e) {
    throw RuntimeError(std::string(stage) + ": " + e.what());
  }
}

// ---------------------------------------------------------------- stages

inline std::vector<Bag> bags_of(const std::vector<const CoreRecord*>& cores) {
  std::vector<Bag> out;
  for (const auto* c : cores) out.push_back(core_bag(*c));
  return out;
}

inline Stage1Result run_stage1(const FeatureDataset& ds, const RunConfig& cfg) {
  const auto bags = bags_of(ds.split("train"));
  auto [train, val] = stratified_split(bags, cfg.stage1_validation_fraction, cfg.seed);
  if (val.empty()) val = train;
  return train_stage1(train, val, cfg.mil_config(ds.feature_dim), cfg.stage1());
}

inline GraphSample core_graph_sample(const CoreRecord& c, const MilModel& mil, const RunConfig& cfg) {
  HierarchicalGraph g = build_hierarchical_graph(core_patch_nodes(c), cfg.thresholds());
  Tensor x = node_features(c, g);
  return make_graph_sample(c.id, std::move(g), embed_patches(mil, x));
}

inline Stage2Result run_stage2(const FeatureDataset& ds, const MilModel& mil, const RunConfig& cfg) {
  const auto cores = ds.split("train");
  std::vector<GraphSample> samples(cores.size());
  parallel_for(cores.size(), cfg.workers, [&](std::size_t i) { samples[i] = core_graph_sample(*cores[i], mil, cfg); });
  return train_stage2(samples, cfg.gat_config(), static_cast<std::size_t>(ds.num_levels), cfg.stage2());
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  const auto n = static_cast<double>(a.size());
  if (a.size() != b.size() || a.size() < 2) return 0.0;
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return saa > 0 && sbb > 0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

/// Average ranks (ties share the mean rank).
inline std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j);
    i = j + 1;
  }
  return r;
}

inline double spearman(std::span<const double> a, std::span<const double> b) {
  return pearson(ranks(a), ranks(b));
}

/// Per-node saliency scores of every level: the level scorer outputs on the
/// Stage-2 node embeddings.
inline std::vector<double> core_level_scores(const Stage2Model& model, const GraphSample& sample) {
  Tape t;
  const GatOutput gat = gat_forward(t, model.gat, sample.graph, t.constant(sample.features));
  return level_node_logits(model.san, sample.graph, gat.features.value());
}

struct Orientation {
  std::vector<bool> negated;
  std::vector<double> correlation;  // mean rank correlation before orientation
};

/// The self-supervised objective leaves the sign of each level scorer a^m
/// unidentified. Per level, the scorer is negated when its node scores
/// rank-correlate negatively, on average over the training tumour cores,
/// with the mean Stage-1 attention of the level-0 patches under each node.
inline Orientation orient_level_scorers(Stage2Model& model, const FeatureDataset& ds, const MilModel& mil,
                                        const RunConfig& cfg) {
  std::vector<const CoreRecord*> cores;
  for (const auto* c : ds.split("train"))
    if (c->label == 1) cores.push_back(c);
  const auto levels = model.san.num_levels();
  std::vector<std::vector<double>> corr(cores.size(), std::vector<double>(levels, 0.0));
  std::vector<std::vector<int>> used(cores.size(), std::vector<int>(levels, 0));
  parallel_for(cores.size(), cfg.workers, [&](std::size_t k) {
    const CoreRecord& c = *cores[k];
    const GraphSample sample = core_graph_sample(c, mil, cfg);
    const auto scores = core_level_scores(model, sample);
    const auto alpha = attention_weights(mil, core_bag(c));
    const auto& cells = c.levels[0].cells;
    for (std::size_t m = 0; m < levels; ++m) {
      std::vector<double> s, r;
      for (const auto& n : sample.graph.nodes) {
        if (n.level != static_cast<int>(m)) continue;
        double sum = 0.0, cnt = 0.0;
        for (std::size_t i = 0; i < cells.size(); ++i)
          if ((cells[i].row >> m) == n.grid_row && (cells[i].col >> m) == n.grid_col) {
            sum += alpha[i];
            cnt += 1.0;
          }
        if (cnt == 0.0) continue;
        s.push_back(scores[n.node_id]);
        r.push_back(sum / cnt);
      }
      if (s.size() >= 2) {
        corr[k][m] = spearman(s, r);
        used[k][m] = 1;
      }
    }
  });
  Orientation out{std::vector<bool>(levels, false), std::vector<double>(levels, 0.0)};
  for (std::size_t m = 0; m < levels; ++m) {
    double sum = 0.0;
    int n = 0;
    for (std::size_t k = 0; k < cores.size(); ++k) {
      sum += corr[k][m];
      n += used[k][m];
    }
    out.correlation[m] = n ? sum / n : 0.0;
    if (out.correlation[m] < 0.0) {
      out.negated[m] = true;
      Linear& l = model.san.level_scorers[m];
      for (double& v : l.weight.data) v = -v;
      for (double& v : l.bias.data) v = -v;
    }
  }
  return out;
}

inline void write_history_csv(const std::filesystem::path& path, const TrainHistory& h) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeError("cannot write " + path.string());
  os << "epoch,train_loss,validation_loss\n";
  os << "0,," << format_double(h.initial_validation_loss) << '\n';
  for (const auto& e : h.epochs)
    os << e.epoch << ',' << format_double(e.train_loss) << ',' << format_double(e.validation_loss) << '\n';
}

inline void save_single_section(const std::filesystem::path& path, CheckpointSection s) {
  std::filesystem::create_directories(path.parent_path());
  Checkpoint ck;
  ck.sections.push_back(std::move(s));
  save_checkpoint(path.string(), ck);
}

inline MilModel load_mil_checkpoint(const std::filesystem::path& path, const std::string& needed_by) {
  if (!std::filesystem::exists(path)) {
    throw ValidationError("missing Stage-1 checkpoint " + path.string() + " (required by " + needed_by + ")");
  }
  return mil_from_section(load_checkpoint(path.string()).require("milnet"));
}

inline Stage2Model load_stage2_checkpoint(const std::filesystem::path& path, const std::string& needed_by) {
  if (!std::filesystem::exists(path)) {
    throw ValidationError("missing Stage-2 checkpoint " + path.string() + " (required by " + needed_by + ")");
  }
  return stage2_from_section(load_checkpoint(path.string()).require("gatsan"));
}

// ---------------------------------------------------------------- saliency

inline constexpr const char* kMethodNames[] = {"graphite-base", "graphite-v1", "graphite-v2", "mil",
                                               "gradient",      "uniform",     "random"};
inline constexpr std::size_t kNumMethods = std::size(kMethodNames);

struct CoreSaliency {
  std::string core_id;
  std::vector<RasterMap> maps;  // indexed like kMethodNames
  std::vector<double> v2_weights;
};

inline std::uint64_t core_seed(std::uint64_t seed, const std::string& id) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char ch : id) h = (h ^ ch) * 1099511628211ULL;
  return h ^ (seed * 0x9e3779b97f4a7c15ULL);
}

/// Every method's map for one core, all on the common grid and in [0, 1].
inline CoreSaliency core_saliency(const CoreRecord& c, const FeatureDataset& ds, const MilModel& mil,
                                  const Stage2Model& ssl, const RunConfig& cfg) {
  const FusionConfig fusion = cfg.fusion(ds.raster_downsample);
  const std::size_t w = ds.grid_width(c), h = ds.grid_height(c);
  const int down = ds.raster_downsample;
  const Bag bag = core_bag(c);
  const auto& cells = c.levels[0].cells;

  const GraphSample sample = core_graph_sample(c, mil, cfg);
  const auto node_scores = core_level_scores(ssl, sample);
  const auto levels = level_maps(sample.graph, node_scores, w, h, down, fusion.norm_epsilon);

  VariantInputs in;
  in.combined = multilevel_fuse(levels, fusion);
  in.mil = gaussian_smooth(mil_attention_map(mil, bag, cells, w, h, down), fusion.mil_sigma);
  in.gradient = gaussian_smooth(gradient_saliency_map(mil, bag, cells, w, h, down), fusion.gradient_sigma);

  CoreSaliency out;
  out.core_id = c.id;
  out.maps.push_back(graphite_variant(Variant::Base, in, fusion).map);
  out.maps.push_back(graphite_variant(Variant::V1, in, fusion).map);
  auto v2 = graphite_variant(Variant::V2, in, fusion);
  out.v2_weights = v2.weights;
  out.maps.push_back(std::move(v2.map));
  out.maps.push_back(normalize_minmax(*in.mil, fusion.norm_epsilon));
  out.maps.push_back(normalize_minmax(*in.gradient, fusion.norm_epsilon));
  out.maps.push_back(RasterMap(w, h, 0.5));
  RasterMap rnd(w, h);
  std::mt19937_64 rng(core_seed(cfg.seed, c.id));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double& v : rnd.values) v = u(rng);
  out.maps.push_back(std::move(rnd));
  return out;
}

/// Test cores used for pixel evaluation: tumour cores with a mask.
inline std::vector<const CoreRecord*> evaluation_cores(const FeatureDataset& ds) {
  std::vector<const CoreRecord*> out;
  for (const auto* c : ds.split("test"))
    if (c->label == 1 && c->mask) out.push_back(c);
  return out;
}

inline ScoredPixels scored_pixels(const RasterMap& map, const std::vector<std::uint8_t>& mask) {
  if (map.size() != mask.size()) throw ValidationError("saliency map and mask sizes differ");
  return {map.values, mask};
}

inline void write_grid_csv(const std::filesystem::path& path, const RasterMap& map) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeError("cannot write " + path.string());
  for (std::size_t y = 0; y < map.height; ++y) {
    for (std::size_t x = 0; x < map.width; ++x) {
      if (x) os << ',';
      os << format_double(map.at(x, y));
    }
    os << '\n';
  }
}

inline RasterMap read_grid_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("missing saliency grid " + path.string());
  RasterMap map;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::size_t n = 0;
    const char* p = line.data();
    const char* end = p + line.size();
    while (p < end) {
      double v = 0.0;
      auto [q, ec] = std::from_chars(p, end, v);
      if (ec != std::errc()) throw ValidationError(path.string() + " line " + std::to_string(lineno) + ": bad value");
      map.values.push_back(v);
      ++n;
      p = q;
      if (p < end && *p == ',') ++p;
    }
    if (map.height == 0) map.width = n;
    else if (n != map.width) {
      throw ValidationError(path.string() + " line " + std::to_string(lineno) + ": " + std::to_string(n) +
                            " values, expected " + std::to_string(map.width));
    }
    ++map.height;
  }
  if (map.height == 0) throw ValidationError(path.string() + ": empty grid");
  return map;
}

/// Grid CSV, grayscale PNG, and colour heatmap for one map.
inline void export_map(const std::filesystem::path& stem, const RasterMap& map) {
  std::filesystem::create_directories(stem.parent_path());
  write_grid_csv(stem.string() + ".csv", map);
  write_gray_png(stem.string() + ".png", to_gray(map));
  write_rgb_png(stem.string() + "_heat.png", to_heatmap(map));
}

// ---------------------------------------------------------------- reports

struct EvaluationResult {
  std::vector<MetricReport> reports;  // sorted comparison
  std::vector<MetricCurves> curves;   // indexed like kMethodNames
};

inline EvaluationResult evaluate_saliency(const std::vector<CoreSaliency>& saliency,
                                          const std::vector<const CoreRecord*>& cores, const RunConfig& cfg) {
  EvaluationResult r;
  std::vector<std::string> ids;
  for (const auto* c : cores) ids.push_back(c->id);
  for (std::size_t m = 0; m < kNumMethods; ++m) {
    std::vector<ScoredPixels> px;
    for (std::size_t i = 0; i < cores.size(); ++i) px.push_back(scored_pixels(saliency[i].maps[m], *cores[i]->mask));
    MetricCurves curves;
    r.reports.push_back(evaluate_method(kMethodNames[m], px, ids, cfg.grid(), cfg.pooling_mode(), &curves));
    r.curves.push_back(std::move(curves));
  }
  r.reports = compare_methods(std::move(r.reports));
  return r;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeError("cannot write " + path.string());
  os << text;
}

inline void write_reports(const std::filesystem::path& out, const EvaluationResult& ev) {
  std::ostringstream table;
  write_report_csv(table, ev.reports);
  write_text(out / "reports" / "comparison.csv", table.str());

  std::ostringstream per_core;
  per_core << "method,core_id,ap,iou\n";
  for (const auto& r : ev.reports)
    for (const auto& c : r.per_core)
      per_core << r.method << ',' << c.core_id << ',' << (c.ap ? format_double(*c.ap) : "") << ','
               << format_double(c.iou) << '\n';
  write_text(out / "reports" / "per_core.csv", per_core.str());

  for (std::size_t m = 0; m < kNumMethods; ++m) {
    const auto& c = ev.curves[m];
    const std::string base = kMethodNames[m];
    std::ostringstream roc, pr, f1, nb;
    write_curve_csv(roc, c.roc, "fpr", "tpr");
    write_curve_csv(pr, c.pr, "recall", "precision");
    write_curve_csv(f1, c.f1, "threshold", "f1");
    write_curve_csv(nb, c.net_benefit, "threshold", "net_benefit");
    write_text(out / "curves" / (base + "_roc.csv"), roc.str());
    write_text(out / "curves" / (base + "_pr.csv"), pr.str());
    write_text(out / "curves" / (base + "_f1.csv"), f1.str());
    write_text(out / "curves" / (base + "_nb.csv"), nb.str());
  }
}

/// Hashes every file under `out` except the manifest and writes
/// run_manifest.json: config echo, seed, and sorted relative-path hashes.
inline nlohmann::ordered_json write_run_manifest(const std::filesystem::path& out, const RunConfig& cfg,
                                                 const nlohmann::ordered_json& summary) {
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(out)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), out).generic_string();
    if (rel == "run_manifest.json") continue;
    files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  nlohmann::ordered_json j;
  j["seed"] = cfg.seed;
  j["config"] = config_echo(cfg);
  j["summary"] = summary;
  j["files"] = nlohmann::ordered_json::object();
  for (const auto& f : files) j["files"][f] = sha256_file(out / f);
  write_text(out / "run_manifest.json", j.dump(2) + "\n");
  return j;
}

struct RunResult {
  std::filesystem::path output;
  double stage1_test_auroc = 0.0;
  EvaluationResult evaluation;
  nlohmann::ordered_json manifest;
};

inline double bag_auroc(const MilModel& mil, const std::vector<const CoreRecord*>& cores,
                        std::vector<double>* probabilities = nullptr) {
  ScoredPixels px;
  for (const auto* c : cores) {
    px.scores.push_back(predict(mil, core_bag(*c)));
    px.truth.push_back(static_cast<std::uint8_t>(c->label));
  }
  if (probabilities) *probabilities = px.scores;
  return auroc(px);
}

using Logger = std::function<void(const std::string&)>;

inline void check_run_inputs(const FeatureDataset& ds, const RunConfig& cfg) {
  cfg.validate();
  validate_dataset(ds);
  if (ds.num_levels > static_cast<int>(cfg.rho.size())) {
    throw ValidationError("config: " + std::to_string(ds.num_levels) + " levels but only " +
                          std::to_string(cfg.rho.size()) + " rho weights");
  }
}

/// Trains Stage 1 and writes milnet.ckpt and stage1_history.csv.
inline MilModel train_mil_stage(const FeatureDataset& ds, const RunConfig& cfg, const Logger& say) {
  say("stage 1: training MIL classifier");
  Stage1Result s1 = with_stage("stage1", [&] { return run_stage1(ds, cfg); });
  save_single_section(cfg.resolved_checkpoints() / "milnet.ckpt", mil_section(s1.model));
  std::filesystem::create_directories(cfg.resolved_output());
  write_history_csv(cfg.resolved_output() / "stage1_history.csv", s1.history);
  say("stage 1: best epoch " + std::to_string(s1.history.best_epoch) + " of " +
      std::to_string(s1.history.epochs.size()));
  return std::move(s1.model);
}

/// Trains Stage 2, orients the level scorers, and writes gatsan.ckpt and
/// stage2_history.csv.
inline Stage2Model train_ssl_stage(const FeatureDataset& ds, const MilModel& mil, const RunConfig& cfg,
                                   const Logger& say) {
  say("stage 2: training GAT + SAN");
  Stage2Result s2 = with_stage("stage2", [&] { return run_stage2(ds, mil, cfg); });
  const auto orient = with_stage("stage2", [&] { return orient_level_scorers(s2.model, ds, mil, cfg); });
  for (std::size_t m = 0; m < orient.negated.size(); ++m)
    say("stage 2: level " + std::to_string(m) + " attention rank correlation " +
        format_double(orient.correlation[m]) + (orient.negated[m] ? " (scorer negated)" : ""));
  save_single_section(cfg.resolved_checkpoints() / "gatsan.ckpt", stage2_section(s2.model));
  std::filesystem::create_directories(cfg.resolved_output());
  write_history_csv(cfg.resolved_output() / "stage2_history.csv", s2.history);
  say("stage 2: best epoch " + std::to_string(s2.history.best_epoch) + " of " +
      std::to_string(s2.history.epochs.size()));
  return std::move(s2.model);
}

inline MilModel load_mil_for(const FeatureDataset& ds, const RunConfig& cfg, const std::string& needed_by) {
  MilModel mil = with_stage("stage1", [&] {
    return load_mil_checkpoint(cfg.resolved_checkpoints() / "milnet.ckpt", needed_by);
  });
  if (mil.config.input_dim != ds.feature_dim) {
    throw ValidationError("stage1: checkpoint input_dim " + std::to_string(mil.config.input_dim) +
                          " does not match dataset feature_dim " + std::to_string(ds.feature_dim));
  }
  return mil;
}

inline Stage2Model load_ssl_for(const FeatureDataset& ds, const MilModel& mil, const RunConfig& cfg,
                                const std::string& needed_by) {
  Stage2Model ssl = with_stage("stage2", [&] {
    return load_stage2_checkpoint(cfg.resolved_checkpoints() / "gatsan.ckpt", needed_by);
  });
  if (ssl.gat.config.in_dim != mil.config.embed_dim ||
      ssl.san.num_levels() != static_cast<std::size_t>(ds.num_levels)) {
    throw ValidationError("stage2: checkpoint does not match the Stage-1 embedding or level count");
  }
  return ssl;
}

/// Every method's map for each core, computed on the worker pool and
/// returned in input order.
inline std::vector<CoreSaliency> compute_saliency(const FeatureDataset& ds,
                                                  const std::vector<const CoreRecord*>& cores,
                                                  const MilModel& mil, const Stage2Model& ssl,
                                                  const RunConfig& cfg) {
  std::vector<CoreSaliency> out(cores.size());
  with_stage("saliency", [&] {
    parallel_for(cores.size(), cfg.workers,
                 [&](std::size_t i) { out[i] = core_saliency(*cores[i], ds, mil, ssl, cfg); });
    return 0;
  });
  return out;
}

inline void export_saliency(const std::filesystem::path& out, const std::vector<const CoreRecord*>& cores,
                            const std::vector<CoreSaliency>& saliency) {
  for (std::size_t i = 0; i < cores.size(); ++i)
    for (std::size_t m = 0; m < kNumMethods; ++m)
      export_map(out / "saliency" / cores[i]->id / kMethodNames[m], saliency[i].maps[m]);
}

inline void write_stage1_predictions(const std::filesystem::path& path, const MilModel& mil,
                                     const std::vector<const CoreRecord*>& cores, double* auroc_out) {
  std::vector<double> probs;
  const double a = with_stage("stage1", [&] { return bag_auroc(mil, cores, &probs); });
  if (auroc_out) *auroc_out = a;
  std::ostringstream os;
  os << "core_id,label,probability\n";
  for (std::size_t i = 0; i < cores.size(); ++i)
    os << cores[i]->id << ',' << cores[i]->label << ',' << format_double(probs[i]) << '\n';
  write_text(path, os.str());
}

/// Stage 1, Stage 2, saliency for every evaluation core, metrics, exports,
/// and the run manifest. With skip_train both checkpoints are loaded from
/// the checkpoint directory instead.
inline RunResult run_pipeline(const FeatureDataset& ds, const RunConfig& cfg, const Logger& log = {}) {
  const Logger say = [&](const std::string& s) {
    if (log) log(s);
  };
  check_run_inputs(ds, cfg);
  RunResult result;
  result.output = cfg.resolved_output();
  const std::filesystem::path out = result.output;
  std::filesystem::create_directories(out);
  const auto test = ds.split("test");
  if (test.empty()) throw ValidationError("dataset has no test cores");
  const auto eval_cores = evaluation_cores(ds);
  if (eval_cores.empty()) throw ValidationError("saliency: no test tumour cores with masks to evaluate");

  MilModel mil;
  Stage2Model ssl;
  if (cfg.skip_train) {
    const std::string needed_by = "variant " + cfg.variant + " with --skip_train";
    mil = load_mil_for(ds, cfg, needed_by);
    ssl = load_ssl_for(ds, mil, cfg, needed_by);
  } else {
    mil = train_mil_stage(ds, cfg, say);
    ssl = train_ssl_stage(ds, mil, cfg, say);
  }
  write_stage1_predictions(out / "stage1_test_predictions.csv", mil, test, &result.stage1_test_auroc);
  say("stage 1: test bag AUROC " + format_double(result.stage1_test_auroc));

  say("saliency: " + std::to_string(eval_cores.size()) + " cores");
  const auto saliency = compute_saliency(ds, eval_cores, mil, ssl, cfg);
  export_saliency(out, eval_cores, saliency);

  result.evaluation = with_stage("metrics", [&] { return evaluate_saliency(saliency, eval_cores, cfg); });
  write_reports(out, result.evaluation);
  for (const auto& r : result.evaluation.reports)
    for (const auto& w : r.warnings) say("warning: " + r.method + ": " + w);

  nlohmann::ordered_json summary;
  summary["variant"] = "graphite-" + cfg.variant;
  summary["stage1_test_auroc"] = result.stage1_test_auroc;
  summary["evaluation_cores"] = eval_cores.size();
  result.manifest = write_run_manifest(out, cfg, summary);
  return result;
}

/// Parses a comparison CSV written by write_report_csv.
inline std::vector<MetricReport> read_report_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ValidationError("missing report " + path.string());
  std::string line;
  std::size_t lineno = 0;
  std::vector<MetricReport> out;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (lineno == 1) {
      if (line != kReportHeader) throw ValidationError(path.string() + ": unexpected header");
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 11) {
      throw ValidationError(path.string() + " line " + std::to_string(lineno) + ": expected 11 columns");
    }
    auto num = [&](std::size_t k) {
      try {
        std::size_t used = 0;
        const double v = std::stod(f[k], &used);
        if (used != f[k].size()) throw std::invalid_argument("trailing");
        return v;
      } catch (const std::exception&) {
        throw ValidationError(path.string() + " line " + std::to_string(lineno) + ": bad number in column " +
                              std::to_string(k + 1));
      }
    };
    MetricReport r;
    r.method = f[0];
    r.map = num(1);
    r.auroc = num(2);
    r.auprc = num(3);
    r.miou = num(4);
    r.ths = num(5);
    r.thr = num(6);
    r.ba = num(7);
    r.cxps = num(8);
    r.audc = num(9);
    r.audc_normalized = num(10);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace graphite
