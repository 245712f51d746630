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

// graphite command-line tool. Exit codes: 0 success, 1 validation failure,
// 2 runtime failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include "graphite/pipeline.hpp"

namespace {

using namespace graphite;

void log_line(const std::string& s) { std::cerr << "[graphite] " << s << '\n'; }

/// RunConfig flags for one subcommand. Values given on the command line
/// override the --config file, which overrides the defaults.
class ConfigFlags {
 public:
  explicit ConfigFlags(CLI::App* app) {
    app->add_option("--config", config_path_, "JSON file with RunConfig fields")->check(CLI::ExistingFile);
#define GRAPHITE_OPT(field, help) add(app->add_option("--" #field, flags_.field, help), [](RunConfig& d, const RunConfig& s) { d.field = s.field; })
#define GRAPHITE_FLAG(field, help) add(app->add_flag("--" #field, flags_.field, help), [](RunConfig& d, const RunConfig& s) { d.field = s.field; })
    GRAPHITE_OPT(seed, "random seed");
    GRAPHITE_OPT(variant, "saliency variant: base, v1 or v2");
    GRAPHITE_OPT(output_dir, "output directory (default $GRAPHITE_OUTPUT_ROOT or ./graphite_out)");
    GRAPHITE_OPT(spatial_threshold, "spatial edge threshold, in patches");
    GRAPHITE_OPT(scale_threshold, "cross-scale edge threshold, in patches");
    GRAPHITE_OPT(rho, "per-level fusion weights")->delimiter(',');
    GRAPHITE_OPT(level_sigma, "per-level Gaussian sigma, in grid cells")->delimiter(',');
    GRAPHITE_OPT(base_weights, "base fusion coefficients for combined, MIL, gradient")->delimiter(',');
    GRAPHITE_OPT(percentile, "confidence percentile");
    GRAPHITE_OPT(mil_sigma, "MIL map Gaussian sigma");
    GRAPHITE_OPT(gradient_sigma, "gradient map Gaussian sigma");
    GRAPHITE_OPT(stage1_lr, "Stage-1 learning rate");
    GRAPHITE_OPT(stage1_batch, "Stage-1 bags per step");
    GRAPHITE_OPT(stage1_max_epochs, "Stage-1 epoch limit");
    GRAPHITE_OPT(stage1_patience, "Stage-1 early-stopping patience");
    GRAPHITE_OPT(stage1_validation_fraction, "Stage-1 validation fraction");
    GRAPHITE_OPT(projector_hidden, "patch projector hidden width");
    GRAPHITE_OPT(embed_dim, "patch embedding width");
    GRAPHITE_OPT(key_dim, "attention key width");
    GRAPHITE_OPT(patient_hidden, "patient projector hidden width");
    GRAPHITE_OPT(patient_dim, "patient embedding width");
    GRAPHITE_OPT(stage2_lr, "Stage-2 learning rate");
    GRAPHITE_OPT(stage2_batch, "Stage-2 graphs per step");
    GRAPHITE_OPT(stage2_max_epochs, "Stage-2 epoch limit");
    GRAPHITE_OPT(stage2_patience, "Stage-2 early-stopping patience");
    GRAPHITE_OPT(stage2_validation_fraction, "Stage-2 validation fraction");
    GRAPHITE_OPT(gat_heads, "GAT heads");
    GRAPHITE_OPT(gat_head_dim, "GAT per-head width");
    GRAPHITE_OPT(gat_out_dim, "GAT output width");
    GRAPHITE_OPT(tau, "contrastive temperature");
    GRAPHITE_FLAG(scale_loss_contrastive, "use the contrastive scalewise loss");
    GRAPHITE_OPT(grid_start, "first metric threshold");
    GRAPHITE_OPT(grid_stop, "last metric threshold");
    GRAPHITE_OPT(grid_step, "metric threshold step");
    GRAPHITE_OPT(operating_threshold, "threshold for mIoU and BA");
    GRAPHITE_OPT(pooling, "pooled or macro");
    GRAPHITE_OPT(workers, "worker threads (0: all cores)");
    GRAPHITE_FLAG(skip_train, "load checkpoints instead of training");
    GRAPHITE_OPT(checkpoint_dir, "checkpoint directory (default <output_dir>/checkpoints)");
#undef GRAPHITE_OPT
#undef GRAPHITE_FLAG
  }

  RunConfig resolve() const {
    RunConfig cfg = config_path_.empty() ? RunConfig{} : load_run_config(config_path_);
    for (const auto& [opt, copy] : options_)
      if (opt->count() > 0) copy(cfg, flags_);
    cfg.validate();
    return cfg;
  }

 private:
  using Copy = void (*)(RunConfig&, const RunConfig&);
  CLI::Option* add(CLI::Option* opt, Copy copy) {
    options_.emplace_back(opt, copy);
    return opt;
  }

  std::string config_path_;
  RunConfig flags_;
  std::vector<std::pair<CLI::Option*, Copy>> options_;
};

FeatureDataset load_checked(const std::string& path) {
  return with_stage("dataset", [&] { return load_dataset(path); });
}

std::vector<const CoreRecord*> select_cores(const FeatureDataset& ds, const std::string& core) {
  if (core.empty()) return evaluation_cores(ds);
  for (const auto& c : ds.cores)
    if (c.id == core) return {&c};
  throw ValidationError("dataset has no core " + core);
}

void print_table(const std::vector<MetricReport>& reports) { write_report_csv(std::cout, reports); }

int run_cli(int argc, char** argv) {
  CLI::App app{"GRAPHITE: hierarchical graph saliency for tissue microarray cores"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic feature dataset");
  SynthConfig sc;
  std::string synth_out;
  synth->add_option("--out", synth_out, "dataset directory")->required();
  synth->add_option("--n_train", sc.n_train, "training cores");
  synth->add_option("--n_test", sc.n_test, "test cores");
  synth->add_option("--grid_cols", sc.grid_cols, "level-0 patches per row");
  synth->add_option("--grid_rows", sc.grid_rows, "level-0 patches per column");
  synth->add_option("--feature_dim", sc.feature_dim, "feature dimension D");
  synth->add_option("--levels", sc.levels, "magnification levels M");
  synth->add_option("--mu", sc.mu, "class mean separation");
  synth->add_option("--sigma_f", sc.sigma_f, "feature noise");
  synth->add_option("--coarse_noise", sc.coarse_noise, "extra noise on coarser levels");
  synth->add_option("--blob_min_radius", sc.blob_min_radius, "smallest blob semi-axis, in patches");
  synth->add_option("--blob_max_radius", sc.blob_max_radius, "largest blob semi-axis, in patches");
  synth->add_option("--tumour_fraction", sc.tumour_fraction, "fraction of tumour cores per split");
  synth->add_option("--raster_downsample", sc.raster_downsample, "level-0 pixels per grid cell");
  synth->add_option("--seed", sc.seed, "random seed");

  // build-graph
  auto* build = app.add_subcommand("build-graph", "build hierarchical patch graphs and write them as JSON");
  std::string dataset, core;
  build->add_option("--dataset", dataset, "dataset directory")->required();
  build->add_option("--core", core, "only this core");
  ConfigFlags build_cfg(build);

  auto* train_mil = app.add_subcommand("train-mil", "train the Stage-1 MIL classifier");
  train_mil->add_option("--dataset", dataset, "dataset directory")->required();
  ConfigFlags mil_cfg(train_mil);

  auto* train_ssl = app.add_subcommand("train-ssl", "train the Stage-2 GAT + SAN (needs milnet.ckpt)");
  train_ssl->add_option("--dataset", dataset, "dataset directory")->required();
  ConfigFlags ssl_cfg(train_ssl);

  auto* sal = app.add_subcommand("saliency", "export saliency maps from trained checkpoints");
  std::string image;
  double alpha = 0.5;
  sal->add_option("--dataset", dataset, "dataset directory")->required();
  sal->add_option("--core", core, "one core (default: test tumour cores)");
  sal->add_option("--image", image, "PNG of the core to overlay the selected variant on (needs --core)")
      ->check(CLI::ExistingFile);
  sal->add_option("--alpha", alpha, "overlay opacity")->check(CLI::Range(0.0, 1.0));
  ConfigFlags sal_cfg(sal);

  auto* eval = app.add_subcommand("eval", "score exported saliency grids against the masks");
  std::vector<std::string> methods;
  std::string saliency_dir;
  eval->add_option("--dataset", dataset, "dataset directory")->required();
  eval->add_option("--saliency_dir", saliency_dir, "directory of <core>/<method>.csv grids");
  eval->add_option("--methods", methods, "methods to score (default: all)")->delimiter(',');
  ConfigFlags eval_cfg(eval);

  auto* cmp = app.add_subcommand("compare", "merge report CSVs into one sorted comparison table");
  std::vector<std::string> reports;
  std::string cmp_out;
  cmp->add_option("reports", reports, "report CSV files")->required()->check(CLI::ExistingFile);
  cmp->add_option("--out", cmp_out, "output CSV (default: stdout only)");

  auto* run = app.add_subcommand("run", "full pipeline: train, saliency, evaluate");
  run->add_option("--dataset", dataset, "dataset directory")->required();
  ConfigFlags run_cfg(run);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (synth->parsed()) {
    const auto ds = synth_generate(sc);
    save_dataset(ds, synth_out);
    log_line("wrote " + std::to_string(ds.cores.size()) + " cores to " + synth_out);
    return 0;
  }

  if (build->parsed()) {
    const RunConfig cfg = build_cfg.resolve();
    const auto ds = load_checked(dataset);
    const auto out = cfg.resolved_output() / "graphs";
    std::filesystem::create_directories(out);
    for (const auto& c : ds.cores) {
      if (!core.empty() && c.id != core) continue;
      const auto g = with_stage("graph", [&] { return build_hierarchical_graph(core_patch_nodes(c), cfg.thresholds()); });
      nlohmann::ordered_json j;
      j["core_id"] = c.id;
      j["num_levels"] = g.num_levels;
      j["nodes"] = nlohmann::ordered_json::array();
      for (const auto& n : g.nodes) j["nodes"].push_back({n.node_id, n.level, n.grid_row, n.grid_col});
      j["spatial_edges"] = g.spatial_edges;
      j["cross_edges"] = nlohmann::ordered_json::array();
      for (const auto& e : g.cross_edges) j["cross_edges"].push_back({e.coarse, e.fine, e.delta});
      write_text(out / (c.id + ".json"), j.dump() + "\n");
      std::cout << c.id << ": " << g.size() << " nodes, " << g.spatial_edges.size() << " spatial edges, "
                << g.cross_edges.size() << " cross edges\n";
    }
    if (!core.empty() && !std::filesystem::exists(out / (core + ".json"))) {
      throw ValidationError("dataset has no core " + core);
    }
    return 0;
  }

  if (train_mil->parsed()) {
    const RunConfig cfg = mil_cfg.resolve();
    const auto ds = load_checked(dataset);
    check_run_inputs(ds, cfg);
    const MilModel mil = train_mil_stage(ds, cfg, log_line);
    const auto test = ds.split("test");
    if (!test.empty()) {
      double a = 0.0;
      write_stage1_predictions(cfg.resolved_output() / "stage1_test_predictions.csv", mil, test, &a);
      std::cout << "test bag AUROC " << format_double(a) << '\n';
    }
    return 0;
  }

  if (train_ssl->parsed()) {
    const RunConfig cfg = ssl_cfg.resolve();
    const auto ds = load_checked(dataset);
    check_run_inputs(ds, cfg);
    const MilModel mil = load_mil_for(ds, cfg, "train-ssl");
    train_ssl_stage(ds, mil, cfg, log_line);
    return 0;
  }

  if (sal->parsed()) {
    const RunConfig cfg = sal_cfg.resolve();
    const auto ds = load_checked(dataset);
    check_run_inputs(ds, cfg);
    if (!image.empty() && core.empty()) throw ValidationError("--image requires --core");
    const std::string needed_by = "variant " + cfg.variant;
    const MilModel mil = load_mil_for(ds, cfg, needed_by);
    const Stage2Model ssl = load_ssl_for(ds, mil, cfg, needed_by);
    const auto cores = select_cores(ds, core);
    if (cores.empty()) throw ValidationError("no cores selected for saliency");
    const auto maps = compute_saliency(ds, cores, mil, ssl, cfg);
    export_saliency(cfg.resolved_output(), cores, maps);
    if (!image.empty()) {
      const std::size_t selected = static_cast<std::size_t>(parse_variant(cfg.variant));  // base, v1, v2 lead
      const RgbImage base = read_rgb_png(image);
      write_rgb_png((cfg.resolved_output() / "saliency" / core / "overlay.png").string(),
                    overlay_heatmap(base, maps[0].maps[selected], alpha));
    }
    log_line("exported saliency for " + std::to_string(cores.size()) + " cores");
    return 0;
  }

  if (eval->parsed()) {
    const RunConfig cfg = eval_cfg.resolve();
    const auto ds = load_checked(dataset);
    const auto cores = evaluation_cores(ds);
    if (cores.empty()) throw ValidationError("no test tumour cores with masks to evaluate");
    const std::filesystem::path dir = saliency_dir.empty() ? cfg.resolved_output() / "saliency" : std::filesystem::path(saliency_dir);
    if (methods.empty()) methods.assign(std::begin(kMethodNames), std::end(kMethodNames));
    std::vector<std::string> ids;
    for (const auto* c : cores) ids.push_back(c->id);
    std::vector<MetricReport> out;
    for (const auto& m : methods) {
      std::vector<ScoredPixels> px;
      for (const auto* c : cores) {
        const RasterMap map = read_grid_csv(dir / c->id / (m + ".csv"));
        if (map.width != ds.grid_width(*c) || map.height != ds.grid_height(*c)) {
          throw ValidationError("saliency grid for core " + c->id + " method " + m + " is " +
                                std::to_string(map.width) + "x" + std::to_string(map.height) + ", mask grid is " +
                                std::to_string(ds.grid_width(*c)) + "x" + std::to_string(ds.grid_height(*c)));
        }
        px.push_back(scored_pixels(map, *c->mask));
      }
      out.push_back(with_stage("metrics", [&] { return evaluate_method(m, px, ids, cfg.grid(), cfg.pooling_mode()); }));
    }
    out = compare_methods(std::move(out));
    std::ostringstream os;
    write_report_csv(os, out);
    write_text(cfg.resolved_output() / "reports" / "eval.csv", os.str());
    print_table(out);
    return 0;
  }

  if (cmp->parsed()) {
    std::vector<MetricReport> all;
    for (const auto& r : reports) {
      auto part = read_report_csv(r);
      all.insert(all.end(), part.begin(), part.end());
    }
    all = compare_methods(std::move(all));
    if (!cmp_out.empty()) {
      std::ostringstream os;
      write_report_csv(os, all);
      write_text(cmp_out, os.str());
    }
    print_table(all);
    return 0;
  }

  if (run->parsed()) {
    const RunConfig cfg = run_cfg.resolve();
    const auto ds = load_checked(dataset);
    const RunResult r = run_pipeline(ds, cfg, log_line);
    print_table(r.evaluation.reports);
    log_line("outputs in " + r.output.string());
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const graphite::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
