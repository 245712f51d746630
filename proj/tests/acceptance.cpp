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


// Acceptance runner: one PASS/FAIL line per criterion. argv[1] is a scratch directory.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "graphite/pipeline.hpp"
#include "oracles.hpp"

using namespace graphite;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int n, bool ok, const std::string& detail) {
  std::printf("%s criterion %d: %s\n", ok ? "PASS" : "FAIL", n, detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

const MetricReport& find(const std::vector<MetricReport>& rs, const std::string& m) {
  for (const auto& r : rs)
    if (r.method == m) return r;
  throw RuntimeError("missing method " + m);
}

template <class F>
void guarded(int n, F&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    report(n, false, std::string("exception: ") + e.what());
  }
}

void criterion1() {
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t p1 = 0, p2 = 0, p3 = 0;
  const double e1 = oracle::stage1_grad_error(3, &p1);
  const double e2 = oracle::stage2_grad_error(3, false, &p2);
  const double e3 = oracle::stage2_grad_error(3, true, &p3);
  const double dt = seconds_since(t0);
  const double worst = std::max({e1, e2, e3});
  const bool small = std::max({p1, p2, p3}) <= 300 && oracle::mini_graph().nodes.size() <= 6;
  report(1, worst < 1e-4 && dt < 30.0 && small,
         fmt("max relative error %.3g (stage1 %.3g, stage2 %.3g / contrastive %.3g), %.2f s", worst, e1, e2, e3) +
             fmt(" at %.0f/%.0f params", double(p1), double(p2)));
}

void criterion2() {
  const double dev = oracle::softmax_sum_deviation(1000, 11);
  report(2, dev <= 1e-9, fmt("max |sum - 1| = %.3g over 1000 forwards", dev));
}

void criterion3() {
  const int bad = oracle::graph_oracle_mismatches(100, 2024);
  report(3, bad == 0, fmt("%.0f of 100 layouts differ from brute force", bad));
}

void criterion4() {
  std::mt19937_64 rng(99);
  double da = 0.0, dp = 0.0;
  for (int i = 0; i < 200; ++i) {
    const auto p = oracle::random_pixels(rng);
    da = std::max(da, std::abs(auroc(p) - oracle::rank_auroc(p)));
  }
  for (int i = 0; i < 200; ++i) {
    const auto p = oracle::random_pixels(rng);
    dp = std::max(dp, std::abs(average_precision(p) - oracle::exhaustive_ap(p)));
  }
  report(4, da <= 1e-9 && dp <= 1e-9, fmt("AUROC max diff %.3g, AP max diff %.3g", da, dp));
}

void criterion5() {
  const double v2 = cxps({0.56, 0.94, 0.41, 0.50, 0.70, 0.68});
  const double gc = cxps({0.44, 0.86, 0.24, 0.17, 0.20, 0.60});
  const bool ok = std::abs(v2 - 0.651) < 1e-9 && std::round(v2 * 100) / 100 == 0.65 && std::abs(gc - 0.48) <= 0.005;
  report(5, ok, fmt("V2 row %.4f, GradCAM row %.4f", v2, gc));
}

void criterion6() {
  const auto ts = ThresholdGrid{}.thresholds();
  const std::vector<double> flat(ts.size(), 0.37);
  const double s = ths(flat), r = thr(flat, ts);
  report(6, s == 1.0 && r == 0.98, fmt("ThS %.17g, ThR %.17g", s, r));
}

void criterion7() {
  const FusionConfig cfg;
  RasterMap a(4, 1), b(4, 1), c(4, 1);
  a.values = {0.1, 0.9, 0.4, 0.2};
  b.values = {0.9, 0.2, 0.1, 0.4};
  c.values = {0.4, 0.1, 0.2, 0.9};
  const auto eq = confidence_fuse(a, b, c, cfg);
  const double dw = std::max({std::abs(eq.weights[0] - 0.2), std::abs(eq.weights[1] - 0.1),
                              std::abs(eq.weights[2] - 1.0 / 30.0)});
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double lo = 1.0, hi = 0.0, drift = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    RasterMap m[3] = {RasterMap(12, 9), RasterMap(12, 9), RasterMap(12, 9)};
    for (auto& x : m)
      for (double& v : x.values) v = u(rng);
    const auto base = confidence_fuse(m[0], m[1], m[2], cfg);
    for (double v : base.map.values) lo = std::min(lo, v), hi = std::max(hi, v);
    for (double k : {0.5, 3.0}) {
      RasterMap s[3] = {m[0], m[1], m[2]};
      for (auto& x : s)
        for (double& v : x.values) v *= k;
      const auto scaled = confidence_fuse(s[0], s[1], s[2], cfg);
      for (std::size_t i = 0; i < base.map.size(); ++i)
        drift = std::max(drift, std::abs(scaled.map.values[i] - base.map.values[i]));
    }
  }
  report(7, lo >= 0.0 && hi <= 1.0 && dw <= 1e-12 && drift < 1e-9,
         fmt("range [%.3g, %.3g], weight error %.3g, scale drift %.3g", lo, hi, dw, drift));
}

RunConfig proxy_config(const fs::path& out) {
  RunConfig cfg;
  cfg.seed = 7;
  cfg.output_dir = out.string();
  return cfg;
}

void criteria8and9(const fs::path& work) {
  SynthConfig sc;
  sc.seed = 7;
  const auto ds = synth_generate(sc);
  const auto t0 = std::chrono::steady_clock::now();
  RunResult first;
  bool ran = false;
  guarded(8, [&] {
    first = run_pipeline(ds, proxy_config(work / "run1"));
    ran = true;
    const double dt = seconds_since(t0);
    const auto& rs = first.evaluation.reports;
    const auto &v2 = find(rs, "graphite-v2"), &base = find(rs, "graphite-base"), &uni = find(rs, "uniform");
    const bool ok = first.stage1_test_auroc >= 0.95 && v2.auroc >= 0.85 && v2.auroc >= uni.auroc + 0.30 &&
                    v2.cxps >= base.cxps && v2.cxps >= uni.cxps + 0.15 && dt < 300.0;
    report(8, ok,
           fmt("stage-1 AUROC %.3f, V2 AUROC %.3f (uniform %.3f), CXPS V2 %.4f", first.stage1_test_auroc, v2.auroc,
               uni.auroc, v2.cxps) +
               fmt(" vs Base %.4f and uniform %.4f, %.1f s", base.cxps, uni.cxps, dt));
  });
  if (!ran) {
    report(9, false, "first run failed");
    return;
  }
  guarded(9, [&] {
    const auto second = run_pipeline(ds, proxy_config(work / "run2"));
    std::size_t compared = 0, differ = 0;
    for (const auto& [name, hash] : first.manifest["files"].items()) {
      const bool in_scope = name.ends_with(".csv") || (name.ends_with(".png") && !name.ends_with("_heat.png"));
      if (!in_scope) continue;
      ++compared;
      if (slurp(work / "run1" / name) != slurp(work / "run2" / name)) ++differ;
    }
    const bool hashes = first.manifest["files"] == second.manifest["files"];
    report(9, compared > 0 && differ == 0 && hashes,
           fmt("%.0f CSV/grayscale files compared, %.0f differ; manifest hashes ", double(compared), double(differ)) +
               (hashes ? "equal" : "differ"));
  });
}

void criterion10() {
  ScoredPixels perfect;
  for (int i = 0; i < 500; ++i) {
    const bool pos = (i * 7) % 10 < 3;
    perfect.truth.push_back(pos ? 1 : 0);
    perfect.scores.push_back(pos ? 1.0 : 0.0);
  }
  const double n = static_cast<double>(perfect.size());
  const double p = static_cast<double>(perfect.positives());
  const auto curve = net_benefit_curve(perfect, ThresholdGrid{});
  double dev = 0.0;
  for (double v : curve.net_benefit) dev = std::max(dev, std::abs(v - p / n));
  const double audc_err = std::abs(curve.audc - p * 0.98);
  report(10, dev <= 1e-12 && audc_err <= 1e-9,
         fmt("max |NB - prevalence| %.3g, |AUDC - P*0.98| %.3g", dev, audc_err));
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "graphite_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);
  guarded(1, criterion1);
  guarded(2, criterion2);
  guarded(3, criterion3);
  guarded(4, criterion4);
  guarded(5, criterion5);
  guarded(6, criterion6);
  guarded(7, criterion7);
  criteria8and9(work);
  guarded(10, criterion10);
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
