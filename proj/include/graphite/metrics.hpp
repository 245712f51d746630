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

// Pixel-level saliency evaluation: ranking metrics (AUROC, AUPRC, AP/mAP),
// threshold-sweep metrics (F1 curve, ThS, ThR, net benefit), overlap metrics
// at an operating threshold (IoU, balanced accuracy) and the CXPS composite.
//
// A pixel is predicted positive when its score is >= the threshold.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "graphite/error.hpp"

namespace graphite {

/// Saliency scores in [0, 1] with binary ground truth, one entry per pixel.
struct ScoredPixels {
  std::vector<double> scores;
  std::vector<std::uint8_t> truth;

  std::size_t size() const { return scores.size(); }
  std::size_t positives() const {
    return static_cast<std::size_t>(std::count(truth.begin(), truth.end(), std::uint8_t{1}));
  }
  std::size_t negatives() const { return size() - positives(); }

  void validate() const {
    if (scores.size() != truth.size()) {
      throw ValidationError("ScoredPixels: " + std::to_string(scores.size()) + " scores vs " +
                            std::to_string(truth.size()) + " labels");
    }
    if (scores.empty()) throw ValidationError("ScoredPixels: no pixels");
    for (double s : scores)
      if (!std::isfinite(s)) throw ValidationError("ScoredPixels: non-finite score");
    for (auto t : truth)
      if (t > 1) throw ValidationError("ScoredPixels: labels must be 0 or 1");
  }
};

inline ScoredPixels pool(std::span<const ScoredPixels> cores) {
  ScoredPixels out;
  for (const auto& c : cores) {
    out.scores.insert(out.scores.end(), c.scores.begin(), c.scores.end());
    out.truth.insert(out.truth.end(), c.truth.begin(), c.truth.end());
  }
  return out;
}

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  friend bool operator==(const Confusion&, const Confusion&) = default;
};

inline Confusion confusion_at(const ScoredPixels& px, double t) {
  px.validate();
  Confusion c;
  for (std::size_t i = 0; i < px.size(); ++i) {
    const bool pred = px.scores[i] >= t;
    if (px.truth[i]) (pred ? c.tp : c.fn)++;
    else (pred ? c.fp : c.tn)++;
  }
  return c;
}

struct CurvePoint {
  double x = 0.0;
  double y = 0.0;
};

namespace detail {

// Cumulative (tp, fp) after each group of tied scores, walking scores from
// high to low.
struct RankedCounts {
  std::vector<std::size_t> tp, fp;
  std::size_t positives = 0, negatives = 0;
};

inline RankedCounts ranked_counts(const ScoredPixels& px) {
  px.validate();
  std::vector<std::size_t> order(px.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return px.scores[a] > px.scores[b]; });
  RankedCounts r;
  std::size_t tp = 0, fp = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    (px.truth[order[k]] ? tp : fp)++;
    if (k + 1 == order.size() || px.scores[order[k + 1]] != px.scores[order[k]]) {
      r.tp.push_back(tp);
      r.fp.push_back(fp);
    }
  }
  r.positives = tp;
  r.negatives = fp;
  return r;
}

}  // namespace detail

/// (FPR, TPR) points from (0, 0) through every distinct score threshold.
inline std::vector<CurvePoint> roc_curve(const ScoredPixels& px) {
  const auto r = detail::ranked_counts(px);
  if (r.positives == 0 || r.negatives == 0) {
    throw ValidationError("roc_curve: both classes are required");
  }
  std::vector<CurvePoint> out{{0.0, 0.0}};
  for (std::size_t k = 0; k < r.tp.size(); ++k) {
    out.push_back({static_cast<double>(r.fp[k]) / static_cast<double>(r.negatives),
                   static_cast<double>(r.tp[k]) / static_cast<double>(r.positives)});
  }
  return out;
}

inline double trapezoid(std::span<const CurvePoint> pts) {
  double a = 0.0;
  for (std::size_t k = 1; k < pts.size(); ++k)
    a += (pts[k].x - pts[k - 1].x) * (pts[k].y + pts[k - 1].y) / 2.0;
  return a;
}

/// Trapezoidal area under the ROC curve.
inline double auroc(const ScoredPixels& px) { return trapezoid(roc_curve(px)); }

/// (recall, precision) points over distinct thresholds, starting at (0, 1).
inline std::vector<CurvePoint> pr_curve(const ScoredPixels& px) {
  const auto r = detail::ranked_counts(px);
  if (r.positives == 0) throw ValidationError("pr_curve: no positive pixels");
  std::vector<CurvePoint> out{{0.0, 1.0}};
  for (std::size_t k = 0; k < r.tp.size(); ++k) {
    out.push_back({static_cast<double>(r.tp[k]) / static_cast<double>(r.positives),
                   static_cast<double>(r.tp[k]) / static_cast<double>(r.tp[k] + r.fp[k])});
  }
  return out;
}

/// AP = sum_n (R_n - R_{n-1}) P_n over descending distinct scores.
inline double average_precision(const ScoredPixels& px) {
  const auto r = detail::ranked_counts(px);
  if (r.positives == 0) throw ValidationError("average_precision: no positive pixels");
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t k = 0; k < r.tp.size(); ++k) {
    const double recall = static_cast<double>(r.tp[k]) / static_cast<double>(r.positives);
    const double precision = static_cast<double>(r.tp[k]) / static_cast<double>(r.tp[k] + r.fp[k]);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

/// Trapezoidal area under the precision-recall curve.
inline double auprc(const ScoredPixels& px) { return trapezoid(pr_curve(px)); }

/// Unweighted mean of per-core AP. Cores without positive pixels are skipped
/// and reported through `skipped`.
inline double map_over_cores(std::span<const ScoredPixels> cores,
                             std::vector<std::size_t>* skipped = nullptr) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < cores.size(); ++i) {
    if (cores[i].positives() == 0) {
      if (skipped) skipped->push_back(i);
      continue;
    }
    s += average_precision(cores[i]);
    ++n;
  }
  if (n == 0) throw ValidationError("map_over_cores: no core has positive pixels");
  return s / static_cast<double>(n);
}

struct ThresholdGrid {
  double start = 0.01;
  double stop = 0.99;
  double step = 0.01;
  double operating = 0.5;

  static ThresholdGrid coarse() { return {0.1, 0.9, 0.1, 0.5}; }

  void validate() const {
    if (!(start < stop) || !(step > 0.0)) {
      throw ValidationError("ThresholdGrid: need start < stop and step > 0");
    }
    if (operating < 0.0 || operating > 1.0) {
      throw ValidationError("ThresholdGrid: operating threshold must lie in [0, 1]");
    }
  }

  std::vector<double> thresholds() const {
    validate();
    const auto n = static_cast<std::size_t>(std::llround((stop - start) / step)) + 1;
    std::vector<double> out(n);
    for (std::size_t k = 0; k < n; ++k) out[k] = start + static_cast<double>(k) * step;
    return out;
  }
};

inline double precision_of(const Confusion& c) {
  return c.tp + c.fp == 0 ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
}
inline double recall_of(const Confusion& c) {
  return c.tp + c.fn == 0 ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}
inline double f1_of(double precision, double recall) {
  return precision + recall == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
}

namespace detail {

// Confusion counts at many thresholds from one sort.
inline std::vector<Confusion> confusion_sweep(const ScoredPixels& px, std::span<const double> ts) {
  px.validate();
  std::vector<double> pos, negs;
  for (std::size_t i = 0; i < px.size(); ++i) (px.truth[i] ? pos : negs).push_back(px.scores[i]);
  std::sort(pos.begin(), pos.end());
  std::sort(negs.begin(), negs.end());
  std::vector<Confusion> out;
  for (double t : ts) {
    const auto p_below = static_cast<std::size_t>(std::lower_bound(pos.begin(), pos.end(), t) - pos.begin());
    const auto n_below = static_cast<std::size_t>(std::lower_bound(negs.begin(), negs.end(), t) - negs.begin());
    out.push_back({pos.size() - p_below, negs.size() - n_below, n_below, p_below});
  }
  return out;
}

}  // namespace detail

/// F1 at each grid threshold.
inline std::vector<double> f1_curve(const ScoredPixels& px, const ThresholdGrid& grid) {
  const auto ts = grid.thresholds();
  std::vector<double> out;
  for (const auto& c : detail::confusion_sweep(px, ts)) out.push_back(f1_of(precision_of(c), recall_of(c)));
  return out;
}

/// Threshold stability 1 - sigma/mu of the F1 curve (population sigma).
/// A constant curve gives exactly 1; mu = 0 gives 0.
inline double ths(std::span<const double> f1) {
  if (f1.empty()) throw ValidationError("ths: empty F1 curve");
  const auto [lo, hi] = std::minmax_element(f1.begin(), f1.end());
  const double mu = std::accumulate(f1.begin(), f1.end(), 0.0) / static_cast<double>(f1.size());
  if (mu == 0.0) return 0.0;
  if (*lo == *hi) return 1.0;
  double var = 0.0;
  for (double v : f1) var += (v - mu) * (v - mu);
  var /= static_cast<double>(f1.size());
  return 1.0 - std::sqrt(var) / mu;
}

/// Threshold robustness: span between the largest and smallest threshold
/// whose F1 is at least 95% of the peak; 0 for an empty curve.
inline double thr(std::span<const double> f1, std::span<const double> thresholds) {
  if (f1.size() != thresholds.size()) {
    throw ValidationError("thr: " + std::to_string(f1.size()) + " F1 values for " +
                          std::to_string(thresholds.size()) + " thresholds");
  }
  if (f1.empty()) return 0.0;
  const double peak = *std::max_element(f1.begin(), f1.end());
  std::optional<double> lo, hi;
  for (std::size_t k = 0; k < f1.size(); ++k) {
    if (f1[k] >= 0.95 * peak) {
      lo = lo ? std::min(*lo, thresholds[k]) : thresholds[k];
      hi = hi ? std::max(*hi, thresholds[k]) : thresholds[k];
    }
  }
  return lo ? *hi - *lo : 0.0;
}

/// IoU of the binarized scores (>= t) with the truth mask; 1 when both are
/// empty.
inline double iou(const ScoredPixels& px, double t) {
  const Confusion c = confusion_at(px, t);
  const std::size_t uni = c.tp + c.fp + c.fn;
  return uni == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(uni);
}

inline double miou(std::span<const ScoredPixels> cores, double t) {
  if (cores.empty()) throw ValidationError("miou: no cores");
  double s = 0.0;
  for (const auto& c : cores) s += iou(c, t);
  return s / static_cast<double>(cores.size());
}

/// (TPR + TNR) / 2; a rate with an empty class is left out.
inline double balanced_accuracy(const ScoredPixels& px, double t) {
  const Confusion c = confusion_at(px, t);
  std::vector<double> rates;
  if (c.tp + c.fn > 0) rates.push_back(static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn));
  if (c.tn + c.fp > 0) rates.push_back(static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp));
  return std::accumulate(rates.begin(), rates.end(), 0.0) / static_cast<double>(rates.size());
}

struct CxpsWeights {
  double map = 0.20;
  double auroc = 0.25;
  double miou = 0.20;
  double ths = 0.10;
  double thr = 0.10;
  double ba = 0.15;
};

struct CxpsInputs {
  std::optional<double> map, auroc, miou, ths, thr, ba;
};

inline double cxps(const CxpsInputs& in, const CxpsWeights& w = {}) {
  const std::pair<const char*, const std::optional<double>*> parts[] = {
      {"mAP", &in.map}, {"AUROC", &in.auroc}, {"mIoU", &in.miou},
      {"ThS", &in.ths}, {"ThR", &in.thr},     {"BA", &in.ba}};
  for (auto [name, v] : parts)
    if (!*v) throw ValidationError(std::string("cxps: missing component ") + name);
  return w.map * *in.map + w.auroc * *in.auroc + w.miou * *in.miou + w.ths * *in.ths +
         w.thr * *in.thr + w.ba * *in.ba;
}

struct NetBenefitCurve {
  std::vector<double> thresholds;
  std::vector<double> net_benefit;  // TP/Total - FP/Total * t/(1-t)
  std::vector<double> count_scaled; // TP - FP * t/(1-t)
  double audc = 0.0;                // trapezoid of count_scaled
  double audc_normalized = 0.0;     // trapezoid of net_benefit
};

inline NetBenefitCurve net_benefit_curve(const ScoredPixels& px, const ThresholdGrid& grid) {
  NetBenefitCurve out;
  out.thresholds = grid.thresholds();
  for (double t : out.thresholds)
    if (t >= 1.0 || t < 0.0) throw ValidationError("net_benefit_curve: thresholds must lie in [0, 1)");
  const double total = static_cast<double>(px.size());
  const auto sweep = detail::confusion_sweep(px, out.thresholds);
  for (std::size_t k = 0; k < sweep.size(); ++k) {
    const double t = out.thresholds[k];
    const double odds = t / (1.0 - t);
    const double tp = static_cast<double>(sweep[k].tp), fp = static_cast<double>(sweep[k].fp);
    out.net_benefit.push_back(tp / total - fp / total * odds);
    out.count_scaled.push_back(tp - fp * odds);
  }
  for (std::size_t k = 1; k < out.thresholds.size(); ++k) {
    const double dt = out.thresholds[k] - out.thresholds[k - 1];
    out.audc += dt * (out.count_scaled[k] + out.count_scaled[k - 1]) / 2.0;
    out.audc_normalized += dt * (out.net_benefit[k] + out.net_benefit[k - 1]) / 2.0;
  }
  return out;
}

enum class Pooling { Pooled, Macro };

struct CoreMetrics {
  std::string core_id;
  std::optional<double> ap;
  double iou = 0.0;
};

/// One comparison-table row.
struct MetricReport {
  std::string method;
  double map = 0.0, auroc = 0.0, auprc = 0.0, miou = 0.0;
  double ths = 0.0, thr = 0.0, ba = 0.0, cxps = 0.0;
  double audc = 0.0, audc_normalized = 0.0;
  std::vector<CoreMetrics> per_core;
  std::vector<std::string> warnings;
};

struct MetricCurves {
  std::vector<CurvePoint> roc, pr, f1, net_benefit;
};

/// Evaluates one method over per-core pixels. mAP and mIoU are per-core
/// means; the remaining metrics use pooled pixels, or per-core means of the
/// defined values when `pooling` is Macro.
inline MetricReport evaluate_method(const std::string& method, std::span<const ScoredPixels> cores,
                                    std::span<const std::string> core_ids, const ThresholdGrid& grid,
                                    Pooling pooling = Pooling::Pooled, MetricCurves* curves = nullptr) {
  if (cores.empty()) throw ValidationError("evaluate_method: no cores for " + method);
  if (core_ids.size() != cores.size()) throw ValidationError("evaluate_method: core id count mismatch");
  MetricReport r;
  r.method = method;
  std::vector<std::size_t> skipped;
  r.map = map_over_cores(cores, &skipped);
  for (auto i : skipped) r.warnings.push_back("core " + core_ids[i] + " has no positive pixels; excluded from mAP");
  r.miou = miou(cores, grid.operating);
  for (std::size_t i = 0; i < cores.size(); ++i) {
    CoreMetrics cm{core_ids[i], std::nullopt, iou(cores[i], grid.operating)};
    if (cores[i].positives() > 0) cm.ap = average_precision(cores[i]);
    r.per_core.push_back(cm);
  }
  const auto ts = grid.thresholds();
  const ScoredPixels pooled = pool(cores);
  if (pooling == Pooling::Pooled) {
    r.auroc = auroc(pooled);
    r.auprc = auprc(pooled);
    r.ba = balanced_accuracy(pooled, grid.operating);
    const auto f1 = f1_curve(pooled, grid);
    r.ths = ths(f1);
    r.thr = thr(f1, ts);
    const auto nb = net_benefit_curve(pooled, grid);
    r.audc = nb.audc;
    r.audc_normalized = nb.audc_normalized;
  } else {
    double sa = 0, sp = 0, sb = 0, ss = 0, sr = 0, sd = 0, sdn = 0;
    std::size_t n_rank = 0;
    for (const auto& c : cores) {
      if (c.positives() > 0 && c.negatives() > 0) {
        sa += auroc(c);
        sp += auprc(c);
        ++n_rank;
      }
      sb += balanced_accuracy(c, grid.operating);
      const auto f1 = f1_curve(c, grid);
      ss += ths(f1);
      sr += thr(f1, ts);
      const auto nb = net_benefit_curve(c, grid);
      sd += nb.audc;
      sdn += nb.audc_normalized;
    }
    if (n_rank == 0) throw ValidationError("evaluate_method: no core has both classes");
    const auto n = static_cast<double>(cores.size());
    r.auroc = sa / static_cast<double>(n_rank);
    r.auprc = sp / static_cast<double>(n_rank);
    r.ba = sb / n;
    r.ths = ss / n;
    r.thr = sr / n;
    r.audc = sd / n;
    r.audc_normalized = sdn / n;
  }
  r.cxps = cxps({r.map, r.auroc, r.miou, r.ths, r.thr, r.ba});
  if (curves) {
    curves->roc = roc_curve(pooled);
    curves->pr = pr_curve(pooled);
    const auto f1 = f1_curve(pooled, grid);
    const auto nb = net_benefit_curve(pooled, grid);
    curves->f1.clear();
    curves->net_benefit.clear();
    for (std::size_t k = 0; k < ts.size(); ++k) {
      curves->f1.push_back({ts[k], f1[k]});
      curves->net_benefit.push_back({ts[k], nb.net_benefit[k]});
    }
  }
  return r;
}

/// Sorted by CXPS descending, then AUROC descending, then method name.
inline std::vector<MetricReport> compare_methods(std::vector<MetricReport> reports) {
  std::stable_sort(reports.begin(), reports.end(), [](const MetricReport& a, const MetricReport& b) {
    if (a.cxps != b.cxps) return a.cxps > b.cxps;
    if (a.auroc != b.auroc) return a.auroc > b.auroc;
    return a.method < b.method;
  });
  return reports;
}

inline const char* kReportHeader = "Method,mAP,AUROC,AUPRC,mIoU,ThS,ThR,BA,CXPS,AUDC,AUDC_normalized";

inline std::string format_report_row(const MetricReport& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6e,%.6f", r.method.c_str(),
                r.map, r.auroc, r.auprc, r.miou, r.ths, r.thr, r.ba, r.cxps, r.audc, r.audc_normalized);
  return buf;
}

inline void write_report_csv(std::ostream& os, std::span<const MetricReport> reports) {
  os << kReportHeader << '\n';
  for (const auto& r : reports) os << format_report_row(r) << '\n';
}

inline void write_curve_csv(std::ostream& os, std::span<const CurvePoint> pts, const char* x_name,
                            const char* y_name) {
  os << x_name << ',' << y_name << '\n';
  char buf[96];
  for (const auto& p : pts) {
    std::snprintf(buf, sizeof buf, "%.9g,%.9g\n", p.x, p.y);
    os << buf;
  }
}

}  // namespace graphite
