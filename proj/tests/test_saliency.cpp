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


#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "graphite/saliency.hpp"
#include "oracles.hpp"

using namespace graphite;

namespace {

RasterMap random_map(std::size_t w, std::size_t h, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  RasterMap m(w, h);
  for (double& v : m.values) v = u(rng);
  return m;
}

double map_sum(const RasterMap& m) { return std::accumulate(m.values.begin(), m.values.end(), 0.0); }

FusionResult equal_confidence_fusion(const FusionConfig& cfg) {
  // Three maps with identical value multisets have identical confidences.
  RasterMap a(4, 1), b(4, 1), c(4, 1);
  a.values = {0.1, 0.9, 0.4, 0.2};
  b.values = {0.9, 0.2, 0.1, 0.4};
  c.values = {0.4, 0.1, 0.2, 0.9};
  return confidence_fuse(a, b, c, cfg);
}

}  // namespace

TEST(Rasterize, PaintsAndAveragesFootprints) {
  // 224 px / 16 = 14 cells per level-0 patch side.
  const ScoredPatch one[] = {{0, 0, 0, 1.0}};
  const auto full = rasterize(one, 14, 14, 16);
  for (double v : full.values) EXPECT_EQ(v, 1.0);

  const ScoredPatch two[] = {{0, 0, 0, 1.0}, {0, 0, 1, 0.0}};
  const auto side = rasterize(two, 28, 14, 16);
  EXPECT_EQ(side.at(3, 3), 1.0);
  EXPECT_EQ(side.at(20, 3), 0.0);

  const ScoredPatch overlap[] = {{0, 0, 0, 1.0}, {0, 0, 0, 0.0}};
  EXPECT_EQ(rasterize(overlap, 14, 14, 16).at(5, 5), 0.5);

  // A level-1 patch covers 28 x 28 cells.
  const ScoredPatch coarse[] = {{1, 0, 0, 0.8}};
  const auto c = rasterize(coarse, 30, 30, 16);
  EXPECT_EQ(c.at(27, 27), 0.8);
  EXPECT_EQ(c.at(28, 28), 0.0);
}

TEST(Rasterize, FootprintOutsideGridNamesPatch) {
  const ScoredPatch p[] = {{0, 1, 0, 1.0}};
  try {
    rasterize(p, 14, 14, 16);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos);
  }
}

TEST(Gaussian, KernelRadiusAndNormalization) {
  const auto k = gaussian_kernel(1.0);
  EXPECT_EQ(k.size(), 7u);
  EXPECT_NEAR(std::accumulate(k.begin(), k.end(), 0.0), 1.0, 1e-15);
  EXPECT_EQ(gaussian_kernel(2.5).size(), 2u * 8 + 1);
  EXPECT_THROW(gaussian_kernel(0.0), ValidationError);
}

TEST(Gaussian, PreservesConstantsAndMass) {
  RasterMap c(9, 7, 0.37);
  for (double sigma : {0.5, 1.0, 4.0}) {
    for (double v : gaussian_smooth(c, sigma).values) EXPECT_NEAR(v, 0.37, 1e-12);
  }
  RasterMap impulse(41, 41);
  impulse.at(20, 20) = 1.0;
  for (double sigma : {1.0, 2.0, 4.0}) EXPECT_NEAR(map_sum(gaussian_smooth(impulse, sigma)), 1.0, 1e-9);
}

TEST(Gaussian, ImpulseCenterIsKernelCenterWeight) {
  RasterMap impulse(15, 15);
  impulse.at(7, 7) = 1.0;
  const auto k = gaussian_kernel(1.0);
  const double center = k[k.size() / 2];
  EXPECT_NEAR(gaussian_smooth(impulse, 1.0).at(7, 7), center * center, 1e-15);
}

TEST(Gaussian, Semigroup) {
  RasterMap impulse(61, 61);
  impulse.at(30, 30) = 1.0;
  impulse.at(20, 35) = 0.5;
  const auto twice = gaussian_smooth(gaussian_smooth(impulse, 2.0), 2.0);
  const auto once = gaussian_smooth(impulse, 2.0 * std::sqrt(2.0));
  double diff = 0.0, norm = 0.0;
  for (std::size_t i = 0; i < once.size(); ++i) {
    diff += (twice.values[i] - once.values[i]) * (twice.values[i] - once.values[i]);
    norm += once.values[i] * once.values[i];
  }
  EXPECT_LT(std::sqrt(diff), 0.02 * std::sqrt(norm));
}

TEST(Normalize, MinMaxAndRelativeEpsilon) {
  RasterMap m(3, 1);
  m.values = {2.0, 4.0, 3.0};
  const auto n = normalize_minmax(m);
  EXPECT_EQ(n.values[0], 0.0);
  EXPECT_LT(n.values[1], 1.0);
  EXPECT_NEAR(n.values[1], 1.0, 1e-8);
  EXPECT_TRUE(n.normalized);
  for (double v : normalize_minmax(RasterMap(4, 4, 0.3)).values) EXPECT_EQ(v, 0.0);

  // Tiny-magnitude scores keep their full range.
  const std::vector<double> tiny{1e-11, 3e-11, 2e-11};
  const auto s = normalize_scores(tiny);
  EXPECT_NEAR(s[1], 1.0, 1e-7);
  EXPECT_NEAR(s[2], 0.5, 1e-7);
  for (double v : normalize_scores(std::vector<double>{0.0, 0.0})) EXPECT_EQ(v, 0.0);
}

TEST(MultilevelFuse, ConstantsAndLinearity) {
  const FusionConfig cfg;
  std::vector<RasterMap> ones(3, RasterMap(12, 10, 1.0));
  for (double v : multilevel_fuse(ones, cfg).values) EXPECT_NEAR(v, 1.0, 1e-12);
  std::vector<RasterMap> first{RasterMap(12, 10, 1.0), RasterMap(12, 10), RasterMap(12, 10)};
  for (double v : multilevel_fuse(first, cfg).values) EXPECT_NEAR(v, 0.5, 1e-12);

  std::mt19937_64 rng(3);
  std::vector<RasterMap> maps{random_map(12, 10, rng), random_map(12, 10, rng), random_map(12, 10, rng)};
  const auto base = multilevel_fuse(maps, cfg);
  auto scaled = maps;
  for (auto& m : scaled)
    for (double& v : m.values) v *= 2.5;
  const auto fused = multilevel_fuse(scaled, cfg);
  for (std::size_t i = 0; i < base.size(); ++i) EXPECT_NEAR(fused.values[i], 2.5 * base.values[i], 1e-12);

  std::vector<RasterMap> bad{RasterMap(12, 10), RasterMap(11, 10)};
  EXPECT_THROW(multilevel_fuse(bad, cfg), ValidationError);
}

TEST(Confidence, PercentileRule) {
  RasterMap c(3, 3, 0.7);
  EXPECT_DOUBLE_EQ(confidence_score(c), 0.7);
  RasterMap r(10, 10);
  std::iota(r.values.begin(), r.values.end(), 1.0);
  EXPECT_DOUBLE_EQ(confidence_score(r), 95.5);
  auto k = r;
  for (double& v : k.values) v *= 3.0;
  EXPECT_NEAR(confidence_score(k), 3.0 * 95.5, 1e-12);
}

TEST(ConfidenceFuse, EqualConfidenceWeights) {
  const auto r = equal_confidence_fusion({});
  ASSERT_EQ(r.weights.size(), 3u);
  EXPECT_NEAR(r.weights[0], 0.2, 1e-12);
  EXPECT_NEAR(r.weights[1], 0.1, 1e-12);
  EXPECT_NEAR(r.weights[2], 1.0 / 30.0, 1e-12);
}

TEST(ConfidenceFuse, RangeAndScaleInvariance) {
  std::mt19937_64 rng(4);
  const FusionConfig cfg;
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_map(16, 12, rng), b = random_map(16, 12, rng), c = random_map(16, 12, rng);
    const auto base = confidence_fuse(a, b, c, cfg);
    for (double v : base.map.values) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    for (std::size_t k = 0; k < 3; ++k) EXPECT_LE(base.weights[k], cfg.base[k] + 1e-15);
    for (double s : {0.5, 3.0}) {
      auto sa = a, sb = b, sc = c;
      for (auto* m : {&sa, &sb, &sc})
        for (double& v : m->values) v *= s;
      const auto scaled = confidence_fuse(sa, sb, sc, cfg);
      for (std::size_t i = 0; i < base.map.size(); ++i)
        EXPECT_NEAR(scaled.map.values[i], base.map.values[i], 1e-9);
    }
  }
}

TEST(ConfidenceFuse, ConstantInputsNormalizeToZero) {
  RasterMap c(5, 5, 0.4);
  const auto r = confidence_fuse(c, c, c, FusionConfig{});
  for (double v : r.map.values) EXPECT_EQ(v, 0.0);
  // All-zero confidences fall back to the base coefficients.
  RasterMap z(5, 5, 0.0);
  const auto f = confidence_fuse(z, z, z, FusionConfig{});
  EXPECT_NEAR(f.weights[0], 0.6, 1e-15);
  EXPECT_NEAR(f.weights[2], 0.1, 1e-15);
}

TEST(Variants, LadderRules) {
  const FusionConfig cfg;
  VariantInputs in;
  in.combined = RasterMap(4, 4, 0.3);
  EXPECT_EQ(graphite_variant(Variant::Base, in, cfg).map.values, std::vector<double>(16, 0.0));
  EXPECT_THROW(graphite_variant(Variant::V1, in, cfg), ValidationError);

  RasterMap a(4, 1), b(4, 1);
  a.values = {0.1, 0.9, 0.4, 0.2};
  b.values = {0.9, 0.2, 0.1, 0.4};
  in.combined = a;
  in.mil = b;
  const auto v1 = graphite_variant(Variant::V1, in, cfg);
  EXPECT_NEAR(v1.weights[0], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(v1.weights[1], 1.0 / 3.0, 1e-12);
  EXPECT_THROW(graphite_variant(Variant::V2, in, cfg), ValidationError);

  in.gradient = RasterMap(4, 1, 0.5);
  const auto v2 = graphite_variant(Variant::V2, in, cfg);
  const auto direct = confidence_fuse(*in.combined, *in.mil, *in.gradient, cfg);
  EXPECT_EQ(v2.map.values, direct.map.values);

  EXPECT_EQ(parse_variant("v2"), Variant::V2);
  EXPECT_THROW(parse_variant("v3"), ValidationError);
}

TEST(MilMaps, SinglePatchIsZeroAndTwoPatchesSpanRange) {
  std::mt19937_64 rng(6);
  MilModel m(oracle::mini_mil_config(), 6);
  const PatchCell one_cell[] = {{0, 0}};
  Bag one{"x", oracle::random_tensor(1, 4, rng), 1};
  for (double v : mil_attention_map(m, one, one_cell, 14, 14, 16).values) EXPECT_EQ(v, 0.0);

  const PatchCell cells[] = {{0, 0}, {0, 1}};
  Bag two{"y", oracle::random_tensor(2, 4, rng), 1};
  const auto map = mil_attention_map(m, two, cells, 28, 14, 16);
  const double lo = std::min(map.at(0, 0), map.at(20, 0));
  const double hi = std::max(map.at(0, 0), map.at(20, 0));
  EXPECT_EQ(lo, 0.0);
  EXPECT_NEAR(hi, 1.0, 1e-6);
}

TEST(GradientSaliency, DuplicatePatchesMatchAndFiniteDifferences) {
  std::mt19937_64 rng(7);
  MilModel m(oracle::mini_mil_config(), 7);
  Tensor x = oracle::random_tensor(3, 4, rng);
  for (std::size_t j = 0; j < 4; ++j) x(2, j) = x(0, j);
  const Bag bag{"g", x, 1};
  const auto g = gradient_patch_saliency(m, bag);
  EXPECT_NEAR(g[0], g[2], 1e-12 * std::max(1.0, g[0]));
  for (double v : g) EXPECT_GE(v, 0.0);

  // Directional derivative of y_hat along each patch's gradient direction
  // equals the gradient norm.
  Tape base;
  const Tensor e0 = project_patches(base, m, base.constant(x)).value();
  auto y_of = [&](const Tensor& e) {
    Tape t;
    auto [z, alpha] = mil_attention(t, m, t.constant(e));
    return classify_core(t, m, z).item();
  };
  Tensor e = e0;
  Tape t;
  Var ev = t.param(e);
  auto [z, alpha] = mil_attention(t, m, ev);
  t.backward(classify_core(t, m, z));
  const auto grad = *e.grad;
  const double h = 1e-5;
  for (std::size_t i = 0; i < 3; ++i) {
    if (g[i] == 0.0) continue;
    Tensor up = e0, dn = e0;
    for (std::size_t j = 0; j < 4; ++j) {
      const double d = grad[i * 4 + j] / g[i];
      up(i, j) += h * d;
      dn(i, j) -= h * d;
    }
    const double fd = (y_of(up) - y_of(dn)) / (2 * h);
    EXPECT_LT(std::abs(fd - g[i]) / std::max(std::abs(g[i]), 1e-12), 1e-4) << "patch " << i;
  }
}

TEST(LevelMaps, OnePerLevelNormalized) {
  const auto g = oracle::mini_graph();
  std::vector<double> scores(g.size());
  std::iota(scores.begin(), scores.end(), 1.0);
  const auto maps = level_maps(g, scores, 56, 28, 16);
  ASSERT_EQ(maps.size(), 2u);
  for (const auto& m : maps) {
    EXPECT_TRUE(m.normalized);
    EXPECT_NEAR(*std::max_element(m.values.begin(), m.values.end()), 1.0, 1e-7);
  }
}
