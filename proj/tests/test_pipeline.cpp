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

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

#include "graphite/pipeline.hpp"

using namespace graphite;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

FeatureDataset tiny_dataset() {
  SynthConfig s;
  s.n_train = 12;
  s.n_test = 6;
  s.feature_dim = 6;
  s.seed = 21;
  return synth_generate(s);
}

RunConfig tiny_config(const fs::path& out) {
  RunConfig c;
  c.seed = 21;
  c.output_dir = out.string();
  c.projector_hidden = 8;
  c.embed_dim = 6;
  c.key_dim = 4;
  c.patient_hidden = 8;
  c.patient_dim = 4;
  c.gat_heads = 2;
  c.gat_head_dim = 4;
  c.gat_out_dim = 6;
  c.stage1_max_epochs = 8;
  c.stage2_max_epochs = 3;
  c.stage1_lr = 1e-2;
  return c;
}

class PipelineTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fs::temp_directory_path() / ("graphite_pipeline_test_" + std::to_string(::getpid()));
    fs::remove_all(root_);
    ds_ = new FeatureDataset(tiny_dataset());
    result_ = new RunResult(run_pipeline(*ds_, tiny_config(root_ / "a")));
  }
  static void TearDownTestSuite() {
    delete result_;
    delete ds_;
    fs::remove_all(root_);
  }
  static inline fs::path root_;
  static inline FeatureDataset* ds_ = nullptr;
  static inline RunResult* result_ = nullptr;
};

}  // namespace

TEST(ParallelFor, CoversEveryIndexAndRethrowsFirstError) {
  std::vector<int> hit(100, 0);
  parallel_for(100, 4, [&](std::size_t i) { hit[i] += 1; });
  EXPECT_EQ(std::count(hit.begin(), hit.end(), 1), 100);
  try {
    parallel_for(10, 3, [](std::size_t i) {
      if (i == 7) throw ValidationError("seven");
      if (i == 3) throw ValidationError("three");
    });
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_STREQ(e.what(), "three");
  }
}

TEST(WithStage, KeepsErrorClass) {
  EXPECT_THROW(with_stage("s", []() -> int { throw ValidationError("x"); }), ValidationError);
  EXPECT_THROW(with_stage("s", []() -> int { throw RuntimeError("x"); }), RuntimeError);
  try {
    with_stage("stage9", []() -> int { throw ValidationError("boom"); });
  } catch (const ValidationError& e) {
    EXPECT_STREQ(e.what(), "stage9: boom");
  }
}

TEST(RankCorrelation, SpearmanWithTies) {
  const std::vector<double> a{1, 2, 3, 4}, b{10, 20, 30, 40}, c{4, 3, 2, 1};
  EXPECT_NEAR(spearman(a, b), 1.0, 1e-15);
  EXPECT_NEAR(spearman(a, c), -1.0, 1e-15);
  EXPECT_EQ(ranks(std::vector<double>{5, 1, 5}), (std::vector<double>{1.5, 0.0, 1.5}));
  EXPECT_EQ(pearson(std::vector<double>{1, 1}, std::vector<double>{0, 1}), 0.0);
}

TEST(GridCsv, RoundTrip) {
  const fs::path p = fs::temp_directory_path() / ("graphite_grid_rt_" + std::to_string(::getpid()) + ".csv");
  RasterMap m(3, 2);
  m.values = {0.1, 1.0 / 3.0, 0.0, 1.0, 2e-9, 0.75};
  write_grid_csv(p, m);
  const auto back = read_grid_csv(p);
  EXPECT_EQ(back.width, 3u);
  EXPECT_EQ(back.height, 2u);
  EXPECT_EQ(back.values, m.values);
  std::ofstream(p) << "1,2\n3\n";
  EXPECT_THROW(read_grid_csv(p), ValidationError);
  fs::remove(p);
}

TEST(CoreSeed, DistinctPerCoreAndSeed) {
  EXPECT_NE(core_seed(1, "a"), core_seed(1, "b"));
  EXPECT_NE(core_seed(1, "a"), core_seed(2, "a"));
  EXPECT_EQ(core_seed(1, "a"), core_seed(1, "a"));
}

TEST_F(PipelineTest, WritesExpectedArtifacts) {
  const fs::path out = root_ / "a";
  for (const char* f : {"reports/comparison.csv", "reports/per_core.csv", "run_manifest.json",
                        "stage1_history.csv", "stage2_history.csv", "stage1_test_predictions.csv",
                        "checkpoints/milnet.ckpt", "checkpoints/gatsan.ckpt", "curves/graphite-v2_roc.csv",
                        "curves/uniform_nb.csv"})
    EXPECT_TRUE(fs::exists(out / f)) << f;
  const auto eval = evaluation_cores(*ds_);
  ASSERT_FALSE(eval.empty());
  for (const char* m : kMethodNames) {
    const fs::path stem = out / "saliency" / eval[0]->id / m;
    EXPECT_TRUE(fs::exists(stem.string() + ".csv")) << m;
    EXPECT_TRUE(fs::exists(stem.string() + ".png")) << m;
    EXPECT_TRUE(fs::exists(stem.string() + "_heat.png")) << m;
  }
  const auto map = read_grid_csv(out / "saliency" / eval[0]->id / "graphite-v2.csv");
  EXPECT_EQ(map.width, ds_->grid_width(*eval[0]));
  for (double v : map.values) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST_F(PipelineTest, ReportHasAllMethodsAndUniformIsChance) {
  const auto reports = read_report_csv(root_ / "a" / "reports" / "comparison.csv");
  ASSERT_EQ(reports.size(), kNumMethods);
  for (std::size_t k = 1; k < reports.size(); ++k) EXPECT_GE(reports[k - 1].cxps, reports[k].cxps);
  for (const auto& r : reports)
    if (r.method == "uniform") EXPECT_NEAR(r.auroc, 0.5, 1e-6);
  EXPECT_EQ(slurp(root_ / "a" / "reports" / "comparison.csv").substr(0, std::string(kReportHeader).size()),
            kReportHeader);
}

TEST_F(PipelineTest, ManifestHashesFiles) {
  const auto& files = result_->manifest["files"];
  ASSERT_TRUE(files.contains("reports/comparison.csv"));
  EXPECT_EQ(files["reports/comparison.csv"].get<std::string>(),
            sha256_file(root_ / "a" / "reports" / "comparison.csv"));
  EXPECT_FALSE(files.contains("run_manifest.json"));
  EXPECT_FALSE(result_->manifest["config"].contains("output_dir"));
  EXPECT_EQ(sha256_file(root_ / "a" / "reports" / "comparison.csv").size(), 64u);
}

TEST_F(PipelineTest, SkipTrainReproducesReports) {
  RunConfig cfg = tiny_config(root_ / "b");
  cfg.skip_train = true;
  cfg.checkpoint_dir = (root_ / "a" / "checkpoints").string();
  run_pipeline(*ds_, cfg);
  EXPECT_EQ(slurp(root_ / "a" / "reports" / "comparison.csv"), slurp(root_ / "b" / "reports" / "comparison.csv"));
}

TEST_F(PipelineTest, WorkerCountDoesNotChangeOutputs) {
  RunConfig one = tiny_config(root_ / "w1");
  one.workers = 1;
  RunConfig three = tiny_config(root_ / "w3");
  three.workers = 3;
  const auto a = run_pipeline(*ds_, one);
  const auto b = run_pipeline(*ds_, three);
  EXPECT_EQ(a.manifest["files"], b.manifest["files"]);
  EXPECT_EQ(a.manifest["files"], result_->manifest["files"]);
}

TEST(Pipeline, SkipTrainWithoutCheckpointNamesIt) {
  const fs::path out = fs::temp_directory_path() / ("graphite_pipeline_missing_" + std::to_string(::getpid()));
  fs::remove_all(out);
  RunConfig cfg = tiny_config(out);
  cfg.skip_train = true;
  try {
    run_pipeline(tiny_dataset(), cfg);
    FAIL();
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("milnet.ckpt"), std::string::npos) << msg;
    EXPECT_NE(msg.find("skip_train"), std::string::npos) << msg;
  }
  fs::remove_all(out);
}

TEST(Pipeline, RejectsDatasetWithoutEvaluationCores) {
  auto ds = tiny_dataset();
  for (auto& c : ds.cores) c.split = "train";
  EXPECT_THROW(run_pipeline(ds, tiny_config(fs::temp_directory_path() / "graphite_no_test")), ValidationError);
}
