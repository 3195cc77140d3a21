#include <random>
#include <vector>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "microid/error.hpp"
#include "microid/evaluation.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace microid {
namespace {

using testing::brute_force_hits;
using testing::random_records;

TEST(EvaluationTest, Rank1MatchesBruteForceCounter) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + trial % 37;
    const int k = 2 + trial % 6;
    const auto records = random_records(rng, n, k);
    const int hits = brute_force_hits(records);
    EXPECT_EQ(rank1_accuracy(records), 100.0 * hits / n);
    const EvaluationReport report = make_report(records, k);
    EXPECT_EQ(report.n_hits, hits);
    EXPECT_EQ(report.n_total, n);
    EXPECT_TRUE(confusion_consistent(report));
  }
}

TEST(EvaluationTest, HandExamples) {
  std::vector<PredictionRecord> r;
  r.push_back(make_record("a", 0, {0.7, 0.3}));
  r.push_back(make_record("b", 1, {0.5, 0.5}));  // tie -> class 0, a miss
  r.push_back(make_record("c", 1, {0.2, 0.8}));
  r.push_back(make_record("d", 0, {0.1, 0.9}));
  EXPECT_DOUBLE_EQ(rank1_accuracy(r), 50.0);
  EXPECT_DOUBLE_EQ(rank_k_accuracy(r, 1), 50.0);
  EXPECT_DOUBLE_EQ(rank_k_accuracy(r, 2), 100.0);
  const EvaluationReport rep = make_report(r, 2);
  EXPECT_EQ(rep.confusion_matrix, (std::vector<std::vector<int>>{{1, 1}, {1, 1}}));
  EXPECT_DOUBLE_EQ(rep.per_subject_accuracy.at(0), 50.0);
  EXPECT_DOUBLE_EQ(rep.per_subject_accuracy.at(1), 50.0);
}

TEST(EvaluationTest, PerfectAndHopelessModels) {
  std::vector<PredictionRecord> good, bad;
  for (int i = 0; i < 10; ++i) {
    const int y = i % 3;
    std::vector<double> p(3, 0.0);
    p[y] = 1.0;
    good.push_back(make_record("g" + std::to_string(i), y, p));
    std::vector<double> q(3, 0.0);
    q[(y + 1) % 3] = 1.0;
    bad.push_back(make_record("b" + std::to_string(i), y, q));
  }
  EXPECT_DOUBLE_EQ(rank1_accuracy(good), 100.0);
  EXPECT_DOUBLE_EQ(rank1_accuracy(bad), 0.0);
}

TEST(EvaluationTest, Errors) {
  EXPECT_THROW(rank1_accuracy({}), DataError);
  EXPECT_THROW(make_record("x", 2, {0.5, 0.5}), DataError);
  EXPECT_THROW(make_record("x", 0, {}), ShapeError);
  EXPECT_THROW(make_report({}, 2), DataError);
  std::vector<PredictionRecord> r{make_record("x", 1, {0.1, 0.2, 0.7})};
  EXPECT_THROW(make_report(r, 2), DataError);
}

TEST(EvaluationTest, ConfusionCheckDetectsTampering) {
  std::mt19937_64 rng(5);
  EvaluationReport rep = make_report(random_records(rng, 20, 4), 4);
  ASSERT_TRUE(confusion_consistent(rep));
  rep.n_hits += 1;
  EXPECT_FALSE(confusion_consistent(rep));
}

TEST(EvaluationTest, ReportSerializationAndTable) {
  std::vector<PredictionRecord> r{make_record("a", 0, {0.9, 0.1}), make_record("b", 1, {0.6, 0.4})};
  const EvaluationReport rep = make_report(r, 2);
  const nlohmann::json j = rep;
  EXPECT_EQ(j["n_hits"], 1);
  EXPECT_EQ(j["n_total"], 2);
  EXPECT_EQ(j["records"][1]["predicted_label"], 0);
  EXPECT_EQ(j["matrix"][1][0], 1);
  const std::string table = format_report(rep, "demo", {{0, 7}, {1, 12}});
  EXPECT_NE(table.find("50.00%"), std::string::npos);
  EXPECT_NE(table.find("12"), std::string::npos);
}

TEST(EvaluationTest, EvaluateModelIsJobIndependent) {
  const Model model(testing::mini_config());
  std::vector<ClipTensor> clips;
  for (int i = 0; i < 5; ++i) clips.push_back(testing::random_clip(8, 8, 8, 1, 60 + i, i % 2));
  const EvaluationReport a = evaluate_model(model, clips, 1);
  const EvaluationReport b = evaluate_model(model, clips, 4);
  EXPECT_EQ(nlohmann::json(a).dump(), nlohmann::json(b).dump());
  EXPECT_TRUE(confusion_consistent(a));
}

}  // namespace
}  // namespace microid
