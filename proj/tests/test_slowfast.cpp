#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "microid/slowfast.hpp"
#include "test_support.hpp"

namespace microid {
namespace {

using testing::mini_config;
using testing::random_clip;

ClipTensor constant_clip(const InputShape& s, float value) {
  ClipTensor c = random_clip(s.frames, s.height, s.width, s.channels, 1);
  std::fill(c.data.begin(), c.data.end(), value);
  return c;
}

const ParameterView* find_param(const std::vector<ParameterView>& params, const std::string& name) {
  for (const ParameterView& p : params)
    if (p.name == name) return &p;
  return nullptr;
}

TEST(ModelConfigTest, ValidationRules) {
  ModelConfig c;
  EXPECT_NO_THROW(c.validate());
  c.alpha = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.num_classes = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.beta = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.beta = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.base_channels = 4;
  c.beta = 1.0 / 16.0;  // round(0.25) = 0 fast channels
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelConfigTest, JsonRoundTrip) {
  ModelConfig c;
  c.alpha = 4;
  c.beta = 0.125;
  c.stage_depths = {2, 1};
  c.input_shape = InputShape{64, 64, 64, 1};
  c.seed = 99;
  nlohmann::json j = c;
  const ModelConfig back = j.get<ModelConfig>();
  EXPECT_EQ(back.alpha, 4);
  EXPECT_EQ(back.beta, 0.125);
  EXPECT_EQ(back.stage_depths, c.stage_depths);
  EXPECT_EQ(back.input_shape, c.input_shape);
  EXPECT_EQ(back.seed, 99u);
  EXPECT_EQ(architecture_fingerprint(back), architecture_fingerprint(c));
}

TEST(SamplePathwaysTest, FrameCountsForTableAlphas) {
  const ClipTensor clip = random_clip(64, 4, 4, 1, 5);
  for (auto [alpha, slow] : {std::pair{4, 16}, std::pair{16, 4}, std::pair{1, 64}}) {
    const PathwayInputs p = sample_pathways(clip, alpha);
    EXPECT_EQ(p.slow.frames(), slow);
    EXPECT_EQ(p.fast.frames(), 64);
    EXPECT_EQ(p.slow.frames() * alpha, p.fast.frames());
    EXPECT_EQ(p.slow.height(), 4);
    EXPECT_EQ(p.fast.width(), 4);
  }
  EXPECT_THROW(sample_pathways(clip, 3), ConfigError);
}

TEST(SamplePathwaysTest, SlowTakesEveryAlphaFrameFromZero) {
  const ClipTensor clip = random_clip(16, 3, 3, 3, 8);
  const PathwayInputs p = sample_pathways(clip, 4);
  for (int t = 0; t < 4; ++t)
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x) {
          EXPECT_EQ(p.slow.at(c, t, y, x), clip.at(4 * t, y, x, c));
          EXPECT_EQ(p.fast.at(c, 4 * t + 1, y, x), clip.at(4 * t + 1, y, x, c));
        }
  const PathwayInputs same = sample_pathways(clip, 1);
  for (std::size_t i = 0; i < same.slow.size(); ++i)
    EXPECT_EQ(same.slow.data()[i], same.fast.data()[i]);
}

TEST(BuildModelTest, DeterministicParametersAndFingerprint) {
  ModelConfig c = mini_config(4);
  const Model a = build_model(c);
  const Model b = build_model(c);
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  EXPECT_EQ(parameter_digest(a), parameter_digest(b));
  c.seed += 1;
  const Model d = build_model(c);
  EXPECT_EQ(a.fingerprint(), d.fingerprint());
  EXPECT_NE(parameter_digest(a), parameter_digest(d));
}

TEST(BuildModelTest, BetaHalvedHalvesFastWidthsOnly) {
  ModelConfig c;
  c.beta = 1.0 / 8.0;
  c.alpha = 4;
  ModelConfig h = c;
  h.beta = 1.0 / 16.0;
  Model a(c), b(h);
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  for (int s = 0; s < 3; ++s) {
    EXPECT_EQ(c.fast_width(s), 2 * h.fast_width(s));
    EXPECT_EQ(c.slow_width(s), h.slow_width(s));
    const std::string fast = "fast.stage" + std::to_string(s) + ".block0.conv_b.weight";
    EXPECT_EQ(find_param(pa, fast)->shape[0], c.fast_width(s));
    EXPECT_EQ(find_param(pb, fast)->shape[0], h.fast_width(s));
  }
  EXPECT_EQ(find_param(pa, "slow.stage0.block0.conv_a.weight")->shape,
            find_param(pb, "slow.stage0.block0.conv_a.weight")->shape);
  EXPECT_NE(a.fingerprint(), b.fingerprint());
}

TEST(BuildModelTest, LateralIsTimeStridedByAlpha) {
  ModelConfig c = mini_config(4);
  Model m(c);
  const auto params = m.parameters();
  const ParameterView* lat = find_param(params, "lateral0.weight");
  ASSERT_NE(lat, nullptr);
  // (out, in, kt, kh, kw): kernel spans alpha frames
  EXPECT_EQ(lat->shape, (std::vector<int>{2 * c.fast_width(0), c.fast_width(0), 4, 1, 1}));
}

TEST(BuildModelTest, HeadDimensionMatchesClasses) {
  ModelConfig c = mini_config();
  c.num_classes = 8;
  Model m(c);
  const auto logits = m.forward(random_clip(8, 8, 8, 1, 2));
  EXPECT_EQ(logits.size(), 8u);
}

TEST(BuildModelTest, BiasesStartAtZero) {
  Model m(mini_config());
  for (const ParameterView& p : m.parameters()) {
    if (p.name.ends_with(".bias") && p.name != "head.bias") {
      for (double v : p.values) EXPECT_EQ(v, 0.0) << p.name;
    }
  }
}

TEST(ForwardTest, FiniteLogitsAndShapeChecks) {
  ModelConfig c = mini_config();
  Model m(c);
  const auto zeros = m.forward(constant_clip(c.input_shape, 0.0f));
  const auto ones = m.forward(constant_clip(c.input_shape, 1.0f));
  ASSERT_EQ(zeros.size(), 2u);
  for (double v : zeros) EXPECT_TRUE(std::isfinite(v));
  for (double v : ones) EXPECT_TRUE(std::isfinite(v));
  EXPECT_NE(zeros, ones);
  EXPECT_THROW(m.forward(random_clip(8, 8, 9, 1, 1)), ShapeError);
  EXPECT_THROW(m.forward(random_clip(16, 8, 8, 1, 1)), ShapeError);
  EXPECT_THROW(m.forward(random_clip(8, 8, 8, 3, 1)), ShapeError);
}

TEST(ForwardTest, BatchMatchesPerSample) {
  ModelConfig c = mini_config();
  Model m(c);
  std::vector<ClipTensor> clips;
  for (int i = 0; i < 5; ++i) clips.push_back(random_clip(8, 8, 8, 1, 40 + i));
  const auto batch = m.forward_batch(clips);
  ASSERT_EQ(batch.size(), 5u);
  for (int i = 0; i < 5; ++i) {
    const auto single = m.forward(clips[i]);
    for (int k = 0; k < 2; ++k) EXPECT_NEAR(batch[i][k], single[k], 1e-5);
  }
}

TEST(ForwardTest, BitwiseDeterministic) {
  ModelConfig c = mini_config(4);
  const ClipTensor clip = random_clip(8, 8, 8, 1, 77);
  EXPECT_EQ(Model(c).forward(clip), Model(c).forward(clip));
}

TEST(ForwardTest, SeesTemporalOrder) {
  ModelConfig c = mini_config(2);
  Model m(c);
  ClipTensor clip = random_clip(8, 8, 8, 1, 12);
  ClipTensor reversed = clip;
  const std::size_t frame = static_cast<std::size_t>(8) * 8;
  for (int t = 0; t < 8; ++t)
    std::copy_n(clip.data.begin() + (7 - t) * frame, frame, reversed.data.begin() + t * frame);
  EXPECT_NE(m.forward(clip), m.forward(reversed));
}

TEST(SoftmaxTest, ClosedFormAndInvariants) {
  const auto p = softmax(std::vector<double>{2.0, 0.0});
  const double e2 = std::exp(2.0);
  EXPECT_NEAR(p[0], e2 / (e2 + 1.0), 1e-15);
  EXPECT_NEAR(p[1], 1.0 / (e2 + 1.0), 1e-15);
  EXPECT_NEAR(p[0], 0.8808, 1e-4);
  EXPECT_NEAR(p[1], 0.1192, 1e-4);

  const auto shifted = softmax(std::vector<double>{1002.0, 1000.0});
  EXPECT_NEAR(shifted[0], p[0], 1e-12);

  const auto uniform = softmax(std::vector<double>{3.0, 3.0, 3.0, 3.0});
  for (double v : uniform) EXPECT_DOUBLE_EQ(v, 0.25);

  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 5.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> logits(2 + trial % 7);
    for (double& v : logits) v = n(rng);
    const auto q = softmax(logits);
    double sum = 0.0;
    for (double v : q) {
      EXPECT_GE(v, 0.0);
      sum += v;
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
    EXPECT_EQ(argmax(q), argmax(logits));
  }
}

TEST(SoftmaxTest, ArgmaxLowestIndexOnTies) {
  EXPECT_EQ(argmax(std::vector<double>{1.0, 3.0, 3.0}), 1);
  EXPECT_THROW(argmax(std::vector<double>{}), ShapeError);
}

TEST(PredictProbaTest, ZeroHeadGivesUniform) {
  ModelConfig c = mini_config();
  c.num_classes = 4;
  Model m(c);
  for (ParameterView& p : m.parameters())
    if (p.name.starts_with("head.")) std::fill(p.values.begin(), p.values.end(), 0.0);
  for (double v : predict_proba(m, random_clip(8, 8, 8, 1, 3))) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(PredictProbaTest, ArgmaxAgreesWithLogits) {
  ModelConfig c = mini_config();
  c.num_classes = 5;
  Model m(c);
  for (int i = 0; i < 10; ++i) {
    const ClipTensor clip = random_clip(8, 8, 8, 1, 300 + i);
    const auto logits = m.forward(clip);
    const auto p = predict_proba(m, clip);
    double sum = 0.0;
    for (double v : p) sum += v;
    EXPECT_NEAR(sum, 1.0, 1e-6);
    EXPECT_EQ(argmax(p), argmax(logits));
  }
}

TEST(CrossEntropyTest, MatchesLogSoftmax) {
  const std::vector<double> logits{0.5, -1.0, 2.0};
  const auto p = softmax(logits);
  EXPECT_NEAR(cross_entropy(logits, 2), -std::log(p[2]), 1e-14);
  EXPECT_NEAR(cross_entropy(std::vector<double>{800.0, 0.0}, 1), 800.0, 1e-9);
}

class GradientCheckTest : public ::testing::TestWithParam<int> {};

TEST_P(GradientCheckTest, MiniatureModelMatchesCentralDifferences) {
  const int alpha = GetParam();
  ModelConfig c = mini_config(alpha, 11 + alpha);
  Model m(c);
  testing::jitter_biases(m, alpha);
  testing::randomize_feature_norm(m, alpha);
  const ClipTensor clip = random_clip(8, 8, 8, 1, 500 + alpha);
  for (int label = 0; label < 2; ++label) {
    const auto r = testing::check_loss_gradients(m, clip, label, 1e-3);
    EXPECT_EQ(r.passed, r.checked) << "worst " << r.worst << " at " << r.worst_name;
    EXPECT_EQ(static_cast<std::size_t>(r.checked), m.parameter_count());
  }
}

INSTANTIATE_TEST_SUITE_P(Alphas, GradientCheckTest, ::testing::Values(1, 2, 4, 8));

TEST(GradientCheckTest, TwoStageRgbModel) {
  ModelConfig c = mini_config(2, 21);
  c.base_channels = 8;
  c.stage_depths = {1, 2};
  c.num_classes = 3;
  c.input_shape.channels = 3;
  Model m(c);
  testing::jitter_biases(m, 22);
  testing::randomize_feature_norm(m, 23);
  const ClipTensor clip = random_clip(8, 8, 8, 3, 900, 1);
  // Deeper stacks put a few units within one step of a ReLU kink, where no
  // difference quotient is meaningful; those are skipped but must stay rare.
  const auto r = testing::check_loss_gradients(m, clip, 1, 1e-3, 1e-6, true);
  EXPECT_EQ(r.passed, r.checked) << "worst " << r.worst << " at " << r.worst_name;
  EXPECT_LT(r.kinks, r.checked / 100) << r.kinks << " kinks";
}

TEST(GradientCheckTest, SinglePathwayModel) {
  ModelConfig c = mini_config(1, 5);
  c.two_pathway = false;
  c.input_shape.frames = 1;
  Model m(c);
  testing::jitter_biases(m, 6);
  testing::randomize_feature_norm(m, 7);
  const auto r = testing::check_loss_gradients(m, random_clip(1, 8, 8, 1, 6), 0, 1e-3);
  EXPECT_EQ(r.passed, r.checked) << "worst " << r.worst << " at " << r.worst_name;
}

TEST(GradientsTest, AccumulateRejectsBadLabel) {
  Model m(mini_config());
  Gradients g = m.make_gradients();
  EXPECT_THROW(m.accumulate_gradients(random_clip(8, 8, 8, 1, 1), 2, g), DataError);
}

TEST(CheckpointTest, RoundTripPreservesEverything) {
  testing::TempDir dir("ckpt");
  ModelConfig c = mini_config(4, 8);
  c.num_classes = 3;
  Model m(c);
  testing::randomize_feature_norm(m, 9);
  const auto path = dir.path / "model.ckpt";
  save_checkpoint(m, path);
  const Model back = load_checkpoint(path);
  EXPECT_EQ(back.feature_stats().mean, m.feature_stats().mean);
  EXPECT_EQ(back.feature_stats().variance, m.feature_stats().variance);
  EXPECT_EQ(back.fingerprint(), m.fingerprint());
  EXPECT_EQ(parameter_digest(back), parameter_digest(m));
  const ClipTensor clip = random_clip(8, 8, 8, 1, 4);
  EXPECT_EQ(back.forward(clip), m.forward(clip));
}

TEST(CheckpointTest, RoundTripWithoutFeatureNorm) {
  testing::TempDir dir("ckpt_plain");
  ModelConfig c = mini_config();
  c.feature_norm = false;
  const Model m(c);
  save_checkpoint(m, dir.path / "m.ckpt");
  const Model back = load_checkpoint(dir.path / "m.ckpt");
  EXPECT_FALSE(back.config().feature_norm);
  EXPECT_EQ(parameter_digest(back), parameter_digest(m));
}

TEST(FeatureNormTest, InferenceUsesStoredStatistics) {
  ModelConfig plain_cfg = mini_config(2, 4);
  plain_cfg.feature_norm = false;
  const Model plain(plain_cfg);
  Model normed(mini_config(2, 4));
  EXPECT_NE(plain.fingerprint(), normed.fingerprint());
  const std::size_t features = normed.feature_stats().mean.size();
  EXPECT_EQ(normed.parameter_count(), plain.parameter_count() + 2 * features);

  // mean 0, variance 1 - eps: normalization is the identity
  FeatureStats st;
  st.mean.assign(features, 0.0);
  st.variance.assign(features, 1.0 - kFeatureNormEpsilon);
  normed.set_feature_stats(st);
  const ClipTensor clip = random_clip(8, 8, 8, 1, 77);
  const auto a = plain.forward(clip);
  const auto b = normed.forward(clip);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);

  // stored statistics equal to the features themselves give shift-only logits
  const ForwardTrace tr = normed.trace(clip);
  st.mean = tr.pooled;
  normed.set_feature_stats(st);
  for (double v : normed.trace(clip).normalized) EXPECT_NEAR(v, 0.0, 1e-12);

  st.variance[0] = -1.0;
  EXPECT_THROW(normed.set_feature_stats(st), ShapeError);
  EXPECT_THROW(Model(plain_cfg).set_feature_stats(st), ConfigError);
}

TEST(CheckpointTest, RejectsFingerprintMismatch) {
  testing::TempDir dir("ckpt_bad");
  Model m(mini_config());
  const auto path = dir.path / "model.ckpt";
  save_checkpoint(m, path);

  // Rewrite the stored fingerprint inside the JSON header.
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  const std::string fp = hex64(m.fingerprint());
  const auto pos = bytes.find(fp);
  ASSERT_NE(pos, std::string::npos);
  bytes.replace(pos, fp.size(), std::string(fp.size(), '0'));
  std::ofstream(path, std::ios::binary) << bytes;
  EXPECT_THROW(load_checkpoint(path), ShapeError);
}

TEST(CheckpointTest, RejectsGarbage) {
  testing::TempDir dir("ckpt_garbage");
  const auto path = dir.path / "junk.ckpt";
  std::ofstream(path) << "not a checkpoint at all";
  EXPECT_THROW(load_checkpoint(path), IoError);
  EXPECT_THROW(load_checkpoint(dir.path / "missing.ckpt"), IoError);
}

}  // namespace
}  // namespace microid
