#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "microid/error.hpp"
#include "microid/layers.hpp"
#include "microid/volume.hpp"

namespace microid {
namespace {

Volume random_volume(VolumeShape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Volume v(shape);
  for (std::size_t i = 0; i < v.size(); ++i) v.data()[i] = dist(rng);
  return v;
}

// Straightforward seven-loop convolution used as the reference.
Volume naive_conv(const Conv3d& conv, const Volume& in) {
  const Conv3dSpec& s = conv.spec();
  const VolumeShape os = s.output_shape(in.shape());
  Volume out(os);
  for (int o = 0; o < os.channels; ++o)
    for (int t = 0; t < os.frames; ++t)
      for (int y = 0; y < os.height; ++y)
        for (int x = 0; x < os.width; ++x) {
          double acc = conv.bias()[o];
          for (int c = 0; c < s.in_channels; ++c)
            for (int a = 0; a < s.kernel.t; ++a)
              for (int b = 0; b < s.kernel.h; ++b)
                for (int d = 0; d < s.kernel.w; ++d) {
                  const int ti = t * s.stride.t - s.pad.t + a;
                  const int yi = y * s.stride.h - s.pad.h + b;
                  const int xi = x * s.stride.w - s.pad.w + d;
                  if (ti < 0 || yi < 0 || xi < 0 || ti >= in.frames() || yi >= in.height() ||
                      xi >= in.width())
                    continue;
                  const std::size_t wi =
                      (((static_cast<std::size_t>(o) * s.in_channels + c) * s.kernel.t + a) *
                           s.kernel.h + b) * s.kernel.w + d;
                  acc += conv.weight()[wi] * in.at(c, ti, yi, xi);
                }
          out.at(o, t, y, x) = acc;
        }
  return out;
}

double dot(const Volume& a, const Volume& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  return s;
}

struct ConvCase {
  Conv3dSpec spec;
  VolumeShape input;
};

std::vector<ConvCase> conv_cases() {
  return {
      // direct path (few output channels), strided stem-like
      {{1, 1, {5, 5, 5}, {1, 2, 2}, {2, 2, 2}}, {1, 6, 9, 9}},
      {{2, 3, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}}, {2, 5, 6, 7}},
      {{2, 4, {4, 1, 1}, {4, 1, 1}, {0, 0, 0}}, {2, 8, 3, 3}},
      {{3, 2, {1, 3, 3}, {1, 3, 3}, {0, 1, 1}}, {3, 2, 7, 8}},
      // column path
      {{3, 6, {3, 3, 3}, {1, 2, 2}, {1, 1, 1}}, {3, 4, 8, 8}},
      {{4, 8, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}}, {4, 3, 5, 5}},
      {{2, 5, {1, 5, 5}, {1, 2, 2}, {0, 2, 2}}, {2, 3, 9, 10}},
      {{5, 6, {2, 1, 1}, {2, 1, 1}, {0, 0, 0}}, {5, 4, 3, 3}},
      {{16, 16, {1, 3, 3}, {1, 1, 1}, {0, 1, 1}}, {16, 4, 4, 4}},
      {{24, 16, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}}, {24, 4, 4, 4}},
      {{16, 16, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}}, {16, 4, 4, 4}},
      {{16, 16, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}}, {16, 4, 2, 2}},
      {{3, 2, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}}, {3, 4, 2, 2}},
      {{3, 8, {1, 3, 3}, {1, 2, 2}, {0, 1, 1}}, {3, 2, 1, 1}},
  };
}

TEST(VolumeTest, ConcatSplitRoundTrip) {
  const Volume a = random_volume({2, 3, 4, 5}, 1);
  const Volume b = random_volume({3, 3, 4, 5}, 2);
  const Volume c = concat_channels(a, b);
  EXPECT_EQ(c.channels(), 5);
  Volume head, tail;
  split_channels(c, 2, head, tail);
  EXPECT_EQ(head.shape(), a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(head.data()[i], a.data()[i]);
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_EQ(tail.data()[i], b.data()[i]);
}

TEST(VolumeTest, ConcatRejectsMismatchedExtent) {
  EXPECT_THROW(concat_channels(Volume({1, 2, 3, 3}), Volume({1, 2, 3, 4})), ShapeError);
  Volume a({1, 2, 2, 2});
  EXPECT_THROW(a.add(Volume({1, 2, 2, 3})), ShapeError);
}

TEST(VolumeTest, GlobalAveragePoolAndBackward) {
  Volume v({2, 2, 2, 2});
  for (int i = 0; i < 8; ++i) v.data()[i] = i;
  for (int i = 8; i < 16; ++i) v.data()[i] = 1.0;
  const std::vector<double> p = global_average_pool(v);
  ASSERT_EQ(p.size(), 2u);
  EXPECT_DOUBLE_EQ(p[0], 3.5);
  EXPECT_DOUBLE_EQ(p[1], 1.0);
  const std::vector<double> g{8.0, 16.0};
  const Volume gb = global_average_pool_backward(g, v.shape());
  EXPECT_DOUBLE_EQ(gb.at(0, 1, 1, 1), 1.0);
  EXPECT_DOUBLE_EQ(gb.at(1, 0, 0, 0), 2.0);
}

TEST(VolumeTest, ReluBackwardMasksByActivation) {
  Volume act({1, 1, 1, 3});
  act.data()[0] = -1.0;
  act.data()[1] = 0.0;
  act.data()[2] = 2.0;
  relu_inplace(act);
  Volume grad({1, 1, 1, 3}, 1.0);
  relu_backward_inplace(act, grad);
  EXPECT_EQ(grad.data()[0], 0.0);
  EXPECT_EQ(grad.data()[1], 0.0);
  EXPECT_EQ(grad.data()[2], 1.0);
}

TEST(Conv3dTest, OutputShape) {
  const Conv3dSpec s{1, 8, {5, 5, 5}, {1, 2, 2}, {2, 2, 2}};
  EXPECT_EQ(s.output_shape({1, 64, 64, 64}), (VolumeShape{8, 64, 32, 32}));
  const Conv3dSpec lateral{4, 8, {4, 1, 1}, {4, 1, 1}, {0, 0, 0}};
  EXPECT_EQ(lateral.output_shape({4, 64, 8, 8}), (VolumeShape{8, 16, 8, 8}));
}

TEST(Conv3dTest, RejectsWrongInputChannels) {
  Conv3d conv({2, 3, {1, 1, 1}, {1, 1, 1}, {0, 0, 0}});
  EXPECT_THROW(conv.forward(Volume({3, 2, 2, 2})), ShapeError);
}

TEST(Conv3dTest, ForwardMatchesNaiveReference) {
  std::uint64_t seed = 10;
  for (const ConvCase& cc : conv_cases()) {
    Conv3d conv(cc.spec);
    std::mt19937_64 rng(seed++);
    conv.initialize(rng);
    for (double& b : conv.bias()) b = std::uniform_real_distribution<double>(-1, 1)(rng);
    const Volume in = random_volume(cc.input, seed++);
    const Volume got = conv.forward(in);
    const Volume want = naive_conv(conv, in);
    ASSERT_EQ(got.shape(), want.shape());
    for (std::size_t i = 0; i < got.size(); ++i)
      ASSERT_NEAR(got.data()[i], want.data()[i], 1e-12) << "case " << seed << " index " << i;
  }
}

// Backward is checked as the adjoint of the linear map: for a random output
// cotangent g, <g, conv(x + e)> - <g, conv(x)> equals <grad_x, e> exactly up
// to rounding, and likewise for the weights.
TEST(Conv3dTest, BackwardIsAdjointOfForward) {
  std::uint64_t seed = 100;
  for (const ConvCase& cc : conv_cases()) {
    Conv3d conv(cc.spec);
    std::mt19937_64 rng(seed++);
    conv.initialize(rng);
    const Volume in = random_volume(cc.input, seed++);
    const VolumeShape os = cc.spec.output_shape(cc.input);
    const Volume g = random_volume(os, seed++);

    LayerGrad grad = conv.make_grad();
    const Volume gin = conv.backward(in, g, &grad, true);
    ASSERT_EQ(gin.shape(), in.shape());

    // input adjoint: conv with zero bias is linear in x
    Conv3d nobias = conv;
    std::fill(nobias.bias().begin(), nobias.bias().end(), 0.0);
    const Volume e = random_volume(cc.input, seed++);
    EXPECT_NEAR(dot(g, nobias.forward(e)), dot(gin, e), 1e-9);

    // weight adjoint: output is linear in the weights for fixed x
    Conv3d probe = nobias;
    std::vector<double> dw(conv.weight().size());
    std::uniform_real_distribution<double> dist(-1, 1);
    for (double& v : dw) v = dist(rng);
    probe.weight() = dw;
    double expect = 0.0;
    for (std::size_t i = 0; i < dw.size(); ++i) expect += dw[i] * grad.weight[i];
    EXPECT_NEAR(dot(g, probe.forward(in)), expect, 1e-9);

    // bias gradient is the per-channel sum of g
    for (int o = 0; o < os.channels; ++o) {
      double s = 0.0;
      for (double v : g.channel(o)) s += v;
      EXPECT_NEAR(grad.bias[o], s, 1e-9);
    }

    LayerGrad only = conv.make_grad();
    const Volume none = conv.backward(in, g, &only, false);
    EXPECT_TRUE(none.empty());
    for (std::size_t i = 0; i < only.weight.size(); ++i)
      EXPECT_NEAR(only.weight[i], grad.weight[i], 1e-12);
  }
}

TEST(Conv3dTest, InitializationIsSeededAndFanInScaled) {
  const Conv3dSpec s{16, 32, {3, 3, 3}, {1, 1, 1}, {1, 1, 1}};
  Conv3d a(s), b(s);
  std::mt19937_64 r1(7), r2(7);
  a.initialize(r1);
  b.initialize(r2);
  EXPECT_EQ(a.weight(), b.weight());
  double sq = 0.0;
  for (double v : a.weight()) sq += v * v;
  const double var = sq / static_cast<double>(a.weight().size());
  EXPECT_NEAR(var, 2.0 / (16 * 27), 0.1 * 2.0 / (16 * 27));
  for (double v : a.bias()) EXPECT_EQ(v, 0.0);
}

TEST(LinearTest, ForwardAndBackward) {
  Linear fc(3, 2);
  fc.weight() = {1, 2, 3, -1, 0, 1};
  fc.bias() = {0.5, -0.5};
  const std::vector<double> x{1, 1, 2};
  const std::vector<double> y = fc.forward(x);
  EXPECT_DOUBLE_EQ(y[0], 9.5);
  EXPECT_DOUBLE_EQ(y[1], 0.5);
  LayerGrad g = fc.make_grad();
  const std::vector<double> gx = fc.backward(x, std::vector<double>{1, 2}, &g);
  EXPECT_EQ(gx, (std::vector<double>{-1, 2, 5}));
  EXPECT_EQ(g.weight, (std::vector<double>{1, 1, 2, 2, 2, 4}));
  EXPECT_EQ(g.bias, (std::vector<double>{1, 2}));
}

}  // namespace
}  // namespace microid
