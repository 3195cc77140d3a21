#ifndef MICROID_LAYERS_HPP_
#define MICROID_LAYERS_HPP_

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "microid/volume.hpp"

namespace microid {

// (temporal, vertical, horizontal) triple used for kernels, strides and pads.
struct Dims3 {
  int t = 1;
  int h = 1;
  int w = 1;
  bool operator==(const Dims3&) const = default;
};

struct Conv3dSpec {
  int in_channels = 1;
  int out_channels = 1;
  Dims3 kernel;
  Dims3 stride;
  Dims3 pad;

  VolumeShape output_shape(const VolumeShape& in) const;
  std::size_t weight_count() const {
    return static_cast<std::size_t>(out_channels) * in_channels * kernel.t * kernel.h * kernel.w;
  }
};

// Parameter gradients of one layer, accumulated across a mini-batch.
struct LayerGrad {
  std::vector<double> weight;
  std::vector<double> bias;

  void zero();
};

/**
 * 3D convolution computed by unrolling input patches into a column matrix
 * (vol2col) and multiplying with the (out_channels x in*kt*kh*kw) filter
 * matrix with Eigen. Backward rolls the column gradient back (col2vol).
 *
 * Weights are laid out (out, in, kt, kh, kw); bias is per output channel.
 */
class Conv3d {
 public:
  Conv3d() = default;
  explicit Conv3d(const Conv3dSpec& spec);

  const Conv3dSpec& spec() const { return spec_; }

  // He-normal weights scaled by fan-in, zero bias.
  void initialize(std::mt19937_64& rng);

  Volume forward(const Volume& input) const;

  // Accumulates parameter gradients into `grad` (skipped when null) and
  // returns the gradient w.r.t. `input` when `need_input_grad` is set.
  Volume backward(const Volume& input, const Volume& out_grad, LayerGrad* grad,
                  bool need_input_grad) const;

  LayerGrad make_grad() const;

  std::vector<double>& weight() { return weight_; }
  const std::vector<double>& weight() const { return weight_; }
  std::vector<double>& bias() { return bias_; }
  const std::vector<double>& bias() const { return bias_; }

 private:
  void check_input(const VolumeShape& in) const;

  Conv3dSpec spec_;
  std::vector<double> weight_;
  std::vector<double> bias_;
};

// Fully connected layer, weights (out, in) row-major.
class Linear {
 public:
  Linear() = default;
  Linear(int in_features, int out_features);

  int in_features() const { return in_; }
  int out_features() const { return out_; }

  void initialize(std::mt19937_64& rng);
  std::vector<double> forward(std::span<const double> x) const;
  std::vector<double> backward(std::span<const double> x, std::span<const double> out_grad,
                               LayerGrad* grad) const;
  LayerGrad make_grad() const;

  std::vector<double>& weight() { return weight_; }
  const std::vector<double>& weight() const { return weight_; }
  std::vector<double>& bias() { return bias_; }
  const std::vector<double>& bias() const { return bias_; }

 private:
  int in_ = 0;
  int out_ = 0;
  std::vector<double> weight_;
  std::vector<double> bias_;
};

}  // namespace microid

#endif  // MICROID_LAYERS_HPP_
