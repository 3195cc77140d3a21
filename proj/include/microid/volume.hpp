#ifndef MICROID_VOLUME_HPP_
#define MICROID_VOLUME_HPP_

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace microid {

// Extent of a channel-major spatiotemporal volume.
struct VolumeShape {
  int channels = 0;
  int frames = 0;
  int height = 0;
  int width = 0;

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  std::size_t per_channel() const { return plane() * frames; }
  std::size_t size() const { return per_channel() * channels; }
  bool operator==(const VolumeShape&) const = default;
  std::string str() const;
};

// Dense (C, T, H, W) block of doubles. This is the activation type used by
// every layer of the network; clips enter as (T, H, W, C) floats and are
// transposed on the way in.
class Volume {
 public:
  Volume() = default;
  explicit Volume(VolumeShape shape, double fill = 0.0)
      : shape_(shape), data_(shape.size(), fill) {}

  const VolumeShape& shape() const { return shape_; }
  int channels() const { return shape_.channels; }
  int frames() const { return shape_.frames; }
  int height() const { return shape_.height; }
  int width() const { return shape_.width; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  std::span<double> channel(int c) {
    return {data_.data() + c * shape_.per_channel(), shape_.per_channel()};
  }
  std::span<const double> channel(int c) const {
    return {data_.data() + c * shape_.per_channel(), shape_.per_channel()};
  }

  double& at(int c, int t, int y, int x) { return data_[index(c, t, y, x)]; }
  double at(int c, int t, int y, int x) const { return data_[index(c, t, y, x)]; }

  std::size_t index(int c, int t, int y, int x) const {
    return ((static_cast<std::size_t>(c) * shape_.frames + t) * shape_.height + y) *
               shape_.width +
           x;
  }

  void fill(double v);
  void add(const Volume& other);

 private:
  VolumeShape shape_;
  std::vector<double> data_;
};

// Stacks a and b along the channel axis. Frame and spatial extents must match.
Volume concat_channels(const Volume& a, const Volume& b);

// Inverse of concat_channels: first `head_channels` channels go to `head`.
void split_channels(const Volume& v, int head_channels, Volume& head, Volume& tail);

// In-place ReLU.
void relu_inplace(Volume& v);

// Zeroes entries of `grad` wherever `activation` is not strictly positive.
void relu_backward_inplace(const Volume& activation, Volume& grad);

// Mean over (T, H, W) for each channel.
std::vector<double> global_average_pool(const Volume& v);

// Gradient of global_average_pool: spreads grad[c] / (T*H*W) over channel c.
Volume global_average_pool_backward(std::span<const double> grad, const VolumeShape& shape);

}  // namespace microid

#endif  // MICROID_VOLUME_HPP_
