#include "microid/volume.hpp"

#include <algorithm>
#include <cstring>

#include <fmt/format.h>

#include "microid/error.hpp"

namespace microid {

std::string VolumeShape::str() const {
  return fmt::format("(C={}, T={}, H={}, W={})", channels, frames, height, width);
}

void Volume::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void Volume::add(const Volume& other) {
  if (other.shape() != shape_) {
    throw ShapeError(fmt::format("cannot add {} to {}", other.shape().str(), shape_.str()));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

Volume concat_channels(const Volume& a, const Volume& b) {
  if (a.frames() != b.frames() || a.height() != b.height() || a.width() != b.width()) {
    throw ShapeError(
        fmt::format("channel concat needs equal extents, got {} and {}", a.shape().str(),
                    b.shape().str()));
  }
  VolumeShape shape = a.shape();
  shape.channels += b.channels();
  Volume out(shape);
  std::memcpy(out.data(), a.data(), a.size() * sizeof(double));
  std::memcpy(out.data() + a.size(), b.data(), b.size() * sizeof(double));
  return out;
}

void split_channels(const Volume& v, int head_channels, Volume& head, Volume& tail) {
  VolumeShape hs = v.shape();
  hs.channels = head_channels;
  VolumeShape ts = v.shape();
  ts.channels = v.channels() - head_channels;
  head = Volume(hs);
  tail = Volume(ts);
  std::memcpy(head.data(), v.data(), head.size() * sizeof(double));
  std::memcpy(tail.data(), v.data() + head.size(), tail.size() * sizeof(double));
}

void relu_inplace(Volume& v) {
  for (double& x : v.values()) x = x > 0.0 ? x : 0.0;
}

void relu_backward_inplace(const Volume& activation, Volume& grad) {
  auto a = activation.values();
  auto g = grad.values();
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(a[i] > 0.0)) g[i] = 0.0;
  }
}

std::vector<double> global_average_pool(const Volume& v) {
  std::vector<double> out(v.channels(), 0.0);
  const double n = static_cast<double>(v.shape().per_channel());
  for (int c = 0; c < v.channels(); ++c) {
    double sum = 0.0;
    for (double x : v.channel(c)) sum += x;
    out[c] = sum / n;
  }
  return out;
}

Volume global_average_pool_backward(std::span<const double> grad, const VolumeShape& shape) {
  Volume out(shape);
  const double n = static_cast<double>(shape.per_channel());
  for (int c = 0; c < shape.channels; ++c) {
    const double g = grad[c] / n;
    for (double& x : out.channel(c)) x = g;
  }
  return out;
}

}  // namespace microid
