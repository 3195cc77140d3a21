#include "microid/layers.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <Eigen/Core>
#include <fmt/format.h>

#include "microid/error.hpp"

namespace microid {

namespace {

int out_extent(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

// Unrolls every receptive field of `in` into a column of `col`
// (rows: c, kt, kh, kw; columns: to, ho, wo).
void vol2col(const Volume& in, const Conv3dSpec& s, const VolumeShape& out, double* col) {
  const int T = in.frames(), H = in.height(), W = in.width();
  const std::size_t P = out.per_channel();
  std::size_t row = 0;
  for (int c = 0; c < s.in_channels; ++c) {
    const double* src = in.data() + c * in.shape().per_channel();
    for (int kt = 0; kt < s.kernel.t; ++kt) {
      for (int kh = 0; kh < s.kernel.h; ++kh) {
        for (int kw = 0; kw < s.kernel.w; ++kw, ++row) {
          double* dst = col + row * P;
          for (int to = 0; to < out.frames; ++to) {
            const int ti = to * s.stride.t - s.pad.t + kt;
            if (ti < 0 || ti >= T) {
              std::fill_n(dst, out.plane(), 0.0);
              dst += out.plane();
              continue;
            }
            for (int ho = 0; ho < out.height; ++ho) {
              const int hi = ho * s.stride.h - s.pad.h + kh;
              if (hi < 0 || hi >= H) {
                std::fill_n(dst, out.width, 0.0);
                dst += out.width;
                continue;
              }
              const double* line = src + (static_cast<std::size_t>(ti) * H + hi) * W;
              for (int wo = 0; wo < out.width; ++wo) {
                const int wi = wo * s.stride.w - s.pad.w + kw;
                *dst++ = (wi >= 0 && wi < W) ? line[wi] : 0.0;
              }
            }
          }
        }
      }
    }
  }
}

// Adjoint of vol2col: scatters column gradients back onto the input volume.
void col2vol(const double* col, const Conv3dSpec& s, const VolumeShape& out, Volume& in) {
  const int T = in.frames(), H = in.height(), W = in.width();
  const std::size_t P = out.per_channel();
  std::size_t row = 0;
  for (int c = 0; c < s.in_channels; ++c) {
    double* dst = in.data() + c * in.shape().per_channel();
    for (int kt = 0; kt < s.kernel.t; ++kt) {
      for (int kh = 0; kh < s.kernel.h; ++kh) {
        for (int kw = 0; kw < s.kernel.w; ++kw, ++row) {
          const double* src = col + row * P;
          for (int to = 0; to < out.frames; ++to) {
            const int ti = to * s.stride.t - s.pad.t + kt;
            if (ti < 0 || ti >= T) {
              src += out.plane();
              continue;
            }
            for (int ho = 0; ho < out.height; ++ho) {
              const int hi = ho * s.stride.h - s.pad.h + kh;
              if (hi < 0 || hi >= H) {
                src += out.width;
                continue;
              }
              double* line = dst + (static_cast<std::size_t>(ti) * H + hi) * W;
              for (int wo = 0; wo < out.width; ++wo, ++src) {
                const int wi = wo * s.stride.w - s.pad.w + kw;
                if (wi >= 0 && wi < W) line[wi] += *src;
              }
            }
          }
        }
      }
    }
  }
}

// Visits every (input row, output row) pair touched by kernel tap
// (c, kt, kh, kw), handing `fn` the input line, output line offset and the
// valid output column range.
template <typename Fn>
void for_each_tap_row(const Conv3dSpec& s, const VolumeShape& in, const VolumeShape& out, int c,
                      int kt, int kh, int kw, Fn&& fn) {
  const int wo_begin = std::max(0, (s.pad.w - kw + s.stride.w - 1) / s.stride.w);
  const int last = in.width - 1 + s.pad.w - kw;
  if (last < 0) return;
  const int wo_end = std::min(out.width, last / s.stride.w + 1);
  if (wo_begin >= wo_end) return;
  for (int to = 0; to < out.frames; ++to) {
    const int ti = to * s.stride.t - s.pad.t + kt;
    if (ti < 0 || ti >= in.frames) continue;
    for (int ho = 0; ho < out.height; ++ho) {
      const int hi = ho * s.stride.h - s.pad.h + kh;
      if (hi < 0 || hi >= in.height) continue;
      const std::size_t in_row =
          ((static_cast<std::size_t>(c) * in.frames + ti) * in.height + hi) * in.width;
      const std::size_t out_row = (static_cast<std::size_t>(to) * out.height + ho) * out.width;
      fn(in_row, out_row, wo_begin, wo_end, wo_begin * s.stride.w - s.pad.w + kw);
    }
  }
}

// Narrow layers (few output channels) skip the column buffer: unrolling is
// memory bound there and the GEMM degenerates to a vector product.
bool use_direct(const Conv3dSpec& s) { return s.out_channels <= 4; }

// Row layout that groups input columns by phase (column mod stride) so a
// strided convolution tap reads a contiguous run.
struct PhaseLayout {
  int stride = 1;
  int width = 0;
  int segment = 0;
  int row_len = 0;

  PhaseLayout(int s, int w) : stride(s), width(w), segment((w + s - 1) / s), row_len(segment * s) {}
  std::size_t offset(std::size_t row, int wi) const {
    return row * row_len + static_cast<std::size_t>(wi % stride) * segment + wi / stride;
  }
};

std::vector<double> phase_split(const Volume& v, const PhaseLayout& layout) {
  const std::size_t rows = v.size() / layout.width;
  std::vector<double> out(rows * layout.row_len, 0.0);
  const double* src = v.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (int wi = 0; wi < layout.width; ++wi) out[layout.offset(r, wi)] = *src++;
  }
  return out;
}

void phase_merge(const std::vector<double>& split, const PhaseLayout& layout, Volume& v) {
  const std::size_t rows = v.size() / layout.width;
  double* dst = v.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (int wi = 0; wi < layout.width; ++wi) *dst++ = split[layout.offset(r, wi)];
  }
}

std::vector<double>& scratch() {
  thread_local std::vector<double> buffer;
  return buffer;
}

using MatrixMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatrixMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

bool is_pointwise(const Conv3dSpec& s) {
  return s.kernel == Dims3{1, 1, 1} && s.stride == Dims3{1, 1, 1} && s.pad == Dims3{0, 0, 0};
}

}  // namespace

VolumeShape Conv3dSpec::output_shape(const VolumeShape& in) const {
  return VolumeShape{out_channels, out_extent(in.frames, kernel.t, stride.t, pad.t),
                     out_extent(in.height, kernel.h, stride.h, pad.h),
                     out_extent(in.width, kernel.w, stride.w, pad.w)};
}

void LayerGrad::zero() {
  std::fill(weight.begin(), weight.end(), 0.0);
  std::fill(bias.begin(), bias.end(), 0.0);
}

Conv3d::Conv3d(const Conv3dSpec& spec)
    : spec_(spec), weight_(spec.weight_count(), 0.0), bias_(spec.out_channels, 0.0) {
  if (spec.in_channels < 1 || spec.out_channels < 1) {
    throw ConfigError("convolution needs at least one input and output channel");
  }
}

void Conv3d::initialize(std::mt19937_64& rng) {
  const double fan_in =
      static_cast<double>(spec_.in_channels) * spec_.kernel.t * spec_.kernel.h * spec_.kernel.w;
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (double& w : weight_) w = dist(rng);
  std::fill(bias_.begin(), bias_.end(), 0.0);
}

LayerGrad Conv3d::make_grad() const {
  return LayerGrad{std::vector<double>(weight_.size(), 0.0),
                   std::vector<double>(bias_.size(), 0.0)};
}

void Conv3d::check_input(const VolumeShape& in) const {
  if (in.channels != spec_.in_channels) {
    throw ShapeError(fmt::format("convolution expects {} input channels, got {}",
                                 spec_.in_channels, in.channels));
  }
  const VolumeShape out = spec_.output_shape(in);
  if (out.frames < 1 || out.height < 1 || out.width < 1) {
    throw ShapeError(fmt::format("input {} too small for convolution kernel", in.str()));
  }
}

Volume Conv3d::forward(const Volume& input) const {
  check_input(input.shape());
  const VolumeShape out_shape = spec_.output_shape(input.shape());
  const int M = spec_.out_channels;
  const int K = static_cast<int>(weight_.size() / M);
  const int P = static_cast<int>(out_shape.per_channel());

  Volume out(out_shape);
  for (int m = 0; m < M; ++m) std::fill_n(out.data() + m * P, P, bias_[m]);

  if (use_direct(spec_)) {
    const PhaseLayout layout(spec_.stride.w, input.width());
    const std::vector<double> split = phase_split(input, layout);
    const double* w = weight_.data();
    for (int m = 0; m < M; ++m) {
      double* dst = out.data() + static_cast<std::size_t>(m) * P;
      for (int c = 0; c < spec_.in_channels; ++c)
        for (int kt = 0; kt < spec_.kernel.t; ++kt)
          for (int kh = 0; kh < spec_.kernel.h; ++kh)
            for (int kw = 0; kw < spec_.kernel.w; ++kw) {
              const double wv = *w++;
              for_each_tap_row(spec_, input.shape(), out_shape, c, kt, kh, kw,
                               [&](std::size_t in_row, std::size_t out_row, int b, int e, int wi) {
                                 const double* src =
                                     split.data() + layout.offset(in_row / layout.width, wi);
                                 double* o = dst + out_row;
                                 for (int wo = b; wo < e; ++wo) o[wo] += wv * src[wo - b];
                               });
            }
    }
    return out;
  }

  std::vector<double>& col = scratch();
  const double* cols = input.data();
  if (!is_pointwise(spec_)) {
    col.resize(static_cast<std::size_t>(K) * P);
    vol2col(input, spec_, out_shape, col.data());
    cols = col.data();
  }
  MatrixMap(out.data(), M, P).noalias() +=
      ConstMatrixMap(weight_.data(), M, K) * ConstMatrixMap(cols, K, P);
  return out;
}

Volume Conv3d::backward(const Volume& input, const Volume& out_grad, LayerGrad* grad,
                        bool need_input_grad) const {
  check_input(input.shape());
  const VolumeShape out_shape = spec_.output_shape(input.shape());
  if (out_grad.shape() != out_shape) {
    throw ShapeError(fmt::format("convolution output gradient {} does not match output {}",
                                 out_grad.shape().str(), out_shape.str()));
  }
  const int M = spec_.out_channels;
  const int K = static_cast<int>(weight_.size() / M);
  const int P = static_cast<int>(out_shape.per_channel());
  const bool pointwise = is_pointwise(spec_);

  if (use_direct(spec_)) {
    const PhaseLayout layout(spec_.stride.w, input.width());
    const std::vector<double> split = phase_split(input, layout);
    std::vector<double> split_grad(need_input_grad ? split.size() : 0, 0.0);
    for (int m = 0; m < M; ++m) {
      const double* g = out_grad.data() + static_cast<std::size_t>(m) * P;
      if (grad != nullptr) {
        double sum = 0.0;
        for (int p = 0; p < P; ++p) sum += g[p];
        grad->bias[m] += sum;
      }
      std::size_t k = static_cast<std::size_t>(m) * K;
      for (int c = 0; c < spec_.in_channels; ++c)
        for (int kt = 0; kt < spec_.kernel.t; ++kt)
          for (int kh = 0; kh < spec_.kernel.h; ++kh)
            for (int kw = 0; kw < spec_.kernel.w; ++kw, ++k) {
              const double wv = weight_[k];
              double acc = 0.0;
              for_each_tap_row(spec_, input.shape(), out_shape, c, kt, kh, kw,
                               [&](std::size_t in_row, std::size_t out_row, int b, int e, int wi) {
                                 const std::size_t at =
                                     layout.offset(in_row / layout.width, wi);
                                 const double* src = split.data() + at;
                                 const double* go = g + out_row + b;
                                 const int n = e - b;
                                 if (grad != nullptr) {
                                   for (int i = 0; i < n; ++i) acc += go[i] * src[i];
                                 }
                                 if (need_input_grad) {
                                   double* dst = split_grad.data() + at;
                                   for (int i = 0; i < n; ++i) dst[i] += wv * go[i];
                                 }
                               });
              if (grad != nullptr) grad->weight[k] += acc;
            }
    }
    Volume in_grad;
    if (need_input_grad) {
      in_grad = Volume(input.shape());
      phase_merge(split_grad, layout, in_grad);
    }
    return in_grad;
  }

  std::vector<double>& col = scratch();
  const double* cols = input.data();
  if (grad != nullptr) {
    if (!pointwise) {
      col.resize(static_cast<std::size_t>(K) * P);
      vol2col(input, spec_, out_shape, col.data());
      cols = col.data();
    }
    MatrixMap(grad->weight.data(), M, K).noalias() +=
        ConstMatrixMap(out_grad.data(), M, P) * ConstMatrixMap(cols, K, P).transpose();
    for (int m = 0; m < M; ++m) {
      const double* g = out_grad.data() + static_cast<std::size_t>(m) * P;
      double sum = 0.0;
      for (int p = 0; p < P; ++p) sum += g[p];
      grad->bias[m] += sum;
    }
  }
  if (!need_input_grad) return {};

  Volume in_grad(input.shape());
  if (pointwise) {
    MatrixMap(in_grad.data(), K, P).noalias() =
        ConstMatrixMap(weight_.data(), M, K).transpose() * ConstMatrixMap(out_grad.data(), M, P);
    return in_grad;
  }
  col.resize(static_cast<std::size_t>(K) * P);
  MatrixMap(col.data(), K, P).noalias() =
      ConstMatrixMap(weight_.data(), M, K).transpose() * ConstMatrixMap(out_grad.data(), M, P);
  col2vol(col.data(), spec_, out_shape, in_grad);
  return in_grad;
}

Linear::Linear(int in_features, int out_features)
    : in_(in_features),
      out_(out_features),
      weight_(static_cast<std::size_t>(in_features) * out_features, 0.0),
      bias_(out_features, 0.0) {}

void Linear::initialize(std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / in_));
  for (double& w : weight_) w = dist(rng);
  std::fill(bias_.begin(), bias_.end(), 0.0);
}

std::vector<double> Linear::forward(std::span<const double> x) const {
  if (static_cast<int>(x.size()) != in_) {
    throw ShapeError(fmt::format("linear layer expects {} features, got {}", in_, x.size()));
  }
  std::vector<double> y(bias_);
  for (int o = 0; o < out_; ++o) {
    const double* w = weight_.data() + static_cast<std::size_t>(o) * in_;
    double acc = 0.0;
    for (int i = 0; i < in_; ++i) acc += w[i] * x[i];
    y[o] += acc;
  }
  return y;
}

std::vector<double> Linear::backward(std::span<const double> x,
                                     std::span<const double> out_grad,
                                     LayerGrad* grad) const {
  std::vector<double> in_grad(in_, 0.0);
  for (int o = 0; o < out_; ++o) {
    const double g = out_grad[o];
    const double* w = weight_.data() + static_cast<std::size_t>(o) * in_;
    for (int i = 0; i < in_; ++i) in_grad[i] += w[i] * g;
    if (grad != nullptr) {
      double* gw = grad->weight.data() + static_cast<std::size_t>(o) * in_;
      for (int i = 0; i < in_; ++i) gw[i] += g * x[i];
      grad->bias[o] += g;
    }
  }
  return in_grad;
}

LayerGrad Linear::make_grad() const {
  return LayerGrad{std::vector<double>(weight_.size(), 0.0),
                   std::vector<double>(bias_.size(), 0.0)};
}

}  // namespace microid
