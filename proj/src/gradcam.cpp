#include "microid/gradcam.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "microid/error.hpp"

namespace fs = std::filesystem;

namespace microid {

namespace {

const Volume& pathway_output(const Model& model, const ForwardTrace& tr, Pathway pathway) {
  if (pathway == Pathway::kFast && !model.config().two_pathway) {
    throw ConfigError("model has no fast pathway");
  }
  return pathway == Pathway::kFast ? tr.fast.output() : tr.slow.output();
}

struct Axis {
  int lo = 0;
  int hi = 0;
  double frac = 0.0;
};

Axis axis_sample(int dst, int in, int out) {
  double src = (dst + 0.5) * static_cast<double>(in) / out - 0.5;
  src = std::clamp(src, 0.0, static_cast<double>(in - 1));
  Axis a;
  a.lo = static_cast<int>(std::floor(src));
  a.hi = std::min(a.lo + 1, in - 1);
  a.frac = src - a.lo;
  return a;
}

}  // namespace

std::vector<double> gradcam_channel_weights(const Model& model, const ForwardTrace& tr,
                                            int target_class, Pathway pathway) {
  const int k = model.config().num_classes;
  if (target_class < 0 || target_class >= k) {
    throw ConfigError(fmt::format("target class {} outside [0, {})", target_class, k));
  }
  const Volume& acts = pathway_output(model, tr, pathway);
  if (acts.empty()) throw ShapeError("pathway activation is empty");
  std::vector<double> onehot(k, 0.0);
  onehot[target_class] = 1.0;
  FeatureGrads grads = model.head_backward(tr, onehot);
  const Volume& g = pathway == Pathway::kFast ? grads.fast : grads.slow;
  std::vector<double> weights(g.channels());
  for (int c = 0; c < g.channels(); ++c) {
    double sum = 0.0;
    for (double v : g.channel(c)) sum += v;
    weights[c] = sum / static_cast<double>(g.shape().per_channel());
  }
  return weights;
}

SaliencyMap compute_gradcam(const Model& model, const ClipTensor& clip, int target_class,
                            Pathway pathway) {
  const ForwardTrace tr = model.trace(clip);
  SaliencyMap map;
  map.target_class = target_class;
  map.pathway = pathway;
  map.channel_weights = gradcam_channel_weights(model, tr, target_class, pathway);
  const Volume& acts = pathway_output(model, tr, pathway);

  map.raw = Volume({1, acts.frames(), acts.height(), acts.width()});
  std::span<double> raw = map.raw.values();
  for (int c = 0; c < acts.channels(); ++c) {
    const double w = map.channel_weights[c];
    std::span<const double> a = acts.channel(c);
    for (std::size_t i = 0; i < raw.size(); ++i) raw[i] += w * a[i];
  }
  for (double& v : raw) v = std::max(v, 0.0);

  map.upsampled = upsample_trilinear(map.raw, clip.frames, clip.height, clip.width);
  const double peak = *std::max_element(map.upsampled.values().begin(),
                                        map.upsampled.values().end());
  if (peak > 0.0) {
    for (double& v : map.upsampled.values()) v /= peak;
  }
  return map;
}

Volume upsample_trilinear(const Volume& in, int frames, int height, int width) {
  if (in.empty() || frames < 1 || height < 1 || width < 1) {
    throw ShapeError("cannot resample an empty volume");
  }
  Volume out({in.channels(), frames, height, width});
  std::vector<Axis> ax(width), ay(height), at(frames);
  for (int x = 0; x < width; ++x) ax[x] = axis_sample(x, in.width(), width);
  for (int y = 0; y < height; ++y) ay[y] = axis_sample(y, in.height(), height);
  for (int t = 0; t < frames; ++t) at[t] = axis_sample(t, in.frames(), frames);
  for (int c = 0; c < in.channels(); ++c)
    for (int t = 0; t < frames; ++t)
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
          const Axis& a = at[t];
          const Axis& b = ay[y];
          const Axis& d = ax[x];
          auto plane = [&](int ti) {
            const double top = in.at(c, ti, b.lo, d.lo) * (1 - d.frac) +
                               in.at(c, ti, b.lo, d.hi) * d.frac;
            const double bottom = in.at(c, ti, b.hi, d.lo) * (1 - d.frac) +
                                  in.at(c, ti, b.hi, d.hi) * d.frac;
            return top * (1 - b.frac) + bottom * b.frac;
          };
          out.at(c, t, y, x) = plane(a.lo) * (1 - a.frac) + plane(a.hi) * a.frac;
        }
  return out;
}

std::vector<fs::path> render_overlays(const SaliencyMap& map, const ClipTensor& clip,
                                      const fs::path& out_dir, const OverlayOptions& options) {
  const Volume& s = map.upsampled;
  if (s.frames() != clip.frames || s.height() != clip.height || s.width() != clip.width) {
    throw ShapeError(fmt::format("saliency ({}, {}, {}) does not match clip ({}, {}, {})",
                                 s.frames(), s.height(), s.width(), clip.frames, clip.height,
                                 clip.width));
  }
  if (!(options.max_alpha >= 0.0 && options.max_alpha <= 1.0)) {
    throw ConfigError("overlay alpha must lie in [0, 1]");
  }
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError(fmt::format("cannot create {}: {}", out_dir.string(), ec.message()));

  std::vector<fs::path> written;
  for (int t = 0; t < clip.frames; ++t) {
    cv::Mat img(clip.height, clip.width, CV_8UC3);
    for (int y = 0; y < clip.height; ++y) {
      auto* row = img.ptr<cv::Vec3b>(y);
      for (int x = 0; x < clip.width; ++x) {
        const double a = options.max_alpha * std::clamp(s.at(0, t, y, x), 0.0, 1.0);
        for (int c = 0; c < 3; ++c) {
          const double base = clip.at(t, y, x, clip.channels == 3 ? c : 0);
          const double tint = c == 1 ? 1.0 : 0.0;
          row[x][c] = cv::saturate_cast<std::uint8_t>(((1 - a) * base + a * tint) * 255.0);
        }
      }
    }
    const fs::path path = out_dir / fmt::format("{:06d}.png", t);
    if (!cv::imwrite(path.string(), img)) {
      throw IoError(fmt::format("cannot write {}", path.string()));
    }
    written.push_back(path);
  }
  return written;
}

void write_saliency(const SaliencyMap& map, const fs::path& path) {
  PackedTensor t;
  t.frames = static_cast<std::uint32_t>(map.raw.frames());
  t.height = static_cast<std::uint32_t>(map.raw.height());
  t.width = static_cast<std::uint32_t>(map.raw.width());
  t.channels = 1;
  t.data.assign(map.raw.values().begin(), map.raw.values().end());
  write_packed_tensor(path, t);
}

double saliency_mass_inside(const Volume& upsampled, const Volume& mask) {
  if (!(upsampled.shape() == mask.shape())) throw ShapeError("mask shape differs from the map");
  double total = 0.0;
  double inside = 0.0;
  for (std::size_t i = 0; i < upsampled.size(); ++i) {
    total += upsampled.data()[i];
    if (mask.data()[i] != 0.0) inside += upsampled.data()[i];
  }
  return total > 0.0 ? inside / total : 0.0;
}

}  // namespace microid
