#include "microid/slowfast.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "microid/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace microid {

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t h = kFnvOffset) {
  for (unsigned char b : bytes) {
    h ^= b;
    h *= kFnvPrime;
  }
  return h;
}

std::uint64_t fnv1a(const std::string& s, std::uint64_t h = kFnvOffset) {
  return fnv1a(std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size()), h);
}

std::vector<int> conv_weight_shape(const Conv3dSpec& s) {
  return {s.out_channels, s.in_channels, s.kernel.t, s.kernel.h, s.kernel.w};
}

}  // namespace

void ModelConfig::validate() const {
  if (alpha < 1) throw ConfigError("alpha must be >= 1");
  if (input_shape.frames < 1 || input_shape.height < 1 || input_shape.width < 1) {
    throw ConfigError("input shape must be positive");
  }
  if (input_shape.channels != 1 && input_shape.channels != 3) {
    throw ConfigError("input must have 1 or 3 channels");
  }
  if (input_shape.frames % alpha != 0) {
    throw ConfigError(
        fmt::format("alpha {} does not divide the window length {}", alpha, input_shape.frames));
  }
  if (!(beta > 0.0 && beta <= 1.0)) throw ConfigError("beta must lie in (0, 1]");
  if (base_channels < 1) throw ConfigError("base_channels must be >= 1");
  if (stage_depths.empty()) throw ConfigError("at least one stage is required");
  for (int d : stage_depths) {
    if (d < 1) throw ConfigError("every stage needs at least one block");
  }
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (two_pathway) {
    for (int s = 0; s < num_stages(); ++s) {
      if (fast_width(s) < 1) {
        throw ConfigError(fmt::format(
            "beta {} leaves stage {} of the fast pathway without channels", beta, s));
      }
    }
  }
}

int ModelConfig::fast_width(int stage) const {
  return static_cast<int>(std::lround(beta * static_cast<double>(slow_width(stage))));
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"alpha", c.alpha},
           {"beta", c.beta},
           {"base_channels", c.base_channels},
           {"stage_depths", c.stage_depths},
           {"num_classes", c.num_classes},
           {"input_shape",
            {c.input_shape.frames, c.input_shape.height, c.input_shape.width,
             c.input_shape.channels}},
           {"seed", c.seed},
           {"two_pathway", c.two_pathway},
           {"feature_norm", c.feature_norm}};
}

void from_json(const json& j, ModelConfig& c) {
  c.alpha = j.at("alpha").get<int>();
  c.beta = j.at("beta").get<double>();
  c.base_channels = j.at("base_channels").get<int>();
  c.stage_depths = j.at("stage_depths").get<std::vector<int>>();
  c.num_classes = j.at("num_classes").get<int>();
  auto shape = j.at("input_shape").get<std::vector<int>>();
  if (shape.size() != 4) throw ConfigError("input_shape must have four entries");
  c.input_shape = InputShape{shape[0], shape[1], shape[2], shape[3]};
  c.seed = j.at("seed").get<std::uint64_t>();
  c.two_pathway = j.value("two_pathway", true);
  c.feature_norm = j.value("feature_norm", true);
}

const char* pathway_name(Pathway p) { return p == Pathway::kSlow ? "slow" : "fast"; }

Pathway parse_pathway(const std::string& name) {
  if (name == "slow") return Pathway::kSlow;
  if (name == "fast") return Pathway::kFast;
  throw ConfigError(fmt::format("unknown pathway '{}' (expected slow or fast)", name));
}

PathwayInputs sample_pathways(const ClipTensor& clip, int alpha) {
  if (alpha < 1 || clip.frames % alpha != 0) {
    throw ConfigError(
        fmt::format("alpha {} does not divide the clip length {}", alpha, clip.frames));
  }
  const VolumeShape fast_shape{clip.channels, clip.frames, clip.height, clip.width};
  VolumeShape slow_shape = fast_shape;
  slow_shape.frames = clip.frames / alpha;
  PathwayInputs out{Volume(slow_shape), Volume(fast_shape)};
  for (int t = 0; t < clip.frames; ++t) {
    const bool slow = t % alpha == 0;
    for (int y = 0; y < clip.height; ++y) {
      for (int x = 0; x < clip.width; ++x) {
        for (int c = 0; c < clip.channels; ++c) {
          const double v = clip.at(t, y, x, c);
          out.fast.at(c, t, y, x) = v;
          if (slow) out.slow.at(c, t / alpha, y, x) = v;
        }
      }
    }
  }
  return out;
}

void Gradients::zero() {
  for (LayerGrad& g : convs) g.zero();
  norm.zero();
  head.zero();
}

void Gradients::scale(double factor) {
  for (std::span<double> a : arrays()) {
    for (double& v : a) v *= factor;
  }
}

std::vector<std::span<double>> Gradients::arrays() {
  std::vector<std::span<double>> out;
  for (LayerGrad& g : convs) {
    out.emplace_back(g.weight);
    out.emplace_back(g.bias);
  }
  if (!norm.weight.empty()) {
    out.emplace_back(norm.weight);
    out.emplace_back(norm.bias);
  }
  out.emplace_back(head.weight);
  out.emplace_back(head.bias);
  return out;
}

const Volume& PathwayTrace::output() const {
  return stages.empty() ? stem : stages.back().back().output;
}

Model::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  slow_ = build_pathway(Pathway::kSlow);
  if (config_.two_pathway) {
    fast_ = build_pathway(Pathway::kFast);
    for (int s = 0; s < config_.num_stages(); ++s) {
      Conv3dSpec lateral{config_.fast_width(s), config_.lateral_width(s),
                         Dims3{config_.alpha, 1, 1}, Dims3{config_.alpha, 1, 1}, Dims3{0, 0, 0}};
      laterals_.push_back(add_conv(fmt::format("lateral{}", s), lateral));
    }
  }
  const int last = config_.num_stages() - 1;
  int features = config_.slow_width(last) + config_.lateral_width(last);
  if (config_.two_pathway) features += config_.fast_width(last);
  head_ = Linear(features, config_.num_classes);
  if (config_.feature_norm) {
    norm_scale_.assign(features, 1.0);
    norm_shift_.assign(features, 0.0);
    stats_.mean.assign(features, 0.0);
    stats_.variance.assign(features, 1.0);
  }

  std::string description = fmt::format(
      "input:{}x{}x{}x{};alpha:{};two_pathway:{};", config_.input_shape.frames,
      config_.input_shape.height, config_.input_shape.width, config_.input_shape.channels,
      config_.alpha, config_.two_pathway);
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    const Conv3dSpec& s = convs_[i].spec();
    description += fmt::format("{}:conv{}x{}:k{}{}{}:s{}{}{}:p{}{}{};", conv_names_[i],
                               s.in_channels, s.out_channels, s.kernel.t, s.kernel.h, s.kernel.w,
                               s.stride.t, s.stride.h, s.stride.w, s.pad.t, s.pad.h, s.pad.w);
  }
  if (config_.feature_norm) description += fmt::format("feature_norm:{};", features);
  description += fmt::format("head:linear{}x{};", head_.in_features(), head_.out_features());
  fingerprint_ = fnv1a(description);

  std::mt19937_64 rng(config_.seed);
  for (Conv3d& conv : convs_) conv.initialize(rng);
  head_.initialize(rng);
}

int Model::add_conv(std::string name, const Conv3dSpec& spec) {
  convs_.emplace_back(spec);
  conv_names_.push_back(std::move(name));
  return static_cast<int>(convs_.size()) - 1;
}

Model::PathwayLayers Model::build_pathway(Pathway which) {
  const bool slow = which == Pathway::kSlow;
  const std::string prefix = pathway_name(which);
  auto width = [&](int s) { return slow ? config_.slow_width(s) : config_.fast_width(s); };
  const int in_frames = slow ? config_.slow_frames() : config_.input_shape.frames;

  PathwayLayers layers;
  const int stem_t = slow ? 1 : 5;
  layers.stem = add_conv(prefix + ".stem",
                         Conv3dSpec{config_.input_shape.channels, width(0), Dims3{stem_t, 5, 5},
                                    Dims3{1, 2, 2}, Dims3{stem_t / 2, 2, 2}});
  int channels = width(0);
  for (int s = 0; s < config_.num_stages(); ++s) {
    if (slow && s > 0) channels += config_.lateral_width(s - 1);
    const int out = width(s);
    const int kt = (!slow || (s > 0 && in_frames > 1)) ? 3 : 1;
    const int stride = s + 1 < config_.num_stages() ? 2 : 1;
    std::vector<Block> blocks;
    for (int b = 0; b < config_.stage_depths[s]; ++b) {
      const int block_stride = b == 0 ? stride : 1;
      const std::string name = fmt::format("{}.stage{}.block{}", prefix, s, b);
      Block block;
      block.conv_a = add_conv(name + ".conv_a",
                              Conv3dSpec{channels, out, Dims3{kt, 3, 3},
                                         Dims3{1, block_stride, block_stride}, Dims3{kt / 2, 1, 1}});
      block.conv_b = add_conv(name + ".conv_b", Conv3dSpec{out, out, Dims3{1, 3, 3},
                                                           Dims3{1, 1, 1}, Dims3{0, 1, 1}});
      if (channels != out || block_stride != 1) {
        block.projection =
            add_conv(name + ".projection", Conv3dSpec{channels, out, Dims3{1, 1, 1},
                                                      Dims3{1, block_stride, block_stride},
                                                      Dims3{0, 0, 0}});
      }
      blocks.push_back(block);
      channels = out;
    }
    layers.stages.push_back(std::move(blocks));
  }
  return layers;
}

std::vector<ParameterView> Model::parameters() {
  std::vector<ParameterView> out;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    const Conv3dSpec& s = convs_[i].spec();
    out.push_back({conv_names_[i] + ".weight", conv_weight_shape(s), convs_[i].weight()});
    out.push_back({conv_names_[i] + ".bias", {s.out_channels}, convs_[i].bias()});
  }
  if (config_.feature_norm) {
    const int n = static_cast<int>(norm_scale_.size());
    out.push_back({"feature_norm.scale", {n}, norm_scale_});
    out.push_back({"feature_norm.shift", {n}, norm_shift_});
  }
  out.push_back({"head.weight", {head_.out_features(), head_.in_features()}, head_.weight()});
  out.push_back({"head.bias", {head_.out_features()}, head_.bias()});
  return out;
}

std::vector<ConstParameterView> Model::parameters() const {
  std::vector<ConstParameterView> out;
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    const Conv3dSpec& s = convs_[i].spec();
    out.push_back({conv_names_[i] + ".weight", conv_weight_shape(s), convs_[i].weight()});
    out.push_back({conv_names_[i] + ".bias", {s.out_channels}, convs_[i].bias()});
  }
  if (config_.feature_norm) {
    const int n = static_cast<int>(norm_scale_.size());
    out.push_back({"feature_norm.scale", {n}, norm_scale_});
    out.push_back({"feature_norm.shift", {n}, norm_shift_});
  }
  out.push_back({"head.weight", {head_.out_features(), head_.in_features()}, head_.weight()});
  out.push_back({"head.bias", {head_.out_features()}, head_.bias()});
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.values.size();
  return n;
}

Gradients Model::make_gradients() const {
  Gradients g;
  for (const Conv3d& conv : convs_) g.convs.push_back(conv.make_grad());
  if (config_.feature_norm) {
    g.norm.weight.assign(norm_scale_.size(), 0.0);
    g.norm.bias.assign(norm_shift_.size(), 0.0);
  }
  g.head = head_.make_grad();
  return g;
}

void Model::check_input(const ClipTensor& clip) const {
  const InputShape& s = config_.input_shape;
  if (clip.frames != s.frames || clip.height != s.height || clip.width != s.width ||
      clip.channels != s.channels) {
    throw ShapeError(fmt::format(
        "clip {} has shape ({}, {}, {}, {}) but the model expects ({}, {}, {}, {})",
        clip.clip_id, clip.frames, clip.height, clip.width, clip.channels, s.frames, s.height,
        s.width, s.channels));
  }
}

BlockTrace Model::run_block(const Block& block, Volume input) const {
  BlockTrace t;
  t.hidden = convs_[block.conv_a].forward(input);
  relu_inplace(t.hidden);
  t.output = convs_[block.conv_b].forward(t.hidden);
  if (block.projection >= 0) {
    t.output.add(convs_[block.projection].forward(input));
  } else {
    t.output.add(input);
  }
  relu_inplace(t.output);
  t.input = std::move(input);
  return t;
}

Volume Model::block_backward(const Block& block, const BlockTrace& t, Volume out_grad,
                             Gradients* grads) const {
  auto layer_grad = [&](int idx) { return grads ? &grads->convs[idx] : nullptr; };
  relu_backward_inplace(t.output, out_grad);
  Volume hidden_grad = convs_[block.conv_b].backward(t.hidden, out_grad, layer_grad(block.conv_b),
                                                     true);
  relu_backward_inplace(t.hidden, hidden_grad);
  Volume in_grad =
      convs_[block.conv_a].backward(t.input, hidden_grad, layer_grad(block.conv_a), true);
  if (block.projection >= 0) {
    in_grad.add(convs_[block.projection].backward(t.input, out_grad,
                                                  layer_grad(block.projection), true));
  } else {
    in_grad.add(out_grad);
  }
  return in_grad;
}

Volume Model::fuse_final(const Volume& slow_final, const Volume& fast_final,
                         Volume* lateral) const {
  if (!config_.two_pathway) return slow_final;
  Volume lat = convs_[laterals_.back()].forward(fast_final);
  Volume fused = concat_channels(slow_final, lat);
  if (lateral != nullptr) *lateral = std::move(lat);
  return fused;
}

std::vector<double> Model::pool_features(const Volume& slow_fused,
                                         const Volume& fast_final) const {
  std::vector<double> pooled = global_average_pool(slow_fused);
  if (config_.two_pathway) {
    std::vector<double> fast = global_average_pool(fast_final);
    pooled.insert(pooled.end(), fast.begin(), fast.end());
  }
  return pooled;
}

ForwardTrace Model::trace(const ClipTensor& clip) const {
  check_input(clip);
  const int stages = config_.num_stages();
  PathwayInputs inputs = sample_pathways(clip, config_.alpha);

  ForwardTrace tr;
  tr.slow.input = std::move(inputs.slow);
  tr.slow.stem = convs_[slow_.stem].forward(tr.slow.input);
  relu_inplace(tr.slow.stem);
  if (config_.two_pathway) {
    tr.fast.input = std::move(inputs.fast);
    tr.fast.stem = convs_[fast_.stem].forward(tr.fast.input);
    relu_inplace(tr.fast.stem);
  }

  for (int s = 0; s < stages; ++s) {
    if (config_.two_pathway) {
      std::vector<BlockTrace> fast_blocks;
      const Volume* x = s == 0 ? &tr.fast.stem : &tr.fast.stages[s - 1].back().output;
      for (const Block& block : fast_.stages[s]) {
        fast_blocks.push_back(run_block(block, *x));
        x = &fast_blocks.back().output;
      }
      tr.fast.stages.push_back(std::move(fast_blocks));
      if (s + 1 < stages) {
        tr.laterals.push_back(convs_[laterals_[s]].forward(tr.fast.stages[s].back().output));
      }
    }
    Volume slow_in;
    if (s == 0) {
      slow_in = tr.slow.stem;
    } else if (config_.two_pathway) {
      slow_in = concat_channels(tr.slow.stages[s - 1].back().output, tr.laterals[s - 1]);
    } else {
      slow_in = tr.slow.stages[s - 1].back().output;
    }
    std::vector<BlockTrace> slow_blocks;
    for (const Block& block : slow_.stages[s]) {
      slow_blocks.push_back(run_block(block, std::move(slow_in)));
      slow_in = slow_blocks.back().output;
    }
    tr.slow.stages.push_back(std::move(slow_blocks));
  }

  Volume last_lateral;
  tr.slow_fused = fuse_final(tr.slow.output(), tr.fast.output(), &last_lateral);
  if (config_.two_pathway) tr.laterals.push_back(std::move(last_lateral));
  tr.pooled = pool_features(tr.slow_fused, tr.fast.output());
  tr.normalized = normalize(tr.pooled);
  tr.logits = head_.forward(tr.normalized);
  return tr;
}

std::vector<double> Model::head(const Volume& slow_final, const Volume& fast_final) const {
  Volume fused = fuse_final(slow_final, fast_final, nullptr);
  return head_.forward(normalize(pool_features(fused, fast_final)));
}

std::vector<double> Model::normalize(std::span<const double> pooled) const {
  std::vector<double> out(pooled.begin(), pooled.end());
  if (!config_.feature_norm) return out;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double inv = 1.0 / std::sqrt(stats_.variance[i] + kFeatureNormEpsilon);
    out[i] = norm_scale_[i] * (pooled[i] - stats_.mean[i]) * inv + norm_shift_[i];
  }
  return out;
}

std::vector<double> Model::normalize_backward(const ForwardTrace& tr,
                                              std::span<const double> normalized_grad,
                                              LayerGrad* grad) const {
  std::vector<double> out(normalized_grad.begin(), normalized_grad.end());
  if (!config_.feature_norm) return out;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double inv = 1.0 / std::sqrt(stats_.variance[i] + kFeatureNormEpsilon);
    if (grad != nullptr) {
      grad->weight[i] += normalized_grad[i] * (tr.pooled[i] - stats_.mean[i]) * inv;
      grad->bias[i] += normalized_grad[i];
    }
    out[i] = normalized_grad[i] * norm_scale_[i] * inv;
  }
  return out;
}

void Model::set_feature_stats(FeatureStats stats) {
  if (!config_.feature_norm) throw ConfigError("model has no feature normalization");
  if (stats.mean.size() != norm_scale_.size() || stats.variance.size() != norm_scale_.size()) {
    throw ShapeError(fmt::format("feature statistics need {} entries", norm_scale_.size()));
  }
  for (std::size_t i = 0; i < stats.mean.size(); ++i) {
    if (!std::isfinite(stats.mean[i]) || !(stats.variance[i] >= 0.0) ||
        !std::isfinite(stats.variance[i])) {
      throw ShapeError("feature statistics must be finite with non-negative variance");
    }
  }
  stats_ = std::move(stats);
}

BatchHeadResult Model::batch_head(std::span<const ForwardTrace* const> traces,
                                  std::span<const int> labels, Gradients& grads) const {
  if (traces.empty() || traces.size() != labels.size()) {
    throw ShapeError("batch_head needs one label per trace");
  }
  const std::size_t batch = traces.size();
  const std::size_t features = traces[0]->pooled.size();
  for (int label : labels) {
    if (label < 0 || label >= config_.num_classes) {
      throw DataError(fmt::format("label {} outside [0, {})", label, config_.num_classes));
    }
  }

  BatchHeadResult result;
  const bool batch_stats = config_.feature_norm && batch >= 2;
  std::vector<std::vector<double>> xhat(batch, std::vector<double>(features));
  std::vector<double> inv(features, 1.0);
  if (batch_stats) {
    FeatureStats& st = result.batch_stats;
    st.mean.assign(features, 0.0);
    st.variance.assign(features, 0.0);
    for (const ForwardTrace* tr : traces)
      for (std::size_t f = 0; f < features; ++f) st.mean[f] += tr->pooled[f];
    for (double& m : st.mean) m /= static_cast<double>(batch);
    for (const ForwardTrace* tr : traces)
      for (std::size_t f = 0; f < features; ++f) {
        const double d = tr->pooled[f] - st.mean[f];
        st.variance[f] += d * d;
      }
    for (std::size_t f = 0; f < features; ++f) {
      st.variance[f] /= static_cast<double>(batch);
      inv[f] = 1.0 / std::sqrt(st.variance[f] + kFeatureNormEpsilon);
    }
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t f = 0; f < features; ++f)
        xhat[b][f] = (traces[b]->pooled[f] - st.mean[f]) * inv[f];
  }

  const double weight = 1.0 / static_cast<double>(batch);
  std::vector<std::vector<double>> normalized_grads(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<double> input = traces[b]->normalized;
    if (batch_stats) {
      for (std::size_t f = 0; f < features; ++f)
        input[f] = norm_scale_[f] * xhat[b][f] + norm_shift_[f];
    }
    std::vector<double> logits = head_.forward(input);
    result.loss += weight * cross_entropy(logits, labels[b]);
    std::vector<double> grad = softmax(logits);
    grad[labels[b]] -= 1.0;
    for (double& g : grad) g *= weight;
    normalized_grads[b] = head_.backward(input, grad, &grads.head);
    result.logits.push_back(std::move(logits));
  }

  result.pooled_grads.resize(batch);
  if (!batch_stats) {
    for (std::size_t b = 0; b < batch; ++b) {
      result.pooled_grads[b] = normalize_backward(*traces[b], normalized_grads[b], &grads.norm);
    }
    return result;
  }
  // d/dx of scale * (x - mean) / sqrt(var + eps) with batch mean and variance
  std::vector<double> mean_g(features, 0.0);
  std::vector<double> mean_gx(features, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t f = 0; f < features; ++f) {
      const double g = normalized_grads[b][f];
      grads.norm.weight[f] += g * xhat[b][f];
      grads.norm.bias[f] += g;
      const double gx = g * norm_scale_[f];
      mean_g[f] += gx * weight;
      mean_gx[f] += gx * xhat[b][f] * weight;
    }
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<double>& out = result.pooled_grads[b];
    out.resize(features);
    for (std::size_t f = 0; f < features; ++f) {
      const double gx = normalized_grads[b][f] * norm_scale_[f];
      out[f] = inv[f] * (gx - mean_g[f] - xhat[b][f] * mean_gx[f]);
    }
  }
  return result;
}

double Model::batch_loss(std::span<const ClipTensor> clips, std::span<const int> labels) const {
  std::vector<ForwardTrace> traces;
  traces.reserve(clips.size());
  for (const ClipTensor& clip : clips) traces.push_back(trace(clip));
  std::vector<const ForwardTrace*> ptrs;
  for (const ForwardTrace& tr : traces) ptrs.push_back(&tr);
  Gradients scratch = make_gradients();
  return batch_head(ptrs, labels, scratch).loss;
}

FeatureGrads Model::head_backward(const ForwardTrace& tr,
                                  std::span<const double> logit_grad) const {
  std::vector<double> pooled_grad =
      normalize_backward(tr, head_.backward(tr.normalized, logit_grad, nullptr), nullptr);
  const int fused_channels = tr.slow_fused.channels();
  Volume fused_grad = global_average_pool_backward(
      std::span<const double>(pooled_grad).first(fused_channels), tr.slow_fused.shape());
  FeatureGrads out;
  if (!config_.two_pathway) {
    out.slow = std::move(fused_grad);
    return out;
  }
  out.fast = global_average_pool_backward(
      std::span<const double>(pooled_grad).subspan(fused_channels), tr.fast.output().shape());
  Volume lateral_grad;
  split_channels(fused_grad, tr.slow.output().channels(), out.slow, lateral_grad);
  out.fast.add(convs_[laterals_.back()].backward(tr.fast.output(), lateral_grad, nullptr, true));
  return out;
}

void Model::backward(const ForwardTrace& tr, std::span<const double> logit_grad,
                     Gradients& grads) const {
  const std::vector<double> pooled_grad =
      normalize_backward(tr, head_.backward(tr.normalized, logit_grad, &grads.head), &grads.norm);
  trunk_backward(tr, pooled_grad, grads);
}

void Model::trunk_backward(const ForwardTrace& tr, std::span<const double> pooled_grad,
                           Gradients& grads) const {
  const int stages = config_.num_stages();
  if (pooled_grad.size() != tr.pooled.size()) throw ShapeError("pooled gradient size mismatch");
  const int fused_channels = tr.slow_fused.channels();
  Volume fused_grad = global_average_pool_backward(
      std::span<const double>(pooled_grad).first(fused_channels), tr.slow_fused.shape());

  Volume slow_grad;
  Volume fast_grad;
  if (config_.two_pathway) {
    fast_grad = global_average_pool_backward(
        std::span<const double>(pooled_grad).subspan(fused_channels), tr.fast.output().shape());
    Volume lateral_grad;
    split_channels(fused_grad, tr.slow.output().channels(), slow_grad, lateral_grad);
    const int lat = laterals_[stages - 1];
    fast_grad.add(
        convs_[lat].backward(tr.fast.output(), lateral_grad, &grads.convs[lat], true));
  } else {
    slow_grad = std::move(fused_grad);
  }

  for (int s = stages - 1; s >= 0; --s) {
    const auto& slow_blocks = slow_.stages[s];
    for (int b = static_cast<int>(slow_blocks.size()) - 1; b >= 0; --b) {
      slow_grad = block_backward(slow_blocks[b], tr.slow.stages[s][b], std::move(slow_grad),
                                 &grads);
    }
    Volume lateral_grad;
    if (s > 0 && config_.two_pathway) {
      Volume head_part;
      split_channels(slow_grad, config_.slow_width(s - 1), head_part, lateral_grad);
      slow_grad = std::move(head_part);
    }
    if (config_.two_pathway) {
      const auto& fast_blocks = fast_.stages[s];
      for (int b = static_cast<int>(fast_blocks.size()) - 1; b >= 0; --b) {
        fast_grad = block_backward(fast_blocks[b], tr.fast.stages[s][b], std::move(fast_grad),
                                   &grads);
      }
      if (s > 0) {
        const int lat = laterals_[s - 1];
        fast_grad.add(convs_[lat].backward(tr.fast.stages[s - 1].back().output, lateral_grad,
                                           &grads.convs[lat], true));
      }
    }
  }

  relu_backward_inplace(tr.slow.stem, slow_grad);
  convs_[slow_.stem].backward(tr.slow.input, slow_grad, &grads.convs[slow_.stem], false);
  if (config_.two_pathway) {
    relu_backward_inplace(tr.fast.stem, fast_grad);
    convs_[fast_.stem].backward(tr.fast.input, fast_grad, &grads.convs[fast_.stem], false);
  }
}

double Model::accumulate_gradients(const ClipTensor& clip, int label, Gradients& grads) const {
  if (label < 0 || label >= config_.num_classes) {
    throw DataError(fmt::format("label {} outside [0, {})", label, config_.num_classes));
  }
  ForwardTrace tr = trace(clip);
  std::vector<double> grad = softmax(tr.logits);
  grad[label] -= 1.0;
  backward(tr, grad, grads);
  return cross_entropy(tr.logits, label);
}

std::vector<double> Model::forward(const ClipTensor& clip) const { return trace(clip).logits; }

std::vector<std::vector<double>> Model::forward_batch(std::span<const ClipTensor> clips) const {
  std::vector<std::vector<double>> out;
  out.reserve(clips.size());
  for (const ClipTensor& clip : clips) out.push_back(forward(clip));
  return out;
}

Model build_model(const ModelConfig& config) { return Model(config); }

std::vector<double> forward(const Model& model, const ClipTensor& clip) {
  return model.forward(clip);
}

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw ShapeError("softmax of an empty vector");
  const double peak = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - peak);
    sum += p[i];
  }
  for (double& v : p) v /= sum;
  return p;
}

std::vector<double> predict_proba(const Model& model, const ClipTensor& clip) {
  return softmax(model.forward(clip));
}

int argmax(std::span<const double> values) {
  if (values.empty()) throw ShapeError("argmax of an empty vector");
  int best = 0;
  for (int i = 1; i < static_cast<int>(values.size()); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

double cross_entropy(std::span<const double> logits, int label) {
  const double peak = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double l : logits) sum += std::exp(l - peak);
  return std::log(sum) + peak - logits[label];
}

std::uint64_t architecture_fingerprint(const ModelConfig& config) {
  return Model(config).fingerprint();
}

std::string hex64(std::uint64_t value) { return fmt::format("{:016x}", value); }

std::uint64_t parameter_digest(const Model& model) {
  std::uint64_t h = kFnvOffset;
  for (const auto& p : model.parameters()) {
    h = fnv1a(p.name, h);
    h = fnv1a(std::span(reinterpret_cast<const unsigned char*>(p.values.data()),
                        p.values.size_bytes()),
              h);
  }
  for (const std::vector<double>* buf : {&model.feature_stats().mean, &model.feature_stats().variance}) {
    h = fnv1a(std::span(reinterpret_cast<const unsigned char*>(buf->data()),
                        buf->size() * sizeof(double)),
              h);
  }
  return h;
}

namespace {

void write_u64(std::ostream& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    const int c = in.get();
    if (c == EOF) throw IoError("checkpoint truncated");
    v |= static_cast<std::uint64_t>(c) << (8 * i);
  }
  return v;
}

}  // namespace

void save_checkpoint(const Model& model, const fs::path& path) {
  json header;
  header["config"] = model.config();
  header["fingerprint"] = hex64(model.fingerprint());
  json arrays = json::array();
  for (const auto& p : model.parameters()) arrays.push_back({{"name", p.name}, {"shape", p.shape}});
  header["arrays"] = std::move(arrays);
  json buffers = json::array();
  const FeatureStats& st = model.feature_stats();
  if (model.config().feature_norm) {
    const int n = static_cast<int>(st.mean.size());
    buffers.push_back({{"name", "feature_norm.mean"}, {"shape", {n}}});
    buffers.push_back({{"name", "feature_norm.variance"}, {"shape", {n}}});
  }
  header["buffers"] = std::move(buffers);
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(fmt::format("cannot write checkpoint {}", path.string()));
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  out.put(static_cast<char>(kCheckpointVersion));
  write_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : model.parameters()) {
    for (double v : p.values) write_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  for (const std::vector<double>* buf : {&st.mean, &st.variance}) {
    if (!model.config().feature_norm) break;
    for (double v : *buf) write_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw IoError(fmt::format("failed writing checkpoint {}", path.string()));
}

Model load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot open checkpoint {}", path.string()));
  char magic[8];
  if (!in.read(magic, 8) || !std::equal(magic, magic + 8, std::begin(kCheckpointMagic))) {
    throw IoError(fmt::format("{} is not a checkpoint", path.string()));
  }
  if (in.get() != kCheckpointVersion) {
    throw IoError(fmt::format("{}: unsupported checkpoint version", path.string()));
  }
  const std::uint64_t header_len = read_u64(in);
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) {
    throw IoError("checkpoint header truncated");
  }
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(fmt::format("{}: corrupt checkpoint header: {}", path.string(), e.what()));
  }
  Model model(header.at("config").get<ModelConfig>());
  const std::string stored = header.at("fingerprint").get<std::string>();
  if (stored != hex64(model.fingerprint())) {
    throw ShapeError(fmt::format("{}: architecture fingerprint {} does not match its config ({})",
                                 path.string(), stored, hex64(model.fingerprint())));
  }
  const json& arrays = header.at("arrays");
  auto params = model.parameters();
  if (arrays.size() != params.size()) {
    throw ShapeError(fmt::format("{}: expected {} arrays, found {}", path.string(),
                                 params.size(), arrays.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (arrays[i].at("name").get<std::string>() != params[i].name ||
        arrays[i].at("shape").get<std::vector<int>>() != params[i].shape) {
      throw ShapeError(fmt::format("{}: array {} does not match the architecture", path.string(),
                                   params[i].name));
    }
    for (double& v : params[i].values) {
      v = std::bit_cast<double>(read_u64(in));
      if (!std::isfinite(v)) {
        throw IoError(fmt::format("{}: non-finite value in {}", path.string(), params[i].name));
      }
    }
  }
  if (model.config().feature_norm) {
    const std::size_t n = model.feature_stats().mean.size();
    const json buffers = header.value("buffers", json::array());
    if (buffers.size() != 2 || buffers[0].at("name") != "feature_norm.mean" ||
        buffers[1].at("name") != "feature_norm.variance") {
      throw ShapeError(fmt::format("{}: missing feature statistics", path.string()));
    }
    FeatureStats st;
    for (std::vector<double>* buf : {&st.mean, &st.variance}) {
      buf->resize(n);
      for (double& v : *buf) v = std::bit_cast<double>(read_u64(in));
    }
    try {
      model.set_feature_stats(std::move(st));
    } catch (const ShapeError& e) {
      throw IoError(fmt::format("{}: {}", path.string(), e.what()));
    }
  }
  return model;
}

}  // namespace microid
