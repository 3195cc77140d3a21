#ifndef MICROID_SLOWFAST_HPP_
#define MICROID_SLOWFAST_HPP_

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "microid/data_core.hpp"
#include "microid/layers.hpp"
#include "microid/volume.hpp"

namespace microid {

// Shape of the clips a model consumes, in ClipTensor order.
struct InputShape {
  int frames = kDefaultWindow;
  int height = 150;
  int width = 150;
  int channels = 3;
  bool operator==(const InputShape&) const = default;
};

/**
 * Architecture and initialization settings of a dual-pathway network.
 *
 * `alpha` is the fast/slow frame ratio: the slow pathway sees every alpha-th
 * frame. `beta` is the fast/slow channel ratio applied at every stage. The
 * defaults are the SMIC settings (alpha 16, beta 1/16).
 *
 * With `two_pathway` false only the slow pathway is built; that single-pathway
 * form is used for the apex-frame control classifier.
 *
 * `feature_norm` standardizes the pooled feature vector before the linear
 * layer: batch statistics while training, stored statistics otherwise,
 * followed by a learned per-feature scale and shift.
 */
struct ModelConfig {
  int alpha = 16;
  double beta = 1.0 / 16.0;
  int base_channels = 32;
  std::vector<int> stage_depths{1, 1, 1};
  int num_classes = 2;
  InputShape input_shape;
  std::uint64_t seed = 0;
  bool two_pathway = true;
  bool feature_norm = true;

  void validate() const;
  int num_stages() const { return static_cast<int>(stage_depths.size()); }
  int slow_frames() const { return input_shape.frames / alpha; }
  int slow_width(int stage) const { return base_channels << stage; }
  int fast_width(int stage) const;
  // Channels the lateral connection after `stage` adds to the slow pathway.
  int lateral_width(int stage) const { return two_pathway ? 2 * fast_width(stage) : 0; }
};

void to_json(nlohmann::json& j, const ModelConfig& config);
void from_json(const nlohmann::json& j, ModelConfig& config);

enum class Pathway { kSlow, kFast };

const char* pathway_name(Pathway p);
Pathway parse_pathway(const std::string& name);

// Pathway inputs as (C, T, H, W) volumes.
struct PathwayInputs {
  Volume slow;
  Volume fast;
};

// Fast pathway: every frame. Slow pathway: frames 0, alpha, 2*alpha, ...
PathwayInputs sample_pathways(const ClipTensor& clip, int alpha);

// Named view over one parameter array.
struct ParameterView {
  std::string name;
  std::vector<int> shape;
  std::span<double> values;
};

struct ConstParameterView {
  std::string name;
  std::vector<int> shape;
  std::span<const double> values;
};

// Per-layer gradient buffers, ordered like Model::parameters().
struct Gradients {
  std::vector<LayerGrad> convs;
  LayerGrad norm;  // weight = scale, bias = shift; empty without feature_norm
  LayerGrad head;

  void zero();
  void scale(double factor);
  std::vector<std::span<double>> arrays();
};

// Activations of one residual block, kept for the backward pass.
struct BlockTrace {
  Volume input;
  Volume hidden;  // after the first convolution and ReLU
  Volume output;  // after the residual sum and ReLU
};

struct PathwayTrace {
  Volume input;
  Volume stem;
  std::vector<std::vector<BlockTrace>> stages;

  const Volume& output() const;
};

struct ForwardTrace {
  PathwayTrace slow;
  PathwayTrace fast;
  std::vector<Volume> laterals;  // lateral output after each fast stage
  Volume slow_fused;             // final slow features with the last lateral appended
  std::vector<double> pooled;      // pooled features
  std::vector<double> normalized;  // head input (pooled when feature_norm is off)
  std::vector<double> logits;
};

inline constexpr double kFeatureNormEpsilon = 1e-5;

// Per-feature statistics used by feature normalization outside training.
struct FeatureStats {
  std::vector<double> mean;
  std::vector<double> variance;
};

// Result of a training-mode head pass over one batch.
struct BatchHeadResult {
  double loss = 0.0;  // mean cross-entropy
  std::vector<std::vector<double>> logits;
  std::vector<std::vector<double>> pooled_grads;
  FeatureStats batch_stats;  // empty unless batch statistics were used
};

// Gradients of the head input w.r.t. the final pathway activations.
struct FeatureGrads {
  Volume slow;
  Volume fast;
};

/**
 * SlowFast-style classifier.
 *
 * Each pathway is a 3D-conv stem (slow 1x5x5, fast 5x5x5, spatial stride 2)
 * followed by residual stages of two convolutions each; every stage but the
 * last halves the spatial extent. Slow stages use temporal kernels only from
 * the second stage on. After every fast stage a lateral convolution with
 * kernel and stride alpha along time brings fast features to the slow frame
 * rate, and they are concatenated onto the slow channels. Both pathways are
 * globally average pooled, concatenated, optionally standardized, and fed to
 * one linear layer.
 *
 * The model is immutable during inference and gradient evaluation; all
 * gradient output goes to caller-owned Gradients.
 */
class Model {
 public:
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  std::uint64_t fingerprint() const { return fingerprint_; }

  std::vector<ParameterView> parameters();
  std::vector<ConstParameterView> parameters() const;
  std::size_t parameter_count() const;
  Gradients make_gradients() const;

  std::vector<double> forward(const ClipTensor& clip) const;
  std::vector<std::vector<double>> forward_batch(std::span<const ClipTensor> clips) const;

  ForwardTrace trace(const ClipTensor& clip) const;

  // Logits from final pathway activations (slow block output and, for two
  // pathways, fast block output). Together with trace() this splits the
  // network at the last convolutional layers.
  std::vector<double> head(const Volume& slow_final, const Volume& fast_final) const;

  // Backpropagates logit gradients into the final pathway activations without
  // touching parameter gradients.
  FeatureGrads head_backward(const ForwardTrace& trace, std::span<const double> logit_grad) const;

  // Cross-entropy loss for one clip; adds d(loss)/d(params) into `grads`.
  double accumulate_gradients(const ClipTensor& clip, int label, Gradients& grads) const;

  // Runs backward through the whole network from logit gradients.
  void backward(const ForwardTrace& trace, std::span<const double> logit_grad,
                Gradients& grads) const;

  // Backward from gradients of the pooled features down to the input layers.
  void trunk_backward(const ForwardTrace& trace, std::span<const double> pooled_grad,
                      Gradients& grads) const;

  // Training-mode head: with feature_norm and at least two clips the pooled
  // features are normalized with the batch statistics. Adds head and norm
  // parameter gradients of the mean loss into `grads` and returns the
  // gradients w.r.t. every clip's pooled features.
  BatchHeadResult batch_head(std::span<const ForwardTrace* const> traces,
                             std::span<const int> labels, Gradients& grads) const;

  // Mean training-mode loss of a batch (forward only).
  double batch_loss(std::span<const ClipTensor> clips, std::span<const int> labels) const;

  const FeatureStats& feature_stats() const { return stats_; }
  void set_feature_stats(FeatureStats stats);

  void check_input(const ClipTensor& clip) const;

 private:
  struct Block {
    int conv_a = -1;
    int conv_b = -1;
    int projection = -1;
  };
  struct PathwayLayers {
    int stem = -1;
    std::vector<std::vector<Block>> stages;
  };

  int add_conv(std::string name, const Conv3dSpec& spec);
  PathwayLayers build_pathway(Pathway which);
  BlockTrace run_block(const Block& block, Volume input) const;
  Volume block_backward(const Block& block, const BlockTrace& trace, Volume out_grad,
                        Gradients* grads) const;
  Volume fuse_final(const Volume& slow_final, const Volume& fast_final, Volume* lateral) const;
  std::vector<double> pool_features(const Volume& slow_fused, const Volume& fast_final) const;
  std::vector<double> normalize(std::span<const double> pooled) const;
  std::vector<double> normalize_backward(const ForwardTrace& trace,
                                         std::span<const double> normalized_grad,
                                         LayerGrad* grad) const;

  ModelConfig config_;
  std::vector<Conv3d> convs_;
  std::vector<std::string> conv_names_;
  PathwayLayers slow_;
  PathwayLayers fast_;
  std::vector<int> laterals_;
  std::vector<double> norm_scale_;
  std::vector<double> norm_shift_;
  FeatureStats stats_;
  Linear head_;
  std::uint64_t fingerprint_ = 0;
};

Model build_model(const ModelConfig& config);

std::vector<double> forward(const Model& model, const ClipTensor& clip);

// Numerically stable softmax.
std::vector<double> softmax(std::span<const double> logits);

std::vector<double> predict_proba(const Model& model, const ClipTensor& clip);

// Index of the largest value; ties resolve to the lowest index.
int argmax(std::span<const double> values);

// -log softmax(logits)[label].
double cross_entropy(std::span<const double> logits, int label);

// Hash of every layer's name, kind and shape plus the input shape.
std::uint64_t architecture_fingerprint(const ModelConfig& config);

// Checkpoint: 8-byte magic, version byte, little-endian uint64 header length,
// JSON header {config, fingerprint, arrays:[{name, shape}], buffers:[...]},
// then every array and buffer as little-endian float64 in header order.
inline constexpr char kCheckpointMagic[8] = {'M', 'X', 'I', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

// FNV-1a digest of all parameter bytes; used to compare checkpoints.
std::uint64_t parameter_digest(const Model& model);

std::string hex64(std::uint64_t value);

}  // namespace microid

#endif  // MICROID_SLOWFAST_HPP_
