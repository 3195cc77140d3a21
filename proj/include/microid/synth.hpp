#ifndef MICROID_SYNTH_HPP_
#define MICROID_SYNTH_HPP_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>
#include <opencv2/core.hpp>

#include "microid/data_core.hpp"
#include "microid/slowfast.hpp"
#include "microid/training.hpp"

namespace microid {

enum class Direction { kForward, kReverse };

const char* direction_name(Direction d);

// How subjects map onto trajectories. kForwardReverse gives every path to two
// subjects that traverse it in opposite directions; kDistinct gives every
// subject its own path (all forward), so a single frame reveals identity.
enum class Pairing { kForwardReverse, kDistinct };
const char* pairing_name(Pairing p);
Pairing parse_pairing(const std::string& name);  // "forward_reverse" or "distinct"

struct SubjectSignature {
  int subject_id = 0;
  int path_id = 0;
  Direction direction = Direction::kForward;
  int motion_span = 15;
  double blob_sigma = 3.0;
};

struct SynthConfig {
  int num_paths = 4;  // P; subjects K = 2P
  Pairing pairing = Pairing::kForwardReverse;
  int clips_per_subject = 20;
  FrameSize frame_size{64, 64};
  int window = kDefaultWindow;
  int motion_span = 15;
  double blob_sigma = 3.0;
  double blob_amplitude = 0.4;
  double noise_std = 0.02;
  int start_jitter = 3;            // frames, uniform in [-j, j]
  double amplitude_jitter = 0.1;   // relative, uniform in [-a, a]
  std::uint64_t seed = 0;

  int num_subjects() const { return 2 * num_paths; }
  void validate() const;
};

void to_json(nlohmann::json& j, const SynthConfig& c);
void from_json(const nlohmann::json& j, SynthConfig& c);

// Per-clip random draws.
struct ClipJitter {
  int motion_start = 0;  // first frame showing the blob
  double amplitude = 0.0;
  std::uint64_t noise_seed = 0;
};

// Straight trajectory in pixel coordinates.
struct BlobPath {
  cv::Point2d start;
  cv::Point2d end;
};

std::vector<SubjectSignature> make_signatures(const SynthConfig& config);

BlobPath path_geometry(const SynthConfig& config, int path_id);

ClipJitter draw_jitter(const SynthConfig& config, int subject_id, int clip_index);

// Blob center at frame t, or nothing when the blob is not visible.
std::optional<cv::Point2d> blob_center(const SynthConfig& config, const SubjectSignature& subject,
                                       const ClipJitter& jitter, int t);

// (1, W, H, W_px) mask of the pixels within `radius` of the blob center,
// also counting centers up to `temporal_dilation` frames away.
Volume blob_tube_mask(const SynthConfig& config, const SubjectSignature& subject,
                      const ClipJitter& jitter, double radius, int temporal_dilation);

// Index of the middle frame of the motion.
int apex_of(const SynthConfig& config, const ClipJitter& jitter);

// Shared static background in [0, 1] (CV_64F).
cv::Mat base_image(const SynthConfig& config);

// Renders one clip as 8-bit grayscale frames, exactly as written to disk.
std::vector<cv::Mat> render_clip(const SynthConfig& config, const SubjectSignature& subject,
                                 const ClipJitter& jitter, const cv::Mat& base);

struct SynthClipInfo {
  std::string clip_id;
  int subject_id = 0;
  int clip_index = 0;
  ClipJitter jitter;
};

struct SynthMetadata {
  SynthConfig config;
  std::vector<SubjectSignature> subjects;
  std::vector<SynthClipInfo> clips;

  const SynthClipInfo* find_clip(const std::string& clip_id) const;
};

inline constexpr const char* kSynthConfigFile = "synth_config.json";
inline constexpr const char* kManifestFile = "manifest.jsonl";

std::string synth_clip_id(int subject_id, int clip_index);

// Writes clips/<clip_id>/000000.png..., manifest.jsonl and synth_config.json
// under `out_dir` and returns the loaded manifest.
DatasetManifest generate_dataset(const SynthConfig& config, const std::filesystem::path& out_dir,
                                 int jobs = 1);

SynthMetadata read_synth_metadata(const std::filesystem::path& dataset_dir);

// Loads a generated dataset's manifest with the frame size recorded in its
// synth_config.json.
DatasetManifest load_synth_manifest(const std::filesystem::path& dataset_dir);

struct StaticBaselineOptions {
  int base_channels = 8;
  std::vector<int> stage_depths{1, 1, 1};
  SolverConfig solver;
  double split_ratio = 0.5;
  int jobs = 1;
};

// Keeps only the apex frame of a clip (a 1-frame clip).
ClipTensor apex_frame_clip(const ClipTensor& clip, int apex_position);

// Trains a single-pathway network on apex frames only (the slow pathway's
// layout at alpha 1) and returns its rank-1 accuracy on the seeded test split.
double static_baseline_accuracy(const DatasetManifest& manifest, std::uint64_t seed,
                                const StaticBaselineOptions& options = {});

}  // namespace microid

#endif  // MICROID_SYNTH_HPP_
