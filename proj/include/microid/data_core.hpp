#ifndef MICROID_DATA_CORE_HPP_
#define MICROID_DATA_CORE_HPP_

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <opencv2/core.hpp>

#include "microid/error.hpp"

namespace microid {

inline constexpr int kDefaultWindow = 64;

struct CropRect {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;
  bool operator==(const CropRect&) const = default;
};

struct FrameSize {
  int height = 0;
  int width = 0;
  bool operator==(const FrameSize&) const = default;
};

// One clip of a dataset. `subject_id` is the identity as written in the
// manifest file; `label` is its compacted class index in [0, K).
struct ManifestEntry {
  std::string clip_id;
  std::filesystem::path frame_source;
  int subject_id = 0;
  int label = 0;
  int apex_index = 0;
  std::optional<int> onset_index;
  std::optional<int> offset_index;
  std::optional<CropRect> crop_rect;
  std::string dataset_name;
  int frame_count = 0;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  FrameSize target_size;
  std::map<int, int> label_map;  // original subject id -> compact label

  int num_classes() const { return static_cast<int>(label_map.size()); }
};

// Fixed-length normalized clip, stored (T, H, W, C) row-major.
struct ClipTensor {
  std::vector<float> data;
  int frames = 0;
  int height = 0;
  int width = 0;
  int channels = 0;
  int subject_id = 0;  // compact label
  std::string clip_id;

  std::size_t index(int t, int y, int x, int c) const {
    return ((static_cast<std::size_t>(t) * height + y) * width + x) * channels + c;
  }
  float at(int t, int y, int x, int c = 0) const { return data[index(t, y, x, c)]; }
  float& at(int t, int y, int x, int c = 0) { return data[index(t, y, x, c)]; }

  // Throws DataError unless the shape is consistent and every value is a
  // finite number in [0, 1].
  void validate() const;
};

// Per-database resize target, looked up by dataset name ("SMIC" -> 150x150,
// "CASME II" -> 300x300, "SAMM" -> 400x400). Case- and separator-insensitive.
std::optional<FrameSize> database_frame_size(const std::string& dataset_name);

// Number of consecutively numbered frames (000000.png, 000001.png, ...) in a
// frame directory. Accepts png, jpg, jpeg and bmp; mixing extensions is an error.
int count_frames(const std::filesystem::path& frame_dir);

std::filesystem::path frame_path(const std::filesystem::path& frame_dir, int index,
                                 const std::string& extension = ".png");

// Validates entries, compacts subject ids into labels and sorts by clip_id.
// Raises DataError on duplicate clip ids, single-clip subjects, or
// apex/onset/offset indices inconsistent with the recorded frame counts.
DatasetManifest make_manifest(std::vector<ManifestEntry> entries, FrameSize target_size);

// Reads a JSON-lines manifest. Relative frame_dir values resolve against the
// manifest's directory. The target size comes from `target_override`, else
// from the dataset name; every referenced frame directory must exist.
DatasetManifest load_manifest(const std::filesystem::path& path,
                              std::optional<FrameSize> target_override = std::nullopt);

// Writes a manifest in the same JSON-lines format, storing frame_dir relative
// to the manifest directory when possible.
void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

// Crop (or center-square crop), resize to `target_size`, and scale by the
// maximum representable pixel value. Output frames are CV_32F with the input
// channel count.
std::vector<cv::Mat> preprocess_frames(const std::vector<cv::Mat>& raw_frames,
                                       const std::optional<CropRect>& crop_rect,
                                       FrameSize target_size);

// Source indices for padding an n-frame sequence to length `window`:
// ceil((W-n)/2) copies of the first frame, the frames, floor((W-n)/2) copies
// of the last.
std::vector<int> pad_indices(int n, int window);

// Source indices of the apex-centered window. For n >= W the window starts at
// clamp(apex - W/2, 0, n - W); shorter clips are padded.
std::vector<int> apex_window_indices(int n, int apex_index, int window);

template <typename T>
std::vector<T> gather(std::span<const T> frames, const std::vector<int>& indices) {
  std::vector<T> out;
  out.reserve(indices.size());
  for (int i : indices) out.push_back(frames[i]);
  return out;
}

template <typename T>
std::vector<T> pad_to_window(std::span<const T> frames, int window) {
  return gather(frames, pad_indices(static_cast<int>(frames.size()), window));
}

template <typename T>
std::vector<T> apex_window(std::span<const T> frames, int apex_index, int window) {
  return gather(frames,
                apex_window_indices(static_cast<int>(frames.size()), apex_index, window));
}

// Per-subject stratified split. Each subject's clips are shuffled with a
// seeded generator and cut at round(ratio * count), keeping at least one clip
// on each side. Returns (train, test).
std::pair<DatasetManifest, DatasetManifest> split_dataset(const DatasetManifest& manifest,
                                                          double ratio, std::uint64_t seed);

// Reads the apex window of one entry from disk and preprocesses it.
ClipTensor load_clip(const ManifestEntry& entry, FrameSize target_size, int window = kDefaultWindow,
                     int channels = 1);

std::vector<ClipTensor> load_clips(const DatasetManifest& manifest, int window = kDefaultWindow,
                                   int channels = 1);

// Converts preprocessed frames (CV_32FC1 or CV_32FC3) into a clip tensor.
ClipTensor frames_to_clip(const std::vector<cv::Mat>& frames, int subject_id,
                          std::string clip_id);

// Packed binary tensor: 8-byte magic, one version byte, four little-endian
// uint32 dims (T, H, W, C), then T*H*W*C little-endian float32 values.
struct PackedTensor {
  std::uint32_t frames = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint32_t channels = 0;
  std::vector<float> data;
};

inline constexpr char kPackedTensorMagic[8] = {'M', 'X', 'I', 'D', 'T', 'N', 'S', 'R'};
inline constexpr std::uint8_t kPackedTensorVersion = 1;

void write_packed_tensor(const std::filesystem::path& path, const PackedTensor& tensor);
PackedTensor read_packed_tensor(const std::filesystem::path& path);

void write_clip_cache(const std::filesystem::path& path, const ClipTensor& clip);
// The cache holds pixels only; identity comes from the caller.
ClipTensor read_clip_cache(const std::filesystem::path& path, int subject_id,
                           std::string clip_id);

}  // namespace microid

#endif  // MICROID_DATA_CORE_HPP_
