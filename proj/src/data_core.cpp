#include "microid/data_core.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <regex>
#include <set>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace microid {

namespace {

std::string normalize_name(const std::string& name) {
  std::string out;
  for (char ch : name) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      out.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
    }
  }
  return out;
}

double max_pixel_value(int depth) {
  switch (depth) {
    case CV_8U: return 255.0;
    case CV_8S: return 127.0;
    case CV_16U: return 65535.0;
    case CV_16S: return 32767.0;
    case CV_32S: return 2147483647.0;
    case CV_32F:
    case CV_64F: return 1.0;  // floating frames are taken as already normalized
    default: throw DataError(fmt::format("unsupported pixel depth {}", depth));
  }
}

std::optional<int> optional_int(const json& record, const char* key) {
  auto it = record.find(key);
  if (it == record.end() || it->is_null()) return std::nullopt;
  return it->get<int>();
}

bool is_little_endian() { return std::endian::native == std::endian::little; }

template <typename T>
void write_le(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if (!is_little_endian()) std::reverse(bytes, bytes + sizeof(T));
  out.write(bytes, sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  char bytes[sizeof(T)];
  if (!in.read(bytes, sizeof(T))) throw IoError("packed tensor truncated");
  if (!is_little_endian()) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace

void ClipTensor::validate() const {
  if (frames < 1 || height < 1 || width < 1 || (channels != 1 && channels != 3)) {
    throw DataError(fmt::format("clip {} has invalid shape ({}, {}, {}, {})", clip_id, frames,
                                height, width, channels));
  }
  if (data.size() != static_cast<std::size_t>(frames) * height * width * channels) {
    throw DataError(fmt::format("clip {} data size does not match its shape", clip_id));
  }
  for (float v : data) {
    if (!std::isfinite(v) || v < 0.0F || v > 1.0F) {
      throw DataError(fmt::format("clip {} has a value outside [0, 1]", clip_id));
    }
  }
}

std::optional<FrameSize> database_frame_size(const std::string& dataset_name) {
  const std::string key = normalize_name(dataset_name);
  if (key == "SMIC") return FrameSize{150, 150};
  if (key == "CASMEII" || key == "CASME2") return FrameSize{300, 300};
  if (key == "SAMM") return FrameSize{400, 400};
  return std::nullopt;
}

fs::path frame_path(const fs::path& frame_dir, int index, const std::string& extension) {
  return frame_dir / fmt::format("{:06d}{}", index, extension);
}

int count_frames(const fs::path& frame_dir) {
  if (!fs::is_directory(frame_dir)) {
    throw DataError(fmt::format("frame directory {} does not exist", frame_dir.string()));
  }
  static const std::regex kFrameName(R"((\d{6})\.(png|jpg|jpeg|bmp))", std::regex::icase);
  std::set<int> indices;
  std::set<std::string> extensions;
  for (const auto& item : fs::directory_iterator(frame_dir)) {
    if (!item.is_regular_file()) continue;
    std::smatch m;
    const std::string name = item.path().filename().string();
    if (std::regex_match(name, m, kFrameName)) {
      indices.insert(std::stoi(m[1].str()));
      extensions.insert(normalize_name(m[2].str()));
    }
  }
  if (extensions.size() > 1) {
    throw DataError(fmt::format("frame directory {} mixes image formats", frame_dir.string()));
  }
  int n = 0;
  while (indices.count(n) != 0) ++n;
  if (n != static_cast<int>(indices.size())) {
    throw DataError(fmt::format("frame numbering in {} is not contiguous from 000000",
                                frame_dir.string()));
  }
  return n;
}

namespace {

std::string frame_extension(const fs::path& frame_dir) {
  for (const char* ext : {".png", ".jpg", ".jpeg", ".bmp", ".PNG", ".JPG", ".JPEG", ".BMP"}) {
    if (fs::exists(frame_path(frame_dir, 0, ext))) return ext;
  }
  throw DataError(fmt::format("no frame 000000 in {}", frame_dir.string()));
}

}  // namespace

DatasetManifest make_manifest(std::vector<ManifestEntry> entries, FrameSize target_size) {
  if (target_size.height < 1 || target_size.width < 1) {
    throw DataError("target size must be positive");
  }
  if (entries.empty()) throw DataError("manifest has no entries");

  std::sort(entries.begin(), entries.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) { return a.clip_id < b.clip_id; });
  std::map<int, int> clips_per_subject;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const ManifestEntry& e = entries[i];
    if (i > 0 && entries[i - 1].clip_id == e.clip_id) {
      throw DataError(fmt::format("duplicate clip_id '{}'", e.clip_id));
    }
    if (e.subject_id < 0) {
      throw DataError(fmt::format("clip {}: negative subject_id", e.clip_id));
    }
    if (e.apex_index < 0 || e.apex_index >= e.frame_count) {
      throw DataError(fmt::format("clip {}: apex out of range (apex {}, {} frames)", e.clip_id,
                                  e.apex_index, e.frame_count));
    }
    if (e.onset_index && (*e.onset_index < 0 || *e.onset_index > e.apex_index)) {
      throw DataError(fmt::format("clip {}: onset must satisfy 0 <= onset <= apex", e.clip_id));
    }
    if (e.offset_index && (*e.offset_index < e.apex_index || *e.offset_index >= e.frame_count)) {
      throw DataError(
          fmt::format("clip {}: offset must satisfy apex <= offset < frame count", e.clip_id));
    }
    if (e.crop_rect && (e.crop_rect->width <= 0 || e.crop_rect->height <= 0)) {
      throw DataError(fmt::format("clip {}: zero-area crop rectangle", e.clip_id));
    }
    ++clips_per_subject[e.subject_id];
  }

  DatasetManifest manifest;
  manifest.target_size = target_size;
  int next = 0;
  for (const auto& [subject, count] : clips_per_subject) {
    if (count < 2) {
      throw DataError(
          fmt::format("subject {} has a single clip; a train/test split is impossible", subject));
    }
    manifest.label_map[subject] = next++;
  }
  for (ManifestEntry& e : entries) e.label = manifest.label_map.at(e.subject_id);
  manifest.entries = std::move(entries);
  return manifest;
}

DatasetManifest load_manifest(const fs::path& path, std::optional<FrameSize> target_override) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open manifest {}", path.string()));
  const fs::path base = path.has_parent_path() ? path.parent_path() : fs::path(".");

  std::vector<ManifestEntry> entries;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json record;
    try {
      record = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(fmt::format("{}:{}: {}", path.string(), line_no, e.what()));
    }
    try {
      ManifestEntry e;
      e.clip_id = record.at("clip_id").get<std::string>();
      fs::path dir = record.at("frame_dir").get<std::string>();
      e.frame_source = dir.is_absolute() ? dir : base / dir;
      e.subject_id = record.at("subject_id").get<int>();
      e.apex_index = record.at("apex_index").get<int>();
      e.onset_index = optional_int(record, "onset_index");
      e.offset_index = optional_int(record, "offset_index");
      auto cx = optional_int(record, "crop_x");
      auto cy = optional_int(record, "crop_y");
      auto cw = optional_int(record, "crop_w");
      auto ch = optional_int(record, "crop_h");
      const int present = cx.has_value() + cy.has_value() + cw.has_value() + ch.has_value();
      if (present == 4) {
        e.crop_rect = CropRect{*cx, *cy, *cw, *ch};
      } else if (present != 0) {
        throw DataError("crop_x, crop_y, crop_w and crop_h must be given together");
      }
      e.dataset_name = record.at("dataset_name").get<std::string>();
      e.frame_count = count_frames(e.frame_source);
      entries.push_back(std::move(e));
    } catch (const json::exception& ex) {
      throw DataError(fmt::format("{}:{}: {}", path.string(), line_no, ex.what()));
    } catch (const DataError& ex) {
      throw DataError(fmt::format("{}:{}: {}", path.string(), line_no, ex.what()));
    }
  }

  FrameSize target{};
  if (target_override) {
    target = *target_override;
  } else {
    std::optional<FrameSize> found;
    for (const ManifestEntry& e : entries) {
      auto size = database_frame_size(e.dataset_name);
      if (!size) {
        throw DataError(fmt::format(
            "dataset '{}' has no known frame size; supply a target size", e.dataset_name));
      }
      if (found && !(*found == *size)) {
        throw DataError("manifest mixes datasets with different frame sizes");
      }
      found = size;
    }
    if (found) target = *found;
  }
  return make_manifest(std::move(entries), target);
}

void write_manifest(const DatasetManifest& manifest, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError(fmt::format("cannot write manifest {}", path.string()));
  const fs::path base = fs::absolute(path).parent_path();
  for (const ManifestEntry& e : manifest.entries) {
    json record;
    record["clip_id"] = e.clip_id;
    fs::path dir = fs::absolute(e.frame_source).lexically_normal();
    fs::path rel = dir.lexically_relative(base);
    record["frame_dir"] = (rel.empty() || *rel.begin() == "..") ? dir.string() : rel.string();
    record["subject_id"] = e.subject_id;
    record["apex_index"] = e.apex_index;
    record["onset_index"] = e.onset_index ? json(*e.onset_index) : json(nullptr);
    record["offset_index"] = e.offset_index ? json(*e.offset_index) : json(nullptr);
    if (e.crop_rect) {
      record["crop_x"] = e.crop_rect->x;
      record["crop_y"] = e.crop_rect->y;
      record["crop_w"] = e.crop_rect->width;
      record["crop_h"] = e.crop_rect->height;
    } else {
      record["crop_x"] = record["crop_y"] = record["crop_w"] = record["crop_h"] = nullptr;
    }
    record["dataset_name"] = e.dataset_name;
    out << record.dump() << '\n';
  }
  if (!out) throw IoError(fmt::format("failed writing manifest {}", path.string()));
}

std::vector<cv::Mat> preprocess_frames(const std::vector<cv::Mat>& raw_frames,
                                       const std::optional<CropRect>& crop_rect,
                                       FrameSize target_size) {
  if (raw_frames.empty()) throw DataError("no frames to preprocess");
  if (target_size.height < 1 || target_size.width < 1) {
    throw DataError("target size must be positive");
  }
  std::vector<cv::Mat> out;
  out.reserve(raw_frames.size());
  for (const cv::Mat& frame : raw_frames) {
    if (frame.empty()) throw DataError("empty frame");
    cv::Rect roi;
    if (crop_rect) {
      const CropRect& r = *crop_rect;
      if (r.width <= 0 || r.height <= 0) throw DataError("zero-area crop rectangle");
      if (r.x < 0 || r.y < 0 || r.x + r.width > frame.cols || r.y + r.height > frame.rows) {
        throw DataError(fmt::format("crop rectangle ({}, {}, {}, {}) outside {}x{} frame", r.x,
                                    r.y, r.width, r.height, frame.cols, frame.rows));
      }
      roi = cv::Rect(r.x, r.y, r.width, r.height);
    } else {
      const int side = std::min(frame.rows, frame.cols);
      roi = cv::Rect((frame.cols - side) / 2, (frame.rows - side) / 2, side, side);
    }
    cv::Mat scaled;
    frame(roi).convertTo(scaled, CV_32F, 1.0 / max_pixel_value(frame.depth()));
    cv::Mat sized;
    if (scaled.rows == target_size.height && scaled.cols == target_size.width) {
      sized = scaled;
    } else {
      const bool shrinking = target_size.width < scaled.cols && target_size.height < scaled.rows;
      cv::resize(scaled, sized, cv::Size(target_size.width, target_size.height), 0, 0,
                 shrinking ? cv::INTER_AREA : cv::INTER_LINEAR);
    }
    cv::Mat clamped = cv::max(cv::min(sized, 1.0), 0.0);
    out.push_back(clamped);
  }
  return out;
}

std::vector<int> pad_indices(int n, int window) {
  if (n < 1) throw DataError("cannot pad an empty sequence");
  if (n > window) {
    throw DataError(fmt::format("sequence of {} frames exceeds window {}", n, window));
  }
  const int missing = window - n;
  const int front = (missing + 1) / 2;
  const int back = missing / 2;
  std::vector<int> idx;
  idx.reserve(window);
  idx.insert(idx.end(), front, 0);
  for (int i = 0; i < n; ++i) idx.push_back(i);
  idx.insert(idx.end(), back, n - 1);
  return idx;
}

std::vector<int> apex_window_indices(int n, int apex_index, int window) {
  if (window < 1) throw DataError("window length must be positive");
  if (apex_index < 0 || apex_index >= n) {
    throw DataError(fmt::format("apex out of range (apex {}, {} frames)", apex_index, n));
  }
  if (n < window) return pad_indices(n, window);
  const int start = std::clamp(apex_index - window / 2, 0, n - window);
  std::vector<int> idx(window);
  for (int i = 0; i < window; ++i) idx[i] = start + i;
  return idx;
}

std::pair<DatasetManifest, DatasetManifest> split_dataset(const DatasetManifest& manifest,
                                                          double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw DataError("split ratio must lie in (0, 1)");
  std::map<int, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    by_label[manifest.entries[i].label].push_back(i);
  }
  std::mt19937_64 rng(seed);
  std::vector<bool> in_train(manifest.entries.size(), false);
  for (auto& [label, members] : by_label) {
    const int count = static_cast<int>(members.size());
    if (count < 2) {
      throw DataError(fmt::format("subject with label {} has a single clip", label));
    }
    std::shuffle(members.begin(), members.end(), rng);
    const int n_train =
        std::clamp(static_cast<int>(std::lround(ratio * count)), 1, count - 1);
    for (int i = 0; i < n_train; ++i) in_train[members[i]] = true;
  }
  DatasetManifest train{{}, manifest.target_size, manifest.label_map};
  DatasetManifest test{{}, manifest.target_size, manifest.label_map};
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    (in_train[i] ? train : test).entries.push_back(manifest.entries[i]);
  }
  return {std::move(train), std::move(test)};
}

ClipTensor frames_to_clip(const std::vector<cv::Mat>& frames, int subject_id,
                          std::string clip_id) {
  if (frames.empty()) throw DataError("clip has no frames");
  ClipTensor clip;
  clip.frames = static_cast<int>(frames.size());
  clip.height = frames[0].rows;
  clip.width = frames[0].cols;
  clip.channels = frames[0].channels();
  clip.subject_id = subject_id;
  clip.clip_id = std::move(clip_id);
  clip.data.resize(static_cast<std::size_t>(clip.frames) * clip.height * clip.width *
                   clip.channels);
  const std::size_t row_len = static_cast<std::size_t>(clip.width) * clip.channels;
  for (int t = 0; t < clip.frames; ++t) {
    const cv::Mat& f = frames[t];
    if (f.rows != clip.height || f.cols != clip.width || f.channels() != clip.channels ||
        f.depth() != CV_32F) {
      throw DataError("frames of a clip must share size, channels and CV_32F depth");
    }
    for (int y = 0; y < clip.height; ++y) {
      const float* src = f.ptr<float>(y);
      std::copy(src, src + row_len, clip.data.begin() + clip.index(t, y, 0, 0));
    }
  }
  return clip;
}

ClipTensor load_clip(const ManifestEntry& entry, FrameSize target_size, int window,
                     int channels) {
  if (channels != 1 && channels != 3) throw DataError("clips must have 1 or 3 channels");
  const int n = entry.frame_count > 0 ? entry.frame_count : count_frames(entry.frame_source);
  const std::vector<int> indices = apex_window_indices(n, entry.apex_index, window);
  const std::string ext = frame_extension(entry.frame_source);
  const int flags =
      (channels == 1 ? cv::IMREAD_GRAYSCALE : cv::IMREAD_COLOR) | cv::IMREAD_ANYDEPTH;

  // Each distinct source frame is decoded once; padding repeats references.
  std::map<int, cv::Mat> decoded;
  for (int i : indices) {
    if (decoded.count(i) != 0) continue;
    const fs::path p = frame_path(entry.frame_source, i, ext);
    cv::Mat img = cv::imread(p.string(), flags);
    if (img.empty()) throw DataError(fmt::format("cannot read frame {}", p.string()));
    decoded.emplace(i, img);
  }
  std::vector<cv::Mat> unique_raw;
  std::vector<int> order;
  for (const auto& [i, img] : decoded) {
    unique_raw.push_back(img);
    order.push_back(i);
  }
  std::vector<cv::Mat> processed = preprocess_frames(unique_raw, entry.crop_rect, target_size);
  std::map<int, cv::Mat> by_index;
  for (std::size_t k = 0; k < order.size(); ++k) by_index[order[k]] = processed[k];
  std::vector<cv::Mat> window_frames;
  window_frames.reserve(indices.size());
  for (int i : indices) window_frames.push_back(by_index.at(i));
  return frames_to_clip(window_frames, entry.label, entry.clip_id);
}

std::vector<ClipTensor> load_clips(const DatasetManifest& manifest, int window, int channels) {
  std::vector<ClipTensor> clips;
  clips.reserve(manifest.entries.size());
  for (const ManifestEntry& e : manifest.entries) {
    clips.push_back(load_clip(e, manifest.target_size, window, channels));
  }
  return clips;
}

void write_packed_tensor(const fs::path& path, const PackedTensor& tensor) {
  const std::size_t expected = static_cast<std::size_t>(tensor.frames) * tensor.height *
                               tensor.width * tensor.channels;
  if (tensor.data.size() != expected) throw ShapeError("packed tensor data does not match dims");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(fmt::format("cannot write {}", path.string()));
  out.write(kPackedTensorMagic, sizeof(kPackedTensorMagic));
  out.put(static_cast<char>(kPackedTensorVersion));
  write_le(out, tensor.frames);
  write_le(out, tensor.height);
  write_le(out, tensor.width);
  write_le(out, tensor.channels);
  for (float v : tensor.data) write_le(out, v);
  if (!out) throw IoError(fmt::format("failed writing {}", path.string()));
}

PackedTensor read_packed_tensor(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot open {}", path.string()));
  char magic[8];
  if (!in.read(magic, sizeof(magic)) ||
      !std::equal(magic, magic + 8, std::begin(kPackedTensorMagic))) {
    throw IoError(fmt::format("{} is not a packed tensor file", path.string()));
  }
  const int version = in.get();
  if (version != kPackedTensorVersion) {
    throw IoError(fmt::format("{}: unsupported packed tensor version {}", path.string(), version));
  }
  PackedTensor t;
  t.frames = read_le<std::uint32_t>(in);
  t.height = read_le<std::uint32_t>(in);
  t.width = read_le<std::uint32_t>(in);
  t.channels = read_le<std::uint32_t>(in);
  const std::size_t n = static_cast<std::size_t>(t.frames) * t.height * t.width * t.channels;
  t.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) t.data[i] = read_le<float>(in);
  return t;
}

void write_clip_cache(const fs::path& path, const ClipTensor& clip) {
  clip.validate();
  write_packed_tensor(path, PackedTensor{static_cast<std::uint32_t>(clip.frames),
                                         static_cast<std::uint32_t>(clip.height),
                                         static_cast<std::uint32_t>(clip.width),
                                         static_cast<std::uint32_t>(clip.channels), clip.data});
}

ClipTensor read_clip_cache(const fs::path& path, int subject_id, std::string clip_id) {
  PackedTensor t = read_packed_tensor(path);
  ClipTensor clip;
  clip.frames = static_cast<int>(t.frames);
  clip.height = static_cast<int>(t.height);
  clip.width = static_cast<int>(t.width);
  clip.channels = static_cast<int>(t.channels);
  clip.data = std::move(t.data);
  clip.subject_id = subject_id;
  clip.clip_id = std::move(clip_id);
  clip.validate();
  return clip;
}

}  // namespace microid
