#include "microid/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "microid/evaluation.hpp"
#include "microid/parallel.hpp"
#include "microid/random.hpp"

namespace microid {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Normalized (center x, center y, angle in degrees) of the first trajectories;
// later ones are spread on a ring.
constexpr double kPathTable[8][3] = {
    {0.30, 0.30, 0.0},  {0.70, 0.30, 90.0}, {0.30, 0.70, 45.0}, {0.70, 0.70, 135.0},
    {0.50, 0.22, 0.0},  {0.50, 0.78, 0.0},  {0.22, 0.50, 90.0}, {0.78, 0.50, 90.0},
};
constexpr double kPathLength = 0.3;

}  // namespace

const char* pairing_name(Pairing p) {
  return p == Pairing::kForwardReverse ? "forward_reverse" : "distinct";
}

Pairing parse_pairing(const std::string& s) {
  if (s == "forward_reverse") return Pairing::kForwardReverse;
  if (s == "distinct") return Pairing::kDistinct;
  throw ConfigError(fmt::format("unknown pairing '{}'", s));
}

const char* direction_name(Direction d) { return d == Direction::kForward ? "forward" : "reverse"; }

void SynthConfig::validate() const {
  if (num_paths < 1 || num_subjects() < 2)
    throw ConfigError("synthetic data needs at least 2 subjects");
  if (clips_per_subject < 4) throw ConfigError("clips_per_subject must be >= 4");
  if (frame_size.height < 8 || frame_size.width < 8)
    throw ConfigError("synthetic frames must be at least 8x8");
  if (window < 1) throw ConfigError("window must be positive");
  if (motion_span < 2 || motion_span > window)
    throw ConfigError("motion_span must lie in [2, window]");
  if (!(blob_sigma > 0.0)) throw ConfigError("blob_sigma must be positive");
  if (!(blob_amplitude > 0.0)) throw ConfigError("blob_amplitude must be positive");
  if (!(noise_std >= 0.0)) throw ConfigError("noise_std must be >= 0");
  if (start_jitter < 0) throw ConfigError("start_jitter must be >= 0");
  if (!(amplitude_jitter >= 0.0 && amplitude_jitter < 1.0))
    throw ConfigError("amplitude_jitter must lie in [0, 1)");
  const int nominal = window / 2 - motion_span / 2;
  if (nominal - start_jitter < 0 || nominal + start_jitter + motion_span > window)
    throw ConfigError("motion span plus start jitter does not fit in the window");
}

void to_json(json& j, const SynthConfig& c) {
  j = json{{"num_paths", c.num_paths},
           {"subjects", c.num_subjects()},
           {"pairing", pairing_name(c.pairing)},
           {"clips_per_subject", c.clips_per_subject},
           {"frame_size", {c.frame_size.height, c.frame_size.width}},
           {"window", c.window},
           {"motion_span", c.motion_span},
           {"blob_sigma", c.blob_sigma},
           {"blob_amplitude", c.blob_amplitude},
           {"noise_std", c.noise_std},
           {"start_jitter", c.start_jitter},
           {"amplitude_jitter", c.amplitude_jitter},
           {"seed", c.seed}};
}

void from_json(const json& j, SynthConfig& c) {
  c = SynthConfig{};
  if (j.contains("num_paths")) j.at("num_paths").get_to(c.num_paths);
  if (j.contains("pairing")) c.pairing = parse_pairing(j.at("pairing").get<std::string>());
  if (j.contains("clips_per_subject")) j.at("clips_per_subject").get_to(c.clips_per_subject);
  if (j.contains("frame_size")) {
    const auto fsz = j.at("frame_size").get<std::vector<int>>();
    if (fsz.size() != 2) throw ConfigError("frame_size must have two entries");
    c.frame_size = FrameSize{fsz[0], fsz[1]};
  }
  if (j.contains("window")) j.at("window").get_to(c.window);
  if (j.contains("motion_span")) j.at("motion_span").get_to(c.motion_span);
  if (j.contains("blob_sigma")) j.at("blob_sigma").get_to(c.blob_sigma);
  if (j.contains("blob_amplitude")) j.at("blob_amplitude").get_to(c.blob_amplitude);
  if (j.contains("noise_std")) j.at("noise_std").get_to(c.noise_std);
  if (j.contains("start_jitter")) j.at("start_jitter").get_to(c.start_jitter);
  if (j.contains("amplitude_jitter")) j.at("amplitude_jitter").get_to(c.amplitude_jitter);
  if (j.contains("seed")) j.at("seed").get_to(c.seed);
}

std::vector<SubjectSignature> make_signatures(const SynthConfig& config) {
  std::vector<SubjectSignature> out;
  for (int s = 0; s < config.num_subjects(); ++s) {
    SubjectSignature sig;
    sig.subject_id = s;
    if (config.pairing == Pairing::kForwardReverse) {
      sig.path_id = s / 2;
      sig.direction = s % 2 == 0 ? Direction::kForward : Direction::kReverse;
    } else {
      sig.path_id = s;
      sig.direction = Direction::kForward;
    }
    sig.motion_span = config.motion_span;
    sig.blob_sigma = config.blob_sigma;
    out.push_back(sig);
  }
  return out;
}

BlobPath path_geometry(const SynthConfig& config, int path_id) {
  double cx, cy, angle;
  if (path_id < 8) {
    cx = kPathTable[path_id][0];
    cy = kPathTable[path_id][1];
    angle = kPathTable[path_id][2];
  } else {
    const double phi = path_id * 2.399963229728653;  // golden angle
    cx = 0.5 + 0.28 * std::cos(phi);
    cy = 0.5 + 0.28 * std::sin(phi);
    angle = std::fmod(path_id * 37.0, 180.0);
  }
  const double w = config.frame_size.width;
  const double h = config.frame_size.height;
  const double rad = angle * std::numbers::pi / 180.0;
  const double half = 0.5 * kPathLength * std::min(w, h);
  const cv::Point2d center(cx * w, cy * h);
  const cv::Point2d d(half * std::cos(rad), half * std::sin(rad));
  return BlobPath{center - d, center + d};
}

ClipJitter draw_jitter(const SynthConfig& config, int subject_id, int clip_index) {
  std::mt19937_64 rng(mix_seed(mix_seed(config.seed, static_cast<std::uint64_t>(subject_id)),
                               static_cast<std::uint64_t>(clip_index)));
  ClipJitter j;
  const int nominal = config.window / 2 - config.motion_span / 2;
  j.motion_start =
      nominal + std::uniform_int_distribution<int>(-config.start_jitter, config.start_jitter)(rng);
  j.amplitude = config.blob_amplitude *
                (1.0 + std::uniform_real_distribution<double>(-config.amplitude_jitter,
                                                              config.amplitude_jitter)(rng));
  j.noise_seed = rng();
  return j;
}

Volume blob_tube_mask(const SynthConfig& config, const SubjectSignature& subject,
                      const ClipJitter& jitter, double radius, int temporal_dilation) {
  if (radius < 0.0 || temporal_dilation < 0) throw ConfigError("tube dilation must be >= 0");
  const int h = config.frame_size.height;
  const int w = config.frame_size.width;
  Volume mask({1, config.window, h, w});
  for (int t = 0; t < config.window; ++t) {
    for (int u = t - temporal_dilation; u <= t + temporal_dilation; ++u) {
      if (u < 0 || u >= config.window) continue;
      const std::optional<cv::Point2d> c = blob_center(config, subject, jitter, u);
      if (!c) continue;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double dx = x - c->x;
          const double dy = y - c->y;
          if (dx * dx + dy * dy <= radius * radius) mask.at(0, t, y, x) = 1.0;
        }
    }
  }
  return mask;
}

int apex_of(const SynthConfig& config, const ClipJitter& jitter) {
  return jitter.motion_start + (config.motion_span - 1) / 2;
}

std::optional<cv::Point2d> blob_center(const SynthConfig& config, const SubjectSignature& subject,
                                       const ClipJitter& jitter, int t) {
  const int k = t - jitter.motion_start;
  if (k < 0 || k >= subject.motion_span) return std::nullopt;
  double u = static_cast<double>(k) / (subject.motion_span - 1);
  if (subject.direction == Direction::kReverse) u = 1.0 - u;
  const BlobPath path = path_geometry(config, subject.path_id);
  return path.start + u * (path.end - path.start);
}

cv::Mat base_image(const SynthConfig& config) {
  const int h = config.frame_size.height;
  const int w = config.frame_size.width;
  std::mt19937_64 rng(mix_seed(config.seed, 0xba5eULL));
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  const double p1 = phase(rng), p2 = phase(rng), p3 = phase(rng);
  cv::Mat img(h, w, CV_64F);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double u = (x + 0.5) / w - 0.5;
      const double v = (y + 0.5) / h - 0.5;
      // oval "face" on a darker background with soft low-frequency texture
      const double r = std::sqrt((u * u) / 0.16 + (v * v) / 0.21);
      double value = r < 1.0 ? 0.45 : 0.2;
      value += 0.04 * std::sin(7.0 * u + p1) * std::cos(5.0 * v + p2) +
               0.03 * std::sin(11.0 * (u + v) + p3);
      img.at<double>(y, x) = value;
    }
  }
  // two eyes and a mouth, darker than the skin tone
  auto dim = [&](double cx, double cy, double rx, double ry) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double u = ((x + 0.5) / w - cx) / rx;
        const double v = ((y + 0.5) / h - cy) / ry;
        if (u * u + v * v < 1.0) img.at<double>(y, x) -= 0.12;
      }
  };
  dim(0.37, 0.40, 0.06, 0.03);
  dim(0.63, 0.40, 0.06, 0.03);
  dim(0.50, 0.68, 0.10, 0.03);
  cv::GaussianBlur(img, img, cv::Size(0, 0), 1.0);
  return img;
}

std::vector<cv::Mat> render_clip(const SynthConfig& config, const SubjectSignature& subject,
                                 const ClipJitter& jitter, const cv::Mat& base) {
  const int h = config.frame_size.height;
  const int w = config.frame_size.width;
  std::mt19937_64 rng(jitter.noise_seed);
  std::normal_distribution<double> noise(0.0, 1.0);
  const double inv = 1.0 / (2.0 * subject.blob_sigma * subject.blob_sigma);
  std::vector<cv::Mat> frames;
  frames.reserve(config.window);
  for (int t = 0; t < config.window; ++t) {
    const std::optional<cv::Point2d> c = blob_center(config, subject, jitter, t);
    cv::Mat frame(h, w, CV_8UC1);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double v = base.at<double>(y, x);
        if (c) {
          const double dx = x - c->x;
          const double dy = y - c->y;
          v += jitter.amplitude * std::exp(-(dx * dx + dy * dy) * inv);
        }
        if (config.noise_std > 0.0) v += config.noise_std * noise(rng);
        v = std::clamp(v, 0.0, 1.0);
        frame.at<unsigned char>(y, x) = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
    frames.push_back(frame);
  }
  return frames;
}

const SynthClipInfo* SynthMetadata::find_clip(const std::string& clip_id) const {
  for (const SynthClipInfo& c : clips)
    if (c.clip_id == clip_id) return &c;
  return nullptr;
}

std::string synth_clip_id(int subject_id, int clip_index) {
  return fmt::format("s{:02d}_c{:03d}", subject_id, clip_index);
}

DatasetManifest generate_dataset(const SynthConfig& config, const fs::path& out_dir, int jobs) {
  config.validate();
  std::error_code ec;
  fs::create_directories(out_dir / "clips", ec);
  if (ec) {
    throw IoError(fmt::format("cannot create {}: {}", (out_dir / "clips").string(), ec.message()));
  }
  const std::vector<SubjectSignature> subjects = make_signatures(config);
  const cv::Mat base = base_image(config);

  std::vector<SynthClipInfo> clips;
  for (const SubjectSignature& s : subjects)
    for (int c = 0; c < config.clips_per_subject; ++c)
      clips.push_back({synth_clip_id(s.subject_id, c), s.subject_id, c,
                       draw_jitter(config, s.subject_id, c)});

  parallel_for(clips.size(), jobs, [&](std::size_t i) {
    const SynthClipInfo& info = clips[i];
    const fs::path dir = out_dir / "clips" / info.clip_id;
    fs::create_directories(dir);
    const std::vector<cv::Mat> frames = render_clip(config, subjects[info.subject_id], info.jitter, base);
    for (int t = 0; t < static_cast<int>(frames.size()); ++t) {
      const fs::path p = frame_path(dir, t);
      if (!cv::imwrite(p.string(), frames[t])) {
        throw IoError(fmt::format("cannot write frame {}", p.string()));
      }
    }
  });

  std::vector<ManifestEntry> entries;
  for (const SynthClipInfo& info : clips) {
    ManifestEntry e;
    e.clip_id = info.clip_id;
    e.frame_source = out_dir / "clips" / info.clip_id;
    e.subject_id = info.subject_id;
    e.apex_index = apex_of(config, info.jitter);
    e.onset_index = info.jitter.motion_start;
    e.offset_index = info.jitter.motion_start + config.motion_span - 1;
    e.dataset_name = "synth";
    e.frame_count = config.window;
    entries.push_back(std::move(e));
  }
  DatasetManifest manifest = make_manifest(std::move(entries), config.frame_size);
  write_manifest(manifest, out_dir / kManifestFile);

  json meta;
  meta["config"] = config;
  json subj = json::array();
  for (const SubjectSignature& s : subjects) {
    subj.push_back({{"subject_id", s.subject_id},
                    {"path_id", s.path_id},
                    {"direction", direction_name(s.direction)},
                    {"motion_span", s.motion_span},
                    {"blob_sigma", s.blob_sigma}});
  }
  meta["subjects"] = subj;
  json cl = json::array();
  for (const SynthClipInfo& info : clips) {
    cl.push_back({{"clip_id", info.clip_id},
                  {"subject_id", info.subject_id},
                  {"clip_index", info.clip_index},
                  {"motion_start", info.jitter.motion_start},
                  {"amplitude", info.jitter.amplitude},
                  {"noise_seed", info.jitter.noise_seed}});
  }
  meta["clips"] = cl;
  std::ofstream out(out_dir / kSynthConfigFile);
  if (!out) throw IoError(fmt::format("cannot write {}", (out_dir / kSynthConfigFile).string()));
  out << meta.dump(2) << "\n";
  if (!out) throw IoError("failed writing synthetic dataset metadata");
  return manifest;
}

SynthMetadata read_synth_metadata(const fs::path& dataset_dir) {
  const fs::path path = dataset_dir / kSynthConfigFile;
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open {}", path.string()));
  SynthMetadata meta;
  try {
    const json j = json::parse(in);
    meta.config = j.at("config").get<SynthConfig>();
    for (const json& s : j.at("subjects")) {
      SubjectSignature sig;
      sig.subject_id = s.at("subject_id").get<int>();
      sig.path_id = s.at("path_id").get<int>();
      sig.direction = s.at("direction").get<std::string>() == "reverse" ? Direction::kReverse
                                                                         : Direction::kForward;
      sig.motion_span = s.at("motion_span").get<int>();
      sig.blob_sigma = s.at("blob_sigma").get<double>();
      meta.subjects.push_back(sig);
    }
    for (const json& c : j.at("clips")) {
      SynthClipInfo info;
      info.clip_id = c.at("clip_id").get<std::string>();
      info.subject_id = c.at("subject_id").get<int>();
      info.clip_index = c.at("clip_index").get<int>();
      info.jitter.motion_start = c.at("motion_start").get<int>();
      info.jitter.amplitude = c.at("amplitude").get<double>();
      info.jitter.noise_seed = c.at("noise_seed").get<std::uint64_t>();
      meta.clips.push_back(info);
    }
  } catch (const json::exception& e) {
    throw DataError(fmt::format("{}: {}", path.string(), e.what()));
  }
  return meta;
}

DatasetManifest load_synth_manifest(const fs::path& dataset_dir) {
  const SynthMetadata meta = read_synth_metadata(dataset_dir);
  return load_manifest(dataset_dir / kManifestFile, meta.config.frame_size);
}

ClipTensor apex_frame_clip(const ClipTensor& clip, int apex_position) {
  if (apex_position < 0 || apex_position >= clip.frames) {
    throw DataError(fmt::format("clip {}: apex position {} outside the clip", clip.clip_id,
                                apex_position));
  }
  ClipTensor out;
  out.frames = 1;
  out.height = clip.height;
  out.width = clip.width;
  out.channels = clip.channels;
  out.subject_id = clip.subject_id;
  out.clip_id = clip.clip_id;
  const std::size_t frame = static_cast<std::size_t>(clip.height) * clip.width * clip.channels;
  out.data.assign(clip.data.begin() + apex_position * frame,
                  clip.data.begin() + (apex_position + 1) * frame);
  return out;
}

double static_baseline_accuracy(const DatasetManifest& manifest, std::uint64_t seed,
                                const StaticBaselineOptions& options) {
  const auto [train_m, test_m] = split_dataset(manifest, options.split_ratio, seed);
  if (test_m.entries.empty()) throw DataError("static baseline needs a non-empty test split");
  auto apex_frames = [&](const DatasetManifest& m) {
    std::vector<ClipTensor> out(m.entries.size());
    parallel_for(m.entries.size(), options.jobs, [&](std::size_t i) {
      const ManifestEntry& e = m.entries[i];
      const ClipTensor clip = load_clip(e, m.target_size, kDefaultWindow, 1);
      const std::vector<int> idx = apex_window_indices(e.frame_count, e.apex_index, kDefaultWindow);
      const int pos = static_cast<int>(std::find(idx.begin(), idx.end(), e.apex_index) - idx.begin());
      out[i] = apex_frame_clip(clip, pos);
    });
    return out;
  };
  const std::vector<ClipTensor> train = apex_frames(train_m);
  const std::vector<ClipTensor> test = apex_frames(test_m);

  ModelConfig config;
  config.alpha = 1;
  config.beta = 1.0;
  config.two_pathway = false;
  config.base_channels = options.base_channels;
  config.stage_depths = options.stage_depths;
  config.num_classes = manifest.num_classes();
  config.input_shape = InputShape{1, manifest.target_size.height, manifest.target_size.width, 1};
  config.seed = mix_seed(seed, 1);
  SolverConfig solver = options.solver;
  solver.seed = mix_seed(seed, 2);

  TrainOptions topt;
  topt.jobs = options.jobs;
  const TrainResult result = train_model(config, solver, train, test, topt);
  return *result.report.test_accuracy;
}

}  // namespace microid
