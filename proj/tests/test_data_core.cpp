#include <algorithm>
#include <fstream>
#include <map>
#include <set>

#include <gtest/gtest.h>
#include <opencv2/imgcodecs.hpp>

#include "microid/data_core.hpp"
#include "test_support.hpp"

namespace microid {
namespace {

namespace fs = std::filesystem;
using testing::TempDir;

ManifestEntry entry(std::string id, int subject, int apex = 0, int frames = 10) {
  ManifestEntry e;
  e.clip_id = std::move(id);
  e.subject_id = subject;
  e.apex_index = apex;
  e.frame_count = frames;
  e.dataset_name = "SMIC";
  return e;
}

void write_frames(const fs::path& dir, int count, int size, int seed) {
  fs::create_directories(dir);
  for (int i = 0; i < count; ++i) {
    cv::Mat img(size, size, CV_8UC1, cv::Scalar((seed * 37 + i * 11) % 256));
    cv::imwrite(frame_path(dir, i).string(), img);
  }
}

TEST(DatabaseFrameSizeTest, KnownDatabases) {
  EXPECT_EQ(database_frame_size("SMIC"), (FrameSize{150, 150}));
  EXPECT_EQ(database_frame_size("casme ii"), (FrameSize{300, 300}));
  EXPECT_EQ(database_frame_size("CASME_II"), (FrameSize{300, 300}));
  EXPECT_EQ(database_frame_size("SAMM"), (FrameSize{400, 400}));
  EXPECT_FALSE(database_frame_size("synth").has_value());
}

TEST(MakeManifestTest, CompactsLabelsAndSorts) {
  const DatasetManifest m = make_manifest(
      {entry("d", 42), entry("a", 7), entry("c", 42), entry("b", 7)}, FrameSize{150, 150});
  EXPECT_EQ(m.label_map, (std::map<int, int>{{7, 0}, {42, 1}}));
  ASSERT_EQ(m.entries.size(), 4u);
  EXPECT_EQ(m.entries[0].clip_id, "a");
  EXPECT_EQ(m.entries[3].clip_id, "d");
  EXPECT_EQ(m.entries[0].label, 0);
  EXPECT_EQ(m.entries[3].label, 1);
  EXPECT_EQ(m.num_classes(), 2);
}

TEST(MakeManifestTest, RejectsSingleClipSubject) {
  EXPECT_THROW(make_manifest({entry("a", 7), entry("b", 7), entry("c", 42)}, {150, 150}),
               DataError);
}

TEST(MakeManifestTest, RejectsApexOutOfRange) {
  try {
    make_manifest({entry("a", 1, 10, 10), entry("b", 1)}, {150, 150});
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("apex out of range"), std::string::npos);
  }
  EXPECT_THROW(make_manifest({entry("a", 1, -1), entry("b", 1)}, {150, 150}), DataError);
}

TEST(MakeManifestTest, RejectsDuplicatesAndBadOnsetOffset) {
  EXPECT_THROW(make_manifest({entry("a", 1), entry("a", 1)}, {150, 150}), DataError);
  ManifestEntry e = entry("a", 1, 5);
  e.onset_index = 6;
  EXPECT_THROW(make_manifest({e, entry("b", 1)}, {150, 150}), DataError);
  e.onset_index = 2;
  e.offset_index = 4;
  EXPECT_THROW(make_manifest({e, entry("b", 1)}, {150, 150}), DataError);
  e.offset_index = 9;
  EXPECT_NO_THROW(make_manifest({e, entry("b", 1)}, {150, 150}));
  e.crop_rect = CropRect{0, 0, 0, 5};
  EXPECT_THROW(make_manifest({e, entry("b", 1)}, {150, 150}), DataError);
}

TEST(LoadManifestTest, ReadsJsonLinesAndResolvesPaths) {
  TempDir dir("manifest");
  write_frames(dir.path / "clips" / "a", 5, 20, 1);
  write_frames(dir.path / "clips" / "b", 6, 20, 2);
  write_frames(dir.path / "clips" / "c", 4, 20, 3);
  write_frames(dir.path / "clips" / "d", 4, 20, 4);
  {
    std::ofstream out(dir.path / "manifest.jsonl");
    out << R"({"clip_id":"b","frame_dir":"clips/b","subject_id":7,"apex_index":3,"dataset_name":"SMIC"})"
        << "\n"
        << R"({"clip_id":"a","frame_dir":"clips/a","subject_id":7,"apex_index":2,"onset_index":0,"offset_index":4,"crop_x":2,"crop_y":2,"crop_w":10,"crop_h":12,"dataset_name":"SMIC"})"
        << "\n\n"
        << R"({"clip_id":"c","frame_dir":"clips/c","subject_id":42,"apex_index":0,"dataset_name":"SMIC"})"
        << "\n"
        << R"({"clip_id":"d","frame_dir":"clips/d","subject_id":42,"apex_index":3,"dataset_name":"SMIC"})"
        << "\n";
  }
  const DatasetManifest m = load_manifest(dir.path / "manifest.jsonl");
  ASSERT_EQ(m.entries.size(), 4u);
  EXPECT_EQ(m.target_size, (FrameSize{150, 150}));
  EXPECT_EQ(m.entries[0].clip_id, "a");
  EXPECT_EQ(m.entries[0].frame_count, 5);
  EXPECT_EQ(m.entries[0].crop_rect, (CropRect{2, 2, 10, 12}));
  EXPECT_EQ(m.entries[0].onset_index, 0);
  EXPECT_EQ(m.entries[1].frame_count, 6);
  EXPECT_EQ(m.entries[2].label, 1);
  EXPECT_TRUE(fs::exists(m.entries[0].frame_source));

  // write / read round trip
  write_manifest(m, dir.path / "copy.jsonl");
  const DatasetManifest back = load_manifest(dir.path / "copy.jsonl");
  ASSERT_EQ(back.entries.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(back.entries[i].clip_id, m.entries[i].clip_id);
    EXPECT_EQ(back.entries[i].crop_rect, m.entries[i].crop_rect);
    EXPECT_EQ(back.entries[i].label, m.entries[i].label);
    EXPECT_EQ(fs::weakly_canonical(back.entries[i].frame_source),
              fs::weakly_canonical(m.entries[i].frame_source));
  }

  const DatasetManifest over = load_manifest(dir.path / "manifest.jsonl", FrameSize{32, 32});
  EXPECT_EQ(over.target_size, (FrameSize{32, 32}));

  const ClipTensor clip = load_clip(m.entries[0], FrameSize{16, 16});
  EXPECT_EQ(clip.frames, kDefaultWindow);
  EXPECT_EQ(clip.height, 16);
  EXPECT_EQ(clip.channels, 1);
  EXPECT_NO_THROW(clip.validate());
  // 5 frames padded to 64: 30 copies of frame 0 in front
  EXPECT_FLOAT_EQ(clip.at(0, 8, 8), clip.at(30, 8, 8));
  EXPECT_NE(clip.at(30, 8, 8), clip.at(31, 8, 8));
}

TEST(LoadManifestTest, Errors) {
  TempDir dir("manifest_err");
  EXPECT_THROW(load_manifest(dir.path / "missing.jsonl"), IoError);
  write_frames(dir.path / "a", 3, 8, 1);
  {
    std::ofstream out(dir.path / "m.jsonl");
    out << R"({"clip_id":"a","frame_dir":"a","subject_id":1,"apex_index":3,"dataset_name":"SMIC"})"
        << "\n"
        << R"({"clip_id":"b","frame_dir":"a","subject_id":1,"apex_index":0,"dataset_name":"SMIC"})"
        << "\n";
  }
  EXPECT_THROW(load_manifest(dir.path / "m.jsonl"), DataError);
  {
    std::ofstream out(dir.path / "m2.jsonl");
    out << R"({"clip_id":"a","frame_dir":"nowhere","subject_id":1,"apex_index":0,"dataset_name":"SMIC"})"
        << "\n";
  }
  EXPECT_THROW(load_manifest(dir.path / "m2.jsonl"), DataError);
  {
    std::ofstream out(dir.path / "m3.jsonl");
    out << R"({"clip_id":"a","frame_dir":"a","subject_id":1,"apex_index":0,"dataset_name":"unknown"})"
        << "\n"
        << R"({"clip_id":"b","frame_dir":"a","subject_id":1,"apex_index":0,"dataset_name":"unknown"})"
        << "\n";
  }
  EXPECT_THROW(load_manifest(dir.path / "m3.jsonl"), DataError);
  EXPECT_NO_THROW(load_manifest(dir.path / "m3.jsonl", FrameSize{8, 8}));
}

TEST(CountFramesTest, RequiresContiguousNumbering) {
  TempDir dir("frames");
  write_frames(dir.path, 3, 4, 0);
  EXPECT_EQ(count_frames(dir.path), 3);
  fs::remove(frame_path(dir.path, 1));
  EXPECT_THROW(count_frames(dir.path), DataError);
}

TEST(PreprocessTest, ResizesToTarget) {
  std::vector<cv::Mat> raw(3, cv::Mat(300, 300, CV_8UC3, cv::Scalar(10, 20, 30)));
  const auto out = preprocess_frames(raw, std::nullopt, FrameSize{150, 150});
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[0].rows, 150);
  EXPECT_EQ(out[0].cols, 150);
  EXPECT_EQ(out[0].type(), CV_32FC3);
  EXPECT_NEAR(out[0].at<cv::Vec3f>(5, 5)[2], 30.0 / 255.0, 1e-6);
}

TEST(PreprocessTest, IdentityGeometryOnlyRescales) {
  cv::Mat img(4, 4, CV_8UC1);
  for (int i = 0; i < 16; ++i) img.data[i] = static_cast<unsigned char>(i * 16);
  const auto out = preprocess_frames({img}, CropRect{0, 0, 4, 4}, FrameSize{4, 4});
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      EXPECT_FLOAT_EQ(out[0].at<float>(y, x), img.at<unsigned char>(y, x) / 255.0f);

  cv::Mat img16(4, 4, CV_16UC1, cv::Scalar(65535));
  EXPECT_FLOAT_EQ(preprocess_frames({img16}, std::nullopt, {4, 4})[0].at<float>(1, 1), 1.0f);
}

TEST(PreprocessTest, IdempotentOnPreparedInput) {
  const ClipTensor c = testing::random_clip(1, 12, 12, 1, 4);
  cv::Mat f(12, 12, CV_32FC1, const_cast<float*>(c.data.data()));
  const auto once = preprocess_frames({f}, std::nullopt, {12, 12});
  const auto twice = preprocess_frames(once, std::nullopt, {12, 12});
  EXPECT_EQ(cv::norm(once[0], twice[0], cv::NORM_INF), 0.0);
  EXPECT_EQ(cv::norm(once[0], f, cv::NORM_INF), 0.0);
}

TEST(PreprocessTest, CropAndCenterSquare) {
  cv::Mat img(10, 20, CV_8UC1, cv::Scalar(0));
  img(cv::Rect(5, 0, 10, 10)).setTo(255);
  const auto centered = preprocess_frames({img}, std::nullopt, {10, 10});
  EXPECT_FLOAT_EQ(static_cast<float>(cv::sum(centered[0])[0]), 100.0f);
  const auto cropped = preprocess_frames({img}, CropRect{0, 0, 5, 10}, {10, 5});
  EXPECT_FLOAT_EQ(static_cast<float>(cv::sum(cropped[0])[0]), 0.0f);
}

TEST(PreprocessTest, RejectsBadCrop) {
  std::vector<cv::Mat> raw(1, cv::Mat(10, 10, CV_8UC1, cv::Scalar(0)));
  EXPECT_THROW(preprocess_frames(raw, CropRect{5, 0, 6, 5}, {5, 5}), DataError);
  EXPECT_THROW(preprocess_frames(raw, CropRect{-1, 0, 5, 5}, {5, 5}), DataError);
  EXPECT_THROW(preprocess_frames(raw, CropRect{0, 0, 0, 5}, {5, 5}), DataError);
  EXPECT_THROW(preprocess_frames({}, std::nullopt, {5, 5}), DataError);
}

TEST(PadToWindowTest, Examples) {
  std::vector<int> frames(64);
  for (int i = 0; i < 64; ++i) frames[i] = i;
  EXPECT_EQ(pad_to_window<int>(frames, 64), frames);

  std::vector<int> ten(frames.begin(), frames.begin() + 10);
  const auto padded = pad_to_window<int>(ten, 64);
  EXPECT_EQ(std::count(padded.begin(), padded.begin() + 27, 0), 27);
  EXPECT_EQ(padded[27], 0);
  EXPECT_EQ(padded[36], 9);
  EXPECT_EQ(std::count(padded.begin() + 37, padded.end(), 9), 27);

  const auto one = pad_indices(63, 64);
  EXPECT_EQ(one[0], 0);
  EXPECT_EQ(one[1], 0);
  EXPECT_EQ(one[63], 62);

  EXPECT_THROW(pad_indices(0, 64), DataError);
  EXPECT_THROW(pad_indices(65, 64), DataError);
}

TEST(PadToWindowTest, ExhaustiveAgainstReference) {
  for (int window : {1, 2, 7, 64, 128})
    for (int n = 1; n <= window; ++n) {
      const auto got = pad_indices(n, window);
      ASSERT_EQ(got, testing::reference_padding(n, window)) << n << "/" << window;
      const int front = (window - n + 1) / 2;
      EXPECT_EQ(got[front], 0);
      EXPECT_EQ(got[front + n - 1], n - 1);
    }
}

TEST(ApexWindowTest, Examples) {
  auto w = apex_window_indices(100, 50, 64);
  EXPECT_EQ(w.front(), 18);
  EXPECT_EQ(w.back(), 81);
  w = apex_window_indices(100, 10, 64);
  EXPECT_EQ(w.front(), 0);
  EXPECT_EQ(w.back(), 63);
  w = apex_window_indices(64, 31, 64);
  EXPECT_EQ(w.front(), 0);
  EXPECT_EQ(w.back(), 63);
  EXPECT_THROW(apex_window_indices(10, 10, 64), DataError);
  EXPECT_THROW(apex_window_indices(10, -1, 64), DataError);
}

TEST(ApexWindowTest, ExhaustiveContainsApex) {
  for (int n = 1; n <= 128; ++n)
    for (int apex = 0; apex < n; ++apex) {
      const auto w = apex_window_indices(n, apex, 64);
      ASSERT_EQ(w.size(), 64u);
      ASSERT_EQ(w, testing::reference_apex_window(n, apex, 64));
      ASSERT_NE(std::find(w.begin(), w.end(), apex), w.end());
    }
}

DatasetManifest grid_manifest(int subjects, int clips) {
  std::vector<ManifestEntry> entries;
  for (int s = 0; s < subjects; ++s)
    for (int c = 0; c < clips; ++c)
      entries.push_back(entry("s" + std::to_string(s) + "_" + std::to_string(c), 10 + 3 * s));
  return make_manifest(entries, {8, 8});
}

TEST(SplitDatasetTest, StratifiedCounts) {
  const auto [train, test] = split_dataset(grid_manifest(4, 4), 0.5, 1);
  EXPECT_EQ(train.entries.size(), 8u);
  EXPECT_EQ(test.entries.size(), 8u);
  std::map<int, int> per;
  for (const auto& e : train.entries) ++per[e.label];
  for (const auto& [label, count] : per) EXPECT_EQ(count, 2);

  const auto [a, b] = split_dataset(grid_manifest(3, 2), 0.5, 9);
  EXPECT_EQ(a.entries.size(), 3u);
  EXPECT_EQ(b.entries.size(), 3u);
  EXPECT_THROW(split_dataset(grid_manifest(2, 2), 1.0, 1), DataError);
  EXPECT_THROW(split_dataset(grid_manifest(2, 2), 0.0, 1), DataError);
}

TEST(SplitDatasetTest, PartitionPropertiesOverSeeds) {
  const DatasetManifest m = grid_manifest(5, 7);
  std::set<std::string> train_seen;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto [train, test] = split_dataset(m, 0.5, seed);
    std::set<std::string> tr, te;
    std::set<int> tr_labels, te_labels;
    for (const auto& e : train.entries) {
      tr.insert(e.clip_id);
      tr_labels.insert(e.label);
    }
    for (const auto& e : test.entries) {
      te.insert(e.clip_id);
      te_labels.insert(e.label);
    }
    EXPECT_EQ(tr.size() + te.size(), m.entries.size());
    for (const auto& id : tr) EXPECT_FALSE(te.contains(id));
    EXPECT_EQ(tr_labels.size(), 5u);
    EXPECT_EQ(te_labels.size(), 5u);
    EXPECT_EQ(train.label_map, m.label_map);

    const auto [train2, test2] = split_dataset(m, 0.5, seed);
    ASSERT_EQ(train2.entries.size(), train.entries.size());
    for (std::size_t i = 0; i < train.entries.size(); ++i)
      EXPECT_EQ(train2.entries[i].clip_id, train.entries[i].clip_id);
    train_seen.insert(train.entries.front().clip_id);
  }
  EXPECT_GT(train_seen.size(), 1u);
}

TEST(PackedTensorTest, RoundTripAndHeader) {
  TempDir dir("packed");
  const ClipTensor clip = testing::random_clip(3, 4, 5, 3, 17, 2);
  const auto path = dir.path / "clip.bin";
  write_clip_cache(path, clip);
  EXPECT_EQ(fs::file_size(path), 8u + 1u + 16u + clip.data.size() * 4u);
  std::ifstream in(path, std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  EXPECT_EQ(std::string(magic, 8), "MXIDTNSR");
  const ClipTensor back = read_clip_cache(path, 2, clip.clip_id);
  EXPECT_EQ(back.data, clip.data);
  EXPECT_EQ(back.frames, 3);
  EXPECT_EQ(back.width, 5);
  EXPECT_EQ(back.channels, 3);

  std::ofstream(dir.path / "junk.bin") << "nope";
  EXPECT_THROW(read_packed_tensor(dir.path / "junk.bin"), IoError);
}

TEST(ClipTensorTest, ValidateRejectsOutOfRange) {
  ClipTensor c = testing::random_clip(2, 2, 2, 1, 1);
  EXPECT_NO_THROW(c.validate());
  c.data[3] = 1.5f;
  EXPECT_THROW(c.validate(), DataError);
  c.data[3] = std::numeric_limits<float>::quiet_NaN();
  EXPECT_THROW(c.validate(), DataError);
  c = testing::random_clip(2, 2, 2, 2, 1);
  EXPECT_THROW(c.validate(), DataError);
}

}  // namespace
}  // namespace microid
