// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "miniseg/data.hpp"
#include "miniseg/error.hpp"

using namespace miniseg;

namespace {

class TempDir {
 public:
  explicit TempDir(const std::string& name) : path_(fs::temp_directory_path() / ("miniseg_" + name)) {
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_gray8(const fs::path& p, int h, int w, std::vector<std::uint16_t> v) {
  write_png(p, h, w, 1, 8, v);
}

}  // namespace

TEST(Png, SixteenBitRoundTrip) {
  TempDir dir("png16");
  const std::vector<std::uint16_t> v = {0, 1, 256, 65535, 4095, 30000};
  write_png(dir.path() / "a.png", 2, 3, 1, 16, v);
  const PngRaster r = read_png_gray(dir.path() / "a.png");
  EXPECT_EQ(r.bit_depth, 16);
  EXPECT_EQ(r.values, v);
  const GrayImage img = load_image(dir.path() / "a.png");
  EXPECT_FLOAT_EQ(img.at(1, 0), 1.0f);
  EXPECT_FLOAT_EQ(img.at(0, 0), 0.0f);
}

TEST(Png, RejectsGarbageAndColour) {
  TempDir dir("pngbad");
  std::ofstream(dir.path() / "x.png") << "not a png";
  EXPECT_THROW(read_png_gray(dir.path() / "x.png"), DataError);
  EXPECT_THROW(read_png_gray(dir.path() / "missing.png"), DataError);
  write_png(dir.path() / "rgb.png", 1, 2, 3, 8, std::vector<std::uint16_t>{10, 10, 10, 1, 2, 3});
  EXPECT_THROW(read_png_gray(dir.path() / "rgb.png"), DataError);
  write_png(dir.path() / "grayrgb.png", 1, 1, 3, 8, std::vector<std::uint16_t>{7, 7, 7});
  EXPECT_EQ(read_png_gray(dir.path() / "grayrgb.png").values[0], 7);
}

TEST(Masks, AcceptedEncodings) {
  TempDir dir("masks");
  write_gray8(dir.path() / "a.png", 1, 4, {0, 255, 255, 0});
  write_gray8(dir.path() / "b.png", 1, 4, {0, 1, 1, 0});
  const Mask a = load_mask(dir.path() / "a.png");
  EXPECT_EQ(a.bits, (std::vector<std::uint8_t>{0, 1, 1, 0}));
  EXPECT_EQ(load_mask(dir.path() / "b.png"), a);
  write_png(dir.path() / "c.png", 1, 2, 1, 16, std::vector<std::uint16_t>{65535, 0});
  EXPECT_EQ(load_mask(dir.path() / "c.png").bits, (std::vector<std::uint8_t>{1, 0}));
}

TEST(Masks, GrayValueRejected) {
  TempDir dir("maskgray");
  write_gray8(dir.path() / "m.png", 1, 3, {0, 128, 255});
  try {
    load_mask(dir.path() / "m.png");
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("128"), std::string::npos);
  }
}

TEST(Dataset, IndexIsSortedAndValidated) {
  TempDir dir("dataset");
  generate_blob_dataset(dir.path(), 10, 20, 24, 3);
  const DatasetIndex idx = load_dataset(dir.path());
  ASSERT_EQ(idx.ids.size(), 10u);
  EXPECT_TRUE(std::is_sorted(idx.ids.begin(), idx.ids.end()));
  EXPECT_EQ(idx.ids.front(), "slice_000");
  const auto samples = load_samples(idx, idx.ids, 3);
  const auto serial = load_samples(idx, idx.ids, 1);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    EXPECT_EQ(samples[i].id, idx.ids[i]);
    EXPECT_EQ(samples[i].mask, serial[i].mask);
    EXPECT_EQ(samples[i].image.pixels, serial[i].image.pixels);
  }
  fs::remove(idx.mask_path("slice_004"));
  try {
    load_dataset(dir.path());
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("slice_004"), std::string::npos);
  }
}

TEST(Dataset, EmptyAndFolds) {
  TempDir dir("dataset_empty");
  fs::create_directories(dir.path() / "images");
  EXPECT_THROW(load_dataset(dir.path()), DataError);
  generate_blob_dataset(dir.path(), 3, 16, 16, 1);
  std::ofstream(dir.path() / "folds.csv") << "id,fold\nslice_000,0\nslice_001,1\nslice_002,1\n";
  const DatasetIndex idx = load_dataset(dir.path());
  EXPECT_EQ(idx.folds.at("slice_002"), 1);
  std::ofstream(dir.path() / "folds.csv") << "id,fold\nnope,0\n";
  EXPECT_THROW(load_dataset(dir.path()), DataError);
}

TEST(Fixture, Deterministic) {
  TempDir a("fixture_a"), b("fixture_b");
  generate_blob_dataset(a.path(), 2, 32, 32, 9);
  generate_blob_dataset(b.path(), 2, 32, 32, 9);
  EXPECT_EQ(file_bytes(a.path() / "images/slice_001.png"), file_bytes(b.path() / "images/slice_001.png"));
  const Mask m = load_mask(a.path() / "masks/slice_000.png");
  std::size_t fg = 0;
  for (auto v : m.bits) fg += v;
  EXPECT_GT(fg, 0u);
  EXPECT_LT(fg, m.size());
}

TEST(Preprocess, PaddingAndReplication) {
  GrayImage img(500, 500, 0.3f);
  const Prepared p = preprocess(img);
  EXPECT_EQ(p.input.shape(), (Shape{1, 3, 512, 512}));
  EXPECT_EQ(p.padding.padded_height, 512);
  for (int c = 0; c < 3; ++c) EXPECT_EQ(p.input.at(0, c, 511, 3), 0.3f);
  EXPECT_TRUE(preprocess(GrayImage(512, 512)).padding.none());
  EXPECT_THROW(preprocess(GrayImage(0, 4)), DataError);
}

TEST(Preprocess, ReflectPaddingAndUnpad) {
  GrayImage img(3, 17);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 17; ++x) img.at(y, x) = static_cast<float>(y * 100 + x);
  const Padding p = padding_for(3, 17);
  EXPECT_EQ(p.padded_height, 16);
  EXPECT_EQ(p.padded_width, 32);
  const GrayImage padded = pad_image(img, p);
  EXPECT_EQ(padded.at(3, 0), img.at(1, 0));   // reflect without edge repeat
  EXPECT_EQ(padded.at(4, 0), img.at(0, 0));
  EXPECT_EQ(padded.at(0, 17), img.at(0, 15));
  Mask m(3, 17);
  m.at(2, 16) = 1;
  EXPECT_EQ(unpad(pad_mask(m, p), p), m);
}

TEST(Binarize, ArgmaxAndTies) {
  Tensor probs({1, 2, 2, 2});
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) {
      probs.at(0, 0, y, x) = 0.4f;
      probs.at(0, 1, y, x) = 0.6f;
    }
  probs.at(0, 0, 1, 1) = probs.at(0, 1, 1, 1) = 0.5f;
  const Mask m = binarize_prediction(probs);
  EXPECT_EQ(m.bits, (std::vector<std::uint8_t>{1, 1, 1, 0}));
  Tensor scaled = probs.clone();
  for (float& v : scaled.data()) v *= 3.0f;
  EXPECT_EQ(binarize_prediction(scaled), m);
}

TEST(Overlay, ColoursAndDeterminism) {
  TempDir dir("overlay");
  GrayImage img(1, 4, 0.4f);
  Mask pred(1, 4), gt(1, 4);
  pred.bits = {1, 0, 1, 0};
  gt.bits = {1, 1, 0, 0};
  // base 102: TP red, FN green, FP blue, background untouched
  EXPECT_EQ(overlay_pixels(img, pred, gt),
            (std::vector<std::uint16_t>{179, 51, 51, 51, 179, 51, 51, 51, 179, 102, 102, 102}));
  write_overlay(img, pred, gt, dir.path() / "o.png");
  write_overlay(img, pred, gt, dir.path() / "p.png");
  EXPECT_EQ(file_bytes(dir.path() / "o.png"), file_bytes(dir.path() / "p.png"));
  EXPECT_THROW(write_overlay(img, Mask(1, 3), gt, dir.path() / "q.png"), ShapeError);
}

TEST(Overlay, PerfectPredictionIsAllRed) {
  GrayImage img(2, 2, 0.0f);
  Mask m(2, 2, 1);
  const auto px = overlay_pixels(img, m, m);
  for (std::size_t i = 0; i < px.size(); i += 3) {
    EXPECT_EQ(px[i], 128);
    EXPECT_EQ(px[i + 1], 0);
    EXPECT_EQ(px[i + 2], 0);
  }
}
