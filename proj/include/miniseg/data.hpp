// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "miniseg/raster.hpp"
#include "miniseg/tensor.hpp"

namespace miniseg {

namespace fs = std::filesystem;

/// Single-channel PNG contents at native bit depth (8 or 16).
struct PngRaster {
  int height = 0;
  int width = 0;
  int bit_depth = 8;
  std::vector<std::uint16_t> values;
};

/// Reads a grayscale PNG. Palette and sub-byte depths are expanded to 8 bits;
/// colour images are accepted only when every pixel is gray.
PngRaster read_png_gray(const fs::path& path);
/// channels is 1 (gray) or 3 (RGB); bit_depth is 8 or 16.
void write_png(const fs::path& path, int height, int width, int channels, int bit_depth,
               std::span<const std::uint16_t> values);

/// Intensities scaled by the largest value of the bit depth.
GrayImage load_image(const fs::path& path);
/// Accepts {0,1} or {0,max} encodings; anything else is a DataError.
Mask load_mask(const fs::path& path);
void save_image(const GrayImage& image, const fs::path& path);
void save_mask(const Mask& mask, const fs::path& path);  // 0 / 255

struct Sample {
  std::string id;
  GrayImage image;
  Mask mask;
};

/// root/images/<id>.png paired with root/masks/<id>.png. An optional
/// root/folds.csv (id,fold) assigns folds.
struct DatasetIndex {
  fs::path root;
  std::vector<std::string> ids;  // lexicographic
  std::map<std::string, int> folds;

  fs::path image_path(const std::string& id) const;
  fs::path mask_path(const std::string& id) const;
};

DatasetIndex load_dataset(const fs::path& root);
Sample load_sample(const DatasetIndex& index, const std::string& id);
/// Decodes on up to `workers` threads; result order follows `ids`.
std::vector<Sample> load_samples(const DatasetIndex& index, const std::vector<std::string>& ids,
                                 int workers = 1);

/// Bottom/right padding to the next multiple of 16.
struct Padding {
  int height = 0;
  int width = 0;
  int padded_height = 0;
  int padded_width = 0;
  bool none() const { return height == padded_height && width == padded_width; }
};

Padding padding_for(int height, int width);
GrayImage pad_image(const GrayImage& image, const Padding& p);  // reflect
Mask pad_mask(const Mask& mask, const Padding& p);              // reflect
Mask unpad(const Mask& mask, const Padding& p);

/// Images of equal extent to an N x 3 x H x W batch (gray replicated).
Tensor make_batch(std::span<const GrayImage> images);

struct Prepared {
  Tensor input;
  Padding padding;
};
Prepared preprocess(const GrayImage& image);

/// Per-pixel argmax over two channels of sample n; ties go to background.
Mask binarize_prediction(const Tensor& probs, int n = 0);

/// Gray base with TP red, FN green and FP blue blended at 0.5, as interleaved
/// 8-bit RGB.
std::vector<std::uint16_t> overlay_pixels(const GrayImage& image, const Mask& pred, const Mask& gt);
void write_overlay(const GrayImage& image, const Mask& pred, const Mask& gt, const fs::path& path);

/// Writes `count` synthetic slices with bright elliptical blobs on a noisy
/// background, in the dataset layout above. Ids are slice_000, slice_001, ...
void generate_blob_dataset(const fs::path& root, int count, int height, int width,
                           std::uint64_t seed);

}  // namespace miniseg
