// SPDX-License-Identifier: Apache-2.0
#include "miniseg/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <exception>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include "miniseg/error.hpp"

namespace miniseg {

namespace {

struct File {
  std::FILE* f = nullptr;
  ~File() {
    if (f != nullptr) std::fclose(f);
  }
};

// libpng reports errors by longjmp, so everything with a destructor lives in
// the caller's frame.
bool decode_png(std::FILE* fp, PngRaster& out, std::vector<std::uint8_t>& rows,
                std::vector<png_bytep>& pointers, int& channels, std::string& error) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) {
    error = "out of memory";
    return false;
  }
  png_infop info = png_create_info_struct(png);
  if (info == nullptr || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    error = "corrupt or unsupported PNG";
    return false;
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if ((color & PNG_COLOR_MASK_ALPHA) != 0) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  out.width = static_cast<int>(png_get_image_width(png, info));
  out.height = static_cast<int>(png_get_image_height(png, info));
  out.bit_depth = png_get_bit_depth(png, info);
  channels = png_get_channels(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  rows.resize(stride * static_cast<std::size_t>(out.height));
  pointers.resize(static_cast<std::size_t>(out.height));
  for (int y = 0; y < out.height; ++y) pointers[y] = rows.data() + stride * static_cast<std::size_t>(y);
  png_read_image(png, pointers.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return true;
}

bool encode_png(std::FILE* fp, int height, int width, int channels, int bit_depth,
                const std::vector<png_bytep>& pointers, std::string& error) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) {
    error = "out of memory";
    return false;
  }
  png_infop info = png_create_info_struct(png);
  if (info == nullptr || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    error = "PNG encoder failed";
    return false;
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth,
               channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, const_cast<png_bytepp>(pointers.data()));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return true;
}

int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace

PngRaster read_png_gray(const fs::path& path) {
  File file;
  file.f = std::fopen(path.c_str(), "rb");
  if (file.f == nullptr) throw DataError("cannot open " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, file.f) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw DataError(path.string() + " is not a PNG file");
  std::rewind(file.f);
  PngRaster out;
  std::vector<std::uint8_t> rows;
  std::vector<png_bytep> pointers;
  int channels = 0;
  std::string error;
  if (!decode_png(file.f, out, rows, pointers, channels, error)) throw DataError(path.string() + ": " + error);
  if (out.width <= 0 || out.height <= 0) throw DataError(path.string() + " has zero extent");
  const std::size_t n = static_cast<std::size_t>(out.height) * out.width;
  const int bytes = out.bit_depth == 16 ? 2 : 1;
  out.values.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint16_t px[3] = {0, 0, 0};
    for (int c = 0; c < channels; ++c) {
      const std::uint8_t* p = rows.data() + (i * channels + c) * bytes;
      px[c] = bytes == 2 ? static_cast<std::uint16_t>((p[0] << 8) | p[1]) : p[0];
    }
    if (channels == 3 && (px[0] != px[1] || px[1] != px[2]))
      throw DataError(path.string() + " is a colour image; expected grayscale");
    out.values[i] = px[0];
  }
  return out;
}

void write_png(const fs::path& path, int height, int width, int channels, int bit_depth,
               std::span<const std::uint16_t> values) {
  if ((channels != 1 && channels != 3) || (bit_depth != 8 && bit_depth != 16))
    throw UsageError("write_png supports 1 or 3 channels at 8 or 16 bits");
  const std::size_t per_row = static_cast<std::size_t>(width) * channels;
  if (values.size() != per_row * height) throw ShapeError("PNG pixel buffer does not match extents");
  const int bytes = bit_depth / 8;
  std::vector<std::uint8_t> rows(values.size() * bytes);
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (bytes == 2) {
      rows[2 * i] = static_cast<std::uint8_t>(values[i] >> 8);
      rows[2 * i + 1] = static_cast<std::uint8_t>(values[i] & 0xff);
    } else {
      rows[i] = static_cast<std::uint8_t>(values[i]);
    }
  }
  std::vector<png_bytep> pointers(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) pointers[y] = rows.data() + per_row * bytes * static_cast<std::size_t>(y);
  File file;
  file.f = std::fopen(path.c_str(), "wb");
  if (file.f == nullptr) throw DataError("cannot write " + path.string());
  std::string error;
  if (!encode_png(file.f, height, width, channels, bit_depth, pointers, error))
    throw DataError(path.string() + ": " + error);
}

GrayImage load_image(const fs::path& path) {
  const PngRaster r = read_png_gray(path);
  const float scale = 1.0f / static_cast<float>((1 << r.bit_depth) - 1);
  GrayImage img(r.height, r.width);
  for (std::size_t i = 0; i < r.values.size(); ++i) img.pixels[i] = static_cast<float>(r.values[i]) * scale;
  return img;
}

Mask load_mask(const fs::path& path) {
  const PngRaster r = read_png_gray(path);
  const std::uint16_t full = static_cast<std::uint16_t>((1 << r.bit_depth) - 1);
  const auto top = std::max_element(r.values.begin(), r.values.end());
  const std::uint16_t on = *top <= 1 ? 1 : full;
  Mask m(r.height, r.width);
  for (std::size_t i = 0; i < r.values.size(); ++i) {
    const std::uint16_t v = r.values[i];
    if (v != 0 && v != on) {
      const int y = static_cast<int>(i) / r.width, x = static_cast<int>(i) % r.width;
      throw DataError("mask " + path.string() + " is not binary: value " + std::to_string(v) + " at (" +
                      std::to_string(y) + "," + std::to_string(x) + "); expected {0,1} or {0," +
                      std::to_string(full) + "}");
    }
    m.bits[i] = v == 0 ? 0 : 1;
  }
  return m;
}

void save_image(const GrayImage& image, const fs::path& path) {
  std::vector<std::uint16_t> v(image.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = static_cast<std::uint16_t>(std::lround(std::clamp(image.pixels[i], 0.0f, 1.0f) * 255.0f));
  write_png(path, image.height, image.width, 1, 8, v);
}

void save_mask(const Mask& mask, const fs::path& path) {
  std::vector<std::uint16_t> v(mask.bits.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = mask.bits[i] != 0 ? 255 : 0;
  write_png(path, mask.height, mask.width, 1, 8, v);
}

// ---------------------------------------------------------------------------

fs::path DatasetIndex::image_path(const std::string& id) const { return root / "images" / (id + ".png"); }
fs::path DatasetIndex::mask_path(const std::string& id) const { return root / "masks" / (id + ".png"); }

namespace {

std::vector<std::string> png_stems(const fs::path& dir) {
  std::vector<std::string> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".png") out.push_back(entry.path().stem().string());
  std::sort(out.begin(), out.end());
  return out;
}

std::string join_ids(const std::vector<std::string>& ids) {
  std::string s;
  for (std::size_t i = 0; i < ids.size() && i < 10; ++i) s += (i ? ", " : "") + ids[i];
  if (ids.size() > 10) s += ", ... (" + std::to_string(ids.size()) + " total)";
  return s;
}

}  // namespace

DatasetIndex load_dataset(const fs::path& root) {
  if (!fs::is_directory(root)) throw DataError("dataset directory " + root.string() + " does not exist");
  if (!fs::is_directory(root / "images"))
    throw DataError("dataset " + root.string() + " has no images/ subdirectory");
  DatasetIndex index;
  index.root = root;
  index.ids = png_stems(root / "images");
  const std::vector<std::string> masks = png_stems(root / "masks");
  std::vector<std::string> no_mask, no_image;
  std::set_difference(index.ids.begin(), index.ids.end(), masks.begin(), masks.end(), std::back_inserter(no_mask));
  std::set_difference(masks.begin(), masks.end(), index.ids.begin(), index.ids.end(), std::back_inserter(no_image));
  if (!no_mask.empty()) throw DataError("images without a mask: " + join_ids(no_mask));
  if (!no_image.empty()) throw DataError("masks without an image: " + join_ids(no_image));
  if (index.ids.empty()) throw DataError("dataset " + root.string() + " contains no image/mask pairs");

  const fs::path folds = root / "folds.csv";
  if (fs::exists(folds)) {
    std::ifstream in(folds);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || (line_no == 1 && line.rfind("id,", 0) == 0)) continue;
      const auto comma = line.find(',');
      std::string id = line.substr(0, comma);
      int fold = -1;
      try {
        if (comma == std::string::npos) throw std::invalid_argument("missing fold");
        fold = std::stoi(line.substr(comma + 1));
      } catch (const std::exception&) {
        throw DataError(folds.string() + ":" + std::to_string(line_no) + ": expected 'id,fold'");
      }
      if (!std::binary_search(index.ids.begin(), index.ids.end(), id))
        throw DataError(folds.string() + ":" + std::to_string(line_no) + ": unknown id '" + id + "'");
      index.folds[id] = fold;
    }
  }
  return index;
}

Sample load_sample(const DatasetIndex& index, const std::string& id) {
  Sample s{id, load_image(index.image_path(id)), load_mask(index.mask_path(id))};
  if (s.image.height != s.mask.height || s.image.width != s.mask.width)
    throw DataError("sample " + id + ": image " + std::to_string(s.image.height) + "x" +
                    std::to_string(s.image.width) + " and mask " + std::to_string(s.mask.height) + "x" +
                    std::to_string(s.mask.width) + " differ in extent");
  return s;
}

std::vector<Sample> load_samples(const DatasetIndex& index, const std::vector<std::string>& ids, int workers) {
  std::vector<Sample> out(ids.size());
  std::vector<std::exception_ptr> errors(ids.size());
  const int threads = std::max(1, std::min<int>(workers, static_cast<int>(ids.size())));
  auto work = [&](int t) {
    for (std::size_t i = static_cast<std::size_t>(t); i < ids.size(); i += static_cast<std::size_t>(threads)) {
      try {
        out[i] = load_sample(index, ids[i]);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(work, t);
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

// ---------------------------------------------------------------------------

Padding padding_for(int height, int width) {
  if (height <= 0 || width <= 0) throw DataError("image has zero extent");
  auto up = [](int v) { return (v + 15) / 16 * 16; };
  return {height, width, up(height), up(width)};
}

GrayImage pad_image(const GrayImage& image, const Padding& p) {
  GrayImage out(p.padded_height, p.padded_width);
  for (int y = 0; y < p.padded_height; ++y)
    for (int x = 0; x < p.padded_width; ++x) out.at(y, x) = image.at(reflect(y, image.height), reflect(x, image.width));
  return out;
}

Mask pad_mask(const Mask& mask, const Padding& p) {
  Mask out(p.padded_height, p.padded_width);
  for (int y = 0; y < p.padded_height; ++y)
    for (int x = 0; x < p.padded_width; ++x) out.at(y, x) = mask.at(reflect(y, mask.height), reflect(x, mask.width));
  return out;
}

Mask unpad(const Mask& mask, const Padding& p) {
  if (mask.height != p.padded_height || mask.width != p.padded_width)
    throw ShapeError("mask does not have the padded extent");
  Mask out(p.height, p.width);
  for (int y = 0; y < p.height; ++y)
    for (int x = 0; x < p.width; ++x) out.at(y, x) = mask.at(y, x);
  return out;
}

Tensor make_batch(std::span<const GrayImage> images) {
  if (images.empty()) throw UsageError("empty batch");
  const int h = images[0].height, w = images[0].width;
  Tensor t({static_cast<int>(images.size()), 3, h, w});
  auto data = t.data();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (images[n].height != h || images[n].width != w)
      throw ShapeError("batch images differ in extent; use a crop size to train on mixed sizes");
    for (int c = 0; c < 3; ++c)
      std::copy(images[n].pixels.begin(), images[n].pixels.end(), data.begin() + static_cast<long>((n * 3 + c) * plane));
  }
  return t;
}

Prepared preprocess(const GrayImage& image) {
  const Padding p = padding_for(image.height, image.width);
  const GrayImage padded = pad_image(image, p);
  return {make_batch(std::span<const GrayImage>(&padded, 1)), p};
}

Mask binarize_prediction(const Tensor& probs, int n) {
  const Shape s = probs.shape();
  if (s.c != 2) throw ShapeError("prediction must have 2 channels, got " + std::to_string(s.c));
  if (n < 0 || n >= s.n) throw UsageError("batch index out of range");
  Mask m(s.h, s.w);
  for (int y = 0; y < s.h; ++y)
    for (int x = 0; x < s.w; ++x) m.at(y, x) = probs.at(n, 1, y, x) > probs.at(n, 0, y, x) ? 1 : 0;
  return m;
}

std::vector<std::uint16_t> overlay_pixels(const GrayImage& image, const Mask& pred, const Mask& gt) {
  if (image.height != pred.height || image.width != pred.width || gt.height != pred.height ||
      gt.width != pred.width)
    throw ShapeError("overlay inputs differ in extent");
  std::vector<std::uint16_t> rgb(pred.size() * 3);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double base = std::clamp(image.pixels[i], 0.0f, 1.0f) * 255.0;
    double px[3] = {base, base, base};
    int tint = -1;
    if (pred.bits[i] && gt.bits[i]) tint = 0;
    else if (gt.bits[i]) tint = 1;
    else if (pred.bits[i]) tint = 2;
    if (tint >= 0)
      for (int c = 0; c < 3; ++c) px[c] = 0.5 * px[c] + 0.5 * (c == tint ? 255.0 : 0.0);
    for (int c = 0; c < 3; ++c) rgb[i * 3 + c] = static_cast<std::uint16_t>(std::lround(px[c]));
  }
  return rgb;
}

void write_overlay(const GrayImage& image, const Mask& pred, const Mask& gt, const fs::path& path) {
  write_png(path, pred.height, pred.width, 3, 8, overlay_pixels(image, pred, gt));
}

void generate_blob_dataset(const fs::path& root, int count, int height, int width, std::uint64_t seed) {
  if (count <= 0 || height <= 0 || width <= 0) throw UsageError("fixture needs positive count and extents");
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.04);
  const double small = std::min(height, width);
  for (int k = 0; k < count; ++k) {
    GrayImage img(height, width);
    Mask mask(height, width);
    const int blobs = 1 + static_cast<int>(unit(rng) * 3.0);
    struct Blob { double cy, cx, ry, rx, angle; };
    std::vector<Blob> list;
    for (int b = 0; b < blobs; ++b)
      list.push_back({height * (0.2 + 0.6 * unit(rng)), width * (0.2 + 0.6 * unit(rng)),
                      small * (0.06 + 0.1 * unit(rng)), small * (0.06 + 0.1 * unit(rng)), unit(rng) * M_PI});
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        bool inside = false;
        for (const Blob& b : list) {
          const double dy = y - b.cy, dx = x - b.cx;
          const double u = (dx * std::cos(b.angle) + dy * std::sin(b.angle)) / b.rx;
          const double v = (-dx * std::sin(b.angle) + dy * std::cos(b.angle)) / b.ry;
          inside |= u * u + v * v <= 1.0;
        }
        const double shade = 0.25 + 0.1 * std::sin(0.05 * (x + y));
        img.at(y, x) = static_cast<float>(std::clamp((inside ? 0.75 : shade) + noise(rng), 0.0, 1.0));
        mask.at(y, x) = inside ? 1 : 0;
      }
    char id[32];
    std::snprintf(id, sizeof id, "slice_%03d", k);
    save_image(img, root / "images" / (std::string(id) + ".png"));
    save_mask(mask, root / "masks" / (std::string(id) + ".png"));
  }
}

}  // namespace miniseg
