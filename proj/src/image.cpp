#include "wssod/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>

namespace wssod {

double ImageSample::mean() const {
  if (pixels.empty()) return 0.0;
  double s = 0.0;
  for (double v : pixels) s += v;
  return s / static_cast<double>(pixels.size());
}

bool ImageSample::valid() const {
  if (height <= 0 || width <= 0) return false;
  if (pixels.size() != static_cast<std::size_t>(height) * width) return false;
  return std::all_of(pixels.begin(), pixels.end(), [](double v) { return v >= 0.0 && v <= 1.0; });
}

ImageSample hflip_image(const ImageSample& img) {
  ImageSample out = img;
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < img.width; ++c) out.at(r, c) = img.at(r, img.width - 1 - c);
  }
  return out;
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_error_fn(png_structp, png_const_charp msg) { throw std::runtime_error(std::string("png: ") + msg); }
void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace

void write_png_gray(const std::filesystem::path& path, const ImageSample& img) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warning_fn);
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_write_struct(p, i); }
  } guard{&png, &info};

  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(img.width);
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < img.width; ++c) {
      row[c] = static_cast<png_byte>(std::lround(std::clamp(img.at(r, c), 0.0, 1.0) * 255.0));
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
}

namespace {

template <class Body>
auto with_png_reader(const std::filesystem::path& path, Body body) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error("cannot open image " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw std::runtime_error("not a PNG file: " + path.string());
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_fn, png_warning_fn);
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* p;
    png_infop* i;
    ~Guard() { png_destroy_read_struct(p, i, nullptr); }
  } guard{&png, &info};
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  return body(png, info);
}

}  // namespace

ImageSample read_png_gray(const std::filesystem::path& path, std::string id) {
  return with_png_reader(path, [&](png_structp png, png_infop info) {
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int depth = png_get_bit_depth(png, info);
    const int color = png_get_color_type(png, info);
    if (color != PNG_COLOR_TYPE_GRAY || depth != 8) {
      throw std::runtime_error("expected 8-bit grayscale PNG: " + path.string());
    }
    ImageSample img(std::move(id), h, w);
    std::vector<png_byte> row(w);
    for (int r = 0; r < h; ++r) {
      png_read_row(png, row.data(), nullptr);
      for (int c = 0; c < w; ++c) img.at(r, c) = row[c] / 255.0;
    }
    return img;
  });
}

std::pair<int, int> png_dimensions(const std::filesystem::path& path) {
  return with_png_reader(path, [](png_structp png, png_infop info) {
    return std::pair<int, int>{static_cast<int>(png_get_image_height(png, info)),
                               static_cast<int>(png_get_image_width(png, info))};
  });
}

}  // namespace wssod
