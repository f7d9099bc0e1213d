#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace wssod {

/// Grayscale raster with values in [0, 1], stored row-major.
struct ImageSample {
  std::string id;
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  ImageSample() = default;
  ImageSample(std::string id_, int h, int w, double fill = 0.0)
      : id(std::move(id_)), height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}

  double& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * width + c]; }
  double at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }
  double mean() const;
  bool valid() const;
};

/// Reverses column order; pixel (r, c) moves to (r, W-1-c).
ImageSample hflip_image(const ImageSample& img);

/// 8-bit single-channel PNG. Values are quantized with round-to-nearest.
void write_png_gray(const std::filesystem::path& path, const ImageSample& img);
ImageSample read_png_gray(const std::filesystem::path& path, std::string id = {});
/// Reads only the header; returns {height, width}.
std::pair<int, int> png_dimensions(const std::filesystem::path& path);

}  // namespace wssod
