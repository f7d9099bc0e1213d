#pragma once

// Shared fixtures for the unit and acceptance suites.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "wssod/config.hpp"
#include "wssod/data.hpp"
#include "wssod/geometry.hpp"
#include "wssod/nn.hpp"
#include "wssod/rng.hpp"
#include "wssod/student.hpp"
#include "wssod/teacher.hpp"

namespace wssod::testing {

inline TeacherConfig tiny_teacher(int classes = 3) {
  TeacherConfig c;
  c.num_classes = classes;
  c.width = 16;
  c.backbone_channels = {4, 8};
  c.backbone_strides = {2, 2};
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.heads = 2;
  c.ffn_hidden = 16;
  c.head_layers = 2;
  return c;
}

inline StudentConfig tiny_student(int classes = 3) {
  StudentConfig c;
  c.num_classes = classes;
  c.backbone_channels = {4, 8};
  c.backbone_strides = {2, 2};
  c.head_channels = 8;
  return c;
}

inline SyntheticConfig tiny_synthetic(int n = 24, int side = 32) {
  SyntheticConfig s;
  s.height = side;
  s.width = side;
  s.num_images = n;
  s.min_objects = 1;
  s.max_objects = 2;
  return s;
}

/// Small end-to-end config: a few epochs of everything on 32x32 images.
inline RunConfig tiny_run(int classes = 3) {
  RunConfig c;
  c.synthetic = tiny_synthetic();
  c.teacher = tiny_teacher(classes);
  c.student = tiny_student(classes);
  c.teacher_optim.lr = 2e-3;
  c.step1 = {3, 4, 0.0, true};
  c.step2 = {2, 4, 0.0, true};
  c.step3 = {3, 4, 10.0, true};
  return c;
}

/// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("wssod_" + tag + "_" + std::to_string(splitmix64(reinterpret_cast<std::uintptr_t>(this))));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

struct RasterOverlap {
  double iou = 0.0;
  double giou = 0.0;
};

/// Brute-force overlap on an n x n pixel grid. Each pixel contributes the area of the pixel square
/// that survives clipping against the region, so edges inside a pixel are not rounded away.
inline RasterOverlap raster_overlap(const BoxXYXY& a, const BoxXYXY& b, int n = 512) {
  auto clipped = [](double lo, double hi, double plo, double phi) { return std::max(0.0, std::min(hi, phi) - std::max(lo, plo)); };
  const BoxXYXY hull{std::min(a.x1, b.x1), std::min(a.y1, b.y1), std::max(a.x2, b.x2), std::max(a.y2, b.y2)};
  double area_a = 0.0, area_b = 0.0, inter = 0.0, area_hull = 0.0;
  const double px = 1.0 / n;
  for (int r = 0; r < n; ++r) {
    const double y0 = r * px, y1 = (r + 1) * px;
    for (int c = 0; c < n; ++c) {
      const double x0 = c * px, x1 = (c + 1) * px;
      area_a += clipped(a.x1, a.x2, x0, x1) * clipped(a.y1, a.y2, y0, y1);
      area_b += clipped(b.x1, b.x2, x0, x1) * clipped(b.y1, b.y2, y0, y1);
      // pixel clipped by a, then by b
      const double ax0 = std::max(x0, a.x1), ax1 = std::min(x1, a.x2);
      const double ay0 = std::max(y0, a.y1), ay1 = std::min(y1, a.y2);
      if (ax1 > ax0 && ay1 > ay0) inter += clipped(b.x1, b.x2, ax0, ax1) * clipped(b.y1, b.y2, ay0, ay1);
      area_hull += clipped(hull.x1, hull.x2, x0, x1) * clipped(hull.y1, hull.y2, y0, y1);
    }
  }
  const double uni = area_a + area_b - inter;
  return {inter / uni, inter / uni - (area_hull - uni) / area_hull};
}

/// Random box fully inside the unit square with sides in [lo, hi].
inline BoxCCWH random_box(Rng& rng, double lo = 0.05, double hi = 0.6) {
  const double w = rng.uniform(lo, hi);
  const double h = rng.uniform(lo, hi);
  return {rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h};
}

inline Dataset synthetic_dataset(const SyntheticConfig& cfg, std::uint64_t seed, const std::filesystem::path& dir) {
  return Dataset(generate_synthetic(cfg, seed, dir));
}

struct GradCheck {
  std::string name;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel = 0.0;
};

/// Central differences on `count` seeded coordinates with non-negligible analytic gradient.
/// `loss` must be deterministic (re-seed any randomness inside it).
inline std::vector<GradCheck> check_gradients(nn::ParameterSet& ps, const std::function<ad::Var()>& loss, int count,
                                              std::uint64_t seed, double h = 1e-6) {
  ps.zero_grad();
  ad::backward(loss());
  std::vector<std::pair<std::size_t, std::size_t>> candidates;  // (entry, index)
  const auto& entries = ps.entries();
  for (std::size_t e = 0; e < entries.size(); ++e) {
    const auto& g = entries[e].second.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (std::abs(g[i]) > 1e-5) candidates.emplace_back(e, i);
    }
  }
  Rng rng(seed);
  std::vector<GradCheck> out;
  for (int k = 0; k < count && !candidates.empty(); ++k) {
    const auto [e, i] = candidates[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(candidates.size()) - 1))];
    ad::Var v = entries[e].second;
    const double analytic = v.grad()[i];
    const double orig = v.value()[i];
    v.mutable_value()[i] = orig + h;
    const double fp = loss().item();
    v.mutable_value()[i] = orig - h;
    const double fm = loss().item();
    v.mutable_value()[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-12});
    out.push_back({entries[e].first + "[" + std::to_string(i) + "]", analytic, numeric, rel});
  }
  return out;
}

}  // namespace wssod::testing
