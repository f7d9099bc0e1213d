#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "wssod/geometry.hpp"
#include "wssod/image.hpp"
#include "wssod/rng.hpp"

namespace wssod {

enum class Provenance { kGroundTruth, kPseudo };

struct ObjectAnnotation {
  int class_id = 0;
  BoxCCWH box;
  Provenance provenance = Provenance::kGroundTruth;

  bool operator==(const ObjectAnnotation&) const = default;
};

/// A class-labeled point; the weak supervision unit.
struct PointAnnotation {
  Point2 pos;
  int class_id = 0;
  std::optional<int> source_object;

  bool operator==(const PointAnnotation&) const = default;
};

struct ManifestEntry {
  std::string image;  // relative to the manifest directory; doubles as the image id
  int width = 0;
  int height = 0;
  std::vector<ObjectAnnotation> objects;
  std::vector<PointAnnotation> points;

  bool operator==(const ManifestEntry&) const = default;
};

struct Manifest {
  static constexpr int kVersion = 1;

  std::vector<std::string> classes;
  std::vector<ManifestEntry> entries;
  std::filesystem::path root;  // directory image paths are resolved against; not serialized

  int num_classes() const { return static_cast<int>(classes.size()); }
  const ManifestEntry* find(const std::string& id) const;
  std::filesystem::path image_path(const ManifestEntry& e) const { return root / e.image; }
};

/// Raised for manifest problems; entry_index is -1 for file-level issues.
class ManifestError : public std::runtime_error {
 public:
  ManifestError(const std::string& msg, int entry_index)
      : std::runtime_error(entry_index >= 0 ? "entry " + std::to_string(entry_index) + ": " + msg : msg),
        entry_index_(entry_index) {}
  int entry_index() const { return entry_index_; }

 private:
  int entry_index_;
};

struct ManifestLoadOptions {
  bool check_images = true;
};

Manifest load_manifest(const std::filesystem::path& path, ManifestLoadOptions opts = {});
void save_manifest(const Manifest& m, const std::filesystem::path& path);
std::string manifest_to_text(const Manifest& m);

// ---------------------------------------------------------------------------
// Split planning

struct SplitPlan {
  double fraction = 1.0;
  std::uint64_t seed = 0;
  std::vector<std::string> fully_labeled_ids;
  std::vector<std::string> weak_ids;
  std::vector<std::string> test_ids;

  std::size_t train_size() const { return fully_labeled_ids.size() + weak_ids.size(); }
  bool operator==(const SplitPlan&) const = default;
};

inline constexpr double kDefaultTestRatio = 0.2;

/// Seeded uniform partition into test (20%), fully labeled (fraction of train) and weak (rest of train).
SplitPlan make_split(const Manifest& m, double fraction, std::uint64_t seed, double test_ratio = kDefaultTestRatio);
void save_split(const SplitPlan& s, const std::filesystem::path& path);
SplitPlan load_split(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Stochastic operators

enum class PointSampling { kUniform, kCenterGaussian };

/// Uniform draw strictly inside the (image-clipped) box.
Point2 sample_point(const BoxCCWH& box, Rng& rng, PointSampling mode = PointSampling::kUniform);
std::pair<Point2, Point2> sample_point_pair(const BoxCCWH& box, Rng& rng, PointSampling mode = PointSampling::kUniform);

inline constexpr double kDefaultJitter = 0.05;

/// Adds independent U[-amplitude, amplitude] noise per coordinate, then clamps to [0,1].
Point2 jitter_point(const Point2& p, Rng& rng, double amplitude = kDefaultJitter);

struct MaskConfig {
  int min_rects = 1;
  int max_rects = 3;
  double min_area = 0.05;  // per rectangle, fraction of image area
  double max_area = 0.15;
  double min_aspect = 0.5;
  double max_aspect = 2.0;
};

/// Pixel that contains a normalized point.
std::pair<int, int> pixel_of(const Point2& p, int height, int width);

/// Cutout: fills random rectangles with the image mean, never covering any protected pixel.
ImageSample apply_mask(const ImageSample& img, Rng& rng, const MaskConfig& cfg, std::span<const Point2> protect);
ImageSample apply_mask(const ImageSample& img, Rng& rng, const MaskConfig& cfg, const Point2& protect);

// ---------------------------------------------------------------------------
// Synthetic data

enum class Texture { kUniform, kRing, kSpeckle };

struct SyntheticConfig {
  int height = 128;
  int width = 128;
  int num_classes = 3;
  int num_images = 100;
  int min_objects = 0;
  int max_objects = 3;
  double min_contrast = 0.10;
  double max_contrast = 0.22;
  double background_min = 0.30;
  double background_max = 0.45;
  double noise_level = 0.04;
  double softness = 0.12;        // edge falloff width relative to the blob radius
  double min_box_side = 0.15;    // box sides as a fraction of the image side
  double max_box_side = 0.40;
  double max_overlap_iou = 0.2;
  PointSampling point_sampling = PointSampling::kUniform;

  void validate() const;
};

Texture class_texture(int class_id);
std::string texture_name(Texture t);

/// Renders one image and its objects from a per-image random stream.
std::pair<ImageSample, std::vector<ObjectAnnotation>> render_synthetic_image(const SyntheticConfig& cfg, Rng& rng,
                                                                             std::string id);

/// Writes images/NNNNNN.png plus manifest.json under out_dir; deterministic in (cfg, seed).
Manifest generate_synthetic(const SyntheticConfig& cfg, std::uint64_t seed, const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// In-memory dataset

/// Manifest entries with their rasters loaded.
class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(Manifest m);

  const Manifest& manifest() const { return manifest_; }
  const ImageSample& image(const std::string& id) const;
  const ManifestEntry& entry(const std::string& id) const;
  std::size_t size() const { return images_.size(); }

 private:
  Manifest manifest_;
  std::vector<ImageSample> images_;
  std::vector<std::pair<std::string, std::size_t>> index_;  // sorted by id
  std::size_t lookup(const std::string& id) const;
};

}  // namespace wssod
