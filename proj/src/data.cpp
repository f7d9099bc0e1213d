#include "wssod/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace wssod {

// ---------------------------------------------------------------------------
// Stochastic operators

Point2 sample_point(const BoxCCWH& box, Rng& rng, PointSampling mode) {
  if (!box.valid()) throw GeometryError("sample_point: invalid box " + to_string(box));
  const double x1 = std::clamp(box.cx - 0.5 * box.w, 0.0, 1.0);
  const double x2 = std::clamp(box.cx + 0.5 * box.w, 0.0, 1.0);
  const double y1 = std::clamp(box.cy - 0.5 * box.h, 0.0, 1.0);
  const double y2 = std::clamp(box.cy + 0.5 * box.h, 0.0, 1.0);
  auto draw = [&](double lo, double hi) {
    if (mode == PointSampling::kCenterGaussian) {
      // Truncated normal around the center with sd = side / 6.
      const double mid = 0.5 * (lo + hi);
      const double sd = (hi - lo) / 6.0;
      for (int attempt = 0; attempt < 64; ++attempt) {
        const double v = mid + sd * rng.normal();
        if (v > lo && v < hi) return v;
      }
      return mid;
    }
    for (int attempt = 0; attempt < 64; ++attempt) {
      const double v = lo + (hi - lo) * rng.uniform_open();
      if (v > lo && v < hi) return v;
    }
    return 0.5 * (lo + hi);
  };
  const double x = draw(x1, x2);
  const double y = draw(y1, y2);
  return {x, y};
}

std::pair<Point2, Point2> sample_point_pair(const BoxCCWH& box, Rng& rng, PointSampling mode) {
  Point2 a = sample_point(box, rng, mode);
  Point2 b = sample_point(box, rng, mode);
  return {a, b};
}

Point2 jitter_point(const Point2& p, Rng& rng, double amplitude) {
  const double dx = rng.uniform(-amplitude, amplitude);
  const double dy = rng.uniform(-amplitude, amplitude);
  return {std::clamp(p.x + dx, 0.0, 1.0), std::clamp(p.y + dy, 0.0, 1.0)};
}

std::pair<int, int> pixel_of(const Point2& p, int height, int width) {
  const int r = std::clamp(static_cast<int>(std::floor(p.y * height)), 0, height - 1);
  const int c = std::clamp(static_cast<int>(std::floor(p.x * width)), 0, width - 1);
  return {r, c};
}

ImageSample apply_mask(const ImageSample& img, Rng& rng, const MaskConfig& cfg, std::span<const Point2> protect) {
  ImageSample out = img;
  if (cfg.max_rects <= 0) return out;
  const int h = img.height;
  const int w = img.width;
  const double total = static_cast<double>(h) * w;
  const double fill = img.mean();

  std::vector<std::pair<int, int>> guarded;
  for (const Point2& p : protect) guarded.push_back(pixel_of(p, h, w));
  auto covers_guarded = [&](int x0, int y0, int rw, int rh) {
    return std::any_of(guarded.begin(), guarded.end(), [&](const auto& rc) {
      return rc.first >= y0 && rc.first < y0 + rh && rc.second >= x0 && rc.second < x0 + rw;
    });
  };

  const int count = rng.uniform_int(std::max(0, cfg.min_rects), cfg.max_rects);
  for (int k = 0; k < count; ++k) {
    int rw = 0;
    int rh = 0;
    for (int attempt = 0; attempt < 100 && rw == 0; ++attempt) {
      const double area = rng.uniform(cfg.min_area, cfg.max_area) * total;
      const double aspect = std::exp(rng.uniform(std::log(cfg.min_aspect), std::log(cfg.max_aspect)));
      const int cw = std::clamp(static_cast<int>(std::lround(std::sqrt(area * aspect))), 1, w);
      const int lo = static_cast<int>(std::ceil(cfg.min_area * total / cw));
      const int hi = static_cast<int>(std::floor(cfg.max_area * total / cw));
      const int ch = std::clamp(static_cast<int>(std::lround(area / cw)), lo, hi);
      if (lo <= hi && ch >= 1 && ch <= h) {
        rw = cw;
        rh = ch;
      }
    }
    if (rw == 0) continue;

    int x0 = -1;
    int y0 = -1;
    for (int attempt = 0; attempt < 100; ++attempt) {
      const int cx = rng.uniform_int(0, w - rw);
      const int cy = rng.uniform_int(0, h - rh);
      if (!covers_guarded(cx, cy, rw, rh)) {
        x0 = cx;
        y0 = cy;
        break;
      }
    }
    if (x0 < 0) {
      const int corners[4][2] = {{0, 0}, {w - rw, 0}, {0, h - rh}, {w - rw, h - rh}};
      for (const auto& c : corners) {
        if (!covers_guarded(c[0], c[1], rw, rh)) {
          x0 = c[0];
          y0 = c[1];
          break;
        }
      }
    }
    if (x0 < 0) continue;
    for (int r = y0; r < y0 + rh; ++r) {
      for (int c = x0; c < x0 + rw; ++c) out.at(r, c) = fill;
    }
  }
  return out;
}

ImageSample apply_mask(const ImageSample& img, Rng& rng, const MaskConfig& cfg, const Point2& protect) {
  return apply_mask(img, rng, cfg, std::span<const Point2>(&protect, 1));
}

// ---------------------------------------------------------------------------
// Split planning

SplitPlan make_split(const Manifest& m, double fraction, std::uint64_t seed, double test_ratio) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("labeled fraction must lie in (0, 1], got " + std::to_string(fraction));
  }
  if (!(test_ratio >= 0.0 && test_ratio < 1.0)) throw std::invalid_argument("test ratio must lie in [0, 1)");
  const int n = static_cast<int>(m.entries.size());
  Rng rng(derive_seed(seed, hash_string("split")));
  const std::vector<int> perm = permutation(n, rng);

  const int n_test = static_cast<int>(std::lround(test_ratio * n));
  const int n_train = n - n_test;
  const int n_full = static_cast<int>(std::lround(fraction * n_train));

  std::vector<int> test(perm.begin(), perm.begin() + n_test);
  std::vector<int> full(perm.begin() + n_test, perm.begin() + n_test + n_full);
  std::vector<int> weak(perm.begin() + n_test + n_full, perm.end());
  // Lists keep manifest order so that downstream iteration does not depend on the shuffle.
  for (auto* v : {&test, &full, &weak}) std::sort(v->begin(), v->end());

  SplitPlan plan;
  plan.fraction = fraction;
  plan.seed = seed;
  for (int i : full) plan.fully_labeled_ids.push_back(m.entries[i].image);
  for (int i : weak) plan.weak_ids.push_back(m.entries[i].image);
  for (int i : test) plan.test_ids.push_back(m.entries[i].image);
  return plan;
}

// ---------------------------------------------------------------------------
// Synthetic data

Texture class_texture(int class_id) {
  switch (class_id % 3) {
    case 0:
      return Texture::kUniform;
    case 1:
      return Texture::kRing;
    default:
      return Texture::kSpeckle;
  }
}

std::string texture_name(Texture t) {
  switch (t) {
    case Texture::kUniform:
      return "uniform";
    case Texture::kRing:
      return "ring";
    case Texture::kSpeckle:
      return "speckle";
  }
  return "unknown";
}

void SyntheticConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("synthetic config: " + msg); };
  if (height < 8 || width < 8) fail("image must be at least 8x8");
  if (num_classes < 1) fail("num_classes must be >= 1");
  if (num_images < 1) fail("num_images must be >= 1");
  if (min_objects < 0 || max_objects < min_objects) fail("object count range is empty");
  if (!(min_contrast > 0.0) || max_contrast < min_contrast) fail("contrast range is empty");
  if (background_min < 0.0 || background_max > 1.0 || background_max < background_min) fail("background range is empty");
  if (noise_level < 0.0) fail("noise_level must be >= 0");
  if (!(softness > 0.0)) fail("softness must be > 0");
  if (!(min_box_side > 0.0) || max_box_side < min_box_side || max_box_side > 1.0) fail("box side range is empty");
}

namespace {

double smooth_step(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

std::pair<ImageSample, std::vector<ObjectAnnotation>> render_synthetic_image(const SyntheticConfig& cfg, Rng& rng,
                                                                             std::string id) {
  const int h = cfg.height;
  const int w = cfg.width;
  ImageSample img(std::move(id), h, w);

  const double base = rng.uniform(cfg.background_min, cfg.background_max);
  const double gx = rng.uniform(-0.06, 0.06);
  const double gy = rng.uniform(-0.06, 0.06);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const double x = (c + 0.5) / w;
      const double y = (r + 0.5) / h;
      img.at(r, c) = base + gx * (x - 0.5) + gy * (y - 0.5);
    }
  }

  std::vector<ObjectAnnotation> objects;
  const int count = rng.uniform_int(cfg.min_objects, cfg.max_objects);
  for (int k = 0; k < count; ++k) {
    const int cls = rng.uniform_int(0, cfg.num_classes - 1);
    BoxCCWH box;
    bool placed = false;
    for (int attempt = 0; attempt < 32 && !placed; ++attempt) {
      box.w = rng.uniform(cfg.min_box_side, cfg.max_box_side);
      box.h = rng.uniform(cfg.min_box_side, cfg.max_box_side);
      box.cx = rng.uniform(0.5 * box.w, 1.0 - 0.5 * box.w);
      box.cy = rng.uniform(0.5 * box.h, 1.0 - 0.5 * box.h);
      placed = std::all_of(objects.begin(), objects.end(),
                           [&](const ObjectAnnotation& o) { return iou(o.box, box) <= cfg.max_overlap_iou; });
    }
    if (!placed) continue;
    const double contrast = rng.uniform(cfg.min_contrast, cfg.max_contrast);
    const std::uint64_t speckle_seed = rng.next_u64();
    const Texture tex = class_texture(cls);

    const double a = 0.5 * box.w;
    const double b = 0.5 * box.h;
    const int r0 = std::max(0, static_cast<int>((box.cy - 2.0 * b) * h));
    const int r1 = std::min(h - 1, static_cast<int>((box.cy + 2.0 * b) * h) + 1);
    const int c0 = std::max(0, static_cast<int>((box.cx - 2.0 * a) * w));
    const int c1 = std::min(w - 1, static_cast<int>((box.cx + 2.0 * a) * w) + 1);
    for (int r = r0; r <= r1; ++r) {
      for (int c = c0; c <= c1; ++c) {
        const double dx = ((c + 0.5) / w - box.cx) / a;
        const double dy = ((r + 0.5) / h - box.cy) / b;
        const double rr = std::sqrt(dx * dx + dy * dy);
        // Envelope equals exactly one half at the box boundary (rr = 1).
        const double env = smooth_step((1.0 - rr) / cfg.softness);
        double t = 1.0;
        if (tex == Texture::kRing) {
          t = 0.2 + 0.8 * smooth_step((rr - 0.55) / 0.07);
        } else if (tex == Texture::kSpeckle) {
          const std::uint64_t cell = splitmix64(speckle_seed ^ (static_cast<std::uint64_t>(r / 2) << 32) ^
                                                static_cast<std::uint64_t>(c / 2));
          t = (cell & 1U) ? 1.0 : 0.2;
        }
        img.at(r, c) += contrast * env * t;
      }
    }
    objects.push_back({cls, box, Provenance::kGroundTruth});
  }

  for (double& v : img.pixels) v = std::clamp(v + cfg.noise_level * rng.normal(), 0.0, 1.0);
  return {std::move(img), std::move(objects)};
}

// ---------------------------------------------------------------------------
// Dataset

Dataset::Dataset(Manifest m) : manifest_(std::move(m)) {
  images_.reserve(manifest_.entries.size());
  for (std::size_t i = 0; i < manifest_.entries.size(); ++i) {
    const ManifestEntry& e = manifest_.entries[i];
    ImageSample img = read_png_gray(manifest_.image_path(e), e.image);
    if (img.height != e.height || img.width != e.width) {
      throw ManifestError("image dimensions differ from manifest", static_cast<int>(i));
    }
    images_.push_back(std::move(img));
    index_.emplace_back(e.image, i);
  }
  std::sort(index_.begin(), index_.end());
}

std::size_t Dataset::lookup(const std::string& id) const {
  auto it = std::lower_bound(index_.begin(), index_.end(), std::pair<std::string, std::size_t>{id, 0});
  if (it == index_.end() || it->first != id) throw std::out_of_range("unknown image id " + id);
  return it->second;
}

const ImageSample& Dataset::image(const std::string& id) const { return images_[lookup(id)]; }
const ManifestEntry& Dataset::entry(const std::string& id) const { return manifest_.entries[lookup(id)]; }

}  // namespace wssod
