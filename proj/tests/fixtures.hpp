#pragma once

// Predictor stubs and hand-checked fixtures shared by the unit and acceptance suites.

#include <span>
#include <vector>

#include "wssod/evalsuite.hpp"
#include "wssod/image.hpp"
#include "wssod/objectives.hpp"
#include "wssod/teacher.hpp"

namespace wssod::testing::stubs {

inline ad::Var rows(const std::vector<BoxCCWH>& boxes) {
  std::vector<double> v;
  for (const auto& b : boxes) v.insert(v.end(), {b.cx, b.cy, b.w, b.h});
  return ad::Var::constant({static_cast<int>(boxes.size()), 4}, v);
}

/// Ignores the image and returns fixed rows, one per point.
class ConstantPredictor : public BoxPredictor {
 public:
  explicit ConstantPredictor(BoxCCWH box) : box_(box) {}
  ad::Var predict(const ImageSample&, std::span<const PointAnnotation> points) const override {
    return rows(std::vector<BoxCCWH>(points.size(), box_));
  }

 private:
  BoxCCWH box_;
};

/// Returns the ground-truth box of the object each point came from.
class OraclePredictor : public BoxPredictor {
 public:
  explicit OraclePredictor(std::vector<ObjectAnnotation> objects) : objects_(std::move(objects)) {}
  ad::Var predict(const ImageSample&, std::span<const PointAnnotation> points) const override {
    std::vector<BoxCCWH> out;
    for (const auto& p : points) out.push_back(objects_.at(static_cast<std::size_t>(*p.source_object)).box);
    return rows(out);
  }

 private:
  std::vector<ObjectAnnotation> objects_;
};

/// Averages a model with its mirrored twin, which makes it exactly flip-equivariant.
class SymmetrizedPredictor : public BoxPredictor {
 public:
  explicit SymmetrizedPredictor(const BoxPredictor& inner) : inner_(inner) {}
  ad::Var predict(const ImageSample& img, std::span<const PointAnnotation> points) const override {
    std::vector<PointAnnotation> mirrored(points.begin(), points.end());
    for (auto& p : mirrored) p.pos = hflip_point(p.pos);
    const ad::Var a = inner_.predict(img, points);
    const ad::Var b = hflip_box_rows(inner_.predict(hflip_image(img), mirrored));
    return ad::scale(ad::add(a, b), 0.5);
  }

 private:
  const BoxPredictor& inner_;
};

inline ImageSample noise_image(int side, std::uint64_t seed) {
  Rng rng(seed);
  ImageSample img("n", side, side);
  for (double& v : img.pixels) v = rng.uniform();
  return img;
}

inline std::vector<ObjectAnnotation> two_objects() {
  return {{0, {0.3, 0.35, 0.3, 0.25}, Provenance::kGroundTruth}, {2, {0.7, 0.6, 0.2, 0.35}, Provenance::kGroundTruth}};
}

inline SymmetricOptions no_perturbation() {
  SymmetricOptions o;
  o.enable_mask = false;
  o.jitter = 0.0;
  return o;
}

inline ObjectAnnotation gt(int c, BoxCCWH b) { return {c, b, Provenance::kGroundTruth}; }

// Two images, two classes (plus an empty third class).
//   class 0: gts g1 on A, g2 on B. dets by score: d1 0.9 on g1 (TP), d2 0.8 on B far from g2 (FP),
//            d3 0.7 on g2 (TP), d4 0.6 duplicate of g1 (FP). Flags TP FP TP FP, 2 gts.
//            precision 1, 1/2, 2/3, 1/2 -> envelope 1, 2/3, 2/3, 1/2; recall steps of 1/2 at ranks 1 and 3
//            AP = 1/2 * 1 + 1/2 * 2/3 = 5/6
//   class 1: gts g3 on B, g4 on A. dets: d5 0.95 on A away from g4 (FP), d6 0.5 on g3 (TP). Flags FP TP.
//            precision 0, 1/2 -> envelope 1/2, 1/2; one recall step of 1/2 at rank 2 -> AP = 1/4
//   class 2: nothing at all, excluded from the mean
//   mAP = (5/6 + 1/4) / 2 = 13/24
struct Fixture {
  std::vector<ImageDetections> dets;
  std::vector<ImageGroundTruth> gts;
};

inline Fixture golden() {
  const BoxCCWH g1{0.3, 0.3, 0.2, 0.2}, g2{0.6, 0.6, 0.3, 0.3}, g3{0.2, 0.7, 0.2, 0.2}, g4{0.7, 0.3, 0.2, 0.2};
  Fixture f;
  f.gts = {{"A", {gt(0, g1), gt(1, g4)}}, {"B", {gt(0, g2), gt(1, g3)}}};
  f.dets = {{"A", {{g1, 0, 0.9}, {{0.31, 0.3, 0.2, 0.2}, 0, 0.6}, {{0.2, 0.8, 0.1, 0.1}, 1, 0.95}}},
            {"B", {{{0.1, 0.1, 0.1, 0.1}, 0, 0.8}, {g2, 0, 0.7}, {g3, 1, 0.5}}}};
  return f;
}

}  // namespace wssod::testing::stubs
