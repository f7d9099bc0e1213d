#pragma once

#include <span>
#include <vector>

#include "wssod/autodiff.hpp"
#include "wssod/data.hpp"
#include "wssod/teacher.hpp"

namespace wssod {

struct LossWeights {
  double lambda_l1 = 5.0;
  double lambda_giou = 2.0;
  double lambda_m = 1.0;  // multi-point consistency
  double lambda_c = 1.0;  // symmetric consistency

  void validate() const;
  bool operator==(const LossWeights&) const = default;
};

/// Knobs of the symmetric-consistency branch pair.
struct SymmetricOptions {
  MaskConfig mask;
  bool enable_mask = true;
  double jitter = kDefaultJitter;  // 0 disables point noise
  /// Literal reading: mask the flipped image instead of the original in branch A.
  bool mask_on_flipped = false;
  /// Treat the flipped-image branch as a fixed target.
  bool stop_grad_flipped = false;

  bool operator==(const SymmetricOptions&) const = default;
};

struct LabeledImage {
  const ImageSample* image = nullptr;
  std::vector<ObjectAnnotation> objects;
};

struct WeakImage {
  const ImageSample* image = nullptr;
  std::vector<PointAnnotation> points;
};

/// Mirrors the cx column of [n, 4] box rows.
ad::Var hflip_box_rows(const ad::Var& boxes);

/// Per-row GIoU between predicted rows [n, 4] and constant targets; returns [n, 1].
ad::Var giou_rows(const ad::Var& pred, std::span<const BoxCCWH> target);

/// Mean over aligned pairs of lambda_l1 * L1 + lambda_giou * (1 - GIoU).
ad::Var loss_box(const ad::Var& pred, std::span<const BoxCCWH> gt, const LossWeights& w);

/// Mean Euclidean distance between aligned prediction rows.
ad::Var loss_multipoint(const ad::Var& pred1, const ad::Var& pred2);

/// Box loss on point set 1 plus lambda_m times multi-point consistency between two
/// point sets drawn inside the same boxes. Images without objects give a constant 0.
ad::Var loss_step1(const BoxPredictor& model, const ImageSample& img, std::span<const ObjectAnnotation> gt, Rng& rng,
                   const LossWeights& w, PointSampling sampling = PointSampling::kUniform);

/// lambda_c times the mean distance between the mirrored prediction on the perturbed
/// original and the prediction on the mirrored image with mirrored points.
ad::Var loss_symmetric(const BoxPredictor& model, std::span<const PointAnnotation> points, const ImageSample& img,
                       Rng& rng, const LossWeights& w, const SymmetricOptions& opts = {});
ad::Var loss_symmetric(const BoxPredictor& model, const PointAnnotation& point, const ImageSample& img, Rng& rng,
                       const LossWeights& w, const SymmetricOptions& opts = {});

/// Mean step-1 loss over the labeled batch plus mean symmetric loss over the weak batch.
ad::Var loss_step2_batch(const BoxPredictor& model, std::span<const LabeledImage> labeled,
                         std::span<const WeakImage> weak, Rng& rng, const LossWeights& w,
                         const SymmetricOptions& opts = {}, PointSampling sampling = PointSampling::kUniform);

}  // namespace wssod
