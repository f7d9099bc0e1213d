#include "wssod/objectives.hpp"

#include <stdexcept>

#include "wssod/log.hpp"

namespace wssod {

void LossWeights::validate() const {
  if (lambda_l1 < 0.0 || lambda_giou < 0.0 || lambda_m < 0.0 || lambda_c < 0.0) {
    throw std::invalid_argument("loss weights must be non-negative");
  }
}

ad::Var hflip_box_rows(const ad::Var& boxes) {
  static constexpr double kScale[4] = {-1.0, 1.0, 1.0, 1.0};
  static constexpr double kShift[4] = {1.0, 0.0, 0.0, 0.0};
  return ad::affine_cols(boxes, kScale, kShift);
}

ad::Var giou_rows(const ad::Var& pred, std::span<const BoxCCWH> target) {
  const int n = pred.rows();
  if (pred.ndim() != 2 || pred.cols() != 4) throw std::invalid_argument("giou_rows: predictions must be [n, 4]");
  if (static_cast<std::size_t>(n) != target.size()) throw std::invalid_argument("giou_rows: length mismatch");

  std::vector<double> gx1(n), gy1(n), gx2(n), gy2(n);
  for (int i = 0; i < n; ++i) {
    const BoxXYXY c = to_corners(target[i]);
    gx1[i] = c.x1;
    gy1[i] = c.y1;
    gx2[i] = c.x2;
    gy2[i] = c.y2;
  }
  auto col = [&](const std::vector<double>& v) { return ad::Var::constant({n, 1}, v); };
  const ad::Var tx1 = col(gx1), ty1 = col(gy1), tx2 = col(gx2), ty2 = col(gy2);

  const ad::Var cx = ad::slice_cols(pred, 0, 1);
  const ad::Var cy = ad::slice_cols(pred, 1, 1);
  const ad::Var hw = ad::scale(ad::clamp_min(ad::slice_cols(pred, 2, 1), kMinBoxSide), 0.5);
  const ad::Var hh = ad::scale(ad::clamp_min(ad::slice_cols(pred, 3, 1), kMinBoxSide), 0.5);
  const ad::Var x1 = cx - hw, x2 = cx + hw, y1 = cy - hh, y2 = cy + hh;

  // Areas come from corner differences so that identical boxes give inter == union exactly.
  const ad::Var area_p = (x2 - x1) * (y2 - y1);
  const ad::Var area_t = (tx2 - tx1) * (ty2 - ty1);
  const ad::Var iw = ad::clamp_min(ad::minimum(x2, tx2) - ad::maximum(x1, tx1), 0.0);
  const ad::Var ih = ad::clamp_min(ad::minimum(y2, ty2) - ad::maximum(y1, ty1), 0.0);
  const ad::Var inter = iw * ih;
  const ad::Var uni = area_p + area_t - inter;
  const ad::Var hull = (ad::maximum(x2, tx2) - ad::minimum(x1, tx1)) * (ad::maximum(y2, ty2) - ad::minimum(y1, ty1));
  return ad::div(inter, uni) - ad::div(hull - uni, hull);
}

ad::Var loss_box(const ad::Var& pred, std::span<const BoxCCWH> gt, const LossWeights& w) {
  const int n = pred.rows();
  if (static_cast<std::size_t>(n) != gt.size()) throw std::invalid_argument("loss_box: prediction/target length mismatch");
  if (n == 0) return ad::Var::scalar(0.0);
  std::vector<double> target;
  target.reserve(static_cast<std::size_t>(n) * 4);
  for (const auto& b : gt) target.insert(target.end(), {b.cx, b.cy, b.w, b.h});
  const ad::Var l1 = ad::row_sum(ad::abs(ad::sub(pred, ad::Var::constant({n, 4}, std::move(target)))));
  const ad::Var one_minus_giou = ad::add_scalar(ad::neg(giou_rows(pred, gt)), 1.0);
  const ad::Var per_pair = ad::scale(l1, w.lambda_l1) + ad::scale(one_minus_giou, w.lambda_giou);
  return ad::mean(per_pair);
}

ad::Var loss_multipoint(const ad::Var& pred1, const ad::Var& pred2) {
  if (pred1.shape() != pred2.shape()) throw std::invalid_argument("loss_multipoint: prediction lists differ in length");
  if (pred1.rows() == 0) return ad::Var::scalar(0.0);
  return ad::mean(ad::row_norm(ad::sub(pred1, pred2)));
}

ad::Var loss_step1(const BoxPredictor& model, const ImageSample& img, std::span<const ObjectAnnotation> gt, Rng& rng,
                   const LossWeights& w, PointSampling sampling) {
  if (gt.empty()) {
    log_warn("image " + img.id + " has no objects; skipped in step-1 loss");
    return ad::Var::scalar(0.0);
  }
  std::vector<PointAnnotation> first, second;
  std::vector<BoxCCWH> boxes;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const auto [p1, p2] = sample_point_pair(gt[i].box, rng, sampling);
    first.push_back({p1, gt[i].class_id, static_cast<int>(i)});
    second.push_back({p2, gt[i].class_id, static_cast<int>(i)});
    boxes.push_back(gt[i].box);
  }
  if (w.lambda_m == 0.0) {
    // The second point set is still drawn so that the random stream does not depend on lambda_m.
    return loss_box(model.predict(img, first), boxes, w);
  }
  const std::vector<ad::Var> preds = model.predict_sets(img, {first, second});
  const ad::Var box_term = loss_box(preds[0], boxes, w);
  return ad::add(box_term, ad::scale(loss_multipoint(preds[0], preds[1]), w.lambda_m));
}

ad::Var loss_symmetric(const BoxPredictor& model, std::span<const PointAnnotation> points, const ImageSample& img,
                       Rng& rng, const LossWeights& w, const SymmetricOptions& opts) {
  if (points.empty() || w.lambda_c == 0.0) return ad::Var::scalar(0.0);

  std::vector<PointAnnotation> jittered(points.begin(), points.end());
  std::vector<Point2> protect;
  for (auto& p : jittered) {
    protect.push_back(p.pos);
    if (opts.jitter > 0.0) p.pos = jitter_point(p.pos, rng, opts.jitter);
  }
  const ImageSample flipped = hflip_image(img);
  const ImageSample& mask_source = opts.mask_on_flipped ? flipped : img;
  const ImageSample perturbed = opts.enable_mask ? apply_mask(mask_source, rng, opts.mask, protect) : mask_source;

  std::vector<PointAnnotation> mirrored(points.begin(), points.end());
  for (auto& p : mirrored) p.pos = hflip_point(p.pos);

  const ad::Var branch_a = hflip_box_rows(model.predict(perturbed, jittered));
  ad::Var branch_b = model.predict(flipped, mirrored);
  if (opts.stop_grad_flipped) branch_b = ad::stop_gradient(branch_b);
  return ad::scale(ad::mean(ad::row_norm(ad::sub(branch_a, branch_b))), w.lambda_c);
}

ad::Var loss_symmetric(const BoxPredictor& model, const PointAnnotation& point, const ImageSample& img, Rng& rng,
                       const LossWeights& w, const SymmetricOptions& opts) {
  return loss_symmetric(model, std::span<const PointAnnotation>(&point, 1), img, rng, w, opts);
}

ad::Var loss_step2_batch(const BoxPredictor& model, std::span<const LabeledImage> labeled,
                         std::span<const WeakImage> weak, Rng& rng, const LossWeights& w,
                         const SymmetricOptions& opts, PointSampling sampling) {
  if (labeled.empty() && weak.empty()) throw std::invalid_argument("loss_step2_batch: both batches are empty");
  ad::Var total = ad::Var::scalar(0.0);
  if (!labeled.empty()) {
    ad::Var acc = ad::Var::scalar(0.0);
    for (const auto& item : labeled) acc = ad::add(acc, loss_step1(model, *item.image, item.objects, rng, w, sampling));
    total = ad::add(total, ad::scale(acc, 1.0 / static_cast<double>(labeled.size())));
  }
  if (!weak.empty()) {
    ad::Var acc = ad::Var::scalar(0.0);
    for (const auto& item : weak) acc = ad::add(acc, loss_symmetric(model, item.points, *item.image, rng, w, opts));
    total = ad::add(total, ad::scale(acc, 1.0 / static_cast<double>(weak.size())));
  }
  return total;
}

}  // namespace wssod
