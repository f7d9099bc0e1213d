#include "wssod/student.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "wssod/objectives.hpp"
#include "wssod/teacher.hpp"

namespace wssod {

int StudentConfig::stride() const {
  int s = 1;
  for (int v : backbone_strides) s *= v;
  return s;
}

void StudentConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("student config: " + msg); };
  if (num_classes < 1) fail("num_classes must be >= 1");
  if (backbone_channels.empty() || backbone_channels.size() != backbone_strides.size()) {
    fail("backbone channel and stride lists must be non-empty and equal length");
  }
  for (int c : backbone_channels) {
    if (c < 1) fail("backbone channels must be positive");
  }
  for (int s : backbone_strides) {
    if (s < 1 || s > 2) fail("backbone strides must be 1 or 2");
  }
  if (head_channels < 1) fail("head_channels must be positive");
  if (!(focal_alpha >= 0.0 && focal_alpha <= 1.0)) fail("focal_alpha must lie in [0, 1]");
  if (!(focal_gamma >= 0.0)) fail("focal_gamma must be >= 0");
  if (!(score_threshold >= 0.0 && score_threshold <= 1.0)) fail("score_threshold must lie in [0, 1]");
  if (!(nms_iou > 0.0 && nms_iou <= 1.0)) fail("nms_iou must lie in (0, 1]");
  if (!(pseudo_weight >= 0.0)) fail("pseudo_weight must be >= 0");
  if (top_k < 1) fail("top_k must be >= 1");
}

Point2 location_of(int index, int grid_h, int grid_w) {
  const int r = index / grid_w;
  const int c = index % grid_w;
  return {(c + 0.5) / grid_w, (r + 0.5) / grid_h};
}

double centerness_target(double l, double t, double r, double b) {
  const double lr = std::min(l, r) / std::max(l, r);
  const double tb = std::min(t, b) / std::max(t, b);
  return std::sqrt(lr * tb);
}

Assignment assign_targets(const TrainTarget& targets, int grid_h, int grid_w, double pseudo_weight) {
  const int n = grid_h * grid_w;
  Assignment a;
  a.labels.assign(n, -1);
  a.box_index.assign(n, -1);
  a.ltrb.assign(static_cast<std::size_t>(n) * 4, 0.0);
  a.centerness.assign(n, 0.0);
  a.weight.assign(n, 1.0);
  for (int i = 0; i < n; ++i) {
    const Point2 p = location_of(i, grid_h, grid_w);
    int best = -1;
    double best_area = 0.0;
    for (std::size_t k = 0; k < targets.size(); ++k) {
      const BoxXYXY c = to_corners(targets[k].box);
      if (!c.contains(p)) continue;
      const double area = c.area();
      if (best < 0 || area < best_area) {
        best = static_cast<int>(k);
        best_area = area;
      }
    }
    if (best < 0) continue;
    const ObjectAnnotation& t = targets[best];
    const BoxXYXY c = to_corners(t.box);
    const double l = p.x - c.x1, top = p.y - c.y1, r = c.x2 - p.x, b = c.y2 - p.y;
    a.labels[i] = t.class_id;
    a.box_index[i] = best;
    a.ltrb[i * 4 + 0] = l;
    a.ltrb[i * 4 + 1] = top;
    a.ltrb[i * 4 + 2] = r;
    a.ltrb[i * 4 + 3] = b;
    a.centerness[i] = centerness_target(l, top, r, b);
    if (t.provenance == Provenance::kPseudo) a.weight[i] = pseudo_weight;
    ++a.num_positive;
  }
  return a;
}

StudentModel::StudentModel(const StudentConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(derive_seed(seed, hash_string("student-init")));
  int in = 1;
  for (std::size_t i = 0; i < cfg_.backbone_channels.size(); ++i) {
    backbone_.push_back(nn::make_conv(params_, "backbone." + std::to_string(i), in, cfg_.backbone_channels[i], 3,
                                      cfg_.backbone_strides[i], rng));
    in = cfg_.backbone_channels[i];
  }
  head_ = nn::make_conv(params_, "head", in, cfg_.head_channels, 3, 1, rng);
  out_ = nn::make_conv(params_, "out", cfg_.head_channels, cfg_.num_classes + 5, 1, 1, rng);

  // Start from a rare-foreground class prior and small distances.
  ad::Var bias = out_.bias;
  auto& b = bias.mutable_value();
  const double prior = 0.01;
  for (int c = 0; c < cfg_.num_classes; ++c) b[c] = -std::log((1.0 - prior) / prior);
  for (int j = 0; j < 4; ++j) b[cfg_.num_classes + j] = -2.0;
}

StudentModel StudentModel::clone() const {
  StudentModel copy(cfg_, 0);
  copy.params_.copy_values_from(params_);
  return copy;
}

StudentPrediction StudentModel::forward(const ImageSample& img) const {
  const int stride = cfg_.stride();
  if (img.height % stride != 0 || img.width % stride != 0) {
    throw ShapeError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                     " is not divisible by student stride " + std::to_string(stride));
  }
  ad::Var x = image_tensor(img);
  for (const auto& conv : backbone_) x = ad::relu(conv.forward(x));
  x = ad::relu(head_.forward(x));
  const ad::Var maps = out_.forward(x);
  const int ch = maps.dim(0);
  StudentPrediction p;
  p.grid_h = maps.dim(1);
  p.grid_w = maps.dim(2);
  const ad::Var rows = ad::transpose(ad::reshape(maps, {ch, p.grid_h * p.grid_w}));
  const int c = cfg_.num_classes;
  p.cls = ad::slice_cols(rows, 0, c);
  p.dist = ad::softplus(ad::slice_cols(rows, c, 4));
  p.ctr = ad::slice_cols(rows, c + 4, 1);
  return p;
}

StudentPrediction student_forward(const StudentModel& m, const ImageSample& img) { return m.forward(img); }

namespace {

double binary_entropy(double c) {
  double h = 0.0;
  if (c > 0.0) h -= c * std::log(c);
  if (c < 1.0) h -= (1.0 - c) * std::log1p(-c);
  return h;
}

}  // namespace

StudentLossTerms loss_student_terms(const StudentPrediction& pred, const TrainTarget& targets, const StudentConfig& cfg) {
  const int n = pred.locations();
  const int num_classes = pred.cls.cols();
  if (pred.cls.rows() != n || pred.dist.rows() != n || pred.ctr.rows() != n) {
    throw std::invalid_argument("loss_student: prediction maps disagree with the grid size");
  }
  for (const auto& t : targets) {
    if (t.class_id < 0 || t.class_id >= num_classes) throw std::invalid_argument("loss_student: target class out of range");
  }
  const Assignment a = assign_targets(targets, pred.grid_h, pred.grid_w, cfg.pseudo_weight);

  std::vector<double> onehot(static_cast<std::size_t>(n) * num_classes, 0.0);
  std::vector<double> cls_weight(onehot.size());
  for (int i = 0; i < n; ++i) {
    if (a.labels[i] >= 0) onehot[static_cast<std::size_t>(i) * num_classes + a.labels[i]] = 1.0;
    std::fill_n(cls_weight.begin() + static_cast<std::ptrdiff_t>(i) * num_classes, num_classes, a.weight[i]);
  }
  const double norm = 1.0 / std::max(1, a.num_positive);
  StudentLossTerms out;
  out.classification = ad::scale(
      ad::sum(ad::mul_const(ad::sigmoid_focal(pred.cls, onehot, cfg.focal_alpha, cfg.focal_gamma), cls_weight)), norm);

  if (a.num_positive == 0) {
    out.regression = ad::Var::scalar(0.0);
    out.centerness = ad::Var::scalar(0.0);
  } else {
    std::vector<int> pos;
    std::vector<BoxCCWH> boxes;
    std::vector<double> locs, pos_weight, ctr_target, ctr_entropy;
    for (int i = 0; i < n; ++i) {
      if (a.labels[i] < 0) continue;
      pos.push_back(i);
      boxes.push_back(targets[a.box_index[i]].box);
      const Point2 p = location_of(i, pred.grid_h, pred.grid_w);
      locs.insert(locs.end(), {p.x, p.y, 0.0, 0.0});
      pos_weight.push_back(a.weight[i]);
      ctr_target.push_back(a.centerness[i]);
      ctr_entropy.push_back(binary_entropy(a.centerness[i]));
    }
    const int np = static_cast<int>(pos.size());
    // (l, t, r, b) -> (dx, dy, w, h) about the location.
    static const std::vector<double> kToCcwh = {-0.5, 0.0, 1.0, 0.0,  //
                                                0.0, -0.5, 0.0, 1.0,  //
                                                0.5, 0.0, 1.0, 0.0,   //
                                                0.0, 0.5, 0.0, 1.0};
    const ad::Var dist_pos = ad::gather_rows(pred.dist, pos);
    const ad::Var ccwh = ad::add_const(ad::matmul(dist_pos, ad::Var::constant({4, 4}, kToCcwh)), locs);
    const ad::Var one_minus_giou = ad::add_scalar(ad::neg(giou_rows(ccwh, boxes)), 1.0);
    const ad::Var pw = ad::Var::constant({np, 1}, pos_weight);
    out.regression = ad::scale(ad::sum(ad::mul(one_minus_giou, pw)), norm);
    if (cfg.use_centerness) {
      const ad::Var ctr_pos = ad::gather_rows(pred.ctr, pos);
      std::vector<double> neg_entropy(ctr_entropy.size());
      std::transform(ctr_entropy.begin(), ctr_entropy.end(), neg_entropy.begin(), [](double h) { return -h; });
      out.centerness = ad::scale(ad::sum(ad::mul(ad::add_const(ad::bce_with_logits(ctr_pos, ctr_target), neg_entropy), pw)), norm);
    } else {
      out.centerness = ad::Var::scalar(0.0);
    }
  }
  out.total = ad::add(ad::add(out.classification, out.regression), out.centerness);
  return out;
}

ad::Var loss_student(const StudentPrediction& pred, const TrainTarget& targets, const StudentConfig& cfg) {
  return loss_student_terms(pred, targets, cfg).total;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh) {
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  std::vector<Detection> kept;
  for (const Detection& d : dets) {
    bool suppressed = false;
    for (const Detection& k : kept) {
      if (iou(d.box, k.box) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

std::vector<Detection> decode(const StudentPrediction& pred, const StudentConfig& cfg) {
  const int n = pred.locations();
  const int num_classes = pred.cls.cols();
  std::vector<std::vector<Detection>> per_class(num_classes);
  for (int i = 0; i < n; ++i) {
    const Point2 p = location_of(i, pred.grid_h, pred.grid_w);
    const double ctr = cfg.use_centerness ? 1.0 / (1.0 + std::exp(-pred.ctr.at(i, 0))) : 1.0;
    const double l = pred.dist.at(i, 0), t = pred.dist.at(i, 1), r = pred.dist.at(i, 2), b = pred.dist.at(i, 3);
    const BoxXYXY raw{std::clamp(p.x - l, 0.0, 1.0), std::clamp(p.y - t, 0.0, 1.0), std::clamp(p.x + r, 0.0, 1.0),
                      std::clamp(p.y + b, 0.0, 1.0)};
    if (!(raw.x2 > raw.x1 && raw.y2 > raw.y1)) continue;
    const BoxCCWH box = clamp_to_image(from_corners(raw));
    for (int c = 0; c < num_classes; ++c) {
      const double score = ctr / (1.0 + std::exp(-pred.cls.at(i, c)));
      if (!(score >= cfg.score_threshold) || score <= 0.0) continue;
      per_class[c].push_back({box, c, std::min(score, 1.0)});
    }
  }
  std::vector<Detection> out;
  for (auto& dets : per_class) {
    for (const Detection& d : nms(std::move(dets), cfg.nms_iou)) out.push_back(d);
  }
  std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (out.size() > static_cast<std::size_t>(cfg.top_k)) out.resize(cfg.top_k);
  return out;
}

std::vector<Detection> detect(const StudentModel& m, const ImageSample& img) {
  ad::NoGradGuard guard;
  return decode(m.forward(img), m.config());
}

}  // namespace wssod
