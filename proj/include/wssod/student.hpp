#pragma once

#include <span>
#include <vector>

#include "wssod/autodiff.hpp"
#include "wssod/data.hpp"
#include "wssod/nn.hpp"

namespace wssod {

struct StudentConfig {
  int num_classes = 3;
  std::vector<int> backbone_channels = {16, 32, 64, 64};
  std::vector<int> backbone_strides = {2, 2, 2, 1};
  int head_channels = 64;
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
  double score_threshold = 0.05;
  double nms_iou = 0.5;
  bool use_centerness = true;
  /// Multiplies every loss term at locations assigned to a pseudo box.
  double pseudo_weight = 1.0;
  int top_k = 100;

  int stride() const;
  void validate() const;
  bool operator==(const StudentConfig&) const = default;
};

struct Detection {
  BoxCCWH box;
  int class_id = 0;
  double score = 0.0;

  bool operator==(const Detection&) const = default;
};

/// Per-image training targets; provenance is carried for diagnostics and weighting.
using TrainTarget = std::vector<ObjectAnnotation>;

/// Dense maps flattened row-major over the grid.
struct StudentPrediction {
  ad::Var cls;   // [n, C] logits
  ad::Var dist;  // [n, 4] left, top, right, bottom (normalized, >= 0)
  ad::Var ctr;   // [n, 1] centerness logit
  int grid_h = 0;
  int grid_w = 0;

  int locations() const { return grid_h * grid_w; }
};

/// Centre of grid cell `index` in normalized coordinates.
Point2 location_of(int index, int grid_h, int grid_w);

struct Assignment {
  std::vector<int> labels;         // class id per location, -1 for negatives
  std::vector<int> box_index;      // target index per location, -1 for negatives
  std::vector<double> ltrb;        // [n, 4], zero at negatives
  std::vector<double> centerness;  // zero at negatives
  std::vector<double> weight;      // per location; 1 unless the box is pseudo
  int num_positive = 0;
};

/// A location is positive iff it lies strictly inside a target box; the smallest box wins.
Assignment assign_targets(const TrainTarget& targets, int grid_h, int grid_w, double pseudo_weight = 1.0);

double centerness_target(double l, double t, double r, double b);

class StudentModel {
 public:
  StudentModel(const StudentConfig& cfg, std::uint64_t seed);
  StudentModel(StudentModel&&) = default;
  StudentModel& operator=(StudentModel&&) = default;
  StudentModel(const StudentModel&) = delete;
  StudentModel& operator=(const StudentModel&) = delete;

  StudentModel clone() const;

  const StudentConfig& config() const { return cfg_; }
  nn::ParameterSet& parameters() { return params_; }
  const nn::ParameterSet& parameters() const { return params_; }

  StudentPrediction forward(const ImageSample& img) const;

 private:
  StudentConfig cfg_;
  nn::ParameterSet params_;
  std::vector<nn::Conv2d> backbone_;
  nn::Conv2d head_;
  nn::Conv2d out_;
};

StudentPrediction student_forward(const StudentModel& m, const ImageSample& img);

struct StudentLossTerms {
  ad::Var classification;
  ad::Var regression;
  ad::Var centerness;
  ad::Var total;
};

/// Focal loss over all locations / max(1, positives) + mean (1 - GIoU) over positives
/// + centerness cross-entropy over positives (measured relative to the target entropy, so 0 at the optimum).
StudentLossTerms loss_student_terms(const StudentPrediction& pred, const TrainTarget& targets, const StudentConfig& cfg);
ad::Var loss_student(const StudentPrediction& pred, const TrainTarget& targets, const StudentConfig& cfg);

/// Greedy NMS on one class: descending score, drop boxes with IoU > thresh against a kept one.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh);

/// Thresholded, clamped, per-class NMS detections sorted by descending score.
std::vector<Detection> decode(const StudentPrediction& pred, const StudentConfig& cfg);

std::vector<Detection> detect(const StudentModel& m, const ImageSample& img);

}  // namespace wssod
