#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "wssod/data.hpp"
#include "wssod/student.hpp"

namespace wssod {

struct EvalConfig {
  std::vector<double> iou_thresholds = {0.5};
  double score_floor = 0.0;

  void validate() const;
};

class EvalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ClassResult {
  int class_id = 0;
  double threshold = 0.5;
  std::optional<double> ap;  // empty when the class has neither ground truth nor detections
  int num_gt = 0;
  int num_dets = 0;
};

struct EvalReport {
  std::vector<ClassResult> per_class;  // class-major, thresholds inner
  std::vector<double> map_per_threshold;
  double map = 0.0;
  std::vector<int> gt_per_class;
  std::vector<int> dets_per_class;
};

struct ImageDetections {
  std::string image_id;
  std::vector<Detection> detections;
};

struct ImageGroundTruth {
  std::string image_id;
  std::vector<ObjectAnnotation> objects;
};

/// Greedy matching of one class on one image. Flags line up with the input order
/// (true = TP); detections are visited by descending score with ties in input order.
std::vector<bool> match_detections(std::span<const Detection> dets, std::span<const BoxCCWH> gts, double iou_thresh);

/// All-points interpolated AP from TP flags already sorted by descending score.
std::optional<double> average_precision(const std::vector<bool>& flags, int num_gt);

EvalReport evaluate(std::span<const ImageDetections> dets, std::span<const ImageGroundTruth> gts, const EvalConfig& cfg,
                    int num_classes);

// Detection files: {"detections": [{"image_id", "class_id", "bbox": [cx, cy, w, h], "score"}]}.
void save_detections(std::span<const ImageDetections> dets, const std::filesystem::path& path);
std::vector<ImageDetections> load_detections(const std::filesystem::path& path);

std::string report_to_json(const EvalReport& r);
/// Rows of class,threshold,ap (ap empty when undefined) plus a final mAP row.
std::string report_to_csv(const EvalReport& r);

}  // namespace wssod
