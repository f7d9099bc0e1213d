#include "wssod/evalsuite.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

namespace wssod {

using nlohmann::json;

void EvalConfig::validate() const {
  if (iou_thresholds.empty()) throw EvalError("eval config: at least one IoU threshold is required");
  for (double t : iou_thresholds) {
    if (!(t > 0.0 && t < 1.0)) throw EvalError("eval config: IoU thresholds must lie in (0, 1)");
  }
  if (!(score_floor >= 0.0 && score_floor <= 1.0)) throw EvalError("eval config: score floor must lie in [0, 1]");
}

namespace {

std::vector<int> score_order(std::span<const Detection> dets) {
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return dets[a].score > dets[b].score; });
  return order;
}

// Greedy step shared by per-image and pooled matching.
bool match_one(const BoxCCWH& det, std::span<const BoxCCWH> gts, std::vector<bool>& used, double iou_thresh) {
  int best = -1;
  double best_iou = -1.0;
  for (std::size_t g = 0; g < gts.size(); ++g) {
    if (used[g]) continue;
    const double v = iou(det, gts[g]);
    if (v > best_iou) {
      best_iou = v;
      best = static_cast<int>(g);
    }
  }
  if (best >= 0 && best_iou >= iou_thresh) {
    used[best] = true;
    return true;
  }
  return false;
}

}  // namespace

std::vector<bool> match_detections(std::span<const Detection> dets, std::span<const BoxCCWH> gts, double iou_thresh) {
  std::vector<bool> flags(dets.size(), false);
  std::vector<bool> used(gts.size(), false);
  for (int i : score_order(dets)) flags[i] = match_one(dets[i].box, gts, used, iou_thresh);
  return flags;
}

std::optional<double> average_precision(const std::vector<bool>& flags, int num_gt) {
  if (num_gt < 0) throw EvalError("average_precision: negative ground-truth count");
  if (num_gt == 0) {
    if (flags.empty()) return std::nullopt;
    return 0.0;
  }
  const std::size_t n = flags.size();
  std::vector<long double> precision(n);
  std::vector<int> tp_cum(n);
  int tp = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (flags[k]) ++tp;
    tp_cum[k] = tp;
    precision[k] = static_cast<long double>(tp) / static_cast<long double>(k + 1);
  }
  // Precision envelope: running maximum from the right.
  for (std::size_t k = n; k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  long double area = 0.0L;
  for (std::size_t k = 0; k < n; ++k) {
    if (flags[k]) area += precision[k];  // recall rises by 1/num_gt exactly at TPs
  }
  return static_cast<double>(area / static_cast<long double>(num_gt));
}

EvalReport evaluate(std::span<const ImageDetections> dets, std::span<const ImageGroundTruth> gts, const EvalConfig& cfg,
                    int num_classes) {
  cfg.validate();
  if (num_classes < 1) throw EvalError("evaluate: need at least one class");
  std::map<std::string, std::size_t> gt_index;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    if (!gt_index.emplace(gts[i].image_id, i).second) throw EvalError("evaluate: duplicate ground-truth image " + gts[i].image_id);
    for (const auto& o : gts[i].objects) {
      if (o.class_id < 0 || o.class_id >= num_classes) {
        throw EvalError("evaluate: unknown class id " + std::to_string(o.class_id) + " in ground truth of " + gts[i].image_id);
      }
    }
  }
  std::set<std::string> seen;
  for (const auto& d : dets) {
    if (!gt_index.count(d.image_id)) throw EvalError("evaluate: detections for unknown image " + d.image_id);
    if (!seen.insert(d.image_id).second) throw EvalError("evaluate: duplicate detection entry for image " + d.image_id);
    for (const auto& det : d.detections) {
      if (det.class_id < 0 || det.class_id >= num_classes) {
        throw EvalError("evaluate: unknown class id " + std::to_string(det.class_id) + " in detections of " + d.image_id);
      }
    }
  }

  struct Pooled {
    std::size_t gt_image;
    BoxCCWH box;
    double score;
  };
  EvalReport report;
  report.gt_per_class.assign(num_classes, 0);
  report.dets_per_class.assign(num_classes, 0);
  std::vector<std::vector<Pooled>> pooled(num_classes);
  for (const auto& d : dets) {
    for (const auto& det : d.detections) {
      if (det.score < cfg.score_floor) continue;
      pooled[det.class_id].push_back({gt_index.at(d.image_id), det.box, det.score});
    }
  }
  std::vector<std::vector<std::vector<BoxCCWH>>> gt_boxes(num_classes, std::vector<std::vector<BoxCCWH>>(gts.size()));
  for (std::size_t i = 0; i < gts.size(); ++i) {
    for (const auto& o : gts[i].objects) gt_boxes[o.class_id][i].push_back(o.box);
  }
  for (int c = 0; c < num_classes; ++c) {
    for (const auto& per_image : gt_boxes[c]) report.gt_per_class[c] += static_cast<int>(per_image.size());
    report.dets_per_class[c] = static_cast<int>(pooled[c].size());
    std::stable_sort(pooled[c].begin(), pooled[c].end(), [](const Pooled& a, const Pooled& b) { return a.score > b.score; });
  }

  const std::size_t nt = cfg.iou_thresholds.size();
  report.map_per_threshold.assign(nt, 0.0);
  std::vector<std::vector<std::optional<double>>> ap(num_classes, std::vector<std::optional<double>>(nt));
  for (int c = 0; c < num_classes; ++c) {
    for (std::size_t t = 0; t < nt; ++t) {
      std::vector<std::vector<bool>> used(gts.size());
      for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gt_boxes[c][i].size(), false);
      std::vector<bool> flags;
      flags.reserve(pooled[c].size());
      for (const Pooled& p : pooled[c]) {
        flags.push_back(match_one(p.box, gt_boxes[c][p.gt_image], used[p.gt_image], cfg.iou_thresholds[t]));
      }
      ap[c][t] = average_precision(flags, report.gt_per_class[c]);
      report.per_class.push_back({c, cfg.iou_thresholds[t], ap[c][t], report.gt_per_class[c], report.dets_per_class[c]});
    }
  }
  for (std::size_t t = 0; t < nt; ++t) {
    double sum = 0.0;
    int defined = 0;
    for (int c = 0; c < num_classes; ++c) {
      if (ap[c][t]) {
        sum += *ap[c][t];
        ++defined;
      }
    }
    report.map_per_threshold[t] = defined > 0 ? sum / defined : 0.0;
  }
  report.map = std::accumulate(report.map_per_threshold.begin(), report.map_per_threshold.end(), 0.0) /
               static_cast<double>(nt);
  return report;
}

void save_detections(std::span<const ImageDetections> dets, const std::filesystem::path& path) {
  json arr = json::array();
  for (const auto& d : dets) {
    for (const auto& det : d.detections) {
      arr.push_back({{"image_id", d.image_id},
                     {"class_id", det.class_id},
                     {"bbox", {det.box.cx, det.box.cy, det.box.w, det.box.h}},
                     {"score", det.score}});
    }
  }
  json images = json::array();
  for (const auto& d : dets) images.push_back(d.image_id);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write detections file " + path.string());
  out << json{{"images", images}, {"detections", arr}}.dump(1) << "\n";
}

std::vector<ImageDetections> load_detections(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read detections file " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw EvalError("detections file " + path.string() + ": " + e.what());
  }
  std::vector<ImageDetections> out;
  std::map<std::string, std::size_t> index;
  auto slot = [&](const std::string& id) -> ImageDetections& {
    auto [it, inserted] = index.emplace(id, out.size());
    if (inserted) out.push_back({id, {}});
    return out[it->second];
  };
  try {
    if (doc.contains("images")) {
      for (const auto& id : doc.at("images")) slot(id.get<std::string>());
    }
    for (const auto& e : doc.at("detections")) {
      const auto& b = e.at("bbox");
      if (b.size() != 4) throw EvalError("detections file: bbox must have 4 numbers");
      Detection d{{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()},
                  e.at("class_id").get<int>(),
                  e.at("score").get<double>()};
      if (!d.box.valid()) throw EvalError("detections file: invalid box " + to_string(d.box));
      if (!(d.score >= 0.0 && d.score <= 1.0)) throw EvalError("detections file: score outside [0, 1]");
      slot(e.at("image_id").get<std::string>()).detections.push_back(d);
    }
  } catch (const json::exception& e) {
    throw EvalError("detections file " + path.string() + ": " + e.what());
  }
  return out;
}

std::string report_to_json(const EvalReport& r) {
  json classes = json::array();
  for (const auto& c : r.per_class) {
    classes.push_back({{"class_id", c.class_id},
                       {"threshold", c.threshold},
                       {"ap", c.ap ? json(*c.ap) : json(nullptr)},
                       {"num_gt", c.num_gt},
                       {"num_dets", c.num_dets}});
  }
  return json{{"map", r.map}, {"map_per_threshold", r.map_per_threshold}, {"per_class", classes}}.dump(1);
}

std::string report_to_csv(const EvalReport& r) {
  std::ostringstream out;
  out << "class,threshold,ap\n";
  char buf[64];
  for (const auto& c : r.per_class) {
    out << c.class_id << ",";
    std::snprintf(buf, sizeof buf, "%.2f", c.threshold);
    out << buf << ",";
    if (c.ap) {
      std::snprintf(buf, sizeof buf, "%.6f", *c.ap);
      out << buf;
    }
    out << "\n";
  }
  std::snprintf(buf, sizeof buf, "%.6f", r.map);
  out << "mAP,all," << buf << "\n";
  return out.str();
}

}  // namespace wssod
