#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wssod/checkpoint.hpp"
#include "wssod/config.hpp"
#include "wssod/data.hpp"
#include "wssod/evalsuite.hpp"

namespace wssod {

/// A trained (or partially trained) stage: model + optimizer + trainer random state, plus its loss curve.
struct StageResult {
  Checkpoint checkpoint;
  std::vector<double> epoch_losses;
};

/// Stops a stage early after this many completed epochs (in total, counting resumed ones).
struct StageControl {
  const Checkpoint* resume = nullptr;
  int stop_after_epochs = -1;
};

StageResult train_teacher_step1(const RunConfig& cfg, const Dataset& data, const SplitPlan& split,
                                StageControl control = {});

/// Fine-tunes the step-1 teacher; an empty weak set makes this a no-op that returns the input.
StageResult refine_teacher_step2(const RunConfig& cfg, const Dataset& data, const SplitPlan& split,
                                 const Checkpoint& step1, StageControl control = {});

/// One pseudo box per point on every weak image; images without points are skipped.
Manifest generate_pseudo_labels(const BoxPredictor& teacher, const Dataset& data, std::span<const std::string> weak_ids);

/// Trains on ground truth of the fully labeled images plus the pseudo manifest (may be null).
StageResult train_student_step3(const RunConfig& cfg, const Dataset& data, const SplitPlan& split,
                                const Manifest* pseudo, StageControl control = {});

/// Point-conditioned teacher detections on images that carry points: class from the point, score 1.
EvalReport evaluate_teacher(const BoxPredictor& teacher, const Dataset& data, std::span<const std::string> ids,
                            const EvalConfig& cfg);
std::vector<ImageDetections> student_detections(const StudentModel& student, const Dataset& data,
                                                std::span<const std::string> ids);
EvalReport evaluate_student(const StudentModel& student, const Dataset& data, std::span<const std::string> ids,
                            const EvalConfig& cfg);
std::vector<ImageGroundTruth> ground_truth(const Dataset& data, std::span<const std::string> ids);

struct CellResult {
  Variant variant = Variant::kPbc;
  double fraction = 0.0;
  std::uint64_t seed = 0;
  std::optional<double> teacher_map;  // absent for box_only
  double student_map = 0.0;
  double wall_seconds = 0.0;
  bool ok = true;
  std::string error;

  bool same_cell(const CellResult& o) const { return variant == o.variant && fraction == o.fraction && seed == o.seed; }
};

/// The full pipeline for one (variant, fraction, seed) on an in-memory dataset.
CellResult run_cell(const RunConfig& cfg, const Dataset& data, Variant variant, double fraction, std::uint64_t seed);

std::string cell_to_jsonl(const CellResult& r);
CellResult cell_from_jsonl(const std::string& line);
std::vector<CellResult> load_results(const std::filesystem::path& path);

struct BenchmarkResult {
  std::vector<CellResult> cells;
};

/// Runs every requested cell not already in the store (resume), appending one line per finished cell.
/// Failed cells are recorded and the sweep continues.
BenchmarkResult run_benchmark(const RunConfig& cfg, const Dataset& data, const std::filesystem::path& store);

/// results.csv (variant x fraction, mean and sd over seeds) and map_vs_fraction.svg.
void emit_report(const BenchmarkResult& result, const std::filesystem::path& out_dir);

}  // namespace wssod
