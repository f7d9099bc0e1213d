#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "wssod/data.hpp"
#include "wssod/evalsuite.hpp"
#include "wssod/objectives.hpp"
#include "wssod/optim.hpp"
#include "wssod/student.hpp"
#include "wssod/teacher.hpp"

namespace wssod {

/// Invalid configuration: unknown keys, wrong types, out-of-range values, unreadable file.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Variant { kBoxOnly, kPointDetr, kPbc };

std::string variant_name(Variant v);
Variant parse_variant(const std::string& s);

struct Schedule {
  int epochs = 1;
  int batch_size = 4;          // images per optimizer step (gradients are averaged)
  double clip_norm = 0.0;      // 0 disables clipping
  bool cosine = true;          // cosine decay of the step size over the run
};

enum class Step2Mix { kMixed, kWeakOnly };

struct BenchSettings {
  std::vector<double> fractions = {0.05, 0.1, 0.2, 0.3, 0.4, 0.5};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::vector<Variant> variants = {Variant::kBoxOnly, Variant::kPointDetr, Variant::kPbc};
  int jobs = 1;
};

struct RunConfig {
  std::string manifest = "data/manifest.json";
  std::string split = "split.json";
  std::uint64_t seed = 1;
  Variant variant = Variant::kPbc;

  SyntheticConfig synthetic;
  std::uint64_t data_seed = 0;

  TeacherConfig teacher;
  StudentConfig student;
  LossWeights loss;
  SymmetricOptions symmetric;
  PointSampling sampling = PointSampling::kUniform;

  optim::AdamOptions teacher_optim;
  Schedule step1{40, 4, 0.0, true};
  Schedule step2{20, 4, 0.0, true};
  Step2Mix step2_mix = Step2Mix::kMixed;

  optim::SgdOptions student_optim;
  Schedule step3{30, 4, 10.0, true};

  EvalConfig eval;
  BenchSettings bench;

  /// Loss weights after applying the variant: point_detr zeroes both regularizers.
  LossWeights effective_loss() const;
  void validate() const;
};

nlohmann::json to_json(const TeacherConfig& c);
nlohmann::json to_json(const StudentConfig& c);
nlohmann::json to_json(const SyntheticConfig& c);
nlohmann::json to_json(const RunConfig& c);
TeacherConfig teacher_config_from_json(const nlohmann::json& j);
StudentConfig student_config_from_json(const nlohmann::json& j);
SyntheticConfig synthetic_config_from_json(const nlohmann::json& j);
RunConfig run_config_from_json(const nlohmann::json& j);

/// Applies `a.b.c=value` onto a JSON tree whose keys act as the schema. The value is
/// parsed as JSON when possible and taken as a string otherwise.
void apply_override(nlohmann::json& tree, const std::string& assignment);

/// Overlays `patch` onto `base`; keys absent from `base` are errors.
void merge_strict(nlohmann::json& base, const nlohmann::json& patch, const std::string& where = "");

/// `base` (built-in defaults unless given), then the file (if any), then overrides.
RunConfig load_run_config(const std::filesystem::path& file, const std::vector<std::string>& overrides,
                          const RunConfig& base = RunConfig{});

/// Defaults sized for the desk benchmark (64x64 images, narrow models, short schedules).
RunConfig desk_preset();

}  // namespace wssod
