#pragma once

// Checkpoint container, little-endian throughout:
//
//   magic     8 bytes  "WSSODCKP"
//   version   u32      kCheckpointVersion
//   kind      u32 length + UTF-8 bytes ("teacher" or "student")
//   config    u64 length + JSON text (model configuration)
//   meta      u64 length + JSON text (stage, epoch, free-form)
//   step      i64      optimizer step counter
//   rng       u64 length + text (serialized trainer random state; may be empty)
//   count     u32      number of arrays
//   arrays    count x { u32 name length, name, u32 ndim, i64 dims[ndim], f64 values[prod(dims)] }
//
// Model parameters are stored as "param/<name>"; optimizer state keeps its own prefixes.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "wssod/optim.hpp"
#include "wssod/student.hpp"
#include "wssod/teacher.hpp"

namespace wssod {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointShapeError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};
class CheckpointTruncatedError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

struct NamedArray {
  std::string name;
  std::vector<int> shape;
  std::vector<double> values;

  bool operator==(const NamedArray&) const = default;
};

struct Checkpoint {
  std::string kind;
  nlohmann::json config = nlohmann::json::object();
  nlohmann::json meta = nlohmann::json::object();
  std::int64_t step = 0;
  std::string rng_state;
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const;
  bool operator==(const Checkpoint&) const = default;
};

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::string checkpoint_bytes(const Checkpoint& ck);
Checkpoint checkpoint_from_bytes(const std::string& bytes);

void store_parameters(Checkpoint& ck, const nn::ParameterSet& ps);
/// Copies "param/<name>" arrays into an existing set; every parameter must be present with its shape.
void restore_parameters(const Checkpoint& ck, nn::ParameterSet& ps);

void store_optimizer_state(Checkpoint& ck, const optim::StateArrays& state);
optim::StateArrays optimizer_state(const Checkpoint& ck, const std::string& prefix);

Checkpoint teacher_checkpoint(const TeacherModel& m);
TeacherModel teacher_from_checkpoint(const Checkpoint& ck);
Checkpoint student_checkpoint(const StudentModel& m);
StudentModel student_from_checkpoint(const Checkpoint& ck);

void save_checkpoint(const TeacherModel& m, const std::filesystem::path& path);
TeacherModel load_teacher(const std::filesystem::path& path);

}  // namespace wssod
