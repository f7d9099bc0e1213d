#include "wssod/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "wssod/config.hpp"

namespace wssod {

namespace {

constexpr char kMagic[8] = {'W', 'S', 'S', 'O', 'D', 'C', 'K', 'P'};

class Writer {
 public:
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) { le(v); }
  void u64(std::uint64_t v) { le(v); }
  void i64(std::int64_t v) { le(static_cast<std::uint64_t>(v)); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void str32(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void str64(const std::string& s) {
    u64(s.size());
    raw(s.data(), s.size());
  }
  std::string take() { return std::move(out_); }

 private:
  template <class T>
  void le(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& data) : data_(data) {}

  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() { return le<std::uint32_t>(); }
  std::uint64_t u64() { return le<std::uint64_t>(); }
  std::int64_t i64() { return static_cast<std::int64_t>(le<std::uint64_t>()); }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  std::string str(std::uint64_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str32() { return str(u32()); }
  std::string str64() { return str(u64()); }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > data_.size() - pos_) {
      throw CheckpointTruncatedError("checkpoint truncated at byte " + std::to_string(pos_) + " (needed " +
                                     std::to_string(n) + " more)");
    }
  }
  template <class T>
  T le() {
    unsigned char b[sizeof(T)];
    raw(b, sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(b[i]) << (8 * i);
    return v;
  }
  const std::string& data_;
  std::size_t pos_ = 0;
};

constexpr const char* kParamPrefix = "param/";

}  // namespace

const NamedArray* Checkpoint::find(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return &a;
  }
  return nullptr;
}

std::string checkpoint_bytes(const Checkpoint& ck) {
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.u32(kCheckpointVersion);
  w.str32(ck.kind);
  w.str64(ck.config.dump());
  w.str64(ck.meta.dump());
  w.i64(ck.step);
  w.str64(ck.rng_state);
  w.u32(static_cast<std::uint32_t>(ck.arrays.size()));
  for (const auto& a : ck.arrays) {
    std::size_t n = 1;
    for (int d : a.shape) n *= static_cast<std::size_t>(d);
    if (n != a.values.size()) throw CheckpointShapeError("array " + a.name + " does not match its shape");
    w.str32(a.name);
    w.u32(static_cast<std::uint32_t>(a.shape.size()));
    for (int d : a.shape) w.i64(d);
    for (double v : a.values) w.f64(v);
  }
  return w.take();
}

Checkpoint checkpoint_from_bytes(const std::string& bytes) {
  Reader r(bytes);
  char magic[8];
  r.raw(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw CheckpointError("not a checkpoint file (bad magic)");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ck;
  ck.kind = r.str32();
  try {
    ck.config = nlohmann::json::parse(r.str64());
    ck.meta = nlohmann::json::parse(r.str64());
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError(std::string("checkpoint header is corrupt: ") + e.what());
  }
  ck.step = r.i64();
  ck.rng_state = r.str64();
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedArray a;
    a.name = r.str32();
    const std::uint32_t ndim = r.u32();
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const std::int64_t dim = r.i64();
      if (dim < 0 || dim > (1LL << 31)) throw CheckpointShapeError("array " + a.name + " has an invalid dimension");
      a.shape.push_back(static_cast<int>(dim));
      n *= static_cast<std::size_t>(dim);
    }
    if (n > bytes.size() / 8) throw CheckpointTruncatedError("array " + a.name + " extends past the end of the file");
    a.values.resize(n);
    for (double& v : a.values) v = r.f64();
    ck.arrays.push_back(std::move(a));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after the last array");
  return ck;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const std::string bytes = checkpoint_bytes(ck);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write then rename so an interrupted save never leaves a half-written checkpoint.
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot read checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return checkpoint_from_bytes(bytes);
}

void store_parameters(Checkpoint& ck, const nn::ParameterSet& ps) {
  for (const auto& [name, v] : ps.entries()) ck.arrays.push_back({kParamPrefix + name, v.shape(), v.value()});
}

void restore_parameters(const Checkpoint& ck, nn::ParameterSet& ps) {
  for (const auto& [name, v] : ps.entries()) {
    const NamedArray* a = ck.find(kParamPrefix + name);
    if (!a) throw CheckpointShapeError("checkpoint lacks parameter " + name);
    if (a->shape != v.shape()) throw CheckpointShapeError("parameter " + name + " has a different shape in the checkpoint");
    ad::Var dst = v;
    dst.mutable_value() = a->values;
  }
}

void store_optimizer_state(Checkpoint& ck, const optim::StateArrays& state) {
  for (const auto& [name, values] : state) {
    ck.arrays.push_back({name, {static_cast<int>(values.size())}, values});
  }
}

optim::StateArrays optimizer_state(const Checkpoint& ck, const std::string& prefix) {
  optim::StateArrays out;
  for (const auto& a : ck.arrays) {
    if (a.name.rfind(prefix, 0) == 0) out[a.name] = a.values;
  }
  return out;
}

Checkpoint teacher_checkpoint(const TeacherModel& m) {
  Checkpoint ck;
  ck.kind = "teacher";
  ck.config = to_json(m.config());
  store_parameters(ck, m.parameters());
  return ck;
}

TeacherModel teacher_from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != "teacher") throw CheckpointError("checkpoint holds a " + ck.kind + ", not a teacher");
  TeacherConfig cfg;
  try {
    cfg = teacher_config_from_json(ck.config);
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("teacher config block: ") + e.what());
  }
  TeacherModel m(cfg, 0);
  restore_parameters(ck, m.parameters());
  return m;
}

Checkpoint student_checkpoint(const StudentModel& m) {
  Checkpoint ck;
  ck.kind = "student";
  ck.config = to_json(m.config());
  store_parameters(ck, m.parameters());
  return ck;
}

StudentModel student_from_checkpoint(const Checkpoint& ck) {
  if (ck.kind != "student") throw CheckpointError("checkpoint holds a " + ck.kind + ", not a student");
  StudentConfig cfg;
  try {
    cfg = student_config_from_json(ck.config);
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("student config block: ") + e.what());
  }
  StudentModel m(cfg, 0);
  restore_parameters(ck, m.parameters());
  return m;
}

void save_checkpoint(const TeacherModel& m, const std::filesystem::path& path) { save_checkpoint(teacher_checkpoint(m), path); }

TeacherModel load_teacher(const std::filesystem::path& path) { return teacher_from_checkpoint(load_checkpoint(path)); }

}  // namespace wssod
