#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "wssod/data.hpp"

namespace wssod {

using nlohmann::json;

namespace {

// Manifest schema. Keys outside these sets are rejected.
const std::set<std::string> kTopKeys = {"version", "classes", "entries"};
const std::set<std::string> kEntryKeys = {"image", "width", "height", "objects", "points"};
const std::set<std::string> kObjectKeys = {"class_id", "bbox", "provenance"};
const std::set<std::string> kPointKeys = {"x", "y", "class_id", "source_object"};
const std::set<std::string> kSplitKeys = {"fraction", "seed", "fully_labeled", "weak", "test"};

void check_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where, int entry) {
  if (!obj.is_object()) throw ManifestError(where + " must be an object", entry);
  for (const auto& [k, v] : obj.items()) {
    if (!allowed.contains(k)) throw ManifestError("unknown key '" + k + "' in " + where, entry);
  }
}

const json& require(const json& obj, const char* key, const std::string& where, int entry) {
  auto it = obj.find(key);
  if (it == obj.end()) throw ManifestError("missing key '" + std::string(key) + "' in " + where, entry);
  return *it;
}

double get_number(const json& obj, const char* key, const std::string& where, int entry) {
  const json& v = require(obj, key, where, entry);
  if (!v.is_number()) throw ManifestError("'" + std::string(key) + "' in " + where + " must be a number", entry);
  return v.get<double>();
}

int get_int(const json& obj, const char* key, const std::string& where, int entry) {
  const json& v = require(obj, key, where, entry);
  if (!v.is_number_integer()) throw ManifestError("'" + std::string(key) + "' in " + where + " must be an integer", entry);
  return v.get<int>();
}

bool box_in_image(const BoxCCWH& b) {
  constexpr double tol = 1e-9;
  if (!b.valid()) return false;
  const BoxXYXY c = to_corners(b);
  return c.x1 >= -tol && c.y1 >= -tol && c.x2 <= 1.0 + tol && c.y2 <= 1.0 + tol;
}

json entry_to_json(const ManifestEntry& e) {
  json objects = json::array();
  for (const auto& o : e.objects) {
    json jo = {{"class_id", o.class_id}, {"bbox", {o.box.cx, o.box.cy, o.box.w, o.box.h}}};
    if (o.provenance == Provenance::kPseudo) jo["provenance"] = "pseudo";
    objects.push_back(std::move(jo));
  }
  json points = json::array();
  for (const auto& p : e.points) {
    json jp = {{"x", p.pos.x}, {"y", p.pos.y}, {"class_id", p.class_id}};
    if (p.source_object) jp["source_object"] = *p.source_object;
    points.push_back(std::move(jp));
  }
  return {{"image", e.image}, {"width", e.width}, {"height", e.height}, {"objects", objects}, {"points", points}};
}

ManifestEntry entry_from_json(const json& je, int idx, int num_classes) {
  check_keys(je, kEntryKeys, "entry", idx);
  ManifestEntry e;
  const json& image = require(je, "image", "entry", idx);
  if (!image.is_string() || image.get<std::string>().empty()) throw ManifestError("'image' must be a non-empty string", idx);
  e.image = image.get<std::string>();
  e.width = get_int(je, "width", "entry", idx);
  e.height = get_int(je, "height", "entry", idx);
  if (e.width <= 0 || e.height <= 0) throw ManifestError("width/height must be positive", idx);

  const json& objs = require(je, "objects", "entry", idx);
  if (!objs.is_array()) throw ManifestError("'objects' must be an array", idx);
  for (const json& jo : objs) {
    check_keys(jo, kObjectKeys, "object", idx);
    ObjectAnnotation o;
    o.class_id = get_int(jo, "class_id", "object", idx);
    if (o.class_id < 0 || o.class_id >= num_classes) throw ManifestError("object class_id out of range", idx);
    const json& bb = require(jo, "bbox", "object", idx);
    if (!bb.is_array() || bb.size() != 4 || !std::all_of(bb.begin(), bb.end(), [](const json& v) { return v.is_number(); })) {
      throw ManifestError("'bbox' must be an array of 4 numbers", idx);
    }
    o.box = {bb[0].get<double>(), bb[1].get<double>(), bb[2].get<double>(), bb[3].get<double>()};
    if (!box_in_image(o.box)) throw ManifestError("invalid box " + to_string(o.box), idx);
    if (auto it = jo.find("provenance"); it != jo.end()) {
      if (*it == "pseudo") {
        o.provenance = Provenance::kPseudo;
      } else if (*it != "gt") {
        throw ManifestError("provenance must be 'gt' or 'pseudo'", idx);
      }
    }
    e.objects.push_back(o);
  }

  if (auto it = je.find("points"); it != je.end()) {
    if (!it->is_array()) throw ManifestError("'points' must be an array", idx);
    for (const json& jp : *it) {
      check_keys(jp, kPointKeys, "point", idx);
      PointAnnotation p;
      p.pos = {get_number(jp, "x", "point", idx), get_number(jp, "y", "point", idx)};
      if (!p.pos.valid()) throw ManifestError("point outside [0,1]^2", idx);
      p.class_id = get_int(jp, "class_id", "point", idx);
      if (p.class_id < 0 || p.class_id >= num_classes) throw ManifestError("point class_id out of range", idx);
      if (auto so = jp.find("source_object"); so != jp.end()) {
        if (!so->is_number_integer()) throw ManifestError("'source_object' must be an integer", idx);
        const int s = so->get<int>();
        if (s < 0 || s >= static_cast<int>(e.objects.size())) throw ManifestError("source_object out of range", idx);
        p.source_object = s;
      }
      e.points.push_back(p);
    }
  }
  return e;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace

const ManifestEntry* Manifest::find(const std::string& id) const {
  for (const auto& e : entries) {
    if (e.image == id) return &e;
  }
  return nullptr;
}

std::string manifest_to_text(const Manifest& m) {
  json entries = json::array();
  for (const auto& e : m.entries) entries.push_back(entry_to_json(e));
  json doc = {{"version", Manifest::kVersion}, {"classes", m.classes}, {"entries", entries}};
  return doc.dump(1) + "\n";
}

void save_manifest(const Manifest& m, const std::filesystem::path& path) { write_file(path, manifest_to_text(m)); }

Manifest load_manifest(const std::filesystem::path& path, ManifestLoadOptions opts) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ManifestError(std::string("malformed manifest: ") + e.what(), -1);
  }
  check_keys(doc, kTopKeys, "manifest", -1);
  if (get_int(doc, "version", "manifest", -1) != Manifest::kVersion) {
    throw ManifestError("unsupported manifest version", -1);
  }
  Manifest m;
  m.root = path.parent_path();
  const json& classes = require(doc, "classes", "manifest", -1);
  if (!classes.is_array() || classes.empty()) throw ManifestError("'classes' must be a non-empty array", -1);
  for (const json& c : classes) {
    if (!c.is_string()) throw ManifestError("class names must be strings", -1);
    m.classes.push_back(c.get<std::string>());
  }
  const json& entries = require(doc, "entries", "manifest", -1);
  if (!entries.is_array()) throw ManifestError("'entries' must be an array", -1);
  std::set<std::string> seen;
  int idx = 0;
  for (const json& je : entries) {
    ManifestEntry e = entry_from_json(je, idx, m.num_classes());
    if (!seen.insert(e.image).second) throw ManifestError("duplicate image " + e.image, idx);
    if (opts.check_images) {
      const auto p = m.image_path(e);
      if (!std::filesystem::exists(p)) throw ManifestError("missing image " + p.string(), idx);
      std::pair<int, int> dims;
      try {
        dims = png_dimensions(p);
      } catch (const std::exception& ex) {
        throw ManifestError(std::string("unreadable image: ") + ex.what(), idx);
      }
      if (dims.first != e.height || dims.second != e.width) throw ManifestError("image dimensions differ from manifest", idx);
    }
    m.entries.push_back(std::move(e));
    ++idx;
  }
  return m;
}

void save_split(const SplitPlan& s, const std::filesystem::path& path) {
  json doc = {{"fraction", s.fraction},
              {"seed", s.seed},
              {"fully_labeled", s.fully_labeled_ids},
              {"weak", s.weak_ids},
              {"test", s.test_ids}};
  write_file(path, doc.dump(1) + "\n");
}

SplitPlan load_split(const std::filesystem::path& path) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ManifestError(std::string("malformed split file: ") + e.what(), -1);
  }
  check_keys(doc, kSplitKeys, "split", -1);
  SplitPlan s;
  try {
    s.fraction = require(doc, "fraction", "split", -1).get<double>();
    s.seed = require(doc, "seed", "split", -1).get<std::uint64_t>();
    s.fully_labeled_ids = require(doc, "fully_labeled", "split", -1).get<std::vector<std::string>>();
    s.weak_ids = require(doc, "weak", "split", -1).get<std::vector<std::string>>();
    s.test_ids = require(doc, "test", "split", -1).get<std::vector<std::string>>();
  } catch (const json::type_error& e) {
    throw ManifestError(std::string("malformed split file: ") + e.what(), -1);
  }
  if (!(s.fraction > 0.0 && s.fraction <= 1.0)) throw ManifestError("split fraction outside (0,1]", -1);
  return s;
}

Manifest generate_synthetic(const SyntheticConfig& cfg, std::uint64_t seed, const std::filesystem::path& out_dir) {
  cfg.validate();
  std::filesystem::create_directories(out_dir / "images");
  Manifest m;
  m.root = out_dir;
  for (int c = 0; c < cfg.num_classes; ++c) m.classes.push_back(texture_name(class_texture(c)) + "_" + std::to_string(c));
  for (int i = 0; i < cfg.num_images; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "images/%06d.png", i);
    Rng rng(derive_seed(seed, hash_string("synthetic-image"), static_cast<std::uint64_t>(i)));
    auto [img, objects] = render_synthetic_image(cfg, rng, name);
    write_png_gray(out_dir / name, img);
    ManifestEntry e;
    e.image = name;
    e.width = cfg.width;
    e.height = cfg.height;
    e.objects = std::move(objects);
    for (int k = 0; k < static_cast<int>(e.objects.size()); ++k) {
      PointAnnotation p;
      p.pos = sample_point(e.objects[k].box, rng, cfg.point_sampling);
      p.class_id = e.objects[k].class_id;
      p.source_object = k;
      e.points.push_back(p);
    }
    m.entries.push_back(std::move(e));
  }
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

}  // namespace wssod
