#include "wssod/config.hpp"

#include <fstream>
#include <sstream>

namespace wssod {

using nlohmann::json;

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kBoxOnly:
      return "box_only";
    case Variant::kPointDetr:
      return "point_detr";
    case Variant::kPbc:
      return "pbc";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  if (s == "box_only") return Variant::kBoxOnly;
  if (s == "point_detr") return Variant::kPointDetr;
  if (s == "pbc") return Variant::kPbc;
  throw ConfigError("unknown variant '" + s + "' (expected box_only, point_detr or pbc)");
}

namespace {

template <class E>
struct EnumName {
  E value;
  const char* name;
};

constexpr EnumName<BoxParam> kBoxParams[] = {{BoxParam::kAbsolute, "absolute"},
                                             {BoxParam::kReferenceLogit, "reference_logit"},
                                             {BoxParam::kPointDistances, "point_distances"}};
constexpr EnumName<PointSampling> kSamplings[] = {{PointSampling::kUniform, "uniform"},
                                                  {PointSampling::kCenterGaussian, "center_gaussian"}};
constexpr EnumName<Step2Mix> kMixes[] = {{Step2Mix::kMixed, "mixed"}, {Step2Mix::kWeakOnly, "weak_only"}};

template <class E, std::size_t N>
std::string enum_to(const EnumName<E> (&table)[N], E v) {
  for (const auto& e : table) {
    if (e.value == v) return e.name;
  }
  return "?";
}

template <class E, std::size_t N>
E enum_from(const EnumName<E> (&table)[N], const json& j, const char* what) {
  const std::string s = j.get<std::string>();
  for (const auto& e : table) {
    if (s == e.name) return e.value;
  }
  std::string options;
  for (const auto& e : table) options += std::string(options.empty() ? "" : ", ") + e.name;
  throw ConfigError(std::string("unknown ") + what + " '" + s + "' (expected one of " + options + ")");
}

json to_json(const encoding::SinusoidParams& p) { return {{"temperature", p.temperature}, {"coord_scale", p.coord_scale}}; }

json to_json(const MaskConfig& m) {
  return {{"min_rects", m.min_rects}, {"max_rects", m.max_rects}, {"min_area", m.min_area},
          {"max_area", m.max_area},   {"min_aspect", m.min_aspect}, {"max_aspect", m.max_aspect}};
}

json to_json(const Schedule& s) {
  return {{"epochs", s.epochs}, {"batch_size", s.batch_size}, {"clip_norm", s.clip_norm}, {"cosine", s.cosine}};
}

Schedule schedule_from_json(const json& j) {
  return {j.at("epochs").get<int>(), j.at("batch_size").get<int>(), j.at("clip_norm").get<double>(),
          j.at("cosine").get<bool>()};
}

void check_schedule(const Schedule& s, const std::string& name) {
  if (s.epochs < 0) throw ConfigError(name + ".epochs must be >= 0");
  if (s.batch_size < 1) throw ConfigError(name + ".batch_size must be >= 1");
  if (s.clip_norm < 0.0) throw ConfigError(name + ".clip_norm must be >= 0");
}

}  // namespace

json to_json(const TeacherConfig& c) {
  return {{"num_classes", c.num_classes},
          {"width", c.width},
          {"backbone_channels", c.backbone_channels},
          {"backbone_strides", c.backbone_strides},
          {"encoder_layers", c.encoder_layers},
          {"decoder_layers", c.decoder_layers},
          {"heads", c.heads},
          {"ffn_hidden", c.ffn_hidden},
          {"head_layers", c.head_layers},
          {"class_embed_scale", c.class_embed_scale},
          {"pos", to_json(c.pos)},
          {"box_param", enum_to(kBoxParams, c.box_param)},
          {"point_feature", c.point_feature}};
}

TeacherConfig teacher_config_from_json(const json& j) {
  TeacherConfig c;
  c.num_classes = j.at("num_classes").get<int>();
  c.width = j.at("width").get<int>();
  c.backbone_channels = j.at("backbone_channels").get<std::vector<int>>();
  c.backbone_strides = j.at("backbone_strides").get<std::vector<int>>();
  c.encoder_layers = j.at("encoder_layers").get<int>();
  c.decoder_layers = j.at("decoder_layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.ffn_hidden = j.at("ffn_hidden").get<int>();
  c.head_layers = j.at("head_layers").get<int>();
  c.class_embed_scale = j.at("class_embed_scale").get<double>();
  c.pos.temperature = j.at("pos").at("temperature").get<double>();
  c.pos.coord_scale = j.at("pos").at("coord_scale").get<double>();
  c.box_param = enum_from(kBoxParams, j.at("box_param"), "box_param");
  c.point_feature = j.at("point_feature").get<bool>();
  return c;
}

json to_json(const StudentConfig& c) {
  return {{"num_classes", c.num_classes},
          {"backbone_channels", c.backbone_channels},
          {"backbone_strides", c.backbone_strides},
          {"head_channels", c.head_channels},
          {"focal_alpha", c.focal_alpha},
          {"focal_gamma", c.focal_gamma},
          {"score_threshold", c.score_threshold},
          {"nms_iou", c.nms_iou},
          {"use_centerness", c.use_centerness},
          {"pseudo_weight", c.pseudo_weight},
          {"top_k", c.top_k}};
}

StudentConfig student_config_from_json(const json& j) {
  StudentConfig c;
  c.num_classes = j.at("num_classes").get<int>();
  c.backbone_channels = j.at("backbone_channels").get<std::vector<int>>();
  c.backbone_strides = j.at("backbone_strides").get<std::vector<int>>();
  c.head_channels = j.at("head_channels").get<int>();
  c.focal_alpha = j.at("focal_alpha").get<double>();
  c.focal_gamma = j.at("focal_gamma").get<double>();
  c.score_threshold = j.at("score_threshold").get<double>();
  c.nms_iou = j.at("nms_iou").get<double>();
  c.use_centerness = j.at("use_centerness").get<bool>();
  c.pseudo_weight = j.at("pseudo_weight").get<double>();
  c.top_k = j.at("top_k").get<int>();
  return c;
}

json to_json(const SyntheticConfig& c) {
  return {{"height", c.height},
          {"width", c.width},
          {"num_classes", c.num_classes},
          {"num_images", c.num_images},
          {"min_objects", c.min_objects},
          {"max_objects", c.max_objects},
          {"min_contrast", c.min_contrast},
          {"max_contrast", c.max_contrast},
          {"background_min", c.background_min},
          {"background_max", c.background_max},
          {"noise_level", c.noise_level},
          {"softness", c.softness},
          {"min_box_side", c.min_box_side},
          {"max_box_side", c.max_box_side},
          {"max_overlap_iou", c.max_overlap_iou},
          {"point_sampling", enum_to(kSamplings, c.point_sampling)}};
}

SyntheticConfig synthetic_config_from_json(const json& j) {
  SyntheticConfig c;
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.num_images = j.at("num_images").get<int>();
  c.min_objects = j.at("min_objects").get<int>();
  c.max_objects = j.at("max_objects").get<int>();
  c.min_contrast = j.at("min_contrast").get<double>();
  c.max_contrast = j.at("max_contrast").get<double>();
  c.background_min = j.at("background_min").get<double>();
  c.background_max = j.at("background_max").get<double>();
  c.noise_level = j.at("noise_level").get<double>();
  c.softness = j.at("softness").get<double>();
  c.min_box_side = j.at("min_box_side").get<double>();
  c.max_box_side = j.at("max_box_side").get<double>();
  c.max_overlap_iou = j.at("max_overlap_iou").get<double>();
  c.point_sampling = enum_from(kSamplings, j.at("point_sampling"), "point_sampling");
  return c;
}

json to_json(const RunConfig& c) {
  std::vector<std::string> variants;
  for (Variant v : c.bench.variants) variants.push_back(variant_name(v));
  return {
      {"manifest", c.manifest},
      {"split", c.split},
      {"seed", c.seed},
      {"variant", variant_name(c.variant)},
      {"data", {{"seed", c.data_seed}, {"synthetic", to_json(c.synthetic)}}},
      {"teacher", to_json(c.teacher)},
      {"student", to_json(c.student)},
      {"loss",
       {{"lambda_l1", c.loss.lambda_l1},
        {"lambda_giou", c.loss.lambda_giou},
        {"lambda_m", c.loss.lambda_m},
        {"lambda_c", c.loss.lambda_c}}},
      {"symmetric",
       {{"mask", to_json(c.symmetric.mask)},
        {"enable_mask", c.symmetric.enable_mask},
        {"jitter", c.symmetric.jitter},
        {"mask_on_flipped", c.symmetric.mask_on_flipped},
        {"stop_grad_flipped", c.symmetric.stop_grad_flipped}}},
      {"point_sampling", enum_to(kSamplings, c.sampling)},
      {"teacher_optim",
       {{"lr", c.teacher_optim.lr},
        {"beta1", c.teacher_optim.beta1},
        {"beta2", c.teacher_optim.beta2},
        {"eps", c.teacher_optim.eps},
        {"weight_decay", c.teacher_optim.weight_decay}}},
      {"step1", to_json(c.step1)},
      {"step2", to_json(c.step2)},
      {"step2_mix", enum_to(kMixes, c.step2_mix)},
      {"student_optim",
       {{"lr", c.student_optim.lr}, {"momentum", c.student_optim.momentum}, {"weight_decay", c.student_optim.weight_decay}}},
      {"step3", to_json(c.step3)},
      {"eval", {{"iou_thresholds", c.eval.iou_thresholds}, {"score_floor", c.eval.score_floor}}},
      {"bench", {{"fractions", c.bench.fractions}, {"seeds", c.bench.seeds}, {"variants", variants}, {"jobs", c.bench.jobs}}},
  };
}

RunConfig run_config_from_json(const json& j) {
  try {
    RunConfig c;
    c.manifest = j.at("manifest").get<std::string>();
    c.split = j.at("split").get<std::string>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.data_seed = j.at("data").at("seed").get<std::uint64_t>();
    c.synthetic = synthetic_config_from_json(j.at("data").at("synthetic"));
    c.teacher = teacher_config_from_json(j.at("teacher"));
    c.student = student_config_from_json(j.at("student"));
    const json& l = j.at("loss");
    c.loss = {l.at("lambda_l1").get<double>(), l.at("lambda_giou").get<double>(), l.at("lambda_m").get<double>(),
              l.at("lambda_c").get<double>()};
    const json& s = j.at("symmetric");
    const json& m = s.at("mask");
    c.symmetric.mask = {m.at("min_rects").get<int>(),     m.at("max_rects").get<int>(),
                        m.at("min_area").get<double>(),   m.at("max_area").get<double>(),
                        m.at("min_aspect").get<double>(), m.at("max_aspect").get<double>()};
    c.symmetric.enable_mask = s.at("enable_mask").get<bool>();
    c.symmetric.jitter = s.at("jitter").get<double>();
    c.symmetric.mask_on_flipped = s.at("mask_on_flipped").get<bool>();
    c.symmetric.stop_grad_flipped = s.at("stop_grad_flipped").get<bool>();
    c.sampling = enum_from(kSamplings, j.at("point_sampling"), "point_sampling");
    const json& to = j.at("teacher_optim");
    c.teacher_optim = {to.at("lr").get<double>(), to.at("beta1").get<double>(), to.at("beta2").get<double>(),
                       to.at("eps").get<double>(), to.at("weight_decay").get<double>()};
    c.step1 = schedule_from_json(j.at("step1"));
    c.step2 = schedule_from_json(j.at("step2"));
    c.step2_mix = enum_from(kMixes, j.at("step2_mix"), "step2_mix");
    const json& so = j.at("student_optim");
    c.student_optim = {so.at("lr").get<double>(), so.at("momentum").get<double>(), so.at("weight_decay").get<double>()};
    c.step3 = schedule_from_json(j.at("step3"));
    c.eval.iou_thresholds = j.at("eval").at("iou_thresholds").get<std::vector<double>>();
    c.eval.score_floor = j.at("eval").at("score_floor").get<double>();
    const json& b = j.at("bench");
    c.bench.fractions = b.at("fractions").get<std::vector<double>>();
    c.bench.seeds = b.at("seeds").get<std::vector<std::uint64_t>>();
    c.bench.variants.clear();
    for (const auto& v : b.at("variants")) c.bench.variants.push_back(parse_variant(v.get<std::string>()));
    c.bench.jobs = b.at("jobs").get<int>();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

LossWeights RunConfig::effective_loss() const {
  LossWeights w = loss;
  if (variant == Variant::kPointDetr) {
    w.lambda_m = 0.0;
    w.lambda_c = 0.0;
  }
  return w;
}

void RunConfig::validate() const {
  try {
    synthetic.validate();
    teacher.validate();
    student.validate();
    loss.validate();
    eval.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (teacher.num_classes != student.num_classes) throw ConfigError("teacher and student class counts differ");
  check_schedule(step1, "step1");
  check_schedule(step2, "step2");
  check_schedule(step3, "step3");
  if (!(teacher_optim.lr > 0.0)) throw ConfigError("teacher_optim.lr must be > 0");
  if (!(student_optim.lr > 0.0)) throw ConfigError("student_optim.lr must be > 0");
  if (symmetric.jitter < 0.0) throw ConfigError("symmetric.jitter must be >= 0");
  const MaskConfig& m = symmetric.mask;
  if (m.min_rects < 0 || m.max_rects < m.min_rects) throw ConfigError("symmetric.mask rect count range is empty");
  if (!(m.min_area > 0.0) || m.max_area < m.min_area || m.max_area > 1.0) throw ConfigError("symmetric.mask area range is invalid");
  if (!(m.min_aspect > 0.0) || m.max_aspect < m.min_aspect) throw ConfigError("symmetric.mask aspect range is invalid");
  for (double f : bench.fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("bench.fractions must lie in (0, 1]");
  }
  if (bench.jobs < 1) throw ConfigError("bench.jobs must be >= 1");
}

void merge_strict(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError("config" + (where.empty() ? "" : " at '" + where + "'") + ": expected an object");
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    const std::string path = where.empty() ? it.key() : where + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + path + "'");
    json& slot = base[it.key()];
    if (slot.is_object()) {
      merge_strict(slot, it.value(), path);
    } else {
      const bool numeric_ok = slot.is_number() && it.value().is_number();
      if (!numeric_ok && slot.type() != it.value().type()) {
        throw ConfigError("config key '" + path + "' expects " + slot.type_name() + ", got " + it.value().type_name());
      }
      slot = it.value();
    }
  }
}

void apply_override(json& tree, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json patch = value;
  std::string rest = key;
  std::vector<std::string> parts;
  for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1)) parts.push_back(rest.substr(0, pos));
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  merge_strict(tree, patch);
}

RunConfig load_run_config(const std::filesystem::path& file, const std::vector<std::string>& overrides,
                          const RunConfig& base) {
  json tree = to_json(base);
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot read config file " + file.string());
    json doc;
    try {
      doc = json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("config file " + file.string() + ": " + e.what());
    }
    merge_strict(tree, doc);
  }
  for (const auto& o : overrides) apply_override(tree, o);
  RunConfig cfg = run_config_from_json(tree);
  cfg.validate();
  return cfg;
}

RunConfig desk_preset() {
  RunConfig c;
  c.synthetic.height = 64;
  c.synthetic.width = 64;
  c.synthetic.num_images = 750;
  c.teacher.width = 32;
  c.teacher.backbone_channels = {16, 32, 64, 64};
  c.teacher.ffn_hidden = 64;
  // Boxes grown from the point generalize far better than free sigmoid boxes on 60 labeled images.
  c.teacher.box_param = BoxParam::kPointDistances;
  c.student.backbone_channels = {16, 32, 64, 64};
  c.student.head_channels = 64;
  c.teacher_optim.lr = 2e-3;
  c.step1 = {60, 4, 0.0, true};
  c.step2 = {20, 4, 0.0, true};
  c.step3 = {30, 4, 10.0, true};
  c.student_optim.lr = 0.01;
  return c;
}

}  // namespace wssod
