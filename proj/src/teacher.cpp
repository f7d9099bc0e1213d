#include "wssod/teacher.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace wssod {

std::vector<ad::Var> BoxPredictor::predict_sets(const ImageSample& img,
                                                const std::vector<std::vector<PointAnnotation>>& sets) const {
  std::vector<ad::Var> out;
  out.reserve(sets.size());
  for (const auto& s : sets) out.push_back(predict(img, s));
  return out;
}

int TeacherConfig::stride() const {
  int s = 1;
  for (int v : backbone_strides) s *= v;
  return s;
}

void TeacherConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("teacher config: " + msg); };
  if (num_classes < 1) fail("num_classes must be >= 1");
  if (width < 4 || width % 4 != 0) fail("width must be a positive multiple of 4");
  if (heads < 1 || width % heads != 0) fail("width must be divisible by heads");
  if (backbone_channels.empty() || backbone_channels.size() != backbone_strides.size()) {
    fail("backbone channel and stride lists must be non-empty and equal length");
  }
  for (int c : backbone_channels) {
    if (c < 1) fail("backbone channels must be positive");
  }
  for (int s : backbone_strides) {
    if (s < 1 || s > 2) fail("backbone strides must be 1 or 2");
  }
  if (encoder_layers < 0 || decoder_layers < 1) fail("need >= 0 encoder and >= 1 decoder layers");
  if (ffn_hidden < 1) fail("ffn_hidden must be positive");
  if (head_layers < 1) fail("head_layers must be >= 1");
  if (!(pos.temperature > 0.0)) fail("positional temperature must be positive");
}

ad::Var image_tensor(const ImageSample& img) {
  std::vector<double> v(img.pixels.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = (img.pixels[i] - 0.5) * 2.0;
  return ad::Var::constant({1, img.height, img.width}, std::move(v));
}

TeacherModel::TeacherModel(const TeacherConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(derive_seed(seed, hash_string("teacher-init")));
  int in = 1;
  for (std::size_t i = 0; i < cfg_.backbone_channels.size(); ++i) {
    backbone_.push_back(nn::make_conv(params_, "backbone." + std::to_string(i), in, cfg_.backbone_channels[i], 3,
                                      cfg_.backbone_strides[i], rng));
    in = cfg_.backbone_channels[i];
  }
  const int q = cfg_.width;
  if (in != q) input_proj_ = nn::make_linear(params_, "input_proj", in, q, rng);
  for (int l = 0; l < cfg_.encoder_layers; ++l) {
    const std::string p = "encoder." + std::to_string(l);
    EncoderLayer layer{nn::make_attention(params_, p + ".attn", q, cfg_.heads, rng),
                       nn::make_layer_norm(params_, p + ".norm1", q),
                       nn::make_linear(params_, p + ".ffn1", q, cfg_.ffn_hidden, rng, nn::Init::kHe),
                       nn::make_linear(params_, p + ".ffn2", cfg_.ffn_hidden, q, rng),
                       nn::make_layer_norm(params_, p + ".norm2", q)};
    encoder_.push_back(std::move(layer));
  }
  for (int l = 0; l < cfg_.decoder_layers; ++l) {
    const std::string p = "decoder." + std::to_string(l);
    DecoderLayer layer{nn::make_attention(params_, p + ".self_attn", q, cfg_.heads, rng),
                       nn::make_layer_norm(params_, p + ".norm1", q),
                       nn::make_attention(params_, p + ".cross_attn", q, cfg_.heads, rng),
                       nn::make_layer_norm(params_, p + ".norm2", q),
                       nn::make_linear(params_, p + ".ffn1", q, cfg_.ffn_hidden, rng, nn::Init::kHe),
                       nn::make_linear(params_, p + ".ffn2", cfg_.ffn_hidden, q, rng),
                       nn::make_layer_norm(params_, p + ".norm3", q)};
    decoder_.push_back(std::move(layer));
  }
  class_table_ = encoding::ClassEmbeddingTable(params_, "class_embed", cfg_.num_classes, q, cfg_.class_embed_scale, rng);
  std::vector<int> dims(static_cast<std::size_t>(cfg_.head_layers), q);
  dims.push_back(4);
  head_ = nn::make_mlp(params_, "box_head", dims, rng);
  if (cfg_.box_param == BoxParam::kPointDistances) {
    // Initial edge distances of about 0.1.
    ad::Var bias = head_.layers.back().bias;
    std::fill(bias.mutable_value().begin(), bias.mutable_value().end(), std::log(std::expm1(0.1)));
  }
}

TeacherModel TeacherModel::clone() const {
  TeacherModel copy(cfg_, 0);
  copy.params_.copy_values_from(params_);
  return copy;
}

TeacherModel::Memory TeacherModel::encode(const ImageSample& img) const {
  const int stride = cfg_.stride();
  if (img.height % stride != 0 || img.width % stride != 0) {
    throw ShapeError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                     " is not divisible by backbone stride " + std::to_string(stride));
  }
  ad::Var x = image_tensor(img);
  for (const auto& conv : backbone_) x = ad::relu(conv.forward(x));
  const int c = x.dim(0);
  const int h = x.dim(1);
  const int w = x.dim(2);
  ad::Var tokens = ad::transpose(ad::reshape(x, {c, h * w}));
  if (input_proj_) tokens = input_proj_->forward(tokens);

  Memory mem;
  mem.grid_h = h;
  mem.grid_w = w;
  mem.pos = encoding::encode_grid(h, w, cfg_.width, cfg_.pos);
  ad::Var src = ad::add_const(tokens, mem.pos);
  for (const auto& layer : encoder_) {
    src = layer.norm1.forward(ad::add(src, layer.attn.forward(src, src, src)));
    const ad::Var ff = layer.ffn2.forward(ad::relu(layer.ffn1.forward(src)));
    src = layer.norm2.forward(ad::add(src, ff));
  }
  mem.tokens = src;
  mem.local = tokens;
  return mem;
}

namespace {

double logit(double p) {
  const double c = std::clamp(p, 1e-4, 1.0 - 1e-4);
  return std::log(c / (1.0 - c));
}

// Row i holds the bilinear weights of point i over grid cell centres, [n, h*w].
std::vector<double> bilinear_weights(std::span<const PointAnnotation> points, int h, int w) {
  std::vector<double> out(points.size() * static_cast<std::size_t>(h) * w, 0.0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double gx = std::clamp(points[i].pos.x * w - 0.5, 0.0, w - 1.0);
    const double gy = std::clamp(points[i].pos.y * h - 0.5, 0.0, h - 1.0);
    const int x0 = std::min(static_cast<int>(gx), w - 1);
    const int y0 = std::min(static_cast<int>(gy), h - 1);
    const int x1 = std::min(x0 + 1, w - 1);
    const int y1 = std::min(y0 + 1, h - 1);
    const double fx = gx - x0;
    const double fy = gy - y0;
    double* row = out.data() + i * static_cast<std::size_t>(h) * w;
    row[y0 * w + x0] += (1 - fx) * (1 - fy);
    row[y0 * w + x1] += fx * (1 - fy);
    row[y1 * w + x0] += (1 - fx) * fy;
    row[y1 * w + x1] += fx * fy;
  }
  return out;
}

}  // namespace

ad::Var TeacherModel::decode(const Memory& memory, std::span<const PointAnnotation> points) const {
  if (points.empty()) throw std::invalid_argument("teacher decode: at least one point is required");

  // Queries are processed in a canonical order so that permuting the input list
  // permutes the output rows bit-exactly.
  std::vector<int> order(points.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    const auto& pa = points[a];
    const auto& pb = points[b];
    if (pa.class_id != pb.class_id) return pa.class_id < pb.class_id;
    if (pa.pos.x != pb.pos.x) return pa.pos.x < pb.pos.x;
    return pa.pos.y < pb.pos.y;
  });
  std::vector<PointAnnotation> sorted;
  sorted.reserve(points.size());
  for (int i : order) sorted.push_back(points[i]);

  ad::Var queries = encoding::make_queries(sorted, class_table_, cfg_.pos);
  if (cfg_.point_feature) {
    const int n = static_cast<int>(sorted.size());
    const int cells = memory.grid_h * memory.grid_w;
    const ad::Var interp = ad::Var::constant({n, cells}, bilinear_weights(sorted, memory.grid_h, memory.grid_w));
    queries = ad::add(queries, ad::matmul(interp, memory.local));
  }
  const ad::Var keys = ad::add_const(memory.tokens, memory.pos);
  ad::Var tgt = queries;
  for (const auto& layer : decoder_) {
    const ad::Var q1 = ad::add(tgt, queries);
    tgt = layer.norm1.forward(ad::add(tgt, layer.self_attn.forward(q1, q1, tgt)));
    const ad::Var q2 = ad::add(tgt, queries);
    tgt = layer.norm2.forward(ad::add(tgt, layer.cross_attn.forward(q2, keys, memory.tokens)));
    const ad::Var ff = layer.ffn2.forward(ad::relu(layer.ffn1.forward(tgt)));
    tgt = layer.norm3.forward(ad::add(tgt, ff));
  }
  const ad::Var raw = head_.forward(tgt);
  ad::Var out;
  if (cfg_.box_param == BoxParam::kPointDistances) {
    // (l, t, r, b) -> (dx, dy, w, h), then shift by the point.
    static const std::vector<double> kToCcwh = {-0.5, 0.0, 1.0, 0.0,  //
                                                0.0, -0.5, 0.0, 1.0,  //
                                                0.5, 0.0, 1.0, 0.0,   //
                                                0.0, 0.5, 0.0, 1.0};
    std::vector<double> shift(sorted.size() * 4, 0.0);
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      shift[i * 4 + 0] = sorted[i].pos.x;
      shift[i * 4 + 1] = sorted[i].pos.y;
    }
    const ad::Var dist = ad::add_scalar(ad::softplus(raw), 0.5 * kMinBoxSide);
    out = ad::add_const(ad::matmul(dist, ad::Var::constant({4, 4}, kToCcwh)), shift);
  } else {
    ad::Var logits = raw;
    if (cfg_.box_param == BoxParam::kReferenceLogit) {
      std::vector<double> ref(sorted.size() * 4, 0.0);
      for (std::size_t i = 0; i < sorted.size(); ++i) {
        ref[i * 4 + 0] = logit(sorted[i].pos.x);
        ref[i * 4 + 1] = logit(sorted[i].pos.y);
      }
      logits = ad::add_const(logits, ref);
    }
    const ad::Var boxes = ad::sigmoid(logits);
    out = ad::concat_cols({ad::slice_cols(boxes, 0, 2), ad::clamp_min(ad::slice_cols(boxes, 2, 2), kMinBoxSide)});
  }

  std::vector<int> inverse(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) inverse[order[i]] = static_cast<int>(i);
  return ad::gather_rows(out, inverse);
}

ad::Var TeacherModel::predict(const ImageSample& img, std::span<const PointAnnotation> points) const {
  return decode(encode(img), points);
}

std::vector<ad::Var> TeacherModel::predict_sets(const ImageSample& img,
                                                const std::vector<std::vector<PointAnnotation>>& sets) const {
  const Memory mem = encode(img);
  std::vector<ad::Var> out;
  out.reserve(sets.size());
  for (const auto& s : sets) out.push_back(decode(mem, s));
  return out;
}

ad::Var teacher_forward(const TeacherModel& m, const ImageSample& img, std::span<const PointAnnotation> points) {
  return m.predict(img, points);
}

std::vector<BoxCCWH> boxes_from_rows(const ad::Var& rows) {
  std::vector<BoxCCWH> out;
  out.reserve(rows.rows());
  for (int i = 0; i < rows.rows(); ++i) {
    out.push_back(clamp_to_image({rows.at(i, 0), rows.at(i, 1), rows.at(i, 2), rows.at(i, 3)}));
  }
  return out;
}

std::vector<BoxCCWH> predict_boxes(const BoxPredictor& m, const ImageSample& img, std::span<const PointAnnotation> points) {
  ad::NoGradGuard guard;
  return boxes_from_rows(m.predict(img, points));
}

}  // namespace wssod
