#pragma once

#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "wssod/autodiff.hpp"
#include "wssod/data.hpp"
#include "wssod/encoding.hpp"
#include "wssod/nn.hpp"

namespace wssod {

/// Anything that maps (image, points) to one box per point. Rows are [cx, cy, w, h].
class BoxPredictor {
 public:
  virtual ~BoxPredictor() = default;

  virtual ad::Var predict(const ImageSample& img, std::span<const PointAnnotation> points) const = 0;

  /// Independent query sets on one image. Implementations may share image-side work.
  virtual std::vector<ad::Var> predict_sets(const ImageSample& img,
                                            const std::vector<std::vector<PointAnnotation>>& sets) const;
};

enum class BoxParam {
  kAbsolute,        // sigmoid of all four outputs
  kReferenceLogit,  // as kAbsolute, with logit(point) added to the cx/cy outputs
  kPointDistances,  // softplus distances from the point to the left, top, right and bottom edges
};

struct TeacherConfig {
  int num_classes = 3;
  int width = 64;  // model width q
  std::vector<int> backbone_channels = {16, 32, 64, 64};
  std::vector<int> backbone_strides = {2, 2, 2, 1};
  int encoder_layers = 2;
  int decoder_layers = 2;
  int heads = 4;
  int ffn_hidden = 256;
  int head_layers = 3;
  double class_embed_scale = 0.1;
  encoding::SinusoidParams pos;
  /// How the head's four outputs become a box.
  BoxParam box_param = BoxParam::kAbsolute;
  /// Adds the backbone feature bilinearly sampled at the point to its query.
  bool point_feature = true;

  int stride() const;
  void validate() const;
  bool operator==(const TeacherConfig&) const = default;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Point-conditioned detector: CNN backbone, transformer encoder over grid tokens,
/// transformer decoder over point queries, shared box head.
class TeacherModel final : public BoxPredictor {
 public:
  struct Memory {
    ad::Var tokens;           // [h*w, q]
    std::vector<double> pos;  // grid codes, [h*w, q]
    ad::Var local;            // projected backbone features before the encoder, [h*w, q]
    int grid_h = 0;
    int grid_w = 0;
  };

  TeacherModel(const TeacherConfig& cfg, std::uint64_t seed);
  TeacherModel(TeacherModel&&) = default;
  TeacherModel& operator=(TeacherModel&&) = default;
  TeacherModel(const TeacherModel&) = delete;
  TeacherModel& operator=(const TeacherModel&) = delete;

  TeacherModel clone() const;

  const TeacherConfig& config() const { return cfg_; }
  nn::ParameterSet& parameters() { return params_; }
  const nn::ParameterSet& parameters() const { return params_; }
  const encoding::ClassEmbeddingTable& class_table() const { return class_table_; }

  Memory encode(const ImageSample& img) const;
  ad::Var decode(const Memory& memory, std::span<const PointAnnotation> points) const;

  ad::Var predict(const ImageSample& img, std::span<const PointAnnotation> points) const override;
  std::vector<ad::Var> predict_sets(const ImageSample& img,
                                    const std::vector<std::vector<PointAnnotation>>& sets) const override;

 private:
  struct EncoderLayer {
    nn::MultiheadAttention attn;
    nn::LayerNorm norm1;
    nn::Linear ffn1;
    nn::Linear ffn2;
    nn::LayerNorm norm2;
  };
  struct DecoderLayer {
    nn::MultiheadAttention self_attn;
    nn::LayerNorm norm1;
    nn::MultiheadAttention cross_attn;
    nn::LayerNorm norm2;
    nn::Linear ffn1;
    nn::Linear ffn2;
    nn::LayerNorm norm3;
  };

  TeacherConfig cfg_;
  nn::ParameterSet params_;
  std::vector<nn::Conv2d> backbone_;
  std::optional<nn::Linear> input_proj_;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  encoding::ClassEmbeddingTable class_table_;
  nn::Mlp head_;
};

/// One box per point, order-aligned; differentiable in the model parameters.
ad::Var teacher_forward(const TeacherModel& m, const ImageSample& img, std::span<const PointAnnotation> points);

/// Plain boxes (no graph) from any predictor, clamped into the image.
std::vector<BoxCCWH> predict_boxes(const BoxPredictor& m, const ImageSample& img, std::span<const PointAnnotation> points);

std::vector<BoxCCWH> boxes_from_rows(const ad::Var& rows);

/// Input normalization shared by both detectors: [1, H, W] tensor of (v - 0.5) * 2.
ad::Var image_tensor(const ImageSample& img);

}  // namespace wssod
