#pragma once

#include <numbers>
#include <span>
#include <vector>

#include "wssod/autodiff.hpp"
#include "wssod/data.hpp"
#include "wssod/geometry.hpp"
#include "wssod/nn.hpp"

namespace wssod::encoding {

struct SinusoidParams {
  double temperature = 10000.0;
  double coord_scale = 2.0 * std::numbers::pi;

  bool operator==(const SinusoidParams&) const = default;
};

/// Interleaved [sin(a_0), cos(a_0), sin(a_1), ...] with a_i = scale * v / temperature^(2i/d).
std::vector<double> sinusoidal_encode(double v, int d, const SinusoidParams& params = {});

/// First q/2 entries encode x, the rest encode y.
std::vector<double> encode_point(const Point2& p, int q, const SinusoidParams& params = {});

/// Row-major grid of codes at cell centers ((col + 0.5) / w, (row + 0.5) / h); shape [h * w, q].
std::vector<double> encode_grid(int h, int w, int q, const SinusoidParams& params = {});

/// Learnable class codes, one row of width q per class.
class ClassEmbeddingTable {
 public:
  ClassEmbeddingTable() = default;
  /// Rows drawn from U[-scale, scale] and shifted to exactly zero mean.
  ClassEmbeddingTable(nn::ParameterSet& ps, const std::string& name, int num_classes, int q, double scale, Rng& rng);
  explicit ClassEmbeddingTable(ad::Var weights) : weights_(std::move(weights)) {}

  int num_classes() const { return weights_.rows(); }
  int width() const { return weights_.cols(); }
  const ad::Var& weights() const { return weights_; }

 private:
  ad::Var weights_;
};

/// Object queries: one row per point, V_p (constant) plus the class row (learnable). Shape [n, q].
ad::Var make_queries(std::span<const PointAnnotation> points, const ClassEmbeddingTable& table,
                     const SinusoidParams& params = {});
ad::Var make_query(const Point2& p, int class_id, const ClassEmbeddingTable& table, const SinusoidParams& params = {});

}  // namespace wssod::encoding
