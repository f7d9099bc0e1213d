#include "wssod/encoding.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace wssod::encoding {

std::vector<double> sinusoidal_encode(double v, int d, const SinusoidParams& params) {
  if (d <= 0 || d % 2 != 0) throw std::invalid_argument("sinusoidal_encode: width must be positive and even, got " + std::to_string(d));
  if (!(params.temperature > 0.0)) throw std::invalid_argument("sinusoidal_encode: temperature must be positive");
  std::vector<double> out(d);
  for (int i = 0; i < d / 2; ++i) {
    const double angle = params.coord_scale * v / std::pow(params.temperature, 2.0 * i / d);
    out[2 * i] = std::sin(angle);
    out[2 * i + 1] = std::cos(angle);
  }
  return out;
}

std::vector<double> encode_point(const Point2& p, int q, const SinusoidParams& params) {
  if (q <= 0 || q % 2 != 0) throw std::invalid_argument("encode_point: width must be divisible by 2, got " + std::to_string(q));
  std::vector<double> out = sinusoidal_encode(p.x, q / 2, params);
  const std::vector<double> y = sinusoidal_encode(p.y, q / 2, params);
  out.insert(out.end(), y.begin(), y.end());
  return out;
}

std::vector<double> encode_grid(int h, int w, int q, const SinusoidParams& params) {
  if (h < 1 || w < 1) throw std::invalid_argument("encode_grid: grid must be at least 1x1");
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(h) * w * q);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const std::vector<double> code = encode_point({(c + 0.5) / w, (r + 0.5) / h}, q, params);
      out.insert(out.end(), code.begin(), code.end());
    }
  }
  return out;
}

ClassEmbeddingTable::ClassEmbeddingTable(nn::ParameterSet& ps, const std::string& name, int num_classes, int q,
                                         double scale, Rng& rng) {
  if (num_classes < 1 || q < 1) throw std::invalid_argument("class table needs at least one class and one column");
  std::vector<double> w(static_cast<std::size_t>(num_classes) * q);
  for (int c = 0; c < num_classes; ++c) {
    double mean = 0.0;
    for (int j = 0; j < q; ++j) {
      w[c * q + j] = rng.uniform(-scale, scale);
      mean += w[c * q + j];
    }
    mean /= q;
    for (int j = 0; j < q; ++j) w[c * q + j] -= mean;
  }
  weights_ = ps.add(name, {num_classes, q}, std::move(w));
}

ad::Var make_queries(std::span<const PointAnnotation> points, const ClassEmbeddingTable& table,
                     const SinusoidParams& params) {
  const int q = table.width();
  std::vector<double> pos;
  std::vector<int> classes;
  pos.reserve(points.size() * q);
  for (const PointAnnotation& p : points) {
    if (p.class_id < 0 || p.class_id >= table.num_classes()) {
      throw std::out_of_range("class id " + std::to_string(p.class_id) + " outside embedding table");
    }
    const std::vector<double> code = encode_point(p.pos, q, params);
    pos.insert(pos.end(), code.begin(), code.end());
    classes.push_back(p.class_id);
  }
  const ad::Var class_rows = ad::gather_rows(table.weights(), classes);
  return ad::add_const(class_rows, pos);
}

ad::Var make_query(const Point2& p, int class_id, const ClassEmbeddingTable& table, const SinusoidParams& params) {
  const PointAnnotation pa{p, class_id, std::nullopt};
  return make_queries(std::span<const PointAnnotation>(&pa, 1), table, params);
}

}  // namespace wssod::encoding
