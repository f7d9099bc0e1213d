#include "wssod/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace wssod::nn {

Var ParameterSet::add(const std::string& name, ad::Shape shape, std::vector<double> init) {
  if (contains(name)) throw std::logic_error("duplicate parameter " + name);
  Var v = Var::parameter(std::move(shape), std::move(init));
  entries_.emplace_back(name, v);
  return v;
}

const Var& ParameterSet::get(const std::string& name) const {
  for (const auto& [n, v] : entries_) {
    if (n == name) return v;
  }
  throw std::out_of_range("no parameter named " + name);
}

bool ParameterSet::contains(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.first == name) return true;
  }
  return false;
}

std::size_t ParameterSet::total_size() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& e : entries_) {
    Var v = e.second;
    v.zero_grad();
  }
}

void ParameterSet::copy_values_from(const ParameterSet& other) {
  if (other.entries_.size() != entries_.size()) throw std::invalid_argument("parameter layout mismatch");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].first != other.entries_[i].first || entries_[i].second.shape() != other.entries_[i].second.shape()) {
      throw std::invalid_argument("parameter layout mismatch at " + entries_[i].first);
    }
    Var dst = entries_[i].second;
    dst.mutable_value() = other.entries_[i].second.value();
  }
}

bool ParameterSet::all_finite() const {
  for (const auto& e : entries_) {
    for (double x : e.second.value()) {
      if (!std::isfinite(x)) return false;
    }
  }
  return true;
}

namespace {

std::vector<double> uniform_init(std::size_t n, double bound, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-bound, bound);
  return v;
}

}  // namespace

Var Linear::forward(const Var& x) const { return ad::add_row(ad::matmul(x, weight), bias); }

Linear make_linear(ParameterSet& ps, const std::string& name, int in, int out, Rng& rng, Init init) {
  const std::size_t n = static_cast<std::size_t>(in) * out;
  std::vector<double> w;
  switch (init) {
    case Init::kXavier:
      w = uniform_init(n, std::sqrt(6.0 / (in + out)), rng);
      break;
    case Init::kHe:
      w = uniform_init(n, std::sqrt(6.0 / in), rng);
      break;
    case Init::kZero:
      w.assign(n, 0.0);
      break;
  }
  Linear l;
  l.weight = ps.add(name + ".weight", {in, out}, std::move(w));
  l.bias = ps.add(name + ".bias", {out}, std::vector<double>(out, 0.0));
  return l;
}

Conv2d make_conv(ParameterSet& ps, const std::string& name, int in, int out, int kernel, int stride, Rng& rng) {
  const int fan_in = in * kernel * kernel;
  Conv2d c;
  c.weight = ps.add(name + ".weight", {out, in, kernel, kernel},
                    uniform_init(static_cast<std::size_t>(out) * fan_in, std::sqrt(6.0 / fan_in), rng));
  c.bias = ps.add(name + ".bias", {out}, std::vector<double>(out, 0.0));
  c.stride = stride;
  c.pad = kernel / 2;
  return c;
}

LayerNorm make_layer_norm(ParameterSet& ps, const std::string& name, int dim) {
  LayerNorm ln;
  ln.gamma = ps.add(name + ".gamma", {dim}, std::vector<double>(dim, 1.0));
  ln.beta = ps.add(name + ".beta", {dim}, std::vector<double>(dim, 0.0));
  return ln;
}

Var MultiheadAttention::forward(const Var& query, const Var& key, const Var& value) const {
  const Var q = q_proj.forward(query);
  const Var k = k_proj.forward(key);
  const Var v = v_proj.forward(value);
  const int dim = q.cols();
  const int dh = dim / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  outs.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    const Var qh = ad::slice_cols(q, h * dh, dh);
    const Var kh = ad::slice_cols(k, h * dh, dh);
    const Var vh = ad::slice_cols(v, h * dh, dh);
    const Var attn = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv_sqrt));
    outs.push_back(ad::matmul(attn, vh));
  }
  const Var merged = heads == 1 ? outs.front() : ad::concat_cols(outs);
  return out_proj.forward(merged);
}

MultiheadAttention make_attention(ParameterSet& ps, const std::string& name, int dim, int heads, Rng& rng) {
  if (heads < 1 || dim % heads != 0) throw std::invalid_argument("attention width must be divisible by heads");
  MultiheadAttention a;
  a.q_proj = make_linear(ps, name + ".q", dim, dim, rng);
  a.k_proj = make_linear(ps, name + ".k", dim, dim, rng);
  a.v_proj = make_linear(ps, name + ".v", dim, dim, rng);
  a.out_proj = make_linear(ps, name + ".out", dim, dim, rng);
  a.heads = heads;
  return a;
}

Var Mlp::forward(const Var& x) const {
  Var h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = layers[i].forward(h);
    if (i + 1 < layers.size()) h = ad::relu(h);
  }
  return h;
}

Mlp make_mlp(ParameterSet& ps, const std::string& name, const std::vector<int>& dims, Rng& rng) {
  if (dims.size() < 2) throw std::invalid_argument("mlp needs at least input and output widths");
  Mlp m;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const bool last = i + 2 == dims.size();
    m.layers.push_back(make_linear(ps, name + "." + std::to_string(i), dims[i], dims[i + 1], rng,
                                   last ? Init::kXavier : Init::kHe));
  }
  return m;
}

}  // namespace wssod::nn
