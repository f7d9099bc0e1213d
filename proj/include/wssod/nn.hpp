#pragma once

#include <string>
#include <utility>
#include <vector>

#include "wssod/autodiff.hpp"
#include "wssod/rng.hpp"

namespace wssod::nn {

using ad::Var;

/// Ordered registry of named trainable tensors.
class ParameterSet {
 public:
  Var add(const std::string& name, ad::Shape shape, std::vector<double> init);

  const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }
  const Var& get(const std::string& name) const;
  bool contains(const std::string& name) const;
  std::size_t total_size() const;
  void zero_grad();

  /// Copies values (not graph identity) from another set with the same layout.
  void copy_values_from(const ParameterSet& other);
  bool all_finite() const;

 private:
  std::vector<std::pair<std::string, Var>> entries_;
};

enum class Init { kXavier, kHe, kZero };

struct Linear {
  Var weight;  // [in, out]
  Var bias;    // [out]

  Var forward(const Var& x) const;
};

Linear make_linear(ParameterSet& ps, const std::string& name, int in, int out, Rng& rng, Init init = Init::kXavier);

struct Conv2d {
  Var weight;  // [out, in, k, k]
  Var bias;    // [out]
  int stride = 1;
  int pad = 1;

  Var forward(const Var& x) const { return ad::conv2d(x, weight, bias, stride, pad); }
};

Conv2d make_conv(ParameterSet& ps, const std::string& name, int in, int out, int kernel, int stride, Rng& rng);

struct LayerNorm {
  Var gamma;
  Var beta;

  Var forward(const Var& x) const { return ad::layer_norm_rows(x, gamma, beta); }
};

LayerNorm make_layer_norm(ParameterSet& ps, const std::string& name, int dim);

/// Multi-head scaled dot-product attention over row-token matrices.
struct MultiheadAttention {
  Linear q_proj;
  Linear k_proj;
  Linear v_proj;
  Linear out_proj;
  int heads = 1;

  Var forward(const Var& query, const Var& key, const Var& value) const;
};

MultiheadAttention make_attention(ParameterSet& ps, const std::string& name, int dim, int heads, Rng& rng);

/// Stack of linear layers with ReLU between them (none after the last).
struct Mlp {
  std::vector<Linear> layers;

  Var forward(const Var& x) const;
};

Mlp make_mlp(ParameterSet& ps, const std::string& name, const std::vector<int>& dims, Rng& rng);

}  // namespace wssod::nn
