#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "wssod/nn.hpp"

namespace wssod::optim {

/// Named state arrays for checkpointing, keyed "<slot>/<parameter name>".
using StateArrays = std::map<std::string, std::vector<double>>;

/// Rescales all gradients so their global L2 norm is at most max_norm. Returns the pre-clip norm.
double clip_grad_norm(const nn::ParameterSet& ps, double max_norm);

struct AdamOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class Adam {
 public:
  Adam(const nn::ParameterSet& ps, AdamOptions opts);

  void step();
  void set_lr(double lr) { opts_.lr = lr; }
  double lr() const { return opts_.lr; }
  std::int64_t steps() const { return t_; }

  StateArrays state() const;
  void load_state(const StateArrays& state, std::int64_t steps);

 private:
  const nn::ParameterSet* ps_;
  AdamOptions opts_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::int64_t t_ = 0;
};

struct SgdOptions {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

class Sgd {
 public:
  Sgd(const nn::ParameterSet& ps, SgdOptions opts);

  void step();
  void set_lr(double lr) { opts_.lr = lr; }
  std::int64_t steps() const { return t_; }

  StateArrays state() const;
  void load_state(const StateArrays& state, std::int64_t steps);

 private:
  const nn::ParameterSet* ps_;
  SgdOptions opts_;
  std::vector<std::vector<double>> velocity_;
  std::int64_t t_ = 0;
};

}  // namespace wssod::optim
