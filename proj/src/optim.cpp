#include "wssod/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace wssod::optim {

double clip_grad_norm(const nn::ParameterSet& ps, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, p] : ps.entries()) {
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double k = max_norm / (norm + 1e-12);
    for (const auto& [name, p] : ps.entries()) {
      for (double& g : p.node()->grad) g *= k;
    }
  }
  return norm;
}

namespace {

void load_slot(const StateArrays& state, const std::string& slot, const nn::ParameterSet& ps,
               std::vector<std::vector<double>>& dst) {
  const auto& entries = ps.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto it = state.find(slot + "/" + entries[i].first);
    if (it == state.end()) throw std::invalid_argument("optimizer state missing " + slot + "/" + entries[i].first);
    if (it->second.size() != entries[i].second.size()) {
      throw std::invalid_argument("optimizer state shape mismatch for " + entries[i].first);
    }
    dst[i] = it->second;
  }
}

}  // namespace

Adam::Adam(const nn::ParameterSet& ps, AdamOptions opts) : ps_(&ps), opts_(opts) {
  for (const auto& e : ps.entries()) {
    m_.emplace_back(e.second.size(), 0.0);
    v_.emplace_back(e.second.size(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  const auto& entries = ps_->entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    ad::Node* node = entries[i].second.node();
    auto& val = node->value;
    const auto& g = node->grad;
    if (g.size() != val.size()) continue;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < val.size(); ++j) {
      const double grad = g[j] + opts_.weight_decay * val[j];
      m[j] = opts_.beta1 * m[j] + (1.0 - opts_.beta1) * grad;
      v[j] = opts_.beta2 * v[j] + (1.0 - opts_.beta2) * grad * grad;
      val[j] -= opts_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + opts_.eps);
    }
  }
}

StateArrays Adam::state() const {
  StateArrays s;
  const auto& entries = ps_->entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    s["adam.m/" + entries[i].first] = m_[i];
    s["adam.v/" + entries[i].first] = v_[i];
  }
  return s;
}

void Adam::load_state(const StateArrays& state, std::int64_t steps) {
  load_slot(state, "adam.m", *ps_, m_);
  load_slot(state, "adam.v", *ps_, v_);
  t_ = steps;
}

Sgd::Sgd(const nn::ParameterSet& ps, SgdOptions opts) : ps_(&ps), opts_(opts) {
  for (const auto& e : ps.entries()) velocity_.emplace_back(e.second.size(), 0.0);
}

void Sgd::step() {
  ++t_;
  const auto& entries = ps_->entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    ad::Node* node = entries[i].second.node();
    auto& val = node->value;
    const auto& g = node->grad;
    if (g.size() != val.size()) continue;
    auto& vel = velocity_[i];
    for (std::size_t j = 0; j < val.size(); ++j) {
      const double grad = g[j] + opts_.weight_decay * val[j];
      vel[j] = opts_.momentum * vel[j] + grad;
      val[j] -= opts_.lr * vel[j];
    }
  }
}

StateArrays Sgd::state() const {
  StateArrays s;
  const auto& entries = ps_->entries();
  for (std::size_t i = 0; i < entries.size(); ++i) s["sgd.velocity/" + entries[i].first] = velocity_[i];
  return s;
}

void Sgd::load_state(const StateArrays& state, std::int64_t steps) {
  load_slot(state, "sgd.velocity", *ps_, velocity_);
  t_ = steps;
}

}  // namespace wssod::optim
