#pragma once

#include <cmath>
#include <vector>

#include "tameta/common.hpp"
#include "tameta/params.hpp"
#include "tameta/tensor.hpp"

namespace tameta {

// Adam over a ParamSet. First/second moment estimates are kept per array in
// declaration order; `step` mutates the parameters in place.
class Adam {
 public:
  Adam() = default;
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  double learning_rate() const { return lr_; }
  long step_count() const { return t_; }
  double beta1() const { return beta1_; }
  double beta2() const { return beta2_; }
  double eps() const { return eps_; }

  void step(ParamSet& params, const std::vector<std::vector<double>>& grads) {
    ensure_state(params);
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t a = 0; a < params.count(); ++a) {
      auto& p = params.values(a);
      const auto& g = grads[a];
      if (g.size() != p.size()) throw shape_error("Adam::step: gradient shape mismatch");
      auto& m = m_[a];
      auto& v = v_[a];
      for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
        double mhat = m[i] / bc1;
        double vhat = v[i] / bc2;
        p[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  // Builds the updated parameters as record tensors, differentiable with
  // respect to the gradient tensors (moments and previous parameters enter
  // as constants), and advances the numeric moment state to match. Used
  // where an update must stay differentiable w.r.t. upstream quantities
  // (e.g. attention weights) while the stored state stays in sync.
  std::vector<Tensor> step_on_tape(Tape& tape, ParamSet& params,
                                   const std::vector<Tensor>& grad_tensors) {
    ensure_state(params);
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    std::vector<Tensor> updated;
    updated.reserve(params.count());
    for (std::size_t a = 0; a < params.count(); ++a) {
      const auto& def = params.def(a);
      Tensor g = grad_tensors[a];
      Tensor m_prev = tape.constant(def.shape, m_[a]);
      Tensor v_prev = tape.constant(def.shape, v_[a]);
      Tensor p_prev = tape.constant(def.shape, params.values(a));
      Tensor m_new = add(scale(m_prev, beta1_), scale(g, 1.0 - beta1_));
      Tensor v_new = add(scale(v_prev, beta2_), scale(mul(g, g), 1.0 - beta2_));
      Tensor mhat = scale(m_new, 1.0 / bc1);
      Tensor vhat = scale(v_new, 1.0 / bc2);
      Tensor denom = add(pow(vhat, 0.5), tape.constant_scalar(eps_));
      Tensor p_new = sub(p_prev, scale(div(mhat, denom), lr_));
      auto mv = m_new.values();
      auto vv = v_new.values();
      m_[a].assign(mv.begin(), mv.end());
      v_[a].assign(vv.begin(), vv.end());
      auto pv = p_new.values();
      params.values(a).assign(pv.begin(), pv.end());
      updated.push_back(p_new);
    }
    return updated;
  }

  // Serialization access.
  const std::vector<std::vector<double>>& m() const { return m_; }
  const std::vector<std::vector<double>>& v() const { return v_; }
  void restore(long t, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v) {
    t_ = t;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  void ensure_state(const ParamSet& params) {
    if (!m_.empty()) {
      if (m_.size() != params.count()) throw shape_error("Adam: parameter layout changed");
      return;
    }
    m_.resize(params.count());
    v_.resize(params.count());
    for (std::size_t a = 0; a < params.count(); ++a) {
      m_[a].assign(params.values(a).size(), 0.0);
      v_[a].assign(params.values(a).size(), 0.0);
    }
  }

  double lr_ = 1e-3;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  long t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace tameta
