#pragma once

#include <functional>

#include "lidia/common.hpp"
#include "lidia/core/nn.hpp"

namespace lidia {

struct SamConfig {
  double rho = 0.05;  // perturbation radius
  bool enabled = true;
  enum class Base { adam, sgd } base = Base::adam;
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (rho < 0) throw config_error("sam rho must be nonnegative");
    if (lr <= 0) throw config_error("learning rate must be positive");
  }
};

/// Sharpness-aware minimization around a first-order base update.
///
/// A step evaluates the loss gradient at w, perturbs to w + rho * g / |g|,
/// re-evaluates, restores w exactly, and feeds the perturbed gradient to the
/// base update (Adam by default). rho = 0 or a zero gradient reduces to the
/// plain base update with a single evaluation.
template <class T>
class SamOptimizer {
 public:
  struct StepStats {
    double loss = 0.0;            // loss at w
    double perturbed_loss = 0.0;  // loss at w + eps (0 when not evaluated)
    double grad_norm = 0.0;
    int grad_evals = 0;
    bool aborted = false;
    std::string diagnostic;
  };

  SamOptimizer(ParamStore<T>& ps, const SamConfig& cfg) : ps_(ps), cfg_(cfg) {
    cfg.validate();
    m_.assign(static_cast<size_t>(ps.total_size()), T(0));
    v_.assign(static_cast<size_t>(ps.total_size()), T(0));
  }

  /// grad_eval must zero parameter gradients, run forward/backward, and
  /// return the loss value. It is called once (rho == 0 or zero gradient)
  /// or twice per step.
  StepStats step(const std::function<double()>& grad_eval) {
    StepStats st;
    st.loss = grad_eval();
    ++st.grad_evals;
    ++total_grad_evals_;
    std::vector<T> g = ps_.gradient_flat();

    if (!all_finite(st.loss, g)) {
      st.aborted = true;
      st.diagnostic = "non-finite loss or gradient at w; parameters unchanged";
      return st;
    }

    double norm2 = 0.0;
    for (T x : g) norm2 += static_cast<double>(x) * static_cast<double>(x);
    st.grad_norm = std::sqrt(norm2);

    const bool perturb = cfg_.enabled && cfg_.rho > 0.0 && st.grad_norm > 0.0;
    if (perturb) {
      const std::vector<T> w_saved = ps_.values_flat();
      ps_.axpy_values(static_cast<T>(cfg_.rho / st.grad_norm), g);
      st.perturbed_loss = grad_eval();
      ++st.grad_evals;
      ++total_grad_evals_;
      std::vector<T> g_sam = ps_.gradient_flat();
      ps_.set_values_flat(w_saved);  // perturbation is transient
      if (!all_finite(st.perturbed_loss, g_sam)) {
        st.aborted = true;
        st.diagnostic = "non-finite loss or gradient at perturbed point; parameters unchanged";
        return st;
      }
      g = std::move(g_sam);
    }

    apply_base(g);
    return st;
  }

  int64_t total_grad_evals() const { return total_grad_evals_; }
  const SamConfig& config() const { return cfg_; }

 private:
  static bool all_finite(double loss, const std::vector<T>& g) {
    if (!std::isfinite(loss)) return false;
    for (T x : g)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

  void apply_base(const std::vector<T>& g) {
    if (cfg_.base == SamConfig::Base::sgd) {
      ps_.axpy_values(static_cast<T>(-cfg_.lr), g);
      return;
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    std::vector<T> w = ps_.values_flat();
    for (size_t i = 0; i < w.size(); ++i) {
      m_[i] = static_cast<T>(cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g[i]);
      v_[i] = static_cast<T>(cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g[i] * g[i]);
      const double mhat = m_[i] / bc1;
      const double vhat = v_[i] / bc2;
      w[i] = static_cast<T>(w[i] - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
    ps_.set_values_flat(w);
  }

  ParamStore<T>& ps_;
  SamConfig cfg_;
  std::vector<T> m_, v_;
  int64_t t_ = 0;
  int64_t total_grad_evals_ = 0;
};

}  // namespace lidia
