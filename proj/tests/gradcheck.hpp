#pragma once

#include <functional>

#include "lidia/core/nn.hpp"

namespace lidia::test {

struct GradCheckReport {
  double max_rel_err = 0.0;
  int64_t coords_checked = 0;
  std::string worst_param;
};

/// Central finite-difference check of d(loss)/d(params) against reverse-mode
/// gradients. `make_loss` must rebuild the scalar loss graph from the current
/// parameter values on every call. With max_coords >= 0 a deterministic random
/// subset of coordinates is checked.
inline GradCheckReport finite_diff_check(ParamStore<double>& ps,
                                         const std::function<Var<double>()>& make_loss,
                                         double h = 1e-5, int64_t max_coords = -1,
                                         uint64_t subsample_seed = 12345) {
  ps.zero_grad();
  Var<double> loss = make_loss();
  backward(loss);
  std::vector<double> analytic = ps.gradient_flat();

  const int64_t total = ps.total_size();
  std::vector<int64_t> coords;
  if (max_coords < 0 || max_coords >= total) {
    coords.resize(static_cast<size_t>(total));
    for (int64_t i = 0; i < total; ++i) coords[static_cast<size_t>(i)] = i;
  } else {
    Rng rng(subsample_seed);
    std::vector<int64_t> all(static_cast<size_t>(total));
    for (int64_t i = 0; i < total; ++i) all[static_cast<size_t>(i)] = i;
    rng.shuffle(all);
    coords.assign(all.begin(), all.begin() + max_coords);
  }

  // locate parameter entry for a flat coordinate (for diagnostics)
  auto param_of = [&](int64_t coord) {
    int64_t off = 0;
    for (const auto& e : ps.entries()) {
      if (coord < off + e.var.val().numel()) return e.name;
      off += e.var.val().numel();
    }
    return std::string("?");
  };

  std::vector<double> w = ps.values_flat();
  GradCheckReport rep;
  for (int64_t c : coords) {
    std::vector<double> wp = w;
    wp[static_cast<size_t>(c)] = w[static_cast<size_t>(c)] + h;
    ps.set_values_flat(wp);
    const double fp = make_loss().scalar();
    wp[static_cast<size_t>(c)] = w[static_cast<size_t>(c)] - h;
    ps.set_values_flat(wp);
    const double fm = make_loss().scalar();
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[static_cast<size_t>(c)];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_param = param_of(c);
    }
    ++rep.coords_checked;
  }
  ps.set_values_flat(w);
  return rep;
}

/// FD check for a free function of a single tensor input (non-parameter ops).
inline double fd_check_input(Var<double> x, const std::function<Var<double>(const Var<double>&)>& f,
                             double h = 1e-5) {
  if (x.node->grad.defined()) x.node->grad.fill(0.0);
  Var<double> loss = f(x);
  backward(loss);
  Tensor<double> analytic = x.node->grad.defined() ? x.node->grad : zeros_like(x.val());
  double max_rel = 0.0;
  for (int64_t i = 0; i < x.val().numel(); ++i) {
    const double orig = x.val()[i];
    x.val()[i] = orig + h;
    const double fp = f(x).scalar();
    x.val()[i] = orig - h;
    const double fm = f(x).scalar();
    x.val()[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
    max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
  }
  return max_rel;
}

inline Tensor<double> random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.normal(0.0, scale);
  return t;
}

}  // namespace lidia::test
