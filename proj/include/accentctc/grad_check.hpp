#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "accentctc/autodiff.hpp"

namespace accentctc {

using ScalarFn = std::function<Var<double>(Graph<double>&, const Var<double>&)>;

namespace detail {

inline double relative_gap(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

inline double eval_scalar(const ScalarFn& f, const Tensor<double>& point) {
  Graph<double> g;
  Var<double> x = g.input(point, false);
  const double v = f(g, x).item();
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite evaluation");
  return v;
}

}  // namespace detail

/// Max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
/// using central differences of width 2*eps.
inline double grad_check(const ScalarFn& f, const Tensor<double>& point, double eps) {
  if (!(eps > 0.0)) throw UsageError("grad_check: eps must be positive");
  Graph<double> g;
  Var<double> x = g.input(point);
  Var<double> y = f(g, x);
  if (!std::isfinite(y.item())) throw NumericError("grad_check: non-finite evaluation");
  g.backward(y);
  const Tensor<double> analytic = x.grad();

  double worst = 0.0;
  Tensor<double> probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    probe[i] = point[i] + eps;
    const double up = detail::eval_scalar(f, probe);
    probe[i] = point[i] - eps;
    const double down = detail::eval_scalar(f, probe);
    probe[i] = point[i];
    worst = std::max(worst, detail::relative_gap(analytic[i], (up - down) / (2 * eps)));
  }
  return worst;
}

/// Same measure over the coordinates of a set of parameters, for a loss
/// that builds its own graph from those parameters. `stride` > 1 checks
/// every stride-th coordinate of each parameter.
inline double grad_check_params(const std::function<Var<double>(Graph<double>&)>& loss,
                                const std::vector<Parameter<double>*>& params,
                                double eps, std::size_t stride = 1) {
  if (!(eps > 0.0)) throw UsageError("grad_check: eps must be positive");
  for (auto* p : params) p->zero_grad();
  {
    Graph<double> g;
    Var<double> y = loss(g);
    g.backward(y);
    g.accumulate_parameter_grads();
  }
  auto eval = [&] {
    Graph<double> g;
    const double v = loss(g).item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite evaluation");
    return v;
  };
  double worst = 0.0;
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->value.size(); i += std::max<std::size_t>(stride, 1)) {
      const double orig = p->value[i];
      p->value[i] = orig + eps;
      const double up = eval();
      p->value[i] = orig - eps;
      const double down = eval();
      p->value[i] = orig;
      worst = std::max(worst, detail::relative_gap(p->grad[i], (up - down) / (2 * eps)));
    }
  }
  return worst;
}

}  // namespace accentctc
