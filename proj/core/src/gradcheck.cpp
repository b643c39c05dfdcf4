// SPDX-License-Identifier: Apache-2.0
#include "hrpo/gradcheck.hpp"

#include <cmath>

namespace hrpo {

double finite_difference_grad(const std::function<double()>& f, Tensor param, std::int64_t elem,
                              double eps) {
  if (!(eps > 0.0)) throw ContractViolation("finite_difference_grad requires eps > 0");
  double* slot = param.data() + elem;
  const double saved = *slot;
  *slot = saved + eps;
  const double fp = f();
  *slot = saved - eps;
  const double fm = f();
  *slot = saved;
  if (!std::isfinite(fp) || !std::isfinite(fm))
    throw OracleFailure("finite_difference_grad: non-finite objective value");
  return (fp - fm) / (2.0 * eps);
}

std::vector<double> finite_difference_grad(const std::function<double()>& f,
                                           std::span<const Tensor> params,
                                           std::span<const Coordinate> coords, double eps) {
  std::vector<double> out;
  out.reserve(coords.size());
  for (const Coordinate& c : coords)
    out.push_back(finite_difference_grad(f, params[c.tensor], c.elem, eps));
  return out;
}

double rel_err(double analytic, double numeric, double atol) {
  const double diff = std::abs(analytic - numeric);
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  if (diff <= atol) return 0.0;
  return diff / std::max(scale, atol);
}

bool grads_close(double analytic, double numeric, double rtol, double atol) {
  return std::abs(analytic - numeric) <=
         atol + rtol * std::max(std::abs(analytic), std::abs(numeric));
}

}  // namespace hrpo
