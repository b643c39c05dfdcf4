// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hrpo/tensor.hpp"

namespace hrpo {

// Central finite differences of a scalar function of a parameter set.
// `f` must be deterministic for fixed parameters. Coordinates are addressed
// as (tensor index, flat element index).
struct Coordinate {
  int tensor = 0;
  std::int64_t elem = 0;
};

class OracleFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

double finite_difference_grad(const std::function<double()>& f, Tensor param, std::int64_t elem,
                              double eps);

// Convenience: numeric gradient for a list of coordinates.
std::vector<double> finite_difference_grad(const std::function<double()>& f,
                                           std::span<const Tensor> params,
                                           std::span<const Coordinate> coords, double eps);

struct GradCheckResult {
  std::string category;
  double worst_rel_err = 0.0;
  std::string worst_site;
  int coords_checked = 0;
  bool passed = false;
  double tolerance = 0.0;
};

// |analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|)
bool grads_close(double analytic, double numeric, double rtol, double atol = 1e-9);
double rel_err(double analytic, double numeric, double atol = 1e-9);

}  // namespace hrpo
