// SPDX-License-Identifier: Apache-2.0
#include "hrpo/gate.hpp"

#include <cmath>

namespace hrpo {

void GateConfig::validate() const {
  if (!(tau > 0.0)) throw ContractViolation("gate.tau must be > 0");
  if (!(c > 0.0)) throw ContractViolation("gate.c must be > 0");
  if (!(r_min > 0.0 && r_min < 0.999)) throw ContractViolation("gate.r_min must lie in (0, 0.999)");
}

std::vector<std::pair<std::string, Tensor>> GateParams::named_tensors() const {
  return {{"gate.w_r", w_r}, {"gate.b_r", b_r}, {"gate.w_i", w_i}, {"gate.b_i", b_i},
          {"gate.lambda", lambda}};
}

GateParams GateParams::clone() const {
  auto copy = [](const Tensor& t) {
    return Tensor::from_data(t.shape(), std::vector<double>(t.data(), t.data() + t.numel()),
                             t.requires_grad());
  };
  return GateParams{copy(w_r), copy(b_r), copy(w_i), copy(b_i), copy(lambda)};
}

Tensor interpolate_embedding(Tape* tape, const Tensor& logits, double tau,
                             const Tensor& embedding) {
  if (!(tau > 0.0)) throw ContractViolation("interpolate_embedding requires tau > 0");
  for (std::int64_t i = 0; i < logits.numel(); ++i)
    if (!std::isfinite(logits.at(i)))
      throw ContractViolation("interpolate_embedding on non-finite logits");
  Tensor scaled = affine(tape, logits, 1.0 / tau, 0.0);
  Tensor p = softmax_rows(tape, scaled);
  Tensor nrm = l2_norm(tape, p);
  Tensor p_unit = div_by_scalar(tape, p, nrm);
  return matmul(tape, p_unit, embedding);  // [1 x V] . [V x d]
}

FuseResult fuse(Tape* tape, const Tensor& token_embedding, const Tensor& projected,
                const GateParams& params, double c, bool in_think) {
  const int d = token_embedding.cols();
  if (!in_think) {
    GateTrace trace;
    trace.retention.assign(static_cast<std::size_t>(d), 1.0);
    trace.hidden_ratio = 0.0;
    return {token_embedding, std::move(trace)};
  }
  if (projected.cols() != d) throw ContractViolation("fuse shape mismatch");
  Tensor r = sigmoid(tape, add_bias(tape, matmul(tape, token_embedding, params.w_r), params.b_r));
  Tensor i = sigmoid(tape, add_bias(tape, matmul(tape, token_embedding, params.w_i), params.b_i));
  Tensor rate = mul(tape, softplus(tape, params.lambda), r);
  Tensor a = exp(tape, affine(tape, rate, -c, 0.0));
  Tensor latent_scale = sqrt(tape, affine(tape, mul(tape, a, a), -1.0, 1.0));
  Tensor e_next = add(tape, mul(tape, a, token_embedding),
                      mul(tape, latent_scale, mul(tape, i, projected)));

  GateTrace trace;
  trace.retention.assign(a.data(), a.data() + a.numel());
  double acc = 0.0;
  for (std::int64_t k = 0; k < latent_scale.numel(); ++k) acc += latent_scale.at(k);
  trace.hidden_ratio = acc / static_cast<double>(latent_scale.numel());
  return {std::move(e_next), std::move(trace)};
}

GateParams init_gate(const GateConfig& config, int d_model, Rng& rng) {
  config.validate();
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_model));
  GateParams p;
  p.w_r = Tensor::uniform({d_model, d_model}, -bound, bound, rng, true);
  p.b_r = Tensor::uniform({d_model}, -bound, bound, rng, true);
  p.w_i = Tensor::uniform({d_model, d_model}, -bound, bound, rng, true);
  p.b_i = Tensor::uniform({d_model}, -bound, bound, rng, true);
  std::vector<double> lam(static_cast<std::size_t>(d_model));
  for (auto& v : lam) {
    const double u = rng.uniform(config.r_min, 0.999);
    // softplus(lambda) = -ln(u)/c  =>  lambda = ln(exp(-ln(u)/c) - 1)
    v = std::log(std::expm1(-std::log(u) / config.c));
  }
  p.lambda = Tensor::from_data({1, d_model}, std::move(lam), true);
  return p;
}

double hidden_ratio(std::span<const GateTrace> traces) {
  if (traces.empty()) return 0.0;
  double acc = 0.0;
  std::size_t count = 0;
  for (const GateTrace& t : traces) {
    for (double a : t.retention) {
      acc += std::sqrt(std::max(0.0, 1.0 - a * a));
      ++count;
    }
  }
  return count == 0 ? 0.0 : acc / static_cast<double>(count);
}

}  // namespace hrpo
