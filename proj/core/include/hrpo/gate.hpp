// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

#include "hrpo/rng.hpp"
#include "hrpo/tensor.hpp"

namespace hrpo {

struct GateConfig {
  double tau = 0.5;    // interpolation temperature for the embedding projection
  double c = 8.0;      // fixed scaling constant in the retention gate
  double r_min = 0.95; // lower bound of the initial retention range

  void validate() const;
};

// Learnable gate: two affine sigmoid gates plus a per-dimension retention
// vector. Lambda is unconstrained; softplus maps it to a positive rate.
struct GateParams {
  Tensor w_r;      // [d x d], recurrence gate
  Tensor b_r;      // [d]
  Tensor w_i;      // [d x d], input gate
  Tensor b_i;      // [d]
  Tensor lambda;   // [1 x d]

  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  GateParams clone() const;
};

// Per-step record of the gate opening. retention holds a_t; hidden_ratio is
// mean over dimensions of sqrt(1 - a_t^2).
struct GateTrace {
  std::vector<double> retention;
  double hidden_ratio = 0.0;
};

// Projects an output distribution back into embedding space:
// h = softmax(logits / tau) / ||.||_2, then mixed through the embedding rows.
// Differentiable end to end through logits and the embedding matrix.
Tensor interpolate_embedding(Tape* tape, const Tensor& logits, double tau, const Tensor& embedding);

struct FuseResult {
  Tensor input;  // e_{t+1}
  GateTrace trace;
};

// Hybrid input construction. Inside the think phase:
//   r = sigmoid(W_r e + b_r), i = sigmoid(W_i e + b_i)
//   a = exp(-c * softplus(lambda) * r)
//   e' = a * e + sqrt(1 - a^2) * (i * h)
// Outside it, the sampled-token embedding passes through unchanged and the
// trace records full retention.
FuseResult fuse(Tape* tape, const Tensor& token_embedding, const Tensor& projected,
                const GateParams& params, double c, bool in_think);

// Linear maps ~ U[-1/sqrt(d), 1/sqrt(d)]; lambda chosen so the initial
// retention exp(-c * softplus(lambda)) is uniform on [r_min, 0.999].
GateParams init_gate(const GateConfig& config, int d_model, Rng& rng);

// Mean of sqrt(1 - a^2) over all think steps and dimensions; 0 when empty.
double hidden_ratio(std::span<const GateTrace> traces);

}  // namespace hrpo
