// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference audit behind the gradcheck subcommand. Each category
// builds a small randomized problem, differentiates a weighted sum of the
// output through the tape, and compares sampled coordinates against central
// differences.
#include <cmath>
#include <functional>

#include "hrpo/harness.hpp"
#include "hrpo/rollout.hpp"

namespace hrpo {

namespace {

constexpr double kKernelEps = 1e-6;
constexpr double kKernelTol = 1e-6;
constexpr double kLossEps = 1e-5;
constexpr double kLossTol = 1e-5;
constexpr double kAtol = 1e-9;
constexpr int kCoordsPerCategory = 20;

struct Problem {
  std::vector<Tensor> params;              // leaves to differentiate
  std::function<Tensor(Tape*)> objective;  // scalar output
};

// Central differences sit on a noise floor of roughly |f|*machine_eps/eps,
// so coordinates are resampled until the analytic gradient clears it; the
// adjoints of near-zero coordinates are still covered through the absolute
// tolerance in grads_close.
constexpr double kMinAnalytic = 5e-3;

GradCheckResult check_problem(const std::string& category, const Problem& prob, double eps,
                              double tol, Rng& rng, int coords = kCoordsPerCategory) {
  GradCheckResult result;
  result.category = category;
  result.tolerance = tol;
  for (const Tensor& p : prob.params) p.impl()->grad.clear();
  Tape tape;
  Tensor loss = prob.objective(&tape);
  tape.backward(loss);

  const auto value = [&]() {
    Tape t;
    return prob.objective(&t).value();
  };

  result.passed = true;
  for (int c = 0; c < coords; ++c) {
    int ti = 0;
    std::int64_t ei = 0;
    for (int attempt = 0; attempt < 200; ++attempt) {
      ti = static_cast<int>(rng.below(prob.params.size()));
      const Tensor& cand = prob.params[static_cast<std::size_t>(ti)];
      ei = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(cand.numel())));
      if (std::abs(cand.grad_at(ei)) >= kMinAnalytic) break;
    }
    const Tensor& p = prob.params[static_cast<std::size_t>(ti)];
    const double analytic = p.grad_at(ei);
    const double numeric = finite_difference_grad(value, p, ei, eps);
    const double err = rel_err(analytic, numeric, kAtol);
    if (err > result.worst_rel_err) {
      result.worst_rel_err = err;
      result.worst_site = category + "/" + std::to_string(ti) + "[" + std::to_string(ei) + "]";
    }
    if (!grads_close(analytic, numeric, tol, kAtol)) result.passed = false;
    ++result.coords_checked;
  }
  return result;
}

Tensor rand_tensor(Shape s, Rng& rng, double lo = -2.0, double hi = 2.0) {
  return Tensor::uniform(std::move(s), lo, hi, rng, true);
}

Tensor weight_like(const Tensor& t, Rng& rng) {
  Tensor w = Tensor::uniform(t.shape(), -1.0, 1.0, rng, false);
  return w;
}

Tensor weighted_sum(Tape* tape, const Tensor& out, const Tensor& weights) {
  return sum(tape, mul(tape, out, weights));
}

// One randomized instance per kernel kind. Index-carrying kinds get fixed id
// tensors; the masked-score weights zero out the inert upper triangle so the
// huge mask constant cannot wash out the finite differences.
GradCheckResult check_kernels(Rng& rng) {
  GradCheckResult agg;
  agg.category = "kernels";
  agg.tolerance = kKernelTol;
  agg.passed = true;
  for (OpKind kind : all_op_kinds()) {
    Problem prob;
    std::vector<Tensor> operands;
    Tensor weights;
    switch (kind) {
      case OpKind::MatMul:
        operands = {rand_tensor({3, 4}, rng), rand_tensor({4, 2}, rng)};
        break;
      case OpKind::MatMulNT:
        operands = {rand_tensor({3, 4}, rng), rand_tensor({2, 4}, rng)};
        break;
      case OpKind::Add:
      case OpKind::Mul:
        operands = {rand_tensor({3, 4}, rng), rand_tensor({3, 4}, rng)};
        break;
      case OpKind::AddBias:
        operands = {rand_tensor({3, 4}, rng), rand_tensor({4}, rng)};
        break;
      case OpKind::Sigmoid:
      case OpKind::Softplus:
      case OpKind::Exp:
      case OpKind::Sqrt:
      case OpKind::Log:
        operands = {kind == OpKind::Log || kind == OpKind::Sqrt
                        ? rand_tensor({3, 4}, rng, 0.2, 2.0)
                        : rand_tensor({3, 4}, rng)};
        break;
      case OpKind::Softmax:
      case OpKind::LogSoftmax:
        operands = {rand_tensor({3, 5}, rng)};
        break;
      case OpKind::L2Norm:
        operands = {rand_tensor({6}, rng)};
        break;
      case OpKind::LayerNorm:
        operands = {rand_tensor({3, 6}, rng), rand_tensor({6}, rng, 0.5, 1.5),
                    rand_tensor({6}, rng)};
        break;
      case OpKind::MaskedAttnScores:
        operands = {rand_tensor({4, 3}, rng), rand_tensor({4, 3}, rng)};
        break;
      case OpKind::GatherRows:
        operands = {rand_tensor({5, 3}, rng),
                    Tensor::from_data({4}, {0.0, 3.0, 3.0, 4.0})};
        break;
      case OpKind::PickPerRow:
        operands = {rand_tensor({4, 5}, rng),
                    Tensor::from_data({4}, {1.0, 0.0, 4.0, 2.0})};
        break;
      case OpKind::DivByScalar:
        operands = {rand_tensor({3, 4}, rng), rand_tensor({}, rng, 0.5, 2.0)};
        break;
      case OpKind::Mean:
      case OpKind::Sum:
        operands = {rand_tensor({3, 4}, rng)};
        break;
    }
    {
      Tape probe;
      Tensor out = apply(&probe, kind, operands);
      weights = weight_like(out, rng);
      if (kind == OpKind::MaskedAttnScores)
        for (int i = 0; i < out.rows(); ++i)
          for (int j = i + 1; j < out.cols(); ++j)
            weights.data()[static_cast<std::size_t>(i) * out.cols() + j] = 0.0;
    }
    prob.params.assign(operands.begin(), operands.end());
    prob.objective = [kind, operands, weights](Tape* tape) {
      return weighted_sum(tape, apply(tape, kind, operands), weights);
    };
    const int coords = kind == OpKind::GatherRows || kind == OpKind::PickPerRow ? 10 : 6;
    GradCheckResult r =
        check_problem(std::string(op_kind_name(kind)), prob, kKernelEps, kKernelTol, rng, coords);
    agg.coords_checked += r.coords_checked;
    if (r.worst_rel_err > agg.worst_rel_err) {
      agg.worst_rel_err = r.worst_rel_err;
      agg.worst_site = r.worst_site;
    }
    if (!r.passed) agg.passed = false;
  }
  return agg;
}

GradCheckResult check_embed(Rng& rng) {
  Problem prob;
  Tensor table = rand_tensor({9, 5}, rng);
  std::vector<int> ids{0, 4, 4, 8, 2};
  Tensor weights;
  {
    Tape probe;
    weights = weight_like(gather_rows(&probe, table, ids), rng);
  }
  prob.params = {table};
  prob.objective = [table, ids, weights](Tape* tape) {
    return weighted_sum(tape, gather_rows(tape, table, ids), weights);
  };
  return check_problem("embed", prob, kKernelEps, kKernelTol, rng);
}

GradCheckResult check_attention(Rng& rng) {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 8;
  cfg.d_ff = 16;
  cfg.vocab_size = 11;
  cfg.max_seq_len = 12;
  Rng init_rng = rng.fork(1);
  PolicyParameters policy = PolicyParameters::init(cfg, init_rng);
  std::vector<int> ids{1, 4, 7, 2, 9};
  Tensor weights;
  {
    Tape probe;
    weights = weight_like(forward(&probe, policy, embed(&probe, policy, ids), nullptr), rng);
  }
  Problem prob;
  for (auto& [name, tensor] : policy.named_tensors()) prob.params.push_back(tensor);
  prob.objective = [policy, ids, weights](Tape* tape) {
    return weighted_sum(tape, forward(tape, policy, embed(tape, policy, ids), nullptr), weights);
  };
  return check_problem("attention", prob, kKernelEps, kKernelTol, rng);
}

GradCheckResult check_gate(Rng& rng) {
  const int d = 6;
  GateConfig gcfg;
  gcfg.r_min = 0.9;
  Rng init_rng = rng.fork(2);
  GateParams gate = init_gate(gcfg, d, init_rng);
  Tensor e_hat = rand_tensor({1, d}, rng, -1.0, 1.0);
  Tensor h = rand_tensor({1, d}, rng, -1.0, 1.0);
  Tensor weights = Tensor::uniform({1, d}, -1.0, 1.0, rng);
  Problem prob;
  prob.params = {gate.w_r, gate.b_r, gate.w_i, gate.b_i, gate.lambda, e_hat, h};
  prob.objective = [gate, e_hat, h, weights, c = gcfg.c](Tape* tape) {
    FuseResult fused = fuse(tape, e_hat, h, gate, c, true);
    return weighted_sum(tape, fused.input, weights);
  };
  return check_problem("gate", prob, kKernelEps, kKernelTol, rng);
}

GradCheckResult check_interpolation(Rng& rng) {
  const int v = 11, d = 8;
  Tensor logit_row = rand_tensor({1, v}, rng);
  Tensor table = rand_tensor({v, d}, rng);
  Tensor weights = Tensor::uniform({1, d}, -1.0, 1.0, rng);
  Problem prob;
  prob.params = {logit_row, table};
  prob.objective = [logit_row, table, weights](Tape* tape) {
    return weighted_sum(tape, interpolate_embedding(tape, logit_row, 0.5, table), weights);
  };
  return check_problem("interpolation", prob, kKernelEps, kKernelTol, rng);
}

// Full HRPO loss on frozen trajectories: the sampled tokens and advantages
// are fixed while the latent features are recomputed from the perturbed
// parameters, so every path through the gate and interpolation is exercised.
GradCheckResult check_full_loss(Rng& rng) {
  Vocabulary vocab;
  ModelConfig mcfg;
  mcfg.n_layers = 2;
  mcfg.n_heads = 2;
  mcfg.d_model = 16;
  mcfg.d_ff = 32;
  mcfg.vocab_size = vocab.size();
  mcfg.max_seq_len = 32;
  GateConfig gcfg;
  gcfg.r_min = 0.9;
  Rng model_rng = rng.fork(3);
  Rng gate_rng = rng.fork(4);
  PolicyParameters policy = PolicyParameters::init(mcfg, model_rng);
  PolicyParameters reference = policy.clone();
  GateParams gate = init_gate(gcfg, mcfg.d_model, gate_rng);

  GenerationConfig gen;
  gen.mode = GenerationMode::Hybrid;
  gen.max_new_tokens = 8;
  gen.delimiter_id = vocab.delimiter_id();
  gen.eos_id = vocab.eos_id();

  Rng task_rng = rng.fork(5);
  TaskInstance inst = make_task(vocab, TaskKind::Addition, 1, task_rng);
  TrainerConfig tcfg;
  tcfg.group_size = 2;
  tcfg.batch_prompts = 1;

  Trainer trainer(std::move(policy), std::move(reference), std::move(gate), gcfg, tcfg, gen, &vocab,
                  {inst}, rng.fork(6));
  Rng roll_rng = rng.fork(7);
  std::vector<RolloutGroup> groups;
  groups.push_back(rollout_group(trainer.policy(), trainer.gate(), gcfg, inst.prompt_ids,
                                 tcfg.group_size, gen, roll_rng));
  // Force a mixed-reward group so advantages are nonzero regardless of what
  // the untrained policy produced.
  groups[0].trajectories[0].reward = 1.0;
  groups[0].trajectories[1].reward = 0.0;
  for (auto& t : groups[0].trajectories) t.reward_set = true;
  const std::vector<double> rewards{1.0, 0.0};
  groups[0].advantages = compute_advantages(rewards, tcfg.adv_eps);

  std::vector<Tensor> params;
  for (const ParamSlot& slot : trainer.param_slots()) params.push_back(slot.tensor);

  // accumulate_loss builds per-trajectory tapes and fills the gradients
  // itself, so the comparison runs directly instead of through check_problem.
  GradCheckResult result;
  result.category = "full_loss";
  result.tolerance = kLossTol;
  result.passed = true;
  trainer.zero_grads();
  trainer.accumulate_loss(groups);
  std::vector<double> analytic;
  std::vector<std::pair<int, std::int64_t>> coords;
  Rng coord_rng = rng.fork(8);
  for (int c = 0; c < kCoordsPerCategory; ++c) {
    int ti = 0;
    std::int64_t ei = 0;
    for (int attempt = 0; attempt < 200; ++attempt) {
      ti = static_cast<int>(coord_rng.below(params.size()));
      const Tensor& cand = params[static_cast<std::size_t>(ti)];
      ei = static_cast<std::int64_t>(coord_rng.below(static_cast<std::uint64_t>(cand.numel())));
      if (std::abs(cand.grad_at(ei)) >= 1e-3) break;
    }
    coords.emplace_back(ti, ei);
    analytic.push_back(params[static_cast<std::size_t>(ti)].grad_at(ei));
  }
  const auto value = [&]() {
    trainer.zero_grads();
    return trainer.accumulate_loss(groups).first;
  };
  for (std::size_t c = 0; c < coords.size(); ++c) {
    const Tensor& p = params[static_cast<std::size_t>(coords[c].first)];
    const double numeric = finite_difference_grad(value, p, coords[c].second, kLossEps);
    const double err = rel_err(analytic[c], numeric, kAtol);
    if (err > result.worst_rel_err) {
      result.worst_rel_err = err;
      result.worst_site = "full_loss/" + std::to_string(coords[c].first) + "[" +
                          std::to_string(coords[c].second) + "]";
    }
    if (!grads_close(analytic[c], numeric, kLossTol, kAtol)) result.passed = false;
    ++result.coords_checked;
  }
  return result;
}

}  // namespace

GradcheckReport run_gradcheck(std::uint64_t seed) {
  Rng rng(seed);
  GradcheckReport report;
  report.categories.push_back(check_kernels(rng));
  report.categories.push_back(check_embed(rng));
  report.categories.push_back(check_attention(rng));
  report.categories.push_back(check_gate(rng));
  report.categories.push_back(check_interpolation(rng));
  report.categories.push_back(check_full_loss(rng));
  report.all_passed = true;
  for (const GradCheckResult& r : report.categories)
    if (!r.passed) report.all_passed = false;
  return report;
}

}  // namespace hrpo
