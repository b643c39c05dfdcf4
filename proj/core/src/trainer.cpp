// SPDX-License-Identifier: Apache-2.0
#include "hrpo/trainer.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "hrpo/threading.hpp"

namespace hrpo {

void TrainerConfig::validate() const {
  if (!(lr_main > 0.0 && lr_gate_linear > 0.0 && lr_lambda > 0.0))
    throw ContractViolation("learning rates must be > 0");
  if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0))
    throw ContractViolation("warmup_ratio must lie in [0, 1)");
  if (group_size < 2) throw ContractViolation("group_size must be >= 2");
  if (batch_prompts < 1) throw ContractViolation("batch_prompts must be >= 1");
  if (!(max_grad_norm > 0.0)) throw ContractViolation("max_grad_norm must be > 0");
  if (total_steps < 1) throw ContractViolation("total_steps must be >= 1");
}

std::vector<double> compute_advantages(std::span<const double> rewards, double adv_eps) {
  const std::size_t g = rewards.size();
  if (g < 2) throw ContractViolation("compute_advantages requires a group of >= 2");
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= static_cast<double>(g);
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(g);
  std::vector<double> out(g, 0.0);
  if (var == 0.0) return out;  // uniform rewards carry no signal
  const double denom = std::sqrt(var) + adv_eps;
  for (std::size_t i = 0; i < g; ++i) out[i] = (rewards[i] - mean) / denom;
  return out;
}

std::vector<double> kl_penalty(std::span<const double> logp_theta,
                               std::span<const double> logp_ref) {
  if (logp_theta.size() != logp_ref.size())
    throw ContractViolation("kl_penalty requires aligned token positions");
  std::vector<double> out(logp_theta.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double d = logp_ref[i] - logp_theta[i];
    out[i] = std::exp(d) - d - 1.0;
  }
  return out;
}

double lr_schedule(int step, int total_steps, double warmup_ratio, double base_lr) {
  if (step < 0 || step > total_steps) throw ContractViolation("lr_schedule step out of range");
  const double warmup = warmup_ratio * total_steps;
  if (warmup > 0.0 && step < warmup) return base_lr * static_cast<double>(step) / warmup;
  const double denom = total_steps - warmup;
  const double progress = denom > 0.0 ? (static_cast<double>(step) - warmup) / denom : 1.0;
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double clip_global_norm(std::span<const ParamSlot> params, double max_norm) {
  double sq = 0.0;
  for (const ParamSlot& p : params) {
    const auto g = p.tensor.grad_view();
    for (double v : g) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (std::isfinite(norm) && norm > max_norm && norm > 0.0) {
    const double scale = max_norm / norm;
    for (const ParamSlot& p : params) {
      if (!p.tensor.grad_allocated()) continue;
      double* g = p.tensor.grad();
      for (std::int64_t i = 0; i < p.tensor.numel(); ++i) g[i] *= scale;
    }
  }
  return norm;
}

void adamw_update(Tensor param, std::span<const double> grad, AdamMoments& moments,
                  long long step, double lr, double beta1, double beta2, double eps,
                  double weight_decay) {
  const std::size_t n = static_cast<std::size_t>(param.numel());
  if (moments.m.empty()) {
    moments.m.assign(n, 0.0);
    moments.v.assign(n, 0.0);
  }
  if (moments.m.size() != n || grad.size() != n)
    throw ContractViolation("optimizer moment shapes must match the parameter");
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  double* p = param.data();
  for (std::size_t i = 0; i < n; ++i) {
    moments.m[i] = beta1 * moments.m[i] + (1.0 - beta1) * grad[i];
    moments.v[i] = beta2 * moments.v[i] + (1.0 - beta2) * grad[i] * grad[i];
    const double mhat = moments.m[i] / bc1;
    const double vhat = moments.v[i] / bc2;
    p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p[i]);
  }
}

std::vector<ParamSlot> build_param_slots(const PolicyParameters& policy, const GateParams& gate) {
  std::vector<ParamSlot> slots;
  for (auto& [name, tensor] : policy.named_tensors())
    slots.push_back({name, tensor, ParamGroup::Main, tensor.rank() >= 2});
  slots.push_back({"gate.w_r", gate.w_r, ParamGroup::GateLinear, true});
  slots.push_back({"gate.b_r", gate.b_r, ParamGroup::GateLinear, false});
  slots.push_back({"gate.w_i", gate.w_i, ParamGroup::GateLinear, true});
  slots.push_back({"gate.b_i", gate.b_i, ParamGroup::GateLinear, false});
  // The retention vector is decayed on purpose: shrinking it toward zero
  // slowly opens the gate to latent features.
  slots.push_back({"gate.lambda", gate.lambda, ParamGroup::Lambda, true});
  return slots;
}

Trainer::Trainer(PolicyParameters policy, PolicyParameters reference, GateParams gate,
                 GateConfig gate_config, TrainerConfig config, GenerationConfig generation,
                 const Vocabulary* vocab, std::vector<TaskInstance> tasks, Rng rng)
    : policy_(std::move(policy)),
      reference_(std::move(reference)),
      gate_(std::move(gate)),
      gate_config_(gate_config),
      config_(config),
      generation_(generation),
      vocab_(vocab),
      tasks_(std::move(tasks)),
      rng_(rng) {
  config_.validate();
  gate_config_.validate();
  generation_.validate();
  params_ = build_param_slots(policy_, gate_);
}

void Trainer::zero_grads() {
  for (ParamSlot& p : params_) p.tensor.zero_grad();
}

std::pair<double, double> Trainer::accumulate_loss(std::span<RolloutGroup> groups) {
  const double traj_weight =
      1.0 / (static_cast<double>(groups.size()) * static_cast<double>(config_.group_size));
  double loss_total = 0.0;
  double kl_total = 0.0;
  std::size_t kl_tokens = 0;
  for (RolloutGroup& group : groups) {
    if (group.advantages.size() != group.trajectories.size())
      throw ContractViolation("advantages must be filled before the loss");
    for (std::size_t i = 0; i < group.trajectories.size(); ++i) {
      const HybridTrajectory& traj = group.trajectories[i];
      if (!traj.reward_set) throw ContractViolation("trajectory has no reward");
      Tape tape;
      Tensor logp = replay_logprobs(&tape, policy_, gate_, gate_config_, traj, generation_);
      const std::vector<double> ref = reference_logprobs(reference_, traj, generation_);
      Tensor ref_t = Tensor::from_data({static_cast<int>(ref.size())},
                                       std::vector<double>(ref.begin(), ref.end()));
      // k3 = exp(d) - d - 1 with d = logp_ref - logp_theta
      Tensor d = add(&tape, ref_t, affine(&tape, logp, -1.0, 0.0));
      Tensor k3 = add(&tape, exp(&tape, d), affine(&tape, d, -1.0, -1.0));
      Tensor term = add(&tape, affine(&tape, logp, group.advantages[i], 0.0),
                        affine(&tape, k3, -config_.beta, 0.0));
      Tensor loss_i = affine(&tape, mean(&tape, term), -1.0, 0.0);
      tape.backward(loss_i, traj_weight);
      loss_total += loss_i.value() * traj_weight;
      for (std::int64_t t = 0; t < k3.numel(); ++t) kl_total += k3.at(t);
      kl_tokens += static_cast<std::size_t>(k3.numel());
    }
  }
  return {loss_total, kl_tokens ? kl_total / static_cast<double>(kl_tokens) : 0.0};
}

std::optional<double> Trainer::apply_update(double lr_scale_step) {
  double sq = 0.0;
  for (const ParamSlot& p : params_)
    for (double v : p.tensor.grad_view()) sq += v * v;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) return std::nullopt;

  clip_global_norm(params_, config_.max_grad_norm);
  opt_.step += 1;
  for (ParamSlot& p : params_) {
    double base = config_.lr_main;
    if (p.group == ParamGroup::GateLinear) base = config_.lr_gate_linear;
    if (p.group == ParamGroup::Lambda) base = config_.lr_lambda;
    const double lr = base * lr_scale_step;
    std::span<const double> grad = p.tensor.grad_view();
    std::vector<double> zeros;
    if (grad.empty()) {
      zeros.assign(static_cast<std::size_t>(p.tensor.numel()), 0.0);
      grad = zeros;
    }
    adamw_update(p.tensor, grad, opt_.moments[p.name], opt_.step, lr, config_.adam_beta1,
                 config_.adam_beta2, config_.adam_eps, p.decay ? config_.weight_decay : 0.0);
  }
  policy_.bump_version();
  return norm;
}

StepMetrics Trainer::train_step() {
  if (tasks_.empty()) throw ContractViolation("trainer has no tasks to sample");
  Rng batch_rng = rng_.fork(0x6261746368ULL).fork(static_cast<std::uint64_t>(step_));
  std::vector<TaskInstance> batch;
  batch.reserve(static_cast<std::size_t>(config_.batch_prompts));
  for (int i = 0; i < config_.batch_prompts; ++i)
    batch.push_back(tasks_[batch_rng.below(tasks_.size())]);
  return train_step(batch);
}

StepMetrics Trainer::train_step(std::span<const TaskInstance> batch) {
  if (batch.empty()) throw ContractViolation("empty prompt batch");
  Rng step_rng = rng_.fork(0x726f6c6cULL).fork(static_cast<std::uint64_t>(step_));

  // Rollout phase: independent prompts fan out to workers; each worker owns
  // its rng substream so results do not depend on the schedule.
  std::vector<RolloutGroup> groups(batch.size());
  parallel_for(static_cast<int>(batch.size()), config_.rollout_threads, [&](int p) {
    Rng group_rng = step_rng.fork(static_cast<std::uint64_t>(p));
    RolloutGroup group = rollout_group(policy_, gate_, gate_config_, batch[p].prompt_ids,
                                       config_.group_size, generation_, group_rng);
    std::vector<double> rewards;
    rewards.reserve(group.trajectories.size());
    for (HybridTrajectory& traj : group.trajectories) {
      traj.reward = outcome_reward(*vocab_, traj.gen_ids, batch[p]);
      traj.reward_set = true;
      rewards.push_back(traj.reward);
    }
    group.advantages = compute_advantages(rewards, config_.adv_eps);
    groups[static_cast<std::size_t>(p)] = std::move(group);
  });

  StepMetrics metrics;
  metrics.step = step_;
  double reward_acc = 0.0, len_acc = 0.0, ratio_acc = 0.0;
  std::size_t ratio_steps = 0;
  int traj_count = 0;
  for (const RolloutGroup& group : groups)
    for (const HybridTrajectory& traj : group.trajectories) {
      reward_acc += traj.reward;
      len_acc += traj.completion_length();
      for (const GateTrace& tr : traj.gate_traces) {
        ratio_acc += tr.hidden_ratio;
        ++ratio_steps;
      }
      ++traj_count;
    }
  metrics.reward_mean = reward_acc / traj_count;
  metrics.completion_len_mean = len_acc / traj_count;
  metrics.hidden_ratio_mean =
      ratio_steps ? ratio_acc / static_cast<double>(ratio_steps) : 0.0;
  if (!ema_initialized_) {
    reward_ema_ = metrics.reward_mean;
    ema_initialized_ = true;
  } else {
    reward_ema_ = kEmaDecay * reward_ema_ + (1.0 - kEmaDecay) * metrics.reward_mean;
  }
  metrics.reward_ema = reward_ema_;

  // Update phase: exclusive parameter access, sequential replay.
  zero_grads();
  auto [loss, kl_mean] = accumulate_loss(groups);
  if (config_.inject_nan_at_step >= 0 && step_ == config_.inject_nan_at_step)
    loss = std::numeric_limits<double>::quiet_NaN();
  metrics.loss = loss;
  metrics.kl_mean = kl_mean;
  const double lr_scale = lr_schedule(step_, config_.total_steps, config_.warmup_ratio, 1.0);
  metrics.lr = config_.lr_main * lr_scale;
  const std::optional<double> norm = apply_update(lr_scale);
  if (norm) {
    metrics.grad_norm = *norm;
  } else {
    metrics.grad_norm = 0.0;
    ++skipped_steps_;
  }
  ++step_;
  return metrics;
}

}  // namespace hrpo
