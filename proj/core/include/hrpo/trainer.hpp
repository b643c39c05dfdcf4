// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hrpo/gate.hpp"
#include "hrpo/model.hpp"
#include "hrpo/rollout.hpp"
#include "hrpo/tasks.hpp"

namespace hrpo {

struct TrainerConfig {
  // Toy-scale learning rates; the gate linear maps and the retention vector
  // run hotter than the backbone, mirroring the usual group split.
  double lr_main = 3e-4;
  double lr_gate_linear = 1e-3;
  double lr_lambda = 1e-2;
  double beta = 0.005;  // KL coefficient
  int group_size = 4;
  int batch_prompts = 8;
  double warmup_ratio = 0.1;
  double max_grad_norm = 0.1;
  double weight_decay = 0.1;
  double adv_eps = 1e-6;
  int total_steps = 2000;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.99;
  double adam_eps = 1e-8;
  int rollout_threads = 1;
  int inject_nan_at_step = -1;  // test hook for the abort path

  void validate() const;
};

// Group-standardized advantages with the population standard deviation.
// Uniform rewards map to exact zeros.
std::vector<double> compute_advantages(std::span<const double> rewards, double adv_eps);

// Per-token k3 estimate exp(d) - d - 1 with d = logp_ref - logp_theta.
std::vector<double> kl_penalty(std::span<const double> logp_theta,
                               std::span<const double> logp_ref);

// Cosine schedule with linear warmup over warmup_ratio * total_steps.
double lr_schedule(int step, int total_steps, double warmup_ratio, double base_lr);

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
};

struct OptimizerState {
  std::map<std::string, AdamMoments> moments;
  long long step = 0;
};

enum class ParamGroup { Main, GateLinear, Lambda };

struct ParamSlot {
  std::string name;
  Tensor tensor;
  ParamGroup group = ParamGroup::Main;
  bool decay = false;
};

// Scales all gradients so their global norm is at most max_norm.
// Returns the pre-clip norm.
double clip_global_norm(std::span<const ParamSlot> params, double max_norm);

// One decoupled-weight-decay Adam update for a single tensor.
void adamw_update(Tensor param, std::span<const double> grad, AdamMoments& moments,
                  long long step, double lr, double beta1, double beta2, double eps,
                  double weight_decay);

struct StepMetrics {
  int step = 0;
  double reward_mean = 0.0;
  double reward_ema = 0.0;
  double kl_mean = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double hidden_ratio_mean = 0.0;
  double completion_len_mean = 0.0;
  double lr = 0.0;
};

// On-policy HRPO loop: rollout groups, outcome rewards, group-relative
// advantages, differentiable replay, REINFORCE-with-KL loss, clipped AdamW
// step. Each batch of trajectories drives exactly one update.
class Trainer {
 public:
  Trainer(PolicyParameters policy, PolicyParameters reference, GateParams gate,
          GateConfig gate_config, TrainerConfig config, GenerationConfig generation,
          const Vocabulary* vocab, std::vector<TaskInstance> tasks, Rng rng);

  StepMetrics train_step();
  StepMetrics train_step(std::span<const TaskInstance> batch);

  // Differentiable batch loss over already-rewarded groups; accumulates
  // gradients scaled by 1/(prompts * group_size). Returns (loss, kl_mean).
  std::pair<double, double> accumulate_loss(std::span<RolloutGroup> groups);

  const PolicyParameters& policy() const { return policy_; }
  PolicyParameters& mutable_policy() { return policy_; }
  const PolicyParameters& reference() const { return reference_; }
  const GateParams& gate() const { return gate_; }
  const GateConfig& gate_config() const { return gate_config_; }
  const TrainerConfig& config() const { return config_; }
  const GenerationConfig& generation_config() const { return generation_; }
  OptimizerState& optimizer_state() { return opt_; }
  std::span<const ParamSlot> param_slots() const { return params_; }
  int step() const { return step_; }
  void set_step(int step) { step_ = step; }
  double reward_ema() const { return reward_ema_; }
  void set_reward_ema(double v) { reward_ema_ = v; }
  int skipped_steps() const { return skipped_steps_; }
  Rng& rng() { return rng_; }

  void zero_grads();
  // Clip + AdamW over all groups; advances moments once and bumps the
  // parameter version. Returns the pre-clip gradient norm, or nullopt when
  // the update was skipped because of non-finite gradients.
  std::optional<double> apply_update(double lr_scale_step);

 private:
  PolicyParameters policy_;
  PolicyParameters reference_;
  GateParams gate_;
  GateConfig gate_config_;
  TrainerConfig config_;
  GenerationConfig generation_;
  const Vocabulary* vocab_;
  std::vector<TaskInstance> tasks_;
  Rng rng_;
  std::vector<ParamSlot> params_;
  OptimizerState opt_;
  int step_ = 0;
  double reward_ema_ = 0.0;
  bool ema_initialized_ = false;
  int skipped_steps_ = 0;

  static constexpr double kEmaDecay = 0.99;
};

// Stable parameter registry shared by trainer and checkpoints.
std::vector<ParamSlot> build_param_slots(const PolicyParameters& policy, const GateParams& gate);

}  // namespace hrpo
