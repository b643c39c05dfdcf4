// SPDX-License-Identifier: Apache-2.0
#include "hrpo/rollout.hpp"

#include <cmath>
#include <numeric>

namespace hrpo {

GenerationMode generation_mode_from_string(std::string_view name) {
  if (name == "hybrid") return GenerationMode::Hybrid;
  if (name == "token_only") return GenerationMode::TokenOnly;
  if (name == "interpolation_only") return GenerationMode::InterpolationOnly;
  if (name == "hidden_state") return GenerationMode::HiddenState;
  throw std::runtime_error("unknown generation mode '" + std::string(name) + "'");
}

std::string_view generation_mode_name(GenerationMode mode) {
  switch (mode) {
    case GenerationMode::Hybrid: return "hybrid";
    case GenerationMode::TokenOnly: return "token_only";
    case GenerationMode::InterpolationOnly: return "interpolation_only";
    case GenerationMode::HiddenState: return "hidden_state";
  }
  return "?";
}

void GenerationConfig::validate() const {
  if (max_new_tokens < 1) throw ContractViolation("max_new_tokens must be >= 1");
  if (!(sampling_temp > 0.0) && !greedy)
    throw ContractViolation("sampling_temp must be > 0 for stochastic decoding");
  if (delimiter_id < 0 || eos_id < 0 || delimiter_id == eos_id)
    throw ContractViolation("delimiter_id and eos_id must be set and distinct");
}

double HybridTrajectory::hidden_ratio() const { return hrpo::hidden_ratio(gate_traces); }

namespace {

// Shared core for sampling-time generation (tape == nullptr, rng != nullptr)
// and differentiable replay (tape != nullptr, forced tokens). Keeping both on
// one code path guarantees replay reproduces rollout numerics exactly.
struct HybridRun {
  HybridTrajectory traj;
  std::vector<Tensor> logp_steps;  // one scalar per generated token
};

HybridRun run_hybrid(Tape* tape, const PolicyParameters& policy, const GateParams& gate,
                     const GateConfig& gate_config, std::span<const int> prompt_ids,
                     const GenerationConfig& config, Rng* rng,
                     const std::vector<int>* forced_tokens) {
  config.validate();
  gate_config.validate();
  const ModelConfig& mcfg = policy.config();
  const int prompt_len = static_cast<int>(prompt_ids.size());
  if (prompt_len < 1) throw ContractViolation("empty prompt");
  if (prompt_len + config.max_new_tokens > mcfg.max_seq_len)
    throw ContractViolation("prompt does not fit in max_seq_len minus max_new_tokens");

  HybridRun run;
  run.traj.prompt_ids.assign(prompt_ids.begin(), prompt_ids.end());
  run.traj.param_version = policy.version();

  KVCache cache(policy);
  Tensor hidden = forward(tape, policy, embed(tape, policy, prompt_ids), &cache);
  std::vector<int> last_row{prompt_len - 1};
  Tensor h_last = gather_rows(tape, hidden, last_row);

  bool in_think = true;
  int first_delim = -1;
  const int budget = forced_tokens ? static_cast<int>(forced_tokens->size())
                                   : config.max_new_tokens;
  for (int j = 0; j < budget; ++j) {
    Tensor logit_row = logits(tape, policy, h_last);
    Tensor logp_row = log_softmax_rows(tape, affine(tape, logit_row, 1.0 / config.sampling_temp, 0.0));
    const int tok = forced_tokens ? (*forced_tokens)[static_cast<std::size_t>(j)]
                                  : sample_token(logit_row, config.sampling_temp, *rng,
                                                 config.greedy);
    std::vector<int> pick{tok};
    Tensor lp = pick_per_row(tape, logp_row, pick);
    run.logp_steps.push_back(lp);
    run.traj.gen_ids.push_back(tok);
    run.traj.rollout_logprobs.push_back(lp.at(0));

    if (tok == config.delimiter_id && first_delim < 0) {
      first_delim = j;
      in_think = false;  // the delimiter itself enters as a plain embedding
    }
    if (tok == config.eos_id) {
      run.traj.terminated_by = Termination::Eos;
      break;
    }
    if (j + 1 >= budget) {
      run.traj.terminated_by = Termination::MaxLen;
      break;
    }

    std::vector<int> tok_ids{tok};
    Tensor e_hat = embed(tape, policy, tok_ids);
    Tensor e_next;
    if (in_think) {
      switch (config.mode) {
        case GenerationMode::TokenOnly:
          e_next = e_hat;
          break;
        case GenerationMode::Hybrid: {
          Tensor projected =
              interpolate_embedding(tape, logit_row, gate_config.tau, policy.token_embedding());
          FuseResult fused = fuse(tape, e_hat, projected, gate, gate_config.c, true);
          run.traj.gate_traces.push_back(std::move(fused.trace));
          e_next = std::move(fused.input);
          break;
        }
        case GenerationMode::InterpolationOnly:
          e_next =
              interpolate_embedding(tape, logit_row, gate_config.tau, policy.token_embedding());
          break;
        case GenerationMode::HiddenState:
          e_next = h_last;  // raw final-layer state, no projection
          break;
      }
    } else {
      e_next = e_hat;
    }
    h_last = forward(tape, policy, e_next, &cache);
  }
  run.traj.think_len =
      first_delim >= 0 ? first_delim : static_cast<int>(run.traj.gen_ids.size());
  return run;
}

}  // namespace

HybridTrajectory generate_hybrid(const PolicyParameters& policy, const GateParams& gate,
                                 const GateConfig& gate_config, std::span<const int> prompt_ids,
                                 const GenerationConfig& config, Rng& rng) {
  return run_hybrid(nullptr, policy, gate, gate_config, prompt_ids, config, &rng, nullptr).traj;
}

RolloutGroup rollout_group(const PolicyParameters& policy, const GateParams& gate,
                           const GateConfig& gate_config, std::span<const int> prompt_ids, int g,
                           const GenerationConfig& config, Rng& rng) {
  if (g < 2) throw ContractViolation("rollout_group requires g >= 2");
  RolloutGroup group;
  group.prompt_ids.assign(prompt_ids.begin(), prompt_ids.end());
  group.trajectories.reserve(static_cast<std::size_t>(g));
  for (int i = 0; i < g; ++i) {
    Rng member_rng = rng.fork(static_cast<std::uint64_t>(i));
    group.trajectories.push_back(
        generate_hybrid(policy, gate, gate_config, prompt_ids, config, member_rng));
  }
  return group;
}

Tensor replay_logprobs(Tape* tape, const PolicyParameters& policy, const GateParams& gate,
                       const GateConfig& gate_config, const HybridTrajectory& traj,
                       const GenerationConfig& config) {
  if (traj.param_version != policy.version())
    throw StaleTrajectoryError(
        "trajectory was generated under parameter version " + std::to_string(traj.param_version) +
        " but the policy is at version " + std::to_string(policy.version()) +
        "; hybrid rollouts support a single gradient update");
  if (traj.gen_ids.empty()) throw ContractViolation("cannot replay an empty trajectory");
  HybridRun run = run_hybrid(tape, policy, gate, gate_config, traj.prompt_ids, config, nullptr,
                             &traj.gen_ids);
  return concat_scalars(tape, run.logp_steps);
}

std::vector<double> reference_logprobs(const PolicyParameters& ref_policy,
                                       const HybridTrajectory& traj,
                                       const GenerationConfig& config) {
  const int p = static_cast<int>(traj.prompt_ids.size());
  const int g = static_cast<int>(traj.gen_ids.size());
  std::vector<int> tokens;
  tokens.reserve(static_cast<std::size_t>(p + g));
  tokens.insert(tokens.end(), traj.prompt_ids.begin(), traj.prompt_ids.end());
  tokens.insert(tokens.end(), traj.gen_ids.begin(), traj.gen_ids.end());
  // The hidden state at position p-1+j predicts generated token j; the final
  // generated token is never consumed as an input.
  std::vector<int> input_ids(tokens.begin(), tokens.end() - 1);
  Tensor hidden = forward(nullptr, ref_policy, embed(nullptr, ref_policy, input_ids), nullptr);
  std::vector<int> rows(static_cast<std::size_t>(g));
  std::iota(rows.begin(), rows.end(), p - 1);
  Tensor hid_rows = gather_rows(nullptr, hidden, rows);
  Tensor logit_rows = logits(nullptr, ref_policy, hid_rows);
  Tensor logp =
      log_softmax_rows(nullptr, affine(nullptr, logit_rows, 1.0 / config.sampling_temp, 0.0));
  Tensor picked = pick_per_row(nullptr, logp, traj.gen_ids);
  return std::vector<double>(picked.data(), picked.data() + picked.numel());
}

}  // namespace hrpo
