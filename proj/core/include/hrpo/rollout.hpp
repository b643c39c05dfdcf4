// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hrpo/gate.hpp"
#include "hrpo/model.hpp"
#include "hrpo/rng.hpp"
#include "hrpo/tensor.hpp"

namespace hrpo {

// Raised when a trajectory is replayed after a parameter update; hybrid
// rollouts are valid for exactly one gradient step.
class StaleTrajectoryError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class GenerationMode { Hybrid, TokenOnly, InterpolationOnly, HiddenState };
GenerationMode generation_mode_from_string(std::string_view name);
std::string_view generation_mode_name(GenerationMode mode);

struct GenerationConfig {
  GenerationMode mode = GenerationMode::Hybrid;
  int max_new_tokens = 48;
  double sampling_temp = 1.0;
  bool greedy = false;
  int delimiter_id = -1;
  int eos_id = -1;

  void validate() const;
};

enum class Termination { Eos, MaxLen };

struct HybridTrajectory {
  std::vector<int> prompt_ids;
  std::vector<int> gen_ids;
  int think_len = 0;  // generated tokens strictly before the first delimiter
  double reward = 0.0;
  bool reward_set = false;
  std::vector<double> rollout_logprobs;    // recorded at generation time
  std::vector<GateTrace> gate_traces;      // one per fused think step
  Termination terminated_by = Termination::MaxLen;
  std::uint64_t param_version = 0;

  double hidden_ratio() const;
  int completion_length() const { return static_cast<int>(gen_ids.size()); }
};

struct RolloutGroup {
  std::vector<int> prompt_ids;
  std::vector<HybridTrajectory> trajectories;
  std::vector<double> advantages;  // filled by the trainer
};

// One hybrid rollout. Think-phase inputs are built per the configured mode
// (gated fusion, plain token embeddings, pure interpolation, or raw hidden
// states); once the first delimiter is emitted everything downstream is
// ordinary autoregressive decoding.
HybridTrajectory generate_hybrid(const PolicyParameters& policy, const GateParams& gate,
                                 const GateConfig& gate_config, std::span<const int> prompt_ids,
                                 const GenerationConfig& config, Rng& rng);

// g independent rollouts for one prompt. Rewards and advantages are filled by
// the caller.
RolloutGroup rollout_group(const PolicyParameters& policy, const GateParams& gate,
                           const GateConfig& gate_config, std::span<const int> prompt_ids, int g,
                           const GenerationConfig& config, Rng& rng);

// Recomputes the differentiable per-token log-probabilities of a recorded
// trajectory by rerunning the full hybrid forward pass on the same tokens.
// Requires the parameters to be unchanged since generation.
Tensor replay_logprobs(Tape* tape, const PolicyParameters& policy, const GateParams& gate,
                       const GateConfig& gate_config, const HybridTrajectory& traj,
                       const GenerationConfig& config);

// Teacher-forced log-probabilities under the frozen reference model, computed
// from token ids alone (no gating, no interpolation).
std::vector<double> reference_logprobs(const PolicyParameters& ref_policy,
                                       const HybridTrajectory& traj,
                                       const GenerationConfig& config);

}  // namespace hrpo
