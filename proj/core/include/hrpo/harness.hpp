// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hrpo/checkpoint.hpp"
#include "hrpo/config.hpp"
#include "hrpo/gradcheck.hpp"
#include "hrpo/trainer.hpp"

namespace hrpo {

// Exclusive ownership of an output directory for the lifetime of a run.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& out_dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

struct EvalReport {
  double accuracy = 0.0;
  double mean_completion_len = 0.0;
  double mean_hidden_ratio = 0.0;
  int n_instances = 0;
};

struct PretrainResult {
  std::filesystem::path checkpoint_path;
  double heldout_accuracy = 0.0;
  int epochs_run = 0;
  long long steps = 0;
  bool reached_floor = false;
};

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::filesystem::path metrics_path;
  EvalReport final_eval;
  double final_reward_ema = 0.0;
  std::vector<StepMetrics> metrics;
  bool aborted = false;
};

// Supervised warm start: next-token cross-entropy on worked demonstrations
// until held-out greedy accuracy reaches the configured floor.
PretrainResult run_pretrain(const RunConfig& config,
                            const std::optional<std::filesystem::path>& resume = {});

// HRPO training from a warm-start checkpoint; the reference model is frozen
// at the warm start. Metrics stream to out_dir/metrics.jsonl; curves and a
// final greedy evaluation are written at the end.
TrainResult run_train(const RunConfig& config, const std::filesystem::path& warmstart,
                      const std::optional<std::filesystem::path>& resume = {});

// Greedy decoding over held-out instances with per-instance transcripts.
EvalReport run_eval(const std::filesystem::path& checkpoint_path, const RunConfig& config,
                    const std::optional<std::filesystem::path>& transcript_path = {});

struct GradcheckReport {
  std::vector<GradCheckResult> categories;
  bool all_passed = false;
};

// Finite-difference audit: every kernel adjoint plus embed/attention/gate/
// interpolation/full-loss paths on small models.
GradcheckReport run_gradcheck(std::uint64_t seed = 0x67726164ULL);

struct TranscriptStep {
  int token_id = 0;
  std::string symbol;
  bool think = false;
  double hidden_ratio = 0.0;
};

struct GenerateResult {
  std::string prompt_text;
  std::string completion_text;
  std::vector<TranscriptStep> steps;
  double reward = -1.0;  // -1 when no ground truth is attached
};

// Single-prompt transcript with per-step hidden ratios. When prompt_text is
// empty a held-out instance is sampled instead.
GenerateResult run_generate(const std::filesystem::path& checkpoint_path, const RunConfig& config,
                            const std::string& prompt_text);

// --- shared plumbing ---------------------------------------------------------

Checkpoint make_model_checkpoint(const PolicyParameters& policy, const GateParams* gate,
                                 const OptimizerState* opt, const Rng& rng, long long step);
PolicyParameters policy_from_checkpoint(const Checkpoint& ckpt, const ModelConfig& base);
std::optional<GateParams> gate_from_checkpoint(const Checkpoint& ckpt, int d_model);
void optimizer_from_checkpoint(const Checkpoint& ckpt, std::span<const ParamSlot> slots,
                               OptimizerState& state);

std::string metrics_to_json(const StepMetrics& m);
void write_metric_curves(const std::filesystem::path& dir,
                         std::span<const StepMetrics> metrics);
std::string format_double(double v);

EvalReport evaluate_policy(const PolicyParameters& policy, const GateParams& gate,
                           const GateConfig& gate_config, const GenerationConfig& generation,
                           const Vocabulary& vocab, std::span<const TaskInstance> instances,
                           const std::optional<std::filesystem::path>& transcript_path = {});

}  // namespace hrpo
