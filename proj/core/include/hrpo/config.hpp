// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "hrpo/gate.hpp"
#include "hrpo/model.hpp"
#include "hrpo/rollout.hpp"
#include "hrpo/tasks.hpp"
#include "hrpo/trainer.hpp"

namespace hrpo {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PretrainConfig {
  int max_epochs = 20;
  double lr = 1e-3;
  int batch_size = 16;
  int eval_every = 40;  // optimizer batches between held-out evals
  double accuracy_floor = 0.3;
  double weight_decay = 0.01;
  double max_grad_norm = 1.0;
};

struct TaskConfig {
  TaskKind kind = TaskKind::Addition;
  int difficulty = 2;
  int n_train = 2048;
  int n_eval = 200;
};

// Whole-run configuration tree. Files use sectioned key/value text
// ([model], [gate], ...); command-line flags override file values.
struct RunConfig {
  ModelConfig model;            // vocab_size is filled from the vocabulary
  GateConfig gate;
  TrainerConfig trainer;
  GenerationConfig generation;  // delimiter/eos ids filled from the vocabulary
  TaskConfig task;
  PretrainConfig pretrain;
  std::uint64_t seed = 1;
  std::string out_dir = "runs/out";
  int checkpoint_every = 500;

  void validate() const;
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

// Effective configuration in the same file format (echoed into out_dir).
std::string render_run_config(const RunConfig& config);

}  // namespace hrpo
