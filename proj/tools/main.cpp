// SPDX-License-Identifier: Apache-2.0
//
// hrpo: pretrain / train / eval / gradcheck / generate for the hybrid
// reasoning laboratory. Config files use sectioned key/value text; flags
// override file values.
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "hrpo/harness.hpp"
#include "hrpo/threading.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::string> mode;
  std::optional<double> tau;
  std::optional<double> r_min;
  std::optional<int> group_size;
};

void attach_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "configuration file");
  cmd->add_option("--seed", flags.seed, "random seed");
  cmd->add_option("--out-dir", flags.out_dir, "output directory");
  cmd->add_option("--mode", flags.mode,
                  "generation mode: hybrid|token_only|interpolation_only|hidden_state");
  cmd->add_option("--tau", flags.tau, "interpolation temperature");
  cmd->add_option("--r-min", flags.r_min, "lower bound of the initial retention range");
  cmd->add_option("--group-size", flags.group_size, "rollouts per prompt");
}

hrpo::RunConfig resolve_config(const CommonFlags& flags) {
  hrpo::RunConfig cfg;
  if (!flags.config_path.empty()) cfg = hrpo::load_run_config(flags.config_path);
  if (flags.seed) cfg.seed = *flags.seed;
  if (flags.out_dir) cfg.out_dir = *flags.out_dir;
  if (flags.mode) cfg.generation.mode = hrpo::generation_mode_from_string(*flags.mode);
  if (flags.tau) cfg.gate.tau = *flags.tau;
  if (flags.r_min) cfg.gate.r_min = *flags.r_min;
  if (flags.group_size) cfg.trainer.group_size = *flags.group_size;
  cfg.trainer.rollout_threads = hrpo::default_thread_count();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hybrid reasoning policy optimization lab"};
  app.require_subcommand(1);

  CommonFlags pre_flags, train_flags, eval_flags, gen_flags;
  std::string resume_path, warmstart_path, checkpoint_path, transcript_path, prompt_text;
  std::uint64_t gradcheck_seed = 0x67726164ULL;

  CLI::App* pre = app.add_subcommand("pretrain", "supervised warm start on worked demonstrations");
  attach_common(pre, pre_flags);
  pre->add_option("--resume", resume_path, "continue from a warm-start checkpoint");

  CLI::App* train = app.add_subcommand("train", "on-policy hybrid reasoning training");
  attach_common(train, train_flags);
  train->add_option("--warmstart", warmstart_path, "warm-start checkpoint")
      ->required();
  train->add_option("--resume", resume_path, "continue from a training checkpoint");

  CLI::App* eval = app.add_subcommand("eval", "greedy evaluation of a checkpoint");
  attach_common(eval, eval_flags);
  eval->add_option("--checkpoint", checkpoint_path, "checkpoint to evaluate")->required();
  eval->add_option("--transcripts", transcript_path, "write per-instance transcripts here");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient audit");
  gradcheck->add_option("--seed", gradcheck_seed, "random seed");

  CLI::App* gen = app.add_subcommand("generate", "single-prompt transcript dump");
  attach_common(gen, gen_flags);
  gen->add_option("--checkpoint", checkpoint_path, "checkpoint to decode with")->required();
  gen->add_option("--prompt", prompt_text, "prompt text (defaults to a sampled instance)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (pre->parsed()) {
      const hrpo::RunConfig cfg = resolve_config(pre_flags);
      std::optional<std::filesystem::path> resume;
      if (!resume_path.empty()) resume = resume_path;
      const hrpo::PretrainResult res = hrpo::run_pretrain(cfg, resume);
      std::cout << "warm start: heldout_accuracy=" << res.heldout_accuracy
                << " epochs=" << res.epochs_run << " steps=" << res.steps << "\n"
                << "checkpoint: " << res.checkpoint_path.string() << "\n";
      if (!res.reached_floor && cfg.pretrain.max_epochs > 0) {
        std::cerr << "accuracy floor " << cfg.pretrain.accuracy_floor
                  << " not reached; the task may be too hard for this model size\n";
        return 2;
      }
      return 0;
    }
    if (train->parsed()) {
      const hrpo::RunConfig cfg = resolve_config(train_flags);
      std::optional<std::filesystem::path> resume;
      if (!resume_path.empty()) resume = resume_path;
      const hrpo::TrainResult res = hrpo::run_train(cfg, warmstart_path, resume);
      if (res.aborted) {
        std::cerr << "training aborted; last checkpoint: "
                  << (res.final_checkpoint.empty() ? "(none)" : res.final_checkpoint.string())
                  << "\n";
        return 3;
      }
      std::cout << "final eval: accuracy=" << res.final_eval.accuracy
                << " completion_len=" << res.final_eval.mean_completion_len
                << " hidden_ratio=" << res.final_eval.mean_hidden_ratio << "\n"
                << "reward_ema=" << res.final_reward_ema << "\n"
                << "checkpoint: " << res.final_checkpoint.string() << "\n";
      return 0;
    }
    if (eval->parsed()) {
      const hrpo::RunConfig cfg = resolve_config(eval_flags);
      std::optional<std::filesystem::path> transcripts;
      if (!transcript_path.empty()) transcripts = transcript_path;
      const hrpo::EvalReport rep = hrpo::run_eval(checkpoint_path, cfg, transcripts);
      std::cout << "accuracy=" << rep.accuracy
                << " completion_len=" << rep.mean_completion_len
                << " hidden_ratio=" << rep.mean_hidden_ratio << " n=" << rep.n_instances << "\n";
      return 0;
    }
    if (gradcheck->parsed()) {
      const hrpo::GradcheckReport rep = hrpo::run_gradcheck(gradcheck_seed);
      for (const hrpo::GradCheckResult& r : rep.categories) {
        std::cout << (r.passed ? "[PASS] " : "[FAIL] ") << std::left << std::setw(14) << r.category
                  << " worst_rel_err=" << r.worst_rel_err << " (tol " << r.tolerance << ", "
                  << r.coords_checked << " coords";
        if (!r.worst_site.empty()) std::cout << ", worst at " << r.worst_site;
        std::cout << ")\n";
      }
      return rep.all_passed ? 0 : 4;
    }
    if (gen->parsed()) {
      const hrpo::RunConfig cfg = resolve_config(gen_flags);
      const hrpo::GenerateResult res = hrpo::run_generate(checkpoint_path, cfg, prompt_text);
      std::cout << "prompt : " << res.prompt_text << "\n";
      std::cout << "output : " << res.completion_text << "\n";
      if (res.reward >= 0) std::cout << "reward : " << res.reward << "\n";
      std::cout << "steps  :\n";
      for (std::size_t i = 0; i < res.steps.size(); ++i) {
        const auto& s = res.steps[i];
        std::cout << "  " << std::setw(3) << i << " " << (s.think ? "think " : "answer") << " '"
                  << s.symbol << "'";
        if (s.think) std::cout << " hidden_ratio=" << s.hidden_ratio;
        std::cout << "\n";
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
