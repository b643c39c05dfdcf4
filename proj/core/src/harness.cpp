// SPDX-License-Identifier: Apache-2.0
#include "hrpo/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "hrpo/threading.hpp"

namespace hrpo {

namespace fs = std::filesystem;

// --- small plumbing ----------------------------------------------------------

RunLock::RunLock(const fs::path& out_dir) : path_(out_dir / ".lock") {
  fs::create_directories(out_dir);
  if (fs::exists(path_))
    throw std::runtime_error("output directory " + out_dir.string() +
                             " is locked by another run (remove .lock if stale)");
  std::ofstream lock(path_);
  lock << "locked\n";
}

RunLock::~RunLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

std::string format_double(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

std::string metrics_to_json(const StepMetrics& m) {
  std::ostringstream os;
  os << "{\"step\":" << m.step << ",\"reward_mean\":" << format_double(m.reward_mean)
     << ",\"reward_ema\":" << format_double(m.reward_ema)
     << ",\"kl_mean\":" << format_double(m.kl_mean) << ",\"loss\":" << format_double(m.loss)
     << ",\"grad_norm\":" << format_double(m.grad_norm)
     << ",\"hidden_ratio_mean\":" << format_double(m.hidden_ratio_mean)
     << ",\"completion_len_mean\":" << format_double(m.completion_len_mean)
     << ",\"lr\":" << format_double(m.lr) << "}";
  return os.str();
}

namespace {

void write_svg_curve(const fs::path& path, const std::string& name,
                     std::span<const std::pair<double, double>> points) {
  constexpr double kW = 640, kH = 400, kPad = 48;
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (!points.empty()) {
    xmin = xmax = points[0].first;
    ymin = ymax = points[0].second;
    for (const auto& [x, y] : points) {
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  auto sx = [&](double x) { return kPad + (x - xmin) / (xmax - xmin) * (kW - 2 * kPad); };
  auto sy = [&](double y) { return kH - kPad - (y - ymin) / (ymax - ymin) * (kH - 2 * kPad); };
  std::ofstream os(path);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << kW << " " << kH << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kW / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << name
     << "</text>\n";
  os << "<line x1=\"" << kPad << "\" y1=\"" << kH - kPad << "\" x2=\"" << kW - kPad << "\" y2=\""
     << kH - kPad << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << kPad << "\" y1=\"" << kPad << "\" x2=\"" << kPad << "\" y2=\""
     << kH - kPad << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << kPad << "\" y=\"" << kH - kPad + 16 << "\" font-size=\"10\">"
     << format_double(xmin) << "</text>\n";
  os << "<text x=\"" << kW - kPad << "\" y=\"" << kH - kPad + 16
     << "\" text-anchor=\"end\" font-size=\"10\">" << format_double(xmax) << "</text>\n";
  os << "<text x=\"" << kPad - 4 << "\" y=\"" << kH - kPad << "\" text-anchor=\"end\" "
     << "font-size=\"10\">" << format_double(ymin) << "</text>\n";
  os << "<text x=\"" << kPad - 4 << "\" y=\"" << kPad << "\" text-anchor=\"end\" font-size=\"10\">"
     << format_double(ymax) << "</text>\n";
  os << "<polyline fill=\"none\" stroke=\"steelblue\" strokewidth=\"1.5\" points=\"";
  for (const auto& [x, y] : points) os << format_double(sx(x)) << "," << format_double(sy(y)) << " ";
  os << "\"/>\n</svg>\n";
}

void write_curve(const fs::path& dir, const std::string& name,
                 std::span<const std::pair<double, double>> points) {
  std::ofstream csv(dir / (name + ".csv"));
  csv << "step," << name << "\n";
  for (const auto& [x, y] : points) csv << format_double(x) << "," << format_double(y) << "\n";
  write_svg_curve(dir / (name + ".svg"), name, points);
}

void write_instances(const fs::path& path, std::span<const TaskInstance> instances,
                     std::uint64_t seed) {
  std::ofstream os(path);
  for (const TaskInstance& t : instances) {
    os << "{\"kind\":\"" << task_kind_name(t.kind) << "\",\"difficulty\":" << t.difficulty
       << ",\"prompt\":\"" << t.prompt_text << "\",\"answer\":\"" << t.answer_text
       << "\",\"seed\":" << seed << "}\n";
  }
}

constexpr const char* kModelMetaName = "model_meta";

Tensor model_meta_tensor(const ModelConfig& cfg) {
  return Tensor::from_data({7}, {static_cast<double>(cfg.n_layers), static_cast<double>(cfg.n_heads),
                                 static_cast<double>(cfg.d_model), static_cast<double>(cfg.d_ff),
                                 static_cast<double>(cfg.vocab_size),
                                 static_cast<double>(cfg.max_seq_len), cfg.tie_head ? 1.0 : 0.0});
}

ModelConfig model_config_from_meta(const Tensor& meta) {
  ModelConfig cfg;
  cfg.n_layers = static_cast<int>(meta.at(0));
  cfg.n_heads = static_cast<int>(meta.at(1));
  cfg.d_model = static_cast<int>(meta.at(2));
  cfg.d_ff = static_cast<int>(meta.at(3));
  cfg.vocab_size = static_cast<int>(meta.at(4));
  cfg.max_seq_len = static_cast<int>(meta.at(5));
  cfg.tie_head = meta.at(6) != 0.0;
  return cfg;
}

// Deterministic rng stream ids per role.
enum StreamId : std::uint64_t {
  kStreamModel = 1,
  kStreamGate = 2,
  kStreamTrain = 3,
  kStreamTasks = 4,
  kStreamEval = 5,
  kStreamPretrain = 6,
};

}  // namespace

Checkpoint make_model_checkpoint(const PolicyParameters& policy, const GateParams* gate,
                                 const OptimizerState* opt, const Rng& rng, long long step) {
  Checkpoint ckpt;
  ckpt.step = step;
  ckpt.rng_state = rng.state();
  ckpt.tensors.emplace_back(kModelMetaName, model_meta_tensor(policy.config()));
  for (const auto& [name, tensor] : policy.named_tensors()) ckpt.tensors.emplace_back(name, tensor);
  if (gate)
    for (const auto& [name, tensor] : gate->named_tensors()) ckpt.tensors.emplace_back(name, tensor);
  if (opt) {
    ckpt.tensors.emplace_back("opt_step", Tensor::from_data({1}, {static_cast<double>(opt->step)}));
    for (const auto& [name, m] : opt->moments) {
      ckpt.tensors.emplace_back("opt.m." + name,
                                Tensor::from_data({static_cast<int>(m.m.size())},
                                                  std::vector<double>(m.m.begin(), m.m.end())));
      ckpt.tensors.emplace_back("opt.v." + name,
                                Tensor::from_data({static_cast<int>(m.v.size())},
                                                  std::vector<double>(m.v.begin(), m.v.end())));
    }
  }
  return ckpt;
}

PolicyParameters policy_from_checkpoint(const Checkpoint& ckpt, const ModelConfig& base) {
  const Tensor* meta = ckpt.find(kModelMetaName);
  if (!meta) throw CheckpointError("checkpoint has no model metadata record");
  const ModelConfig stored = model_config_from_meta(*meta);
  if (stored.n_layers != base.n_layers || stored.n_heads != base.n_heads ||
      stored.d_model != base.d_model || stored.d_ff != base.d_ff ||
      stored.vocab_size != base.vocab_size || stored.max_seq_len != base.max_seq_len ||
      stored.tie_head != base.tie_head)
    throw CheckpointError("checkpoint model dimensions do not match the configured model");
  Rng scratch(0);
  PolicyParameters policy = PolicyParameters::init(base, scratch);
  for (auto& [name, tensor] : policy.named_tensors()) restore_tensor(ckpt, name, tensor);
  return policy;
}

std::optional<GateParams> gate_from_checkpoint(const Checkpoint& ckpt, int d_model) {
  if (!ckpt.has("gate.w_r")) return std::nullopt;
  GateConfig cfg;
  Rng scratch(0);
  GateParams gate = init_gate(cfg, d_model, scratch);
  for (auto& [name, tensor] : gate.named_tensors()) restore_tensor(ckpt, name, tensor);
  return gate;
}

void optimizer_from_checkpoint(const Checkpoint& ckpt, std::span<const ParamSlot> slots,
                               OptimizerState& state) {
  if (const Tensor* s = ckpt.find("opt_step")) state.step = static_cast<long long>(s->at(0));
  for (const ParamSlot& slot : slots) {
    const Tensor* m = ckpt.find("opt.m." + slot.name);
    const Tensor* v = ckpt.find("opt.v." + slot.name);
    if (!m || !v) continue;
    if (m->numel() != slot.tensor.numel() || v->numel() != slot.tensor.numel())
      throw CheckpointError("optimizer moments for '" + slot.name + "' have the wrong size");
    AdamMoments& mom = state.moments[slot.name];
    mom.m.assign(m->data(), m->data() + m->numel());
    mom.v.assign(v->data(), v->data() + v->numel());
  }
}

void write_metric_curves(const fs::path& dir, std::span<const StepMetrics> metrics) {
  fs::create_directories(dir);
  auto series = [&](auto getter) {
    std::vector<std::pair<double, double>> pts;
    pts.reserve(metrics.size());
    for (const StepMetrics& m : metrics) pts.emplace_back(m.step, getter(m));
    return pts;
  };
  write_curve(dir, "reward_mean", series([](const StepMetrics& m) { return m.reward_mean; }));
  write_curve(dir, "reward_ema", series([](const StepMetrics& m) { return m.reward_ema; }));
  write_curve(dir, "kl_mean", series([](const StepMetrics& m) { return m.kl_mean; }));
  write_curve(dir, "loss", series([](const StepMetrics& m) { return m.loss; }));
  write_curve(dir, "grad_norm", series([](const StepMetrics& m) { return m.grad_norm; }));
  write_curve(dir, "hidden_ratio_mean",
              series([](const StepMetrics& m) { return m.hidden_ratio_mean; }));
  write_curve(dir, "completion_len_mean",
              series([](const StepMetrics& m) { return m.completion_len_mean; }));
  write_curve(dir, "lr", series([](const StepMetrics& m) { return m.lr; }));
}

// --- evaluation ----------------------------------------------------------------

EvalReport evaluate_policy(const PolicyParameters& policy, const GateParams& gate,
                           const GateConfig& gate_config, const GenerationConfig& generation,
                           const Vocabulary& vocab, std::span<const TaskInstance> instances,
                           const std::optional<fs::path>& transcript_path) {
  GenerationConfig greedy_cfg = generation;
  greedy_cfg.greedy = true;
  EvalReport report;
  report.n_instances = static_cast<int>(instances.size());
  std::ofstream transcript;
  if (transcript_path) transcript.open(*transcript_path);
  Rng unused(0);
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const TaskInstance& inst = instances[i];
    HybridTrajectory traj =
        generate_hybrid(policy, gate, gate_config, inst.prompt_ids, greedy_cfg, unused);
    const int reward = outcome_reward(vocab, traj.gen_ids, inst);
    report.accuracy += reward;
    report.mean_completion_len += traj.completion_length();
    report.mean_hidden_ratio += traj.hidden_ratio();
    if (transcript.is_open()) {
      std::vector<int> think_ids(traj.gen_ids.begin(),
                                 traj.gen_ids.begin() + traj.think_len);
      std::vector<int> answer_ids(traj.gen_ids.begin() + traj.think_len, traj.gen_ids.end());
      transcript << "# instance " << i << " kind=" << task_kind_name(inst.kind)
                 << " difficulty=" << inst.difficulty << " reward=" << reward
                 << " hidden_ratio=" << format_double(traj.hidden_ratio())
                 << " len=" << traj.completion_length() << "\n";
      transcript << "prompt: " << inst.prompt_text << "\n";
      transcript << "think : " << vocab.detokenize(think_ids) << "\n";
      transcript << "answer: " << vocab.detokenize(answer_ids) << "\n";
      transcript << "gold  : " << inst.answer_text << "\n\n";
    }
  }
  if (!instances.empty()) {
    report.accuracy /= static_cast<double>(instances.size());
    report.mean_completion_len /= static_cast<double>(instances.size());
    report.mean_hidden_ratio /= static_cast<double>(instances.size());
  }
  return report;
}

// --- pretrain ------------------------------------------------------------------

PretrainResult run_pretrain(const RunConfig& config_in,
                            const std::optional<fs::path>& resume) {
  Vocabulary vocab;
  RunConfig config = config_in;
  config.model.vocab_size = vocab.size();
  config.generation.delimiter_id = vocab.delimiter_id();
  config.generation.eos_id = vocab.eos_id();
  config.validate();

  const fs::path out_dir(config.out_dir);
  RunLock lock(out_dir);
  {
    std::ofstream echo(out_dir / "config.effective.toml");
    echo << render_run_config(config);
  }

  Rng root(config.seed);
  Rng corpus_rng = root.fork(kStreamTasks);
  const std::vector<Demonstration> corpus =
      warmstart_corpus(vocab, config.task.kind, config.task.difficulty, config.task.n_train,
                       corpus_rng);
  {
    std::ofstream cf(out_dir / "corpus.txt");
    for (const Demonstration& d : corpus) cf << d.text << "\n";
  }
  Rng eval_rng = root.fork(kStreamEval);
  const std::vector<TaskInstance> eval_tasks = sample_tasks(
      vocab, config.task.kind, config.task.difficulty, config.task.n_eval, true, eval_rng);
  write_instances(out_dir / "eval_instances.jsonl", eval_tasks, config.seed);

  Rng model_rng = root.fork(kStreamModel);
  PolicyParameters policy = PolicyParameters::init(config.model, model_rng);
  Rng loop_rng = root.fork(kStreamPretrain);
  long long steps = 0;
  OptimizerState opt;

  std::vector<ParamSlot> slots;
  for (auto& [name, tensor] : policy.named_tensors())
    slots.push_back({name, tensor, ParamGroup::Main, tensor.rank() >= 2});

  if (resume) {
    const Checkpoint ckpt = load_checkpoint(*resume);
    policy = policy_from_checkpoint(ckpt, config.model);
    slots.clear();
    for (auto& [name, tensor] : policy.named_tensors())
      slots.push_back({name, tensor, ParamGroup::Main, tensor.rank() >= 2});
    optimizer_from_checkpoint(ckpt, slots, opt);
    loop_rng.set_state(ckpt.rng_state);
    steps = ckpt.step;
  }

  Rng dummy_gate_rng = root.fork(kStreamGate);
  const GateParams eval_gate = init_gate(config.gate, config.model.d_model, dummy_gate_rng);
  GenerationConfig eval_gen = config.generation;
  eval_gen.mode = GenerationMode::TokenOnly;
  eval_gen.greedy = true;

  const auto eval_now = [&] {
    return evaluate_policy(policy, eval_gate, config.gate, eval_gen, vocab, eval_tasks).accuracy;
  };

  PretrainResult result;
  double accuracy = 0.0;
  bool have_accuracy = false;
  int batches = 0;
  for (int epoch = 0; epoch < config.pretrain.max_epochs && !result.reached_floor; ++epoch) {
    std::vector<std::size_t> order(corpus.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = loop_rng.fork(static_cast<std::uint64_t>(epoch) + 101);
    for (std::size_t i = order.size() - 1; i > 0; --i)
      std::swap(order[i], order[shuffle_rng.below(static_cast<std::uint64_t>(i + 1))]);

    for (std::size_t start = 0; start < order.size() && !result.reached_floor;
         start += static_cast<std::size_t>(config.pretrain.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(config.pretrain.batch_size));
      long long batch_tokens = 0;
      for (std::size_t s = start; s < end; ++s)
        batch_tokens += static_cast<long long>(corpus[order[s]].token_ids.size()) - 1;
      for (ParamSlot& p : slots) p.tensor.zero_grad();
      for (std::size_t s = start; s < end; ++s) {
        const std::vector<int>& ids = corpus[order[s]].token_ids;
        std::vector<int> inputs(ids.begin(), ids.end() - 1);
        std::vector<int> targets(ids.begin() + 1, ids.end());
        Tape tape;
        Tensor hidden = forward(&tape, policy, embed(&tape, policy, inputs), nullptr);
        Tensor lp = log_softmax_rows(&tape, logits(&tape, policy, hidden));
        Tensor picked = pick_per_row(&tape, lp, targets);
        Tensor loss = affine(&tape, sum(&tape, picked), -1.0, 0.0);
        tape.backward(loss, 1.0 / static_cast<double>(batch_tokens));
      }
      clip_global_norm(slots, config.pretrain.max_grad_norm);
      opt.step += 1;
      for (ParamSlot& p : slots) {
        std::span<const double> grad = p.tensor.grad_view();
        std::vector<double> zeros;
        if (grad.empty()) {
          zeros.assign(static_cast<std::size_t>(p.tensor.numel()), 0.0);
          grad = zeros;
        }
        adamw_update(p.tensor, grad, opt.moments[p.name], opt.step, config.pretrain.lr, 0.9, 0.99,
                     1e-8, p.decay ? config.pretrain.weight_decay : 0.0);
      }
      policy.bump_version();
      ++steps;
      ++batches;
      if (batches % config.pretrain.eval_every == 0) {
        accuracy = eval_now();
        have_accuracy = true;
        if (accuracy >= config.pretrain.accuracy_floor) result.reached_floor = true;
      }
    }
    result.epochs_run = epoch + 1;
    if (!result.reached_floor) {
      accuracy = eval_now();
      have_accuracy = true;
      if (accuracy >= config.pretrain.accuracy_floor) result.reached_floor = true;
    }
  }
  if (!have_accuracy) accuracy = eval_now();

  result.heldout_accuracy = accuracy;
  result.steps = steps;
  result.checkpoint_path = out_dir / "warmstart.ckpt";
  const Checkpoint ckpt = make_model_checkpoint(policy, nullptr, &opt, loop_rng, steps);
  save_checkpoint(result.checkpoint_path, ckpt);
  {
    std::ofstream report(out_dir / "pretrain_report.json");
    report << "{\"heldout_accuracy\":" << format_double(result.heldout_accuracy)
           << ",\"epochs_run\":" << result.epochs_run << ",\"steps\":" << result.steps
           << ",\"reached_floor\":" << (result.reached_floor ? "true" : "false") << "}\n";
  }
  return result;
}

// --- train ---------------------------------------------------------------------

TrainResult run_train(const RunConfig& config_in, const fs::path& warmstart,
                      const std::optional<fs::path>& resume) {
  Vocabulary vocab;
  RunConfig config = config_in;
  config.model.vocab_size = vocab.size();
  config.generation.delimiter_id = vocab.delimiter_id();
  config.generation.eos_id = vocab.eos_id();
  config.validate();

  const fs::path out_dir(config.out_dir);
  RunLock lock(out_dir);
  {
    std::ofstream echo(out_dir / "config.effective.toml");
    echo << render_run_config(config);
  }

  Rng root(config.seed);
  Rng tasks_rng = root.fork(kStreamTasks).fork(99);
  std::vector<TaskInstance> train_tasks = sample_tasks(
      vocab, config.task.kind, config.task.difficulty, config.task.n_train, false, tasks_rng);
  Rng eval_rng = root.fork(kStreamEval);
  const std::vector<TaskInstance> eval_tasks = sample_tasks(
      vocab, config.task.kind, config.task.difficulty, config.task.n_eval, true, eval_rng);
  write_instances(out_dir / "train_instances.jsonl", train_tasks, config.seed);
  write_instances(out_dir / "eval_instances.jsonl", eval_tasks, config.seed);

  const Checkpoint warm = load_checkpoint(warmstart);
  PolicyParameters policy = policy_from_checkpoint(warm, config.model);
  PolicyParameters reference = policy.clone();  // frozen at the warm start
  Rng gate_rng = root.fork(kStreamGate);
  GateParams gate = init_gate(config.gate, config.model.d_model, gate_rng);
  Rng train_rng = root.fork(kStreamTrain);

  Trainer trainer(std::move(policy), std::move(reference), std::move(gate), config.gate,
                  config.trainer, config.generation, &vocab, std::move(train_tasks), train_rng);

  if (resume) {
    const Checkpoint ckpt = load_checkpoint(*resume);
    for (auto& [name, tensor] : trainer.mutable_policy().named_tensors())
      restore_tensor(ckpt, name, tensor);
    if (ckpt.has("gate.w_r"))
      for (auto& [name, tensor] : trainer.gate().named_tensors()) restore_tensor(ckpt, name, tensor);
    optimizer_from_checkpoint(ckpt, trainer.param_slots(), trainer.optimizer_state());
    Rng restored(0);
    restored.set_state(ckpt.rng_state);
    trainer.rng() = restored;
    trainer.set_step(static_cast<int>(ckpt.step));
  }

  TrainResult result;
  result.metrics_path = out_dir / "metrics.jsonl";
  std::ofstream metrics_file(result.metrics_path,
                             resume ? std::ios::app : std::ios::trunc);
  fs::path last_checkpoint;

  while (trainer.step() < config.trainer.total_steps) {
    const StepMetrics m = trainer.train_step();
    if (!std::isfinite(m.loss)) {
      std::cerr << "non-finite loss at step " << m.step << "; aborting with last checkpoint "
                << (last_checkpoint.empty() ? "(none)" : last_checkpoint.string()) << "\n";
      result.aborted = true;
      break;
    }
    metrics_file << metrics_to_json(m) << "\n";
    metrics_file.flush();
    result.metrics.push_back(m);
    if (trainer.step() % config.checkpoint_every == 0 &&
        trainer.step() < config.trainer.total_steps) {
      last_checkpoint = out_dir / ("ckpt_step" + std::to_string(trainer.step()) + ".bin");
      save_checkpoint(last_checkpoint,
                      make_model_checkpoint(trainer.policy(), &trainer.gate(),
                                            &trainer.optimizer_state(), trainer.rng(),
                                            trainer.step()));
    }
  }

  write_metric_curves(out_dir / "curves", result.metrics);
  result.final_reward_ema = trainer.reward_ema();
  if (!result.aborted) {
    result.final_checkpoint = out_dir / "ckpt_final.bin";
    save_checkpoint(result.final_checkpoint,
                    make_model_checkpoint(trainer.policy(), &trainer.gate(),
                                          &trainer.optimizer_state(), trainer.rng(),
                                          trainer.step()));
    result.final_eval =
        evaluate_policy(trainer.policy(), trainer.gate(), config.gate, config.generation, vocab,
                        eval_tasks, out_dir / "eval_transcripts.txt");
    std::ofstream report(out_dir / "eval.json");
    report << "{\"accuracy\":" << format_double(result.final_eval.accuracy)
           << ",\"mean_completion_len\":" << format_double(result.final_eval.mean_completion_len)
           << ",\"mean_hidden_ratio\":" << format_double(result.final_eval.mean_hidden_ratio)
           << ",\"n_instances\":" << result.final_eval.n_instances
           << ",\"final_reward_ema\":" << format_double(result.final_reward_ema) << "}\n";
  } else if (!last_checkpoint.empty()) {
    result.final_checkpoint = last_checkpoint;
  }
  return result;
}

// --- eval ----------------------------------------------------------------------

EvalReport run_eval(const fs::path& checkpoint_path, const RunConfig& config_in,
                    const std::optional<fs::path>& transcript_path) {
  Vocabulary vocab;
  RunConfig config = config_in;
  config.model.vocab_size = vocab.size();
  config.generation.delimiter_id = vocab.delimiter_id();
  config.generation.eos_id = vocab.eos_id();

  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  PolicyParameters policy = policy_from_checkpoint(ckpt, config.model);
  std::optional<GateParams> gate = gate_from_checkpoint(ckpt, config.model.d_model);
  GenerationConfig gen = config.generation;
  if (!gate) {
    // Warm-start checkpoints carry no gate; fall back to plain decoding.
    gen.mode = GenerationMode::TokenOnly;
    Rng scratch(0);
    gate = init_gate(config.gate, config.model.d_model, scratch);
  }
  Rng eval_rng = Rng(config.seed).fork(kStreamEval);
  const std::vector<TaskInstance> eval_tasks = sample_tasks(
      vocab, config.task.kind, config.task.difficulty, config.task.n_eval, true, eval_rng);
  return evaluate_policy(policy, *gate, config.gate, gen, vocab, eval_tasks, transcript_path);
}

// --- generate -------------------------------------------------------------------

GenerateResult run_generate(const fs::path& checkpoint_path, const RunConfig& config_in,
                            const std::string& prompt_text) {
  Vocabulary vocab;
  RunConfig config = config_in;
  config.model.vocab_size = vocab.size();
  config.generation.delimiter_id = vocab.delimiter_id();
  config.generation.eos_id = vocab.eos_id();

  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  PolicyParameters policy = policy_from_checkpoint(ckpt, config.model);
  std::optional<GateParams> gate = gate_from_checkpoint(ckpt, config.model.d_model);
  GenerationConfig gen = config.generation;
  if (!gate) {
    gen.mode = GenerationMode::TokenOnly;
    Rng scratch(0);
    gate = init_gate(config.gate, config.model.d_model, scratch);
  }

  GenerateResult out;
  std::optional<TaskInstance> instance;
  std::vector<int> prompt_ids;
  if (prompt_text.empty()) {
    Rng task_rng = Rng(config.seed).fork(kStreamEval).fork(7);
    instance = make_task(vocab, config.task.kind, config.task.difficulty, task_rng);
    prompt_ids = instance->prompt_ids;
    out.prompt_text = instance->prompt_text;
  } else {
    out.prompt_text = prompt_text;
    prompt_ids.push_back(vocab.bos_id());
    for (int id : vocab.tokenize(prompt_text)) prompt_ids.push_back(id);
  }

  Rng gen_rng = Rng(config.seed).fork(kStreamTrain).fork(12345);
  HybridTrajectory traj = generate_hybrid(policy, *gate, config.gate, prompt_ids, gen, gen_rng);
  out.completion_text = vocab.detokenize(traj.gen_ids);
  std::size_t trace_idx = 0;
  for (std::size_t j = 0; j < traj.gen_ids.size(); ++j) {
    TranscriptStep step;
    step.token_id = traj.gen_ids[j];
    step.symbol = vocab.symbol(step.token_id);
    step.think = static_cast<int>(j) < traj.think_len;
    if (step.think && trace_idx < traj.gate_traces.size())
      step.hidden_ratio = traj.gate_traces[trace_idx++].hidden_ratio;
    out.steps.push_back(std::move(step));
  }
  if (instance) out.reward = outcome_reward(vocab, traj.gen_ids, *instance);
  return out;
}

}  // namespace hrpo
