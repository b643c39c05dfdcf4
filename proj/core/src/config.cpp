// SPDX-License-Identifier: Apache-2.0
#include "hrpo/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace hrpo {

namespace {

std::string strip(std::string_view s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  std::size_t e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

struct Value {
  std::string raw;
  int line = 0;

  double as_double() const {
    try {
      std::size_t used = 0;
      const double v = std::stod(raw, &used);
      if (used == raw.size()) return v;
    } catch (...) {
    }
    throw ConfigError("line " + std::to_string(line) + ": '" + raw + "' is not a number");
  }
  int as_int() const {
    int v{};
    const auto [p, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), v);
    if (ec != std::errc{} || p != raw.data() + raw.size())
      throw ConfigError("line " + std::to_string(line) + ": '" + raw + "' is not an integer");
    return v;
  }
  std::uint64_t as_u64() const {
    std::uint64_t v{};
    const auto [p, ec] = std::from_chars(raw.data(), raw.data() + raw.size(), v);
    if (ec != std::errc{} || p != raw.data() + raw.size())
      throw ConfigError("line " + std::to_string(line) + ": '" + raw + "' is not an integer");
    return v;
  }
  bool as_bool() const {
    if (raw == "true") return true;
    if (raw == "false") return false;
    throw ConfigError("line " + std::to_string(line) + ": '" + raw + "' is not true/false");
  }
  std::string as_string() const {
    if (raw.size() >= 2 && raw.front() == '"' && raw.back() == '"')
      return raw.substr(1, raw.size() - 2);
    return raw;
  }
};

}  // namespace

void RunConfig::validate() const {
  gate.validate();
  trainer.validate();
  if (task.difficulty < 1) throw ConfigError("task.difficulty must be >= 1");
  if (task.n_train < 1 || task.n_eval < 1) throw ConfigError("task sizes must be >= 1");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
  if (pretrain.max_epochs < 0) throw ConfigError("pretrain.max_epochs must be >= 0");
  if (generation.max_new_tokens < 1) throw ConfigError("generation.max_new_tokens must be >= 1");
  if (model.max_seq_len < generation.max_new_tokens + 2)
    throw ConfigError("model.max_seq_len leaves no room for prompts");
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int line_no = 0;
  auto unknown = [&](const std::string& key) {
    throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + key +
                      "' in section [" + section + "]");
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    const std::string t = strip(line);
    if (t.empty()) continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ConfigError("line " + std::to_string(line_no) + ": malformed section header");
      section = strip(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = strip(t.substr(0, eq));
    const Value v{strip(t.substr(eq + 1)), line_no};

    if (section.empty()) {
      if (key == "seed") cfg.seed = v.as_u64();
      else if (key == "out_dir") cfg.out_dir = v.as_string();
      else if (key == "mode") cfg.generation.mode = generation_mode_from_string(v.as_string());
      else if (key == "checkpoint_every") cfg.checkpoint_every = v.as_int();
      else unknown(key);
    } else if (section == "model") {
      if (key == "n_layers") cfg.model.n_layers = v.as_int();
      else if (key == "n_heads") cfg.model.n_heads = v.as_int();
      else if (key == "d_model") cfg.model.d_model = v.as_int();
      else if (key == "d_ff") cfg.model.d_ff = v.as_int();
      else if (key == "max_seq_len") cfg.model.max_seq_len = v.as_int();
      else if (key == "tie_head") cfg.model.tie_head = v.as_bool();
      else unknown(key);
    } else if (section == "gate") {
      if (key == "tau") cfg.gate.tau = v.as_double();
      else if (key == "c") cfg.gate.c = v.as_double();
      else if (key == "r_min") cfg.gate.r_min = v.as_double();
      else unknown(key);
    } else if (section == "trainer") {
      if (key == "lr_main") cfg.trainer.lr_main = v.as_double();
      else if (key == "lr_gate_linear") cfg.trainer.lr_gate_linear = v.as_double();
      else if (key == "lr_lambda") cfg.trainer.lr_lambda = v.as_double();
      else if (key == "beta") cfg.trainer.beta = v.as_double();
      else if (key == "group_size") cfg.trainer.group_size = v.as_int();
      else if (key == "batch_prompts") cfg.trainer.batch_prompts = v.as_int();
      else if (key == "warmup_ratio") cfg.trainer.warmup_ratio = v.as_double();
      else if (key == "max_grad_norm") cfg.trainer.max_grad_norm = v.as_double();
      else if (key == "weight_decay") cfg.trainer.weight_decay = v.as_double();
      else if (key == "adv_eps") cfg.trainer.adv_eps = v.as_double();
      else if (key == "total_steps") cfg.trainer.total_steps = v.as_int();
      else if (key == "adam_beta1") cfg.trainer.adam_beta1 = v.as_double();
      else if (key == "adam_beta2") cfg.trainer.adam_beta2 = v.as_double();
      else if (key == "rollout_threads") cfg.trainer.rollout_threads = v.as_int();
      else if (key == "inject_nan_at_step") cfg.trainer.inject_nan_at_step = v.as_int();
      else unknown(key);
    } else if (section == "generation") {
      if (key == "max_new_tokens") cfg.generation.max_new_tokens = v.as_int();
      else if (key == "sampling_temp") cfg.generation.sampling_temp = v.as_double();
      else if (key == "greedy") cfg.generation.greedy = v.as_bool();
      else unknown(key);
    } else if (section == "task") {
      if (key == "kind") cfg.task.kind = task_kind_from_string(v.as_string());
      else if (key == "difficulty") cfg.task.difficulty = v.as_int();
      else if (key == "n_train") cfg.task.n_train = v.as_int();
      else if (key == "n_eval") cfg.task.n_eval = v.as_int();
      else unknown(key);
    } else if (section == "pretrain") {
      if (key == "max_epochs") cfg.pretrain.max_epochs = v.as_int();
      else if (key == "lr") cfg.pretrain.lr = v.as_double();
      else if (key == "batch_size") cfg.pretrain.batch_size = v.as_int();
      else if (key == "eval_every") cfg.pretrain.eval_every = v.as_int();
      else if (key == "accuracy_floor") cfg.pretrain.accuracy_floor = v.as_double();
      else if (key == "weight_decay") cfg.pretrain.weight_decay = v.as_double();
      else if (key == "max_grad_norm") cfg.pretrain.max_grad_norm = v.as_double();
      else unknown(key);
    } else {
      throw ConfigError("line " + std::to_string(line_no) + ": unknown section [" + section + "]");
    }
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

std::string render_run_config(const RunConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "seed = " << c.seed << "\n";
  os << "out_dir = \"" << c.out_dir << "\"\n";
  os << "mode = \"" << generation_mode_name(c.generation.mode) << "\"\n";
  os << "checkpoint_every = " << c.checkpoint_every << "\n\n";
  os << "[model]\n";
  os << "n_layers = " << c.model.n_layers << "\n";
  os << "n_heads = " << c.model.n_heads << "\n";
  os << "d_model = " << c.model.d_model << "\n";
  os << "d_ff = " << c.model.d_ff << "\n";
  os << "max_seq_len = " << c.model.max_seq_len << "\n";
  os << "tie_head = " << (c.model.tie_head ? "true" : "false") << "\n\n";
  os << "[gate]\n";
  os << "tau = " << c.gate.tau << "\n";
  os << "c = " << c.gate.c << "\n";
  os << "r_min = " << c.gate.r_min << "\n\n";
  os << "[trainer]\n";
  os << "lr_main = " << c.trainer.lr_main << "\n";
  os << "lr_gate_linear = " << c.trainer.lr_gate_linear << "\n";
  os << "lr_lambda = " << c.trainer.lr_lambda << "\n";
  os << "beta = " << c.trainer.beta << "\n";
  os << "group_size = " << c.trainer.group_size << "\n";
  os << "batch_prompts = " << c.trainer.batch_prompts << "\n";
  os << "warmup_ratio = " << c.trainer.warmup_ratio << "\n";
  os << "max_grad_norm = " << c.trainer.max_grad_norm << "\n";
  os << "weight_decay = " << c.trainer.weight_decay << "\n";
  os << "adv_eps = " << c.trainer.adv_eps << "\n";
  os << "total_steps = " << c.trainer.total_steps << "\n";
  os << "adam_beta1 = " << c.trainer.adam_beta1 << "\n";
  os << "adam_beta2 = " << c.trainer.adam_beta2 << "\n";
  os << "rollout_threads = " << c.trainer.rollout_threads << "\n\n";
  os << "[generation]\n";
  os << "max_new_tokens = " << c.generation.max_new_tokens << "\n";
  os << "sampling_temp = " << c.generation.sampling_temp << "\n";
  os << "greedy = " << (c.generation.greedy ? "true" : "false") << "\n\n";
  os << "[task]\n";
  os << "kind = \"" << task_kind_name(c.task.kind) << "\"\n";
  os << "difficulty = " << c.task.difficulty << "\n";
  os << "n_train = " << c.task.n_train << "\n";
  os << "n_eval = " << c.task.n_eval << "\n\n";
  os << "[pretrain]\n";
  os << "max_epochs = " << c.pretrain.max_epochs << "\n";
  os << "lr = " << c.pretrain.lr << "\n";
  os << "batch_size = " << c.pretrain.batch_size << "\n";
  os << "eval_every = " << c.pretrain.eval_every << "\n";
  os << "accuracy_floor = " << c.pretrain.accuracy_floor << "\n";
  os << "weight_decay = " << c.pretrain.weight_decay << "\n";
  os << "max_grad_norm = " << c.pretrain.max_grad_norm << "\n";
  return os.str();
}

}  // namespace hrpo
