// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <set>

#include <doctest.h>

#include "hrpo/gradcheck.hpp"
#include "hrpo/rollout.hpp"
#include "hrpo/tasks.hpp"

using namespace hrpo;

namespace {

struct Lab {
  Vocabulary vocab;
  ModelConfig mcfg;
  GateConfig gcfg;
  PolicyParameters policy;
  GateParams gate;
  GenerationConfig gen;

  explicit Lab(std::uint64_t seed, int d_model = 16, int layers = 2) {
    mcfg.n_layers = layers;
    mcfg.n_heads = 2;
    mcfg.d_model = d_model;
    mcfg.d_ff = 2 * d_model;
    mcfg.vocab_size = vocab.size();
    mcfg.max_seq_len = 64;
    gcfg.r_min = 0.95;
    Rng model_rng(seed);
    policy = PolicyParameters::init(mcfg, model_rng);
    Rng gate_rng(seed + 1);
    gate = init_gate(gcfg, mcfg.d_model, gate_rng);
    gen.mode = GenerationMode::Hybrid;
    gen.max_new_tokens = 12;
    gen.delimiter_id = vocab.delimiter_id();
    gen.eos_id = vocab.eos_id();
  }

  std::vector<int> prompt(std::uint64_t seed = 5) {
    Rng rng(seed);
    return make_task(vocab, TaskKind::Addition, 1, rng).prompt_ids;
  }
};

// Plain autoregressive sampler written independently of generate_hybrid.
std::vector<int> vanilla_sample(const PolicyParameters& policy, std::span<const int> prompt_ids,
                                const GenerationConfig& cfg, Rng& rng) {
  std::vector<int> out;
  KVCache cache(policy);
  Tensor hidden = forward(nullptr, policy, embed(nullptr, policy, prompt_ids), &cache);
  std::vector<int> last{static_cast<int>(prompt_ids.size()) - 1};
  Tensor h_last = gather_rows(nullptr, hidden, last);
  for (int j = 0; j < cfg.max_new_tokens; ++j) {
    Tensor row = logits(nullptr, policy, h_last);
    const int tok = sample_token(row, cfg.sampling_temp, rng, cfg.greedy);
    out.push_back(tok);
    if (tok == cfg.eos_id || j + 1 >= cfg.max_new_tokens) break;
    std::vector<int> one{tok};
    h_last = forward(nullptr, policy, embed(nullptr, policy, one), &cache);
  }
  return out;
}

}  // namespace

TEST_CASE("token_only rollouts are bit-identical to a vanilla sampler") {
  Lab lab(100);
  lab.gen.mode = GenerationMode::TokenOnly;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng a(seed), b(seed);
    HybridTrajectory traj =
        generate_hybrid(lab.policy, lab.gate, lab.gcfg, lab.prompt(), lab.gen, a);
    const std::vector<int> reference = vanilla_sample(lab.policy, lab.prompt(), lab.gen, b);
    CHECK(traj.gen_ids == reference);
  }
}

TEST_CASE("hybrid with retention forced to one equals token_only bit-exactly") {
  Lab lab(101);
  std::fill_n(lab.gate.lambda.data(), lab.mcfg.d_model, -745.0);  // a == 1 exactly
  Rng a(7), b(7);
  GenerationConfig hybrid_cfg = lab.gen;
  hybrid_cfg.mode = GenerationMode::Hybrid;
  GenerationConfig token_cfg = lab.gen;
  token_cfg.mode = GenerationMode::TokenOnly;
  HybridTrajectory h = generate_hybrid(lab.policy, lab.gate, lab.gcfg, lab.prompt(), hybrid_cfg, a);
  HybridTrajectory t = generate_hybrid(lab.policy, lab.gate, lab.gcfg, lab.prompt(), token_cfg, b);
  CHECK(h.gen_ids == t.gen_ids);
  REQUIRE(h.rollout_logprobs.size() == t.rollout_logprobs.size());
  for (std::size_t i = 0; i < h.rollout_logprobs.size(); ++i)
    CHECK(h.rollout_logprobs[i] == t.rollout_logprobs[i]);
}

TEST_CASE("think phase ends at the first delimiter") {
  Lab lab(102);
  Rng rng(3);
  for (int rep = 0; rep < 40; ++rep) {
    Rng sr = rng.fork(static_cast<std::uint64_t>(rep));
    HybridTrajectory traj =
        generate_hybrid(lab.policy, lab.gate, lab.gcfg, lab.prompt(), lab.gen, sr);
    int first_delim = -1;
    for (std::size_t j = 0; j < traj.gen_ids.size(); ++j)
      if (traj.gen_ids[j] == lab.vocab.delimiter_id()) {
        first_delim = static_cast<int>(j);
        break;
      }
    if (first_delim >= 0) CHECK(traj.think_len == first_delim);
    else CHECK(traj.think_len == static_cast<int>(traj.gen_ids.size()));
    CHECK(traj.rollout_logprobs.size() == traj.gen_ids.size());
    // one gate trace per fused step: think tokens that fed a next position
    const int fed = std::min(traj.think_len, static_cast<int>(traj.gen_ids.size()) - 1);
    CHECK(static_cast<int>(traj.gate_traces.size()) == fed);
    if (traj.terminated_by == Termination::Eos) CHECK(traj.gen_ids.back() == lab.vocab.eos_id());
    else CHECK(static_cast<int>(traj.gen_ids.size()) == lab.gen.max_new_tokens);
  }
}

TEST_CASE("rollout groups carry g members with independent streams") {
  Lab lab(103);
  Rng rng(9);
  RolloutGroup group = rollout_group(lab.policy, lab.gate, lab.gcfg, lab.prompt(), 4, lab.gen, rng);
  CHECK(group.trajectories.size() == 4);
  CHECK(group.advantages.empty());
  Rng rng2(10);
  CHECK_THROWS_AS(rollout_group(lab.policy, lab.gate, lab.gcfg, lab.prompt(), 1, lab.gen, rng2),
                  ContractViolation);

  // statistical independence: across many groups, members almost always differ
  int distinct = 0, total = 0;
  for (int g = 0; g < 100; ++g) {
    Rng gr = rng.fork(static_cast<std::uint64_t>(g));
    RolloutGroup grp = rollout_group(lab.policy, lab.gate, lab.gcfg, lab.prompt(), 2, lab.gen, gr);
    ++total;
    if (grp.trajectories[0].gen_ids != grp.trajectories[1].gen_ids) ++distinct;
  }
  CHECK(distinct > 90);
}

TEST_CASE("replay matches rollout logprobs before any update") {
  Lab lab(104);
  Rng rng(11);
  for (int rep = 0; rep < 25; ++rep) {
    Rng sr = rng.fork(static_cast<std::uint64_t>(rep));
    HybridTrajectory traj =
        generate_hybrid(lab.policy, lab.gate, lab.gcfg, lab.prompt(sr.next_u64() % 7), lab.gen, sr);
    Tape tape;
    Tensor lp = replay_logprobs(&tape, lab.policy, lab.gate, lab.gcfg, traj, lab.gen);
    REQUIRE(lp.numel() == static_cast<std::int64_t>(traj.rollout_logprobs.size()));
    for (std::int64_t i = 0; i < lp.numel(); ++i)
      CHECK(std::abs(lp.at(i) - traj.rollout_logprobs[static_cast<std::size_t>(i)]) < 1e-9);
  }
}

TEST_CASE("replay is bit-stable across repeated calls") {
  Lab lab(105);
  Rng rng(12);
  HybridTrajectory traj = generate_hybrid(lab.policy, lab.gate, lab.gcfg, lab.prompt(), lab.gen, rng);
  Tape t1, t2;
  Tensor a = replay_logprobs(&t1, lab.policy, lab.gate, lab.gcfg, traj, lab.gen);
  Tensor b = replay_logprobs(&t2, lab.policy, lab.gate, lab.gcfg, traj, lab.gen);
  for (std::int64_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == b.at(i));
}

TEST_CASE("stale trajectories are rejected after a parameter bump") {
  Lab lab(106);
  Rng rng(13);
  HybridTrajectory traj = generate_hybrid(lab.policy, lab.gate, lab.gcfg, lab.prompt(), lab.gen, rng);
  lab.policy.bump_version();
  Tape tape;
  CHECK_THROWS_AS(replay_logprobs(&tape, lab.policy, lab.gate, lab.gcfg, traj, lab.gen),
                  StaleTrajectoryError);
}

TEST_CASE("reference logprobs ignore the gate and match token_only replay at theta = ref") {
  Lab lab(107);
  lab.gen.mode = GenerationMode::TokenOnly;
  Rng rng(14);
  HybridTrajectory traj = generate_hybrid(lab.policy, lab.gate, lab.gcfg, lab.prompt(), lab.gen, rng);
  const std::vector<double> ref = reference_logprobs(lab.policy, traj, lab.gen);
  Tape tape;
  Tensor lp = replay_logprobs(&tape, lab.policy, lab.gate, lab.gcfg, traj, lab.gen);
  REQUIRE(static_cast<std::int64_t>(ref.size()) == lp.numel());
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(ref[i] - lp.at(static_cast<std::int64_t>(i))) < 1e-9);

  // perturbing the gate leaves the reference path bit-identical
  std::fill_n(lab.gate.lambda.data(), lab.mcfg.d_model, 3.0);
  const std::vector<double> ref2 = reference_logprobs(lab.policy, traj, lab.gen);
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(ref[i] == ref2[i]);
}

TEST_CASE("reference logprobs match a hand-rolled forward on a 1-layer model") {
  Lab lab(108, 8, 1);
  lab.gen.mode = GenerationMode::TokenOnly;
  Rng rng(15);
  HybridTrajectory traj = generate_hybrid(lab.policy, lab.gate, lab.gcfg, lab.prompt(), lab.gen, rng);
  const std::vector<double> ref = reference_logprobs(lab.policy, traj, lab.gen);

  // hand path: full forward over prompt+gen, pick logprob of each gen token
  std::vector<int> tokens = traj.prompt_ids;
  tokens.insert(tokens.end(), traj.gen_ids.begin(), traj.gen_ids.end());
  std::vector<int> inputs(tokens.begin(), tokens.end() - 1);
  Tensor hidden = forward(nullptr, lab.policy, embed(nullptr, lab.policy, inputs), nullptr);
  Tensor lg = logits(nullptr, lab.policy, hidden);
  const int p = static_cast<int>(traj.prompt_ids.size());
  for (std::size_t j = 0; j < traj.gen_ids.size(); ++j) {
    const int row = p - 1 + static_cast<int>(j);
    double mx = lg.at(row, 0);
    for (int kk = 1; kk < lg.cols(); ++kk) mx = std::max(mx, lg.at(row, kk));
    double z = 0;
    for (int kk = 0; kk < lg.cols(); ++kk) z += std::exp(lg.at(row, kk) - mx);
    const double lp = lg.at(row, traj.gen_ids[j]) - mx - std::log(z);
    CHECK(std::abs(ref[j] - lp) < 1e-9);
  }
}

TEST_CASE("mode lattice: interpolation_only equals hybrid with a = 0 and i = 1") {
  Lab lab(109);
  // a -> 0: lambda huge; i -> 1: w_i = 0 with a large positive bias
  std::fill_n(lab.gate.lambda.data(), lab.mcfg.d_model, 745.0);
  std::fill_n(lab.gate.w_i.data(), lab.gate.w_i.numel(), 0.0);
  std::fill_n(lab.gate.b_i.data(), lab.mcfg.d_model, 745.0);  // sigmoid -> 1
  GenerationConfig hybrid_cfg = lab.gen;
  hybrid_cfg.mode = GenerationMode::Hybrid;
  GenerationConfig interp_cfg = lab.gen;
  interp_cfg.mode = GenerationMode::InterpolationOnly;
  Rng a(21), b(21);
  HybridTrajectory h = generate_hybrid(lab.policy, lab.gate, lab.gcfg, lab.prompt(), hybrid_cfg, a);
  HybridTrajectory t = generate_hybrid(lab.policy, lab.gate, lab.gcfg, lab.prompt(), interp_cfg, b);
  CHECK(h.gen_ids == t.gen_ids);
}

TEST_CASE("hidden_state mode runs and feeds the raw state") {
  Lab lab(110);
  lab.gen.mode = GenerationMode::HiddenState;
  Rng rng(22);
  HybridTrajectory traj = generate_hybrid(lab.policy, lab.gate, lab.gcfg, lab.prompt(), lab.gen, rng);
  CHECK(!traj.gen_ids.empty());
  CHECK(traj.gate_traces.empty());
  for (double lp : traj.rollout_logprobs) CHECK(std::isfinite(lp));
}

TEST_CASE("delimiter-first completions have an empty think phase") {
  Lab lab(111);
  // force the delimiter then an answer by replaying a fixed token sequence
  std::vector<int> forced{lab.vocab.delimiter_id()};
  for (int id : lab.vocab.tokenize(" 7")) forced.push_back(id);
  forced.push_back(lab.vocab.eos_id());
  HybridTrajectory traj;
  traj.prompt_ids = lab.prompt();
  traj.gen_ids = forced;
  traj.param_version = lab.policy.version();
  Tape tape;
  Tensor lp = replay_logprobs(&tape, lab.policy, lab.gate, lab.gcfg, traj, lab.gen);
  CHECK(lp.numel() == static_cast<std::int64_t>(forced.size()));

  Rng rng(1);
  TaskInstance inst = make_task(lab.vocab, TaskKind::Addition, 1, rng);
  while (inst.answer_text != "7") inst = make_task(lab.vocab, TaskKind::Addition, 1, rng);
  traj.prompt_ids = inst.prompt_ids;
  CHECK(outcome_reward(lab.vocab, traj.gen_ids, inst) == 1);
}

TEST_CASE("replay gradient w.r.t. the retention vector matches finite differences") {
  Lab lab(112, 12, 1);
  Rng rng(23);
  HybridTrajectory traj = generate_hybrid(lab.policy, lab.gate, lab.gcfg, lab.prompt(), lab.gen, rng);
  REQUIRE(traj.think_len > 0);

  lab.gate.lambda.impl()->grad.clear();
  Tape tape;
  Tensor lp = replay_logprobs(&tape, lab.policy, lab.gate, lab.gcfg, traj, lab.gen);
  Tensor loss = sum(&tape, lp);
  tape.backward(loss);
  const auto f = [&]() {
    Tape t;
    return sum(&t, replay_logprobs(&t, lab.policy, lab.gate, lab.gcfg, traj, lab.gen)).value();
  };
  int checked = 0;
  for (int e = 0; e < lab.gate.lambda.numel() && checked < 6; ++e) {
    if (std::abs(lab.gate.lambda.grad_at(e)) < 1e-4) continue;
    const double numeric = finite_difference_grad(f, lab.gate.lambda, e, 1e-5);
    CHECK(grads_close(lab.gate.lambda.grad_at(e), numeric, 1e-5, 1e-9));
    ++checked;
  }
  CHECK(checked > 0);
}

TEST_CASE("prompts that cannot fit the generation budget are rejected") {
  Lab lab(113);
  std::vector<int> long_prompt(60, 5);
  Rng rng(24);
  CHECK_THROWS_AS(
      generate_hybrid(lab.policy, lab.gate, lab.gcfg, long_prompt, lab.gen, rng),
      ContractViolation);
}
