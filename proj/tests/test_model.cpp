// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include <doctest.h>

#include "hrpo/gradcheck.hpp"
#include "hrpo/model.hpp"

using namespace hrpo;

namespace {

ModelConfig tiny_config(int layers = 2, int heads = 2, int d = 8, int dff = 16, int vocab = 13,
                        int seq = 16) {
  ModelConfig cfg;
  cfg.n_layers = layers;
  cfg.n_heads = heads;
  cfg.d_model = d;
  cfg.d_ff = dff;
  cfg.vocab_size = vocab;
  cfg.max_seq_len = seq;
  return cfg;
}

}  // namespace

TEST_CASE("config invariants") {
  ModelConfig bad = tiny_config();
  bad.d_model = 10;
  bad.n_heads = 4;
  CHECK_THROWS_AS(bad.validate(), ContractViolation);
  bad = tiny_config();
  bad.vocab_size = 0;
  CHECK_THROWS_AS(bad.validate(), ContractViolation);
}

TEST_CASE("embed returns embedding matrix rows") {
  Rng rng(1);
  PolicyParameters policy = PolicyParameters::init(tiny_config(), rng);
  const Tensor& table = policy.token_embedding();
  std::vector<int> ids{0};
  Tensor row = embed(nullptr, policy, ids);
  for (int j = 0; j < 8; ++j) CHECK(row.at(0, j) == table.at(0, j));

  std::vector<int> twice{5, 5};
  Tensor rows = embed(nullptr, policy, twice);
  for (int j = 0; j < 8; ++j) {
    CHECK(rows.at(0, j) == table.at(5, j));
    CHECK(rows.at(1, j) == table.at(5, j));
  }
  std::vector<int> oob{13};
  CHECK_THROWS_AS(embed(nullptr, policy, oob), ContractViolation);
}

TEST_CASE("embedding gradient is one-hot rows") {
  Rng rng(2);
  PolicyParameters policy = PolicyParameters::init(tiny_config(), rng);
  Tensor table = policy.token_embedding();
  std::vector<int> ids{3};
  Tape tape;
  Tensor loss = sum(&tape, embed(&tape, policy, ids));
  tape.backward(loss);
  for (int r = 0; r < table.rows(); ++r)
    for (int c = 0; c < table.cols(); ++c)
      CHECK(table.grad_at(static_cast<std::int64_t>(r) * table.cols() + c) ==
            (r == 3 ? 1.0 : 0.0));
  const auto f = [&]() {
    Tape t;
    return sum(&t, embed(&t, policy, ids)).value();
  };
  CHECK(grads_close(table.grad_at(3 * 8 + 2), finite_difference_grad(f, table, 3 * 8 + 2, 1e-6),
                    1e-6, 1e-9));
}

TEST_CASE("incremental forward with a cache matches the full recompute") {
  Rng rng(3);
  PolicyParameters policy = PolicyParameters::init(tiny_config(), rng);
  std::vector<int> ids{1, 7, 2, 9, 4, 11, 6, 3};
  Tensor emb = embed(nullptr, policy, ids);

  Tensor full = forward(nullptr, policy, emb, nullptr);

  KVCache cache(policy);
  std::vector<double> inc;
  for (std::size_t t = 0; t < ids.size(); ++t) {
    Tensor row = Tensor::from_data({1, 8}, std::vector<double>(emb.data() + t * 8,
                                                               emb.data() + (t + 1) * 8));
    Tensor h = forward(nullptr, policy, row, &cache);
    inc.insert(inc.end(), h.data(), h.data() + 8);
  }
  REQUIRE(inc.size() == static_cast<std::size_t>(full.numel()));
  for (std::int64_t i = 0; i < full.numel(); ++i)
    CHECK(std::abs(inc[static_cast<std::size_t>(i)] - full.at(i)) < 1e-9);
}

TEST_CASE("prefill plus incremental decode matches the full recompute") {
  Rng rng(4);
  PolicyParameters policy = PolicyParameters::init(tiny_config(), rng);
  std::vector<int> ids{1, 7, 2, 9, 4, 11};
  Tensor emb = embed(nullptr, policy, ids);
  Tensor full = forward(nullptr, policy, emb, nullptr);

  KVCache cache(policy);
  std::vector<int> prefix(ids.begin(), ids.begin() + 4);
  Tensor h_prefix = forward(nullptr, policy, embed(nullptr, policy, prefix), &cache);
  for (int t = 0; t < 4; ++t)
    for (int j = 0; j < 8; ++j)
      CHECK(std::abs(h_prefix.at(t, j) - full.at(t, j)) < 1e-9);
  for (std::size_t t = 4; t < ids.size(); ++t) {
    std::vector<int> one{ids[t]};
    Tensor h = forward(nullptr, policy, embed(nullptr, policy, one), &cache);
    for (int j = 0; j < 8; ++j) CHECK(std::abs(h.at(0, j) - full.at(static_cast<int>(t), j)) < 1e-9);
  }
}

TEST_CASE("causality: perturbing position 5 leaves earlier rows bit-identical") {
  Rng rng(5);
  PolicyParameters policy = PolicyParameters::init(tiny_config(4, 2, 8, 16), rng);
  std::vector<int> ids{1, 2, 3, 4, 5, 6, 7};
  Tensor emb = embed(nullptr, policy, ids);
  Tensor base = forward(nullptr, policy, emb, nullptr);

  Tensor perturbed = Tensor::from_data(
      emb.shape(), std::vector<double>(emb.data(), emb.data() + emb.numel()));
  for (int j = 0; j < 8; ++j) perturbed.data()[5 * 8 + j] += 0.37;
  Tensor out = forward(nullptr, policy, perturbed, nullptr);
  for (int t = 0; t < 5; ++t)
    for (int j = 0; j < 8; ++j) CHECK(out.at(t, j) == base.at(t, j));
  bool changed = false;
  for (int j = 0; j < 8; ++j) changed = changed || out.at(5, j) != base.at(5, j);
  CHECK(changed);
}

TEST_CASE("single-layer single-head attention matches a hand computation") {
  ModelConfig cfg = tiny_config(1, 1, 4, 8, 7, 8);
  Rng rng(6);
  PolicyParameters policy = PolicyParameters::init(cfg, rng);
  std::vector<int> ids{2, 5, 1};
  Tensor emb = embed(nullptr, policy, ids);
  Tensor out = forward(nullptr, policy, emb, nullptr);

  // hand recompute with plain loops
  const int t_len = 3, d = 4;
  const BlockParams& blk = policy.blocks()[0];
  auto layer_norm = [&](const std::vector<double>& x, const Tensor& g, const Tensor& b) {
    std::vector<double> out_row(d);
    double mu = 0, var = 0;
    for (int j = 0; j < d; ++j) mu += x[static_cast<std::size_t>(j)];
    mu /= d;
    for (int j = 0; j < d; ++j)
      var += (x[static_cast<std::size_t>(j)] - mu) * (x[static_cast<std::size_t>(j)] - mu);
    var /= d;
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    for (int j = 0; j < d; ++j)
      out_row[static_cast<std::size_t>(j)] =
          g.at(j) * (x[static_cast<std::size_t>(j)] - mu) * inv + b.at(j);
    return out_row;
  };
  auto matvec = [&](const std::vector<double>& x, const Tensor& w, int rows, int cols) {
    std::vector<double> y(static_cast<std::size_t>(cols), 0.0);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) y[static_cast<std::size_t>(c)] += x[static_cast<std::size_t>(r)] * w.at(r, c);
    return y;
  };

  std::vector<std::vector<double>> x(t_len);
  for (int t = 0; t < t_len; ++t) {
    x[static_cast<std::size_t>(t)].resize(d);
    for (int j = 0; j < d; ++j)
      x[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)] =
          emb.at(t, j) + policy.position_embedding().at(t, j);
  }
  std::vector<std::vector<double>> q(t_len), k(t_len), v(t_len);
  for (int t = 0; t < t_len; ++t) {
    const auto xn = layer_norm(x[static_cast<std::size_t>(t)], blk.ln1_g, blk.ln1_b);
    q[static_cast<std::size_t>(t)] = matvec(xn, blk.attn.w_q[0], d, d);
    k[static_cast<std::size_t>(t)] = matvec(xn, blk.attn.w_k[0], d, d);
    v[static_cast<std::size_t>(t)] = matvec(xn, blk.attn.w_v[0], d, d);
  }
  for (int t = 0; t < t_len; ++t) {
    std::vector<double> scores(static_cast<std::size_t>(t) + 1, 0.0);
    for (int s = 0; s <= t; ++s) {
      for (int j = 0; j < d; ++j)
        scores[static_cast<std::size_t>(s)] += q[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)] *
                                               k[static_cast<std::size_t>(s)][static_cast<std::size_t>(j)];
      scores[static_cast<std::size_t>(s)] /= std::sqrt(4.0);
    }
    double mx = scores[0];
    for (double sc : scores) mx = std::max(mx, sc);
    double z = 0;
    for (auto& sc : scores) {
      sc = std::exp(sc - mx);
      z += sc;
    }
    std::vector<double> mixed(d, 0.0);
    for (int s = 0; s <= t; ++s)
      for (int j = 0; j < d; ++j)
        mixed[static_cast<std::size_t>(j)] +=
            scores[static_cast<std::size_t>(s)] / z * v[static_cast<std::size_t>(s)][static_cast<std::size_t>(j)];
    const auto attn_out = matvec(mixed, blk.attn.w_o, d, d);
    for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)] += attn_out[static_cast<std::size_t>(j)];
    const auto xn2 = layer_norm(x[static_cast<std::size_t>(t)], blk.ln2_g, blk.ln2_b);
    auto h1 = matvec(xn2, blk.w_ff1, d, 8);
    for (auto& hv : h1) hv = hv / (1.0 + std::exp(-hv));  // SiLU
    const auto ff = matvec(h1, blk.w_ff2, 8, d);
    for (int j = 0; j < d; ++j) x[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)] += ff[static_cast<std::size_t>(j)];
    const auto final_row =
        layer_norm(x[static_cast<std::size_t>(t)], policy.final_norm_gain(), policy.final_norm_bias());
    for (int j = 0; j < d; ++j)
      CHECK(std::abs(out.at(t, j) - final_row[static_cast<std::size_t>(j)]) < 1e-9);
  }
}

TEST_CASE("tied head logits equal embedding dot products and softmax normalizes") {
  Rng rng(7);
  PolicyParameters policy = PolicyParameters::init(tiny_config(), rng);
  Tensor hidden = Tensor::uniform({1, 8}, -1, 1, rng);
  Tensor lg = logits(nullptr, policy, hidden);
  REQUIRE(lg.cols() == 13);
  for (int kk = 0; kk < 13; ++kk) {
    double dot = 0;
    for (int j = 0; j < 8; ++j) dot += policy.token_embedding().at(kk, j) * hidden.at(0, j);
    CHECK(lg.at(0, kk) == doctest::Approx(dot).epsilon(1e-12));
  }
  Tensor zero_hidden = Tensor::zeros({1, 8});
  Tensor zl = logits(nullptr, policy, zero_hidden);
  for (int kk = 0; kk < 13; ++kk) CHECK(zl.at(0, kk) == 0.0);

  Tensor sm = softmax_rows(nullptr, lg);
  double total = 0;
  for (int kk = 0; kk < 13; ++kk) total += sm.at(0, kk);
  CHECK(std::abs(total - 1.0) <= 1e-12);
}

TEST_CASE("untied head uses its own matrix") {
  ModelConfig cfg = tiny_config();
  cfg.tie_head = false;
  Rng rng(8);
  PolicyParameters policy = PolicyParameters::init(cfg, rng);
  CHECK_FALSE(policy.head_matrix().same_impl(policy.token_embedding()));
}

TEST_CASE("greedy sampling takes the argmax with lowest-index tie-break") {
  Rng rng(9);
  Tensor a = Tensor::from_data({1, 3}, {1.0, 3.0, 2.0});
  CHECK(sample_token(a, 1.0, rng, true) == 1);
  Tensor tie = Tensor::from_data({1, 2}, {2.0, 2.0});
  CHECK(sample_token(tie, 1.0, rng, true) == 0);
}

TEST_CASE("stochastic sampling matches the analytic softmax frequency") {
  Rng rng(10);
  Tensor lg = Tensor::from_data({1, 2}, {std::log(3.0), 0.0});
  int hits = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i)
    if (sample_token(lg, 1.0, rng, false) == 0) ++hits;
  const double freq = static_cast<double>(hits) / n;
  CHECK(freq == doctest::Approx(0.75).epsilon(0.03));
  CHECK_THROWS_AS(sample_token(lg, 0.0, rng, false), ContractViolation);
}

TEST_CASE("cache is invalidated by parameter updates and overlength is rejected") {
  Rng rng(11);
  PolicyParameters policy = PolicyParameters::init(tiny_config(), rng);
  KVCache cache(policy);
  std::vector<int> ids{1, 2, 3};
  forward(nullptr, policy, embed(nullptr, policy, ids), &cache);
  policy.bump_version();
  std::vector<int> one{4};
  CHECK_THROWS_AS(forward(nullptr, policy, embed(nullptr, policy, one), &cache),
                  ContractViolation);

  std::vector<int> too_long(17, 1);
  CHECK_THROWS_AS(forward(nullptr, policy, embed(nullptr, policy, too_long), nullptr),
                  ContractViolation);
}

TEST_CASE("transformer gradients match finite differences through the cache-free path") {
  Rng rng(12);
  PolicyParameters policy = PolicyParameters::init(tiny_config(2, 2, 8, 16, 11, 12), rng);
  std::vector<int> ids{1, 4, 7, 2, 9};
  Tensor weights;
  {
    Tape probe;
    weights = Tensor::uniform(
        forward(&probe, policy, embed(&probe, policy, ids), nullptr).shape(), -1, 1, rng);
  }
  const auto objective = [&](Tape* tape) {
    return sum(tape, mul(tape, forward(tape, policy, embed(tape, policy, ids), nullptr), weights));
  };
  auto named = policy.named_tensors();
  for (auto& [name, t] : named) t.impl()->grad.clear();
  Tape tape;
  Tensor loss = objective(&tape);
  tape.backward(loss);
  const auto f = [&]() {
    Tape t;
    return objective(&t).value();
  };
  Rng pick(77);
  int checked = 0;
  while (checked < 20) {
    auto& [name, t] = named[pick.below(named.size())];
    const auto e = static_cast<std::int64_t>(pick.below(static_cast<std::uint64_t>(t.numel())));
    if (std::abs(t.grad_at(e)) < 5e-3) continue;
    const double numeric = finite_difference_grad(f, t, e, 1e-6);
    CAPTURE(name);
    CHECK(grads_close(t.grad_at(e), numeric, 1e-6, 1e-9));
    ++checked;
  }
}
