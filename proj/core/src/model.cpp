// SPDX-License-Identifier: Apache-2.0
#include "hrpo/model.hpp"

#include <cmath>
#include <numeric>

namespace hrpo {

void ModelConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_ff < 1 || max_seq_len < 1)
    throw ContractViolation("model dimensions must be positive");
  if (d_model % n_heads != 0) throw ContractViolation("d_model must be divisible by n_heads");
  if (vocab_size < 1) throw ContractViolation("vocab_size must be set before building a model");
}

PolicyParameters PolicyParameters::init(const ModelConfig& config, Rng& rng) {
  config.validate();
  PolicyParameters p;
  p.config_ = config;
  const int d = config.d_model;
  const int dh = config.head_dim();
  const double bd = 1.0 / std::sqrt(static_cast<double>(d));
  const double bff = 1.0 / std::sqrt(static_cast<double>(config.d_ff));

  p.tok_emb_ = Tensor::uniform({config.vocab_size, d}, -bd, bd, rng, true);
  p.pos_emb_ = Tensor::uniform({config.max_seq_len, d}, -bd, bd, rng, true);
  p.blocks_.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& blk : p.blocks_) {
    blk.ln1_g = Tensor::full({d}, 1.0, true);
    blk.ln1_b = Tensor::zeros({d}, true);
    for (int h = 0; h < config.n_heads; ++h) {
      blk.attn.w_q.push_back(Tensor::uniform({d, dh}, -bd, bd, rng, true));
      blk.attn.w_k.push_back(Tensor::uniform({d, dh}, -bd, bd, rng, true));
      blk.attn.w_v.push_back(Tensor::uniform({d, dh}, -bd, bd, rng, true));
    }
    blk.attn.w_o = Tensor::uniform({d, d}, -bd, bd, rng, true);
    blk.ln2_g = Tensor::full({d}, 1.0, true);
    blk.ln2_b = Tensor::zeros({d}, true);
    blk.w_ff1 = Tensor::uniform({d, config.d_ff}, -bd, bd, rng, true);
    blk.w_ff2 = Tensor::uniform({config.d_ff, d}, -bff, bff, rng, true);
  }
  p.lnf_g_ = Tensor::full({d}, 1.0, true);
  p.lnf_b_ = Tensor::zeros({d}, true);
  if (!config.tie_head) p.head_ = Tensor::uniform({config.vocab_size, d}, -bd, bd, rng, true);
  return p;
}

std::vector<std::pair<std::string, Tensor>> PolicyParameters::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("tok_emb", tok_emb_);
  out.emplace_back("pos_emb", pos_emb_);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const std::string pre = "block" + std::to_string(l) + ".";
    const BlockParams& b = blocks_[l];
    out.emplace_back(pre + "ln1.g", b.ln1_g);
    out.emplace_back(pre + "ln1.b", b.ln1_b);
    for (std::size_t h = 0; h < b.attn.w_q.size(); ++h) {
      const std::string hs = std::to_string(h);
      out.emplace_back(pre + "attn.q" + hs, b.attn.w_q[h]);
      out.emplace_back(pre + "attn.k" + hs, b.attn.w_k[h]);
      out.emplace_back(pre + "attn.v" + hs, b.attn.w_v[h]);
    }
    out.emplace_back(pre + "attn.o", b.attn.w_o);
    out.emplace_back(pre + "ln2.g", b.ln2_g);
    out.emplace_back(pre + "ln2.b", b.ln2_b);
    out.emplace_back(pre + "ff1", b.w_ff1);
    out.emplace_back(pre + "ff2", b.w_ff2);
  }
  out.emplace_back("lnf.g", lnf_g_);
  out.emplace_back("lnf.b", lnf_b_);
  if (!config_.tie_head) out.emplace_back("head", head_);
  return out;
}

PolicyParameters PolicyParameters::clone() const {
  PolicyParameters copy = *this;
  auto deep = [](Tensor& t) {
    if (!t.valid()) return;
    t = Tensor::from_data(t.shape(), std::vector<double>(t.data(), t.data() + t.numel()),
                          t.requires_grad());
  };
  deep(copy.tok_emb_);
  deep(copy.pos_emb_);
  for (auto& b : copy.blocks_) {
    deep(b.ln1_g);
    deep(b.ln1_b);
    for (auto& w : b.attn.w_q) deep(w);
    for (auto& w : b.attn.w_k) deep(w);
    for (auto& w : b.attn.w_v) deep(w);
    deep(b.attn.w_o);
    deep(b.ln2_g);
    deep(b.ln2_b);
    deep(b.w_ff1);
    deep(b.w_ff2);
  }
  deep(copy.lnf_g_);
  deep(copy.lnf_b_);
  deep(copy.head_);
  return copy;
}

KVCache::KVCache(const PolicyParameters& policy)
    : keys(static_cast<std::size_t>(policy.config().n_layers),
           std::vector<std::vector<Tensor>>(static_cast<std::size_t>(policy.config().n_heads))),
      values(keys),
      param_version(policy.version()) {}

Tensor embed(Tape* tape, const PolicyParameters& policy, std::span<const int> token_ids) {
  return gather_rows(tape, policy.token_embedding(), token_ids);
}

Tensor forward(Tape* tape, const PolicyParameters& policy, const Tensor& embeddings,
               KVCache* cache) {
  const ModelConfig& cfg = policy.config();
  const int t = embeddings.rows();
  const int start = cache ? cache->length : 0;
  if (start + t > cfg.max_seq_len)
    throw ContractViolation("sequence of length " + std::to_string(start + t) +
                            " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  if (cache) {
    if (cache->param_version != policy.version())
      throw ContractViolation("KV cache is stale: parameters changed since it was built");
    if (start > 0 && t != 1)
      throw ContractViolation("incremental forward consumes one position at a time");
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));

  std::vector<int> pos_ids(static_cast<std::size_t>(t));
  std::iota(pos_ids.begin(), pos_ids.end(), start);
  Tensor x = add(tape, embeddings, gather_rows(tape, policy.position_embedding(), pos_ids));

  const bool incremental = cache && start > 0;
  for (std::size_t l = 0; l < policy.blocks().size(); ++l) {
    const BlockParams& blk = policy.blocks()[l];
    Tensor xn = layer_norm_rows(tape, x, blk.ln1_g, blk.ln1_b);
    std::vector<Tensor> head_out;
    head_out.reserve(static_cast<std::size_t>(cfg.n_heads));
    for (int h = 0; h < cfg.n_heads; ++h) {
      Tensor q = matmul(tape, xn, blk.attn.w_q[static_cast<std::size_t>(h)]);
      Tensor k = matmul(tape, xn, blk.attn.w_k[static_cast<std::size_t>(h)]);
      Tensor v = matmul(tape, xn, blk.attn.w_v[static_cast<std::size_t>(h)]);
      if (cache) {
        cache->keys[l][static_cast<std::size_t>(h)].push_back(k);
        cache->values[l][static_cast<std::size_t>(h)].push_back(v);
      }
      if (incremental) {
        const auto& kc = cache->keys[l][static_cast<std::size_t>(h)];
        const auto& vc = cache->values[l][static_cast<std::size_t>(h)];
        Tensor scores = attn_scores_over(tape, q, kc, scale);
        Tensor w = softmax_rows(tape, scores);
        head_out.push_back(attn_mix_over(tape, w, vc));
      } else {
        Tensor scores = masked_attn_scores(tape, q, k, scale);
        Tensor w = softmax_rows(tape, scores);
        head_out.push_back(matmul(tape, w, v));
      }
    }
    Tensor attn_cat = concat_cols(tape, head_out);
    x = add(tape, x, matmul(tape, attn_cat, blk.attn.w_o));

    Tensor xn2 = layer_norm_rows(tape, x, blk.ln2_g, blk.ln2_b);
    Tensor h1 = matmul(tape, xn2, blk.w_ff1);
    Tensor act = mul(tape, h1, sigmoid(tape, h1));  // SiLU
    x = add(tape, x, matmul(tape, act, blk.w_ff2));
  }
  if (cache) cache->length += t;
  return layer_norm_rows(tape, x, policy.final_norm_gain(), policy.final_norm_bias());
}

Tensor logits(Tape* tape, const PolicyParameters& policy, const Tensor& hidden) {
  return matmul_nt(tape, hidden, policy.head_matrix());
}

int sample_token(const Tensor& logit_row, double temperature, Rng& rng, bool greedy) {
  const std::int64_t n = logit_row.numel();
  const double* x = logit_row.data();
  if (greedy) {
    int best = 0;
    for (std::int64_t i = 1; i < n; ++i)
      if (x[i] > x[best]) best = static_cast<int>(i);
    return best;
  }
  if (!(temperature > 0.0))
    throw ContractViolation("stochastic sampling requires temperature > 0");
  double mx = x[0];
  for (std::int64_t i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  std::vector<double> p(static_cast<std::size_t>(n));
  double z = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    p[static_cast<std::size_t>(i)] = std::exp((x[i] - mx) / temperature);
    z += p[static_cast<std::size_t>(i)];
  }
  const double u = rng.uniform01() * z;
  double cum = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    cum += p[static_cast<std::size_t>(i)];
    if (u < cum) return static_cast<int>(i);
  }
  return static_cast<int>(n - 1);
}

}  // namespace hrpo
