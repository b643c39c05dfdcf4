// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "hrpo/rng.hpp"
#include "hrpo/tensor.hpp"

namespace hrpo {

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 64;
  int d_ff = 256;
  int vocab_size = 0;  // filled from the vocabulary at runtime
  int max_seq_len = 128;
  bool tie_head = true;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;
};

struct AttentionParams {
  std::vector<Tensor> w_q, w_k, w_v;  // per head, [d x head_dim]
  Tensor w_o;                         // [d x d]
};

struct BlockParams {
  Tensor ln1_g, ln1_b;
  AttentionParams attn;
  Tensor ln2_g, ln2_b;
  Tensor w_ff1;  // [d x d_ff]
  Tensor w_ff2;  // [d_ff x d]
};

// Decoder-only transformer weights. Pre-norm blocks, learned position
// embeddings, SiLU feed-forward, weight-tied head by default.
class PolicyParameters {
 public:
  PolicyParameters() = default;
  static PolicyParameters init(const ModelConfig& config, Rng& rng);

  const ModelConfig& config() const { return config_; }
  const Tensor& token_embedding() const { return tok_emb_; }
  const Tensor& position_embedding() const { return pos_emb_; }
  const Tensor& head_matrix() const { return config_.tie_head ? tok_emb_ : head_; }
  const Tensor& final_norm_gain() const { return lnf_g_; }
  const Tensor& final_norm_bias() const { return lnf_b_; }
  std::span<const BlockParams> blocks() const { return blocks_; }

  // Stable (name, tensor) listing used by the optimizer and checkpoints.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;

  std::uint64_t version() const { return version_; }
  void bump_version() { ++version_; }

  PolicyParameters clone() const;

 private:
  ModelConfig config_;
  Tensor tok_emb_;  // [V x d]
  Tensor pos_emb_;  // [max_seq_len x d]
  std::vector<BlockParams> blocks_;
  Tensor lnf_g_, lnf_b_;
  Tensor head_;  // only when !tie_head
  std::uint64_t version_ = 0;
};

// Per-layer, per-head key/value chunks accumulated position by position.
// Invalidated by any parameter update.
struct KVCache {
  explicit KVCache(const PolicyParameters& policy);
  std::vector<std::vector<std::vector<Tensor>>> keys;    // [layer][head][chunk]
  std::vector<std::vector<std::vector<Tensor>>> values;  // [layer][head][chunk]
  int length = 0;
  std::uint64_t param_version = 0;
};

// Rows of the embedding matrix for a token sequence.
Tensor embed(Tape* tape, const PolicyParameters& policy, std::span<const int> token_ids);

// Final-layer hidden states for a block of input embeddings. With a cache the
// call is incremental: embeddings start at position cache->length. Without
// one the whole block is processed with causal masking.
Tensor forward(Tape* tape, const PolicyParameters& policy, const Tensor& embeddings,
               KVCache* cache);

// Head logits for one or more hidden rows.
Tensor logits(Tape* tape, const PolicyParameters& policy, const Tensor& hidden);

// Draws from softmax(logits / temperature), or argmax with lowest-index
// tie-break when greedy.
int sample_token(const Tensor& logit_row, double temperature, Rng& rng, bool greedy);

}  // namespace hrpo
