// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hrpo/rng.hpp"

namespace hrpo {

class TokenizeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TaskKind { Addition, ModChain, KvLookup };
TaskKind task_kind_from_string(std::string_view name);
std::string_view task_kind_name(TaskKind kind);

// Fixed symbol table: special markers, the single-unit answer delimiter,
// digits, letters and the punctuation the task corpora use. Tokenization is
// greedy longest-match, so multi-character symbols ("####", "mod") always
// come out as one id.
class Vocabulary {
 public:
  Vocabulary();

  int size() const { return static_cast<int>(symbols_.size()); }
  int pad_id() const { return pad_id_; }
  int bos_id() const { return bos_id_; }
  int eos_id() const { return eos_id_; }
  int delimiter_id() const { return delim_id_; }

  std::vector<int> tokenize(std::string_view text) const;
  std::string detokenize(std::span<const int> ids) const;
  const std::string& symbol(int id) const;

 private:
  std::vector<std::string> symbols_;
  int pad_id_ = 0, bos_id_ = 0, eos_id_ = 0, delim_id_ = 0;
};

struct TaskInstance {
  TaskKind kind = TaskKind::Addition;
  int difficulty = 1;
  std::string prompt_text;      // ends at the generation point
  std::string answer_text;      // canonical ground truth
  std::vector<int> prompt_ids;  // BOS + tokenized prompt
  std::uint64_t instance_hash = 0;
};

// Solvable instance with a unique canonical answer.
//   addition:  operand digit count in [1, 4]
//   mod_chain: chain length in [2, 6], all arithmetic mod 10
//   kv_lookup: hop count in [2, 4] over an 8-pair context in the prompt
TaskInstance make_task(const Vocabulary& vocab, TaskKind kind, int difficulty, Rng& rng);

struct RewardSpec {
  bool penalize_repeated_delimiter = true;
};

// Outcome reward on the answer span: 0 unless the delimiter occurs exactly
// once; otherwise 1 iff the trimmed text between the delimiter and EOS equals
// the canonical answer.
int outcome_reward(const Vocabulary& vocab, std::span<const int> gen_ids,
                   const TaskInstance& instance, const RewardSpec& spec = {});

// Extracted answer text (after the first delimiter, trimmed, up to EOS).
std::string extract_answer(const Vocabulary& vocab, std::span<const int> gen_ids);

// One supervised demonstration: prompt, worked steps, delimiter, answer.
struct Demonstration {
  TaskInstance instance;
  std::string text;            // full line as stored in corpus files
  std::vector<int> token_ids;  // BOS + tokenized text + EOS
};

// n demonstrations with worked intermediate steps, drawn from the training
// pool (hash-disjoint from held-out instances).
std::vector<Demonstration> warmstart_corpus(const Vocabulary& vocab, TaskKind kind, int difficulty,
                                            int n, Rng& rng);

// Deterministic pool split: ~1/5 of instances are held out by hash.
bool in_heldout_pool(const TaskInstance& instance);

// Samples n instances from the requested pool. Held-out sets are de-duplicated
// when the instance space is large enough.
std::vector<TaskInstance> sample_tasks(const Vocabulary& vocab, TaskKind kind, int difficulty,
                                       int n, bool heldout, Rng& rng);

}  // namespace hrpo
