// SPDX-License-Identifier: Apache-2.0
#include "hrpo/tasks.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace hrpo {

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

std::uint64_t fnv1a(std::string_view s, std::uint64_t h = kFnvOffset) {
  for (unsigned char c : s) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

std::string trim(std::string_view s) {
  std::size_t b = s.find_first_not_of(' ');
  if (b == std::string_view::npos) return {};
  std::size_t e = s.find_last_not_of(' ');
  return std::string(s.substr(b, e - b + 1));
}

// Spells a number out digit by digit ("82" -> "8 2").
std::string spaced_digits(long long v) {
  const std::string s = std::to_string(v);
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ' ';
    out += s[i];
  }
  return out;
}

}  // namespace

TaskKind task_kind_from_string(std::string_view name) {
  if (name == "addition") return TaskKind::Addition;
  if (name == "mod_chain") return TaskKind::ModChain;
  if (name == "kv_lookup") return TaskKind::KvLookup;
  throw std::runtime_error("unknown task kind '" + std::string(name) + "'");
}

std::string_view task_kind_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::Addition: return "addition";
    case TaskKind::ModChain: return "mod_chain";
    case TaskKind::KvLookup: return "kv_lookup";
  }
  return "?";
}

Vocabulary::Vocabulary() {
  symbols_ = {"<pad>", "<bos>", "<eos>", "####", "mod"};
  pad_id_ = 0;
  bos_id_ = 1;
  eos_id_ = 2;
  delim_id_ = 3;
  for (char c = '0'; c <= '9'; ++c) symbols_.emplace_back(1, c);
  for (char c = 'a'; c <= 'z'; ++c) symbols_.emplace_back(1, c);
  for (char c : {'+', '-', '*', '=', '(', ')', ' ', '>', '.', ',', '?'})
    symbols_.emplace_back(1, c);
}

std::vector<int> Vocabulary::tokenize(std::string_view text) const {
  std::vector<int> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    int best = -1;
    std::size_t best_len = 0;
    // Specials (<pad>, <bos>, <eos>) are not text symbols; start after them.
    for (int id = delim_id_; id < size(); ++id) {
      const std::string& sym = symbols_[static_cast<std::size_t>(id)];
      if (sym.size() > best_len && text.compare(pos, sym.size(), sym) == 0) {
        best = id;
        best_len = sym.size();
      }
    }
    if (best < 0)
      throw TokenizeError(std::string("unknown symbol '") + text[pos] + "' at position " +
                          std::to_string(pos));
    out.push_back(best);
    pos += best_len;
  }
  return out;
}

std::string Vocabulary::detokenize(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= size())
      throw TokenizeError("token id " + std::to_string(id) + " out of range");
    if (id == pad_id_ || id == bos_id_ || id == eos_id_) continue;
    out += symbols_[static_cast<std::size_t>(id)];
  }
  return out;
}

const std::string& Vocabulary::symbol(int id) const {
  if (id < 0 || id >= size()) throw TokenizeError("token id out of range");
  return symbols_[static_cast<std::size_t>(id)];
}

namespace {

TaskInstance finish_instance(const Vocabulary& vocab, TaskKind kind, int difficulty,
                             std::string prompt, std::string answer) {
  TaskInstance inst;
  inst.kind = kind;
  inst.difficulty = difficulty;
  inst.prompt_text = std::move(prompt);
  inst.answer_text = std::move(answer);
  inst.prompt_ids.push_back(vocab.bos_id());
  for (int id : vocab.tokenize(inst.prompt_text)) inst.prompt_ids.push_back(id);
  inst.instance_hash =
      fnv1a(inst.prompt_text, fnv1a(task_kind_name(kind), kFnvOffset + static_cast<std::uint64_t>(difficulty)));
  return inst;
}

TaskInstance make_addition(const Vocabulary& vocab, int digits, Rng& rng) {
  if (digits < 1 || digits > 4) throw std::runtime_error("addition difficulty must be 1..4");
  long long lo = digits == 1 ? 0 : 1;
  for (int i = 1; i < digits; ++i) lo *= 10;
  long long hi = 1;
  for (int i = 0; i < digits; ++i) hi *= 10;
  hi -= 1;
  const long long a = lo + static_cast<long long>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
  const long long b = lo + static_cast<long long>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
  return finish_instance(vocab, TaskKind::Addition, digits,
                         std::to_string(a) + "+" + std::to_string(b) + "=", std::to_string(a + b));
}

TaskInstance make_mod_chain(const Vocabulary& vocab, int ops, Rng& rng) {
  if (ops < 2 || ops > 6) throw std::runtime_error("mod_chain difficulty must be 2..6");
  std::vector<int> vals(static_cast<std::size_t>(ops) + 1);
  for (auto& v : vals) v = static_cast<int>(rng.below(10));
  std::string expr = "(" + std::to_string(vals[0]) + "+" + std::to_string(vals[1]) + ")";
  int acc = (vals[0] + vals[1]) % 10;
  for (int i = 2; i <= ops; ++i) {
    expr = "(" + expr + " mod 10 + " + std::to_string(vals[static_cast<std::size_t>(i)]) + ")";
    acc = (acc + vals[static_cast<std::size_t>(i)]) % 10;
  }
  return finish_instance(vocab, TaskKind::ModChain, ops, expr + " mod 10 =", std::to_string(acc));
}

TaskInstance make_kv_lookup(const Vocabulary& vocab, int hops, Rng& rng) {
  if (hops < 2 || hops > 4) throw std::runtime_error("kv_lookup difficulty must be 2..4");
  constexpr int kPairs = 8;
  // Path n0 -> n1 -> ... -> n_hops over distinct letters, padded with decoy
  // pairs whose keys stay off the path so the walk is a function.
  std::vector<char> letters(26);
  for (int i = 0; i < 26; ++i) letters[static_cast<std::size_t>(i)] = static_cast<char>('a' + i);
  for (int i = 25; i > 0; --i)
    std::swap(letters[static_cast<std::size_t>(i)],
              letters[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i + 1)))]);
  std::vector<char> path(letters.begin(), letters.begin() + hops + 1);
  std::vector<std::pair<char, char>> pairs;
  for (int i = 0; i < hops; ++i)
    pairs.emplace_back(path[static_cast<std::size_t>(i)], path[static_cast<std::size_t>(i) + 1]);
  std::size_t decoy_key = static_cast<std::size_t>(hops) + 1;
  while (pairs.size() < kPairs) {
    const char key = letters[decoy_key++];
    const char val = letters[rng.below(26)];
    pairs.emplace_back(key, val);
  }
  for (std::size_t i = pairs.size() - 1; i > 0; --i)
    std::swap(pairs[i], pairs[rng.below(static_cast<std::uint64_t>(i + 1))]);

  std::string prompt;
  for (const auto& [k, v] : pairs) {
    prompt += k;
    prompt += '>';
    prompt += v;
    prompt += ' ';
  }
  prompt += ". follow ";
  prompt += path[0];
  prompt += ' ';
  prompt += std::to_string(hops);
  prompt += " times =";
  return finish_instance(vocab, TaskKind::KvLookup, hops, std::move(prompt),
                         std::string(1, path[static_cast<std::size_t>(hops)]));
}

}  // namespace

TaskInstance make_task(const Vocabulary& vocab, TaskKind kind, int difficulty, Rng& rng) {
  switch (kind) {
    case TaskKind::Addition: return make_addition(vocab, difficulty, rng);
    case TaskKind::ModChain: return make_mod_chain(vocab, difficulty, rng);
    case TaskKind::KvLookup: return make_kv_lookup(vocab, difficulty, rng);
  }
  throw std::runtime_error("unknown task kind");
}

std::string extract_answer(const Vocabulary& vocab, std::span<const int> gen_ids) {
  std::vector<int> span;
  bool in_answer = false;
  for (int id : gen_ids) {
    if (id == vocab.eos_id()) break;
    if (in_answer) span.push_back(id);
    if (id == vocab.delimiter_id()) in_answer = true;
  }
  return trim(vocab.detokenize(span));
}

int outcome_reward(const Vocabulary& vocab, std::span<const int> gen_ids,
                   const TaskInstance& instance, const RewardSpec& spec) {
  int delim_count = 0;
  for (int id : gen_ids) {
    if (id == vocab.eos_id()) break;
    if (id == vocab.delimiter_id()) ++delim_count;
  }
  if (delim_count == 0) return 0;
  if (spec.penalize_repeated_delimiter && delim_count != 1) return 0;
  return extract_answer(vocab, gen_ids) == instance.answer_text ? 1 : 0;
}

namespace {

std::string addition_steps(const TaskInstance& inst) {
  const std::string& p = inst.prompt_text;  // "A+B="
  const auto plus = p.find('+');
  const long long a = std::stoll(p.substr(0, plus));
  const long long b = std::stoll(p.substr(plus + 1, p.size() - plus - 2));
  std::vector<int> carries;
  long long x = a, y = b;
  int carry = 0;
  while (x > 0 || y > 0) {
    const int s = static_cast<int>(x % 10 + y % 10) + carry;
    carry = s >= 10 ? 1 : 0;
    carries.push_back(carry);
    x /= 10;
    y /= 10;
  }
  while (carries.size() > 1 && carries.back() == 0) carries.pop_back();
  if (carries.empty()) carries.push_back(0);
  std::string steps = spaced_digits(a) + " + " + spaced_digits(b) + " carry";
  for (int c : carries) steps += " " + std::to_string(c);
  return steps;
}

std::string mod_chain_steps(const TaskInstance& inst) {
  // Recover operands from the prompt (single digits; "mod 10" is the modulus).
  std::vector<int> vals;
  const std::string& p = inst.prompt_text;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p.compare(i, 6, "mod 10") == 0) {
      i += 5;
      continue;
    }
    if (p[i] >= '0' && p[i] <= '9') vals.push_back(p[i] - '0');
  }
  std::string steps;
  int acc = vals[0];
  for (std::size_t i = 1; i < vals.size(); ++i) {
    const int s = acc + vals[i];
    const int m = s % 10;
    if (i > 1) steps += " , ";
    steps += std::to_string(acc) + "+" + std::to_string(vals[i]) + "=" + std::to_string(s) +
             " mod 10 = " + std::to_string(m);
    acc = m;
  }
  return steps;
}

std::string kv_lookup_steps(const TaskInstance& inst) {
  // Re-walk the mapping stated in the prompt.
  const std::string& p = inst.prompt_text;
  std::vector<std::pair<char, char>> pairs;
  for (std::size_t i = 0; i + 2 < p.size(); ++i)
    if (p[i + 1] == '>') pairs.emplace_back(p[i], p[i + 2]);
  const auto follow_pos = p.find("follow ");
  char cur = p[follow_pos + 7];
  const int hops = p[follow_pos + 9] - '0';
  std::string steps;
  for (int h = 0; h < hops; ++h) {
    char next = 0;
    for (const auto& [k, v] : pairs)
      if (k == cur) next = v;
    if (h) steps += " , ";
    steps += std::string(1, cur) + ">" + std::string(1, next);
    cur = next;
  }
  return steps;
}

}  // namespace

std::vector<Demonstration> warmstart_corpus(const Vocabulary& vocab, TaskKind kind, int difficulty,
                                            int n, Rng& rng) {
  if (n < 1) throw std::runtime_error("warmstart_corpus requires n >= 1");
  std::vector<Demonstration> out;
  out.reserve(static_cast<std::size_t>(n));
  while (static_cast<int>(out.size()) < n) {
    TaskInstance inst = make_task(vocab, kind, difficulty, rng);
    if (in_heldout_pool(inst)) continue;
    std::string steps;
    switch (kind) {
      case TaskKind::Addition: steps = addition_steps(inst); break;
      case TaskKind::ModChain: steps = mod_chain_steps(inst); break;
      case TaskKind::KvLookup: steps = kv_lookup_steps(inst); break;
    }
    Demonstration demo;
    demo.text = inst.prompt_text + " " + steps + " #### " + inst.answer_text;
    demo.token_ids.push_back(vocab.bos_id());
    for (int id : vocab.tokenize(demo.text)) demo.token_ids.push_back(id);
    demo.token_ids.push_back(vocab.eos_id());
    demo.instance = std::move(inst);
    out.push_back(std::move(demo));
  }
  return out;
}

bool in_heldout_pool(const TaskInstance& instance) { return instance.instance_hash % 5 == 0; }

std::vector<TaskInstance> sample_tasks(const Vocabulary& vocab, TaskKind kind, int difficulty,
                                       int n, bool heldout, Rng& rng) {
  std::vector<TaskInstance> out;
  out.reserve(static_cast<std::size_t>(n));
  std::set<std::uint64_t> seen;
  long long attempts = 0;
  const long long max_attempts = 200LL * std::max(n, 1);
  while (static_cast<int>(out.size()) < n && attempts < max_attempts) {
    ++attempts;
    TaskInstance inst = make_task(vocab, kind, difficulty, rng);
    if (in_heldout_pool(inst) != heldout) continue;
    if (heldout && !seen.insert(inst.instance_hash).second) continue;  // dedupe eval sets
    out.push_back(std::move(inst));
  }
  if (out.empty()) throw std::runtime_error("could not sample any instance for the requested pool");
  return out;
}

}  // namespace hrpo
