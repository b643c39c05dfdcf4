// SPDX-License-Identifier: Apache-2.0
#include <set>
#include <string>

#include <doctest.h>

#include "hrpo/tasks.hpp"

using namespace hrpo;

TEST_CASE("vocabulary basics: the delimiter is one id and specials are distinct") {
  Vocabulary vocab;
  const auto delim = vocab.tokenize("####");
  REQUIRE(delim.size() == 1);
  CHECK(delim[0] == vocab.delimiter_id());
  CHECK(vocab.tokenize("").empty());
  CHECK(vocab.pad_id() != vocab.bos_id());
  CHECK(vocab.bos_id() != vocab.eos_id());
  CHECK(vocab.delimiter_id() != vocab.eos_id());
  const auto mod = vocab.tokenize("mod");
  REQUIRE(mod.size() == 1);

  CHECK_THROWS_AS(vocab.tokenize("hello_world"), TokenizeError);  // '_' is unknown
}

TEST_CASE("round-trip detokenize(tokenize(s)) is exact on random corpus strings") {
  Vocabulary vocab;
  Rng rng(21);
  int count = 0;
  for (TaskKind kind : {TaskKind::Addition, TaskKind::ModChain, TaskKind::KvLookup}) {
    const int difficulty = kind == TaskKind::Addition ? 3 : 2;
    const auto demos = warmstart_corpus(vocab, kind, difficulty, 340, rng);
    for (const Demonstration& d : demos) {
      const auto ids = vocab.tokenize(d.text);
      CHECK(vocab.detokenize(ids) == d.text);
      ++count;
    }
  }
  CHECK(count >= 1000);
}

TEST_CASE("addition instances are solvable with the documented format") {
  Vocabulary vocab;
  Rng rng(22);
  for (int rep = 0; rep < 200; ++rep) {
    TaskInstance t = make_task(vocab, TaskKind::Addition, 2, rng);
    const auto plus = t.prompt_text.find('+');
    const auto eq = t.prompt_text.find('=');
    REQUIRE(plus != std::string::npos);
    REQUIRE(eq == t.prompt_text.size() - 1);
    const long long a = std::stoll(t.prompt_text.substr(0, plus));
    const long long b = std::stoll(t.prompt_text.substr(plus + 1, eq - plus - 1));
    CHECK(a >= 10);
    CHECK(a <= 99);
    CHECK(b >= 10);
    CHECK(b <= 99);
    CHECK(t.answer_text == std::to_string(a + b));
    CHECK(t.prompt_ids.front() == vocab.bos_id());
  }
}

TEST_CASE("mod_chain instances evaluate to their answers") {
  Vocabulary vocab;
  Rng rng(23);
  for (int difficulty : {2, 4, 6}) {
    for (int rep = 0; rep < 100; ++rep) {
      TaskInstance t = make_task(vocab, TaskKind::ModChain, difficulty, rng);
      // brute-force: extract operands (skipping the modulus tokens) and fold
      std::vector<int> vals;
      const std::string& p = t.prompt_text;
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (p.compare(i, 6, "mod 10") == 0) {
          i += 5;
          continue;
        }
        if (p[i] >= '0' && p[i] <= '9') vals.push_back(p[i] - '0');
      }
      REQUIRE(static_cast<int>(vals.size()) == difficulty + 1);
      int acc = vals[0];
      for (std::size_t i = 1; i < vals.size(); ++i) acc = (acc + vals[i]) % 10;
      CHECK(t.answer_text == std::to_string(acc));
    }
  }
}

TEST_CASE("kv_lookup answers follow the mapping") {
  Vocabulary vocab;
  Rng rng(24);
  for (int hops : {2, 3, 4}) {
    for (int rep = 0; rep < 100; ++rep) {
      TaskInstance t = make_task(vocab, TaskKind::KvLookup, hops, rng);
      const std::string& p = t.prompt_text;
      std::vector<std::pair<char, char>> pairs;
      for (std::size_t i = 0; i + 2 < p.size(); ++i)
        if (p[i + 1] == '>' && p[i] >= 'a' && p[i] <= 'z') pairs.emplace_back(p[i], p[i + 2]);
      CHECK(pairs.size() == 8);
      // keys must be unique so the walk is well-defined
      std::set<char> keys;
      for (auto& [k, v] : pairs) keys.insert(k);
      CHECK(keys.size() == 8);
      const auto follow = p.find("follow ");
      char cur = p[follow + 7];
      for (int h = 0; h < hops; ++h)
        for (auto& [k, v] : pairs)
          if (k == cur) {
            cur = v;
            break;
          }
      CHECK(t.answer_text == std::string(1, cur));
    }
  }
}

TEST_CASE("reward: exact match after one delimiter, zero otherwise") {
  Vocabulary vocab;
  Rng rng(25);
  TaskInstance t = make_task(vocab, TaskKind::Addition, 2, rng);

  const auto ids = [&](const std::string& text, bool eos = true) {
    std::vector<int> out = vocab.tokenize(text);
    if (eos) out.push_back(vocab.eos_id());
    return out;
  };

  CHECK(outcome_reward(vocab, ids("1 2 3 #### " + t.answer_text), t) == 1);
  CHECK(outcome_reward(vocab, ids("#### " + t.answer_text), t) == 1);
  CHECK(outcome_reward(vocab, ids("#### " + t.answer_text + " #### " + t.answer_text), t) == 0);
  CHECK(outcome_reward(vocab, ids("no delimiter here", false), t) == 0);
  CHECK(outcome_reward(vocab, ids("#### wrong"), t) == 0);
  // tokens after EOS are ignored
  auto with_junk = ids("#### " + t.answer_text);
  with_junk.push_back(vocab.delimiter_id());
  CHECK(outcome_reward(vocab, with_junk, t) == 1);
  // repeated-delimiter penalty can be disabled
  RewardSpec lax;
  lax.penalize_repeated_delimiter = false;
  CHECK(outcome_reward(vocab, ids("#### " + t.answer_text + " ####"), t, lax) == 1);
}

TEST_CASE("extract_answer trims the span between delimiter and EOS") {
  Vocabulary vocab;
  auto ids = vocab.tokenize("think think ####  82  ");
  ids.push_back(vocab.eos_id());
  CHECK(extract_answer(vocab, ids) == "82");
  CHECK(extract_answer(vocab, vocab.tokenize("no answer")) == "");
}

TEST_CASE("warm-start demonstrations verify under the reward") {
  Vocabulary vocab;
  Rng rng(26);
  for (TaskKind kind : {TaskKind::Addition, TaskKind::ModChain, TaskKind::KvLookup}) {
    const int difficulty = 2;
    const auto demos = warmstart_corpus(vocab, kind, difficulty, 100, rng);
    for (const Demonstration& d : demos) {
      // teacher-forced: the generated span is everything after the prompt
      const auto all = vocab.tokenize(d.text);
      const auto prompt = vocab.tokenize(d.instance.prompt_text);
      std::vector<int> gen(all.begin() + static_cast<std::ptrdiff_t>(prompt.size()), all.end());
      gen.push_back(vocab.eos_id());
      CHECK(outcome_reward(vocab, gen, d.instance) == 1);
      int delims = 0;
      for (int id : gen)
        if (id == vocab.delimiter_id()) ++delims;
      CHECK(delims == 1);
      CHECK_FALSE(in_heldout_pool(d.instance));
      CHECK(d.token_ids.front() == vocab.bos_id());
      CHECK(d.token_ids.back() == vocab.eos_id());
    }
  }
}

namespace {

// Expected demonstration line for a+b, independent of the corpus builder.
std::string expected_addition_demo(long long a, long long b) {
  const auto spaced = [](long long v) {
    const std::string s = std::to_string(v);
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i) out += ' ';
      out += s[i];
    }
    return out;
  };
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
  std::string text = std::to_string(a) + "+" + std::to_string(b) + "= " + spaced(a) + " + " +
                     spaced(b) + " carry";
  for (int c : carries) text += " " + std::to_string(c);
  return text + " #### " + std::to_string(a + b);
}

}  // namespace

TEST_CASE("addition demonstrations spell digits and carries") {
  // the documented shape for 47+35
  CHECK(expected_addition_demo(47, 35) == "47+35= 4 7 + 3 5 carry 1 #### 82");

  Vocabulary vocab;
  Rng rng(27);
  const auto demos = warmstart_corpus(vocab, TaskKind::Addition, 2, 50, rng);
  for (const Demonstration& d : demos) {
    const auto plus = d.instance.prompt_text.find('+');
    const long long a = std::stoll(d.instance.prompt_text.substr(0, plus));
    const long long b = std::stoll(
        d.instance.prompt_text.substr(plus + 1, d.instance.prompt_text.size() - plus - 2));
    CHECK(d.text == expected_addition_demo(a, b));
  }
}

TEST_CASE("train and held-out pools are disjoint by hash") {
  Vocabulary vocab;
  Rng rng(28);
  auto train = sample_tasks(vocab, TaskKind::Addition, 2, 300, false, rng);
  auto heldout = sample_tasks(vocab, TaskKind::Addition, 2, 100, true, rng);
  std::set<std::uint64_t> train_hashes;
  for (const auto& t : train) {
    CHECK_FALSE(in_heldout_pool(t));
    train_hashes.insert(t.instance_hash);
  }
  std::set<std::uint64_t> heldout_hashes;
  for (const auto& t : heldout) {
    CHECK(in_heldout_pool(t));
    CHECK(train_hashes.count(t.instance_hash) == 0);
    heldout_hashes.insert(t.instance_hash);
  }
  // held-out sets are de-duplicated
  CHECK(heldout_hashes.size() == heldout.size());
}

TEST_CASE("difficulty knobs respect their documented ranges") {
  Vocabulary vocab;
  Rng rng(29);
  CHECK_THROWS(make_task(vocab, TaskKind::Addition, 5, rng));
  CHECK_THROWS(make_task(vocab, TaskKind::ModChain, 1, rng));
  CHECK_THROWS(make_task(vocab, TaskKind::KvLookup, 7, rng));
  CHECK_THROWS(warmstart_corpus(vocab, TaskKind::Addition, 2, 0, rng));
}
