#include "promptlab/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "promptlab/rng.hpp"

namespace promptlab {

namespace {

using nlohmann::json;

// Designated symbols used by the counting/order tasks.
constexpr int kSymbolA = kFirstContentToken;      // 16
constexpr int kSymbolB = kFirstContentToken + 1;  // 17
constexpr int kFirstFillerToken = kFirstContentToken + 2;

constexpr int kBinaryLabel0 = 13;
constexpr int kBinaryLabel1 = 14;
constexpr std::size_t kRatioBins = 11;

int random_filler(Rng& rng, std::size_t vocab) {
  return kFirstFillerToken +
         static_cast<int>(rng.next_below(vocab - static_cast<std::size_t>(kFirstFillerToken)));
}

void shuffle_tokens(std::vector<int>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = rng.next_below(i);
    std::swap(v[i - 1], v[j]);
  }
}

std::vector<int> ratio_label_tokens() {
  std::vector<int> toks(kRatioBins);
  for (std::size_t i = 0; i < kRatioBins; ++i) toks[i] = kFirstLabelToken + static_cast<int>(i);
  return toks;
}

// One example with a prescribed target; generators are pure in (spec, rng).
Example generate_example(const TaskSpec& spec, std::size_t want, Rng& rng) {
  Example ex;
  const std::size_t len = spec.min_len + rng.next_below(spec.max_len - spec.min_len + 1);
  std::vector<int>& t = ex.tokens.token_ids;

  if (spec.name == "parity") {
    // Label = parity of occurrences of symbol A.
    const std::size_t count = (want == 1) ? 1 + 2 * rng.next_below(2)   // 1 or 3
                                          : 2 + 2 * rng.next_below(2);  // 2 or 4
    for (std::size_t i = 0; i < len; ++i) t.push_back(random_filler(rng, spec.vocab_size));
    for (std::size_t i = 0; i < count && i < t.size(); ++i) t[i] = kSymbolA;
    shuffle_tokens(t, rng);
    ex.class_index = count % 2;
  } else if (spec.name == "majority") {
    // Label = which of A/B appears more often.
    std::size_t total = std::max<std::size_t>(3, len / 2) | 1;  // odd, no ties
    std::size_t a = total / 2 + 1 + rng.next_below(total / 2 + 1);
    if (a > total) a = total;
    if (want == 0) a = total - a;  // B majority
    for (std::size_t i = 0; i < total; ++i) t.push_back(i < a ? kSymbolA : kSymbolB);
    while (t.size() < len) t.push_back(random_filler(rng, spec.vocab_size));
    shuffle_tokens(t, rng);
    ex.class_index = want;
  } else if (spec.name == "pair_match") {
    // Two segments around a separator; label = multiset equality. Segments
    // have a fixed length and matching copies keep their order, so equality
    // is positionally decodable at this model scale.
    const std::size_t seg = 4;
    std::vector<int> first(seg);
    for (auto& v : first) v = random_filler(rng, spec.vocab_size);
    std::vector<int> second = first;
    if (want == 0) {
      // Replace one token with something not in the segment's multiset.
      std::size_t pos = rng.next_below(second.size());
      int repl = random_filler(rng, spec.vocab_size);
      while (std::count(first.begin(), first.end(), repl) > 0)
        repl = random_filler(rng, spec.vocab_size);
      second[pos] = repl;
    }
    t = first;
    t.push_back(kSeparatorToken);
    t.insert(t.end(), second.begin(), second.end());
    ex.class_index = want;
  } else if (spec.name == "order") {
    // Label = whether A appears before B.
    for (std::size_t i = 0; i < std::max<std::size_t>(len, 4); ++i)
      t.push_back(random_filler(rng, spec.vocab_size));
    std::size_t i = rng.next_below(t.size());
    std::size_t j = rng.next_below(t.size());
    while (j == i) j = rng.next_below(t.size());
    const std::size_t lo = std::min(i, j), hi = std::max(i, j);
    if (want == 1) {
      t[lo] = kSymbolA;
      t[hi] = kSymbolB;
    } else {
      t[lo] = kSymbolB;
      t[hi] = kSymbolA;
    }
    ex.class_index = want;
  } else if (spec.name == "ratio_reg") {
    // Target = fraction of A among A and B; want indexes the bin.
    const std::size_t bin = want;
    const std::size_t total = 10;
    const std::size_t a = bin;  // a/10 lands exactly in the bin
    for (std::size_t i = 0; i < total; ++i) t.push_back(i < a ? kSymbolA : kSymbolB);
    const std::size_t extra = 2 + rng.next_below(4);  // fillers keep sequences distinct
    for (std::size_t i = 0; i < extra; ++i) t.push_back(random_filler(rng, spec.vocab_size));
    shuffle_tokens(t, rng);
    ex.value = static_cast<double>(a) / static_cast<double>(total);
    ex.class_index = bin;
  } else {
    throw std::invalid_argument("generate_example: unknown task '" + spec.name + "'");
  }
  return ex;
}

std::size_t num_targets(const TaskSpec& spec) {
  return spec.kind == TaskKind::classification ? spec.num_classes : kRatioBins;
}

}  // namespace

const std::vector<std::string>& builtin_task_names() {
  static const std::vector<std::string> names = {"parity", "majority", "pair_match", "order",
                                                 "ratio_reg"};
  return names;
}

TaskSpec builtin_task_spec(const std::string& name, std::size_t vocab_size) {
  TaskSpec spec;
  spec.name = name;
  spec.vocab_size = vocab_size;
  if (name == "ratio_reg") {
    spec.kind = TaskKind::regression;
    spec.num_classes = kRatioBins;
    spec.label_tokens = ratio_label_tokens();
  } else if (name == "parity" || name == "majority" || name == "pair_match" || name == "order") {
    spec.kind = TaskKind::classification;
    spec.num_classes = 2;
    spec.label_tokens = {kBinaryLabel0, kBinaryLabel1};
  } else {
    throw std::invalid_argument("builtin_task_spec: unknown task '" + name + "'");
  }
  // Each task keeps its own generator stream.
  spec.generator_seed = fnv1a(name);
  for (int tok : spec.label_tokens)
    if (tok < 0 || static_cast<std::size_t>(tok) >= vocab_size)
      throw std::invalid_argument("builtin_task_spec: label token out of vocabulary");
  return spec;
}

std::vector<TokenSequence> generate_pretrain_corpus(std::uint64_t seed, std::size_t size,
                                                    std::size_t vocab_size) {
  if (size == 0) throw std::invalid_argument("generate_pretrain_corpus: size must be >= 1");
  const std::size_t content = vocab_size - static_cast<std::size_t>(kFirstContentToken);
  if (content < 48) throw std::invalid_argument("generate_pretrain_corpus: vocabulary too small");

  // Templated clauses with class agreement: a clause's subject and verb are
  // drawn from pools indexed by the same latent class, so masked positions
  // are predictable from context well above chance.
  const std::size_t classes = 8;
  const std::size_t third = content / 3;
  const std::size_t pool = std::max<std::size_t>(1, third / classes);
  const int subj_base = kFirstContentToken;
  const int verb_base = kFirstContentToken + static_cast<int>(third);
  const int obj_base = kFirstContentToken + static_cast<int>(2 * third);

  Rng rng(seed);
  std::vector<TokenSequence> corpus;
  corpus.reserve(size);
  for (std::size_t s = 0; s < size; ++s) {
    TokenSequence seq;
    std::vector<int>& t = seq.token_ids;
    // Every sequence ends with <separator, summary>: a label token computable
    // from the body's structure. The summary rules cover the skills the
    // reserved label tokens are later read out with: counting tokens and
    // positions, comparing counts, locating symbols, and comparing content
    // across a separator.
    // The count-parity and segment-match summaries are the slowest to learn,
    // so they get double weight; the easy rules saturate early regardless.
    static constexpr std::size_t kRulePicks[8] = {0, 1, 1, 2, 3, 4, 5, 5};
    const std::size_t rule = kRulePicks[rng.next_below(8)];
    // A leading marker names the rule, so the summary is unambiguous. It sits
    // where a soft prompt is later prepended, which lets a tuned prompt
    // select the same behavior on unmarked task sequences.
    t.push_back(static_cast<int>(vocab_size - 1 - rule));
    int summary = kFirstLabelToken;
    if (rule == 0) {
      // Clauses with subject/verb class agreement (masked positions stay
      // predictable), then fillers; summary = body length mod 13.
      const std::size_t clauses = 2 + rng.next_below(3);
      for (std::size_t c = 0; c < clauses; ++c) {
        const std::size_t cls = rng.next_below(classes);
        t.push_back(subj_base + static_cast<int>(cls * pool + rng.next_below(pool)));
        t.push_back(verb_base + static_cast<int>(cls * pool + rng.next_below(pool)));
        t.push_back(obj_base + static_cast<int>(rng.next_below(third)));
        if (c + 1 < clauses) t.push_back(kSeparatorToken);
      }
      const std::size_t extra = rng.next_below(kNumLabelTokens);
      for (std::size_t i = 0; i < extra; ++i) t.push_back(random_filler(rng, vocab_size));
      summary = kFirstLabelToken + static_cast<int>(t.size() % kNumLabelTokens);
    } else if (rule == 5) {
      // Two segments around a separator; summary = multiset equality. This
      // is the comparison skill: relating content across a separator rather
      // than counting within one span. Same shape as the downstream pair
      // task: fixed-length segments, matching copies keep their order.
      const std::size_t seg = 4;
      std::vector<int> first(seg);
      for (auto& v : first) v = random_filler(rng, vocab_size);
      std::vector<int> second = first;
      const bool match = rng.next_bernoulli(0.5);
      if (!match) {
        const std::size_t pos = rng.next_below(second.size());
        int repl = random_filler(rng, vocab_size);
        while (std::count(first.begin(), first.end(), repl) > 0)
          repl = random_filler(rng, vocab_size);
        second[pos] = repl;
      }
      t.insert(t.end(), first.begin(), first.end());
      t.push_back(kSeparatorToken);
      t.insert(t.end(), second.begin(), second.end());
      summary = match ? kBinaryLabel1 : kBinaryLabel0;
    } else if (rule == 4) {
      // One A and one B among fillers; summary = whether A comes first.
      const std::size_t len = 6 + rng.next_below(10);
      std::vector<int> body(len);
      for (auto& v : body) v = random_filler(rng, vocab_size);
      std::size_t i = rng.next_below(len);
      std::size_t j = rng.next_below(len);
      while (j == i) j = rng.next_below(len);
      body[std::min(i, j)] = rng.next_bernoulli(0.5) ? kSymbolA : kSymbolB;
      body[std::max(i, j)] = body[std::min(i, j)] == kSymbolA ? kSymbolB : kSymbolA;
      summary = (body[std::min(i, j)] == kSymbolA) ? kBinaryLabel1 : kBinaryLabel0;
      t.insert(t.end(), body.begin(), body.end());
    } else {
      // Counting bodies: a A's and b B's among fillers.
      std::size_t a = rng.next_below(7);
      std::size_t b = rng.next_below(7);
      if (rule == 2 && a == b) ++a;        // comparison needs no ties
      if (rule == 3 && a + b == 0) a = 1;  // ratio needs a denominator
      std::vector<int> body;
      for (std::size_t i = 0; i < a; ++i) body.push_back(kSymbolA);
      for (std::size_t i = 0; i < b; ++i) body.push_back(kSymbolB);
      const std::size_t fillers = 2 + rng.next_below(7);
      for (std::size_t i = 0; i < fillers; ++i) body.push_back(random_filler(rng, vocab_size));
      shuffle_tokens(body, rng);
      t.insert(t.end(), body.begin(), body.end());
      if (rule == 1) {
        summary = kBinaryLabel0 + static_cast<int>(a % 2);  // parity of #A
      } else if (rule == 2) {
        summary = (a > b) ? kBinaryLabel1 : kBinaryLabel0;  // majority
      } else {
        const double ratio = static_cast<double>(a) / static_cast<double>(a + b);
        summary = kFirstLabelToken + static_cast<int>(std::lround(ratio * 10.0));
      }
    }
    t.push_back(kSeparatorToken);
    t.push_back(summary);
    corpus.push_back(std::move(seq));
  }
  return corpus;
}

Dataset generate_task(const TaskSpec& spec) {
  if (spec.name.empty() || spec.min_len > spec.max_len || spec.label_tokens.empty())
    throw std::invalid_argument("generate_task: invalid spec");
  if (spec.kind == TaskKind::classification && spec.label_tokens.size() != spec.num_classes)
    throw std::invalid_argument("generate_task: label token count must match class count");

  Dataset ds;
  ds.spec = spec;
  Rng rng(spec.generator_seed);
  std::set<std::vector<int>> seen;  // splits stay disjoint as token-sequence sets

  auto fill = [&](std::vector<Example>& split, std::size_t count) {
    const std::size_t targets = num_targets(spec);
    std::size_t next_target = 0;
    while (split.size() < count) {
      Example ex = generate_example(spec, next_target % targets, rng);
      if (seen.insert(ex.tokens.token_ids).second) {
        split.push_back(std::move(ex));
        ++next_target;  // labels cycle, keeping every split balanced
      }
    }
  };
  fill(ds.train, spec.train_size);
  fill(ds.val, spec.val_size);
  fill(ds.test, spec.test_size);
  return ds;
}

Decoded decode_prediction(const TaskSpec& spec, int predicted_token) {
  const auto it = std::find(spec.label_tokens.begin(), spec.label_tokens.end(), predicted_token);
  if (it == spec.label_tokens.end()) return Invalid{};
  const std::size_t idx = static_cast<std::size_t>(it - spec.label_tokens.begin());
  if (spec.kind == TaskKind::regression)
    return static_cast<double>(idx) / static_cast<double>(spec.label_tokens.size() - 1);
  return idx;
}

int target_token(const TaskSpec& spec, const Example& ex) {
  if (spec.kind == TaskKind::regression) {
    const std::size_t bins = spec.label_tokens.size();
    const std::size_t bin = static_cast<std::size_t>(
        std::lround(ex.value * static_cast<double>(bins - 1)));
    return spec.label_tokens[std::min(bin, bins - 1)];
  }
  if (ex.class_index >= spec.label_tokens.size())
    throw std::out_of_range("target_token: class index out of range");
  return spec.label_tokens[ex.class_index];
}

void dump_dataset_jsonl(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("dump_dataset_jsonl: cannot open " + path);
  auto write_split = [&](const std::vector<Example>& split, const char* name) {
    for (const auto& ex : split) {
      json j{{"split", name}, {"tokens", ex.tokens.token_ids}};
      if (ds.spec.kind == TaskKind::regression)
        j["target"] = ex.value;
      else
        j["target"] = ex.class_index;
      out << j.dump() << "\n";
    }
  };
  write_split(ds.train, "train");
  write_split(ds.val, "val");
  write_split(ds.test, "test");
}

std::vector<Example> load_examples_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_examples_jsonl: cannot open " + path);
  std::vector<Example> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    Example ex;
    ex.tokens.token_ids = j.at("tokens").get<std::vector<int>>();
    if (j.at("target").is_number_float())
      ex.value = j.at("target").get<double>();
    else
      ex.class_index = j.at("target").get<std::size_t>();
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace promptlab
