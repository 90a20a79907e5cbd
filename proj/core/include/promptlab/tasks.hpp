#pragma once

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "promptlab/backbone.hpp"

namespace promptlab {

enum class TaskKind { classification, regression };

struct TaskSpec {
  std::string name;
  TaskKind kind = TaskKind::classification;
  std::size_t num_classes = 2;          // classification only
  std::vector<int> label_tokens;        // k ids, or the regression bin tokens
  std::uint64_t generator_seed = 0;
  std::size_t train_size = 256, val_size = 256, test_size = 512;
  std::size_t min_len = 6, max_len = 10;
  std::size_t vocab_size = 512;
};

struct Example {
  TokenSequence tokens;
  std::size_t class_index = 0;  // classification target
  double value = 0.0;           // regression target in [0, 1]
};

struct Dataset {
  TaskSpec spec;
  std::vector<Example> train, val, test;
};

// Invalid marks a predicted token outside the task's label set.
struct Invalid {};
using Decoded = std::variant<std::size_t, double, Invalid>;

inline bool is_invalid(const Decoded& d) { return std::holds_alternative<Invalid>(d); }

// The five built-in task generators; names: parity, majority, pair_match,
// order, ratio_reg.
const std::vector<std::string>& builtin_task_names();
TaskSpec builtin_task_spec(const std::string& name, std::size_t vocab_size = 512);

std::vector<TokenSequence> generate_pretrain_corpus(std::uint64_t seed, std::size_t size,
                                                    std::size_t vocab_size = 512);

Dataset generate_task(const TaskSpec& spec);

Decoded decode_prediction(const TaskSpec& spec, int predicted_token);

// Token the model is trained to emit for an example's target.
int target_token(const TaskSpec& spec, const Example& ex);

void dump_dataset_jsonl(const Dataset& ds, const std::string& path);
std::vector<Example> load_examples_jsonl(const std::string& path);

}  // namespace promptlab
