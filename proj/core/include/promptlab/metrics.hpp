#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "promptlab/tasks.hpp"

namespace promptlab {

enum class MetricKind { accuracy, f1, mcc, pearson, spearman };

MetricKind metric_kind_from_string(const std::string& s);
std::string to_string(MetricKind k);

// Metrics a task reports; dual-metric tasks average the two in tables.
std::vector<MetricKind> metrics_for_task(const TaskSpec& spec);

struct EvalResult {
  std::map<std::string, double> scores;  // metric name -> value in natural range
  std::size_t invalid_count = 0;
  std::size_t n_examples = 0;
  bool undefined_score = false;  // zero-variance correlation was reported as 0
  bool all_invalid = false;      // every prediction was Invalid
};

// Classification scores. Predictions use -1 for Invalid; invalid predictions
// count as wrong (for binary F1/MCC they are scored as the opposite class).
double accuracy(const std::vector<int>& predictions, const std::vector<int>& targets);
double f1_binary(const std::vector<int>& predictions, const std::vector<int>& targets);
double mcc_binary(const std::vector<int>& predictions, const std::vector<int>& targets);

// Correlations; undefined (zero variance) reports 0 and sets the flag if given.
double pearson(const std::vector<double>& a, const std::vector<double>& b,
               bool* undefined = nullptr);
double spearman(const std::vector<double>& a, const std::vector<double>& b,
                bool* undefined = nullptr);

std::vector<double> average_ranks(const std::vector<double>& values);

double compute_metric(MetricKind kind, const std::vector<Decoded>& predictions,
                      const std::vector<Example>& examples, const TaskSpec& spec,
                      bool* undefined = nullptr);

EvalResult evaluate_predictions(const TaskSpec& spec, const std::vector<Decoded>& predictions,
                                const std::vector<Example>& examples);

// Single table entry per the reporting convention: one metric as-is, two
// metrics averaged; values scaled to 0..100. A run that ends 100% Invalid
// scores 0.
double score_for_table(const TaskSpec& spec, const EvalResult& result);

struct MethodStability {
  double mean = 0.0;
  double stddev = 0.0;
};

// Min-max scales each task column across methods to [0, 100]; a column where
// every method ties contributes 100 to all. Returns per-method mean and
// (population) standard deviation across tasks.
std::vector<MethodStability> standardized_overall_scores(
    const std::vector<std::vector<double>>& score_table);

}  // namespace promptlab
