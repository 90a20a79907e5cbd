#include "promptlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace promptlab {

namespace {

void check_lengths(std::size_t a, std::size_t b) {
  if (a != b || a == 0)
    throw std::invalid_argument("metric: prediction/target lengths must match and be >= 1");
}

// Invalid (-1) scored as the opposite class so it is wrong for all of
// accuracy, F1 and MCC.
int normalize_binary(int pred, int target) { return pred < 0 ? 1 - target : pred; }

struct Confusion {
  double tp = 0, fp = 0, fn = 0, tn = 0;
};

Confusion binary_confusion(const std::vector<int>& predictions, const std::vector<int>& targets) {
  Confusion c;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const int p = normalize_binary(predictions[i], targets[i]);
    const int t = targets[i];
    if (p == 1 && t == 1) c.tp += 1;
    else if (p == 1 && t == 0) c.fp += 1;
    else if (p == 0 && t == 1) c.fn += 1;
    else c.tn += 1;
  }
  return c;
}

}  // namespace

MetricKind metric_kind_from_string(const std::string& s) {
  if (s == "accuracy") return MetricKind::accuracy;
  if (s == "f1") return MetricKind::f1;
  if (s == "mcc") return MetricKind::mcc;
  if (s == "pearson") return MetricKind::pearson;
  if (s == "spearman") return MetricKind::spearman;
  throw std::invalid_argument("unknown metric kind '" + s + "'");
}

std::string to_string(MetricKind k) {
  switch (k) {
    case MetricKind::accuracy: return "accuracy";
    case MetricKind::f1: return "f1";
    case MetricKind::mcc: return "mcc";
    case MetricKind::pearson: return "pearson";
    case MetricKind::spearman: return "spearman";
  }
  return "?";
}

std::vector<MetricKind> metrics_for_task(const TaskSpec& spec) {
  if (spec.kind == TaskKind::regression) return {MetricKind::pearson, MetricKind::spearman};
  if (spec.name == "pair_match") return {MetricKind::f1, MetricKind::accuracy};
  if (spec.name == "order") return {MetricKind::mcc};
  return {MetricKind::accuracy};
}

double accuracy(const std::vector<int>& predictions, const std::vector<int>& targets) {
  check_lengths(predictions.size(), targets.size());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i)
    if (predictions[i] == targets[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

double f1_binary(const std::vector<int>& predictions, const std::vector<int>& targets) {
  check_lengths(predictions.size(), targets.size());
  const Confusion c = binary_confusion(predictions, targets);
  const double denom = 2 * c.tp + c.fp + c.fn;
  return denom == 0.0 ? 0.0 : 2 * c.tp / denom;
}

double mcc_binary(const std::vector<int>& predictions, const std::vector<int>& targets) {
  check_lengths(predictions.size(), targets.size());
  const Confusion c = binary_confusion(predictions, targets);
  const double denom =
      std::sqrt((c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn));
  return denom == 0.0 ? 0.0 : (c.tp * c.tn - c.fp * c.fn) / denom;
}

std::vector<double> average_ranks(const std::vector<double>& values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[idx[j + 1]] == values[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b, bool* undefined) {
  check_lengths(a.size(), b.size());
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) {
    if (undefined) *undefined = true;
    return 0.0;
  }
  return sab / std::sqrt(saa * sbb);
}

double spearman(const std::vector<double>& a, const std::vector<double>& b, bool* undefined) {
  check_lengths(a.size(), b.size());
  return pearson(average_ranks(a), average_ranks(b), undefined);
}

double compute_metric(MetricKind kind, const std::vector<Decoded>& predictions,
                      const std::vector<Example>& examples, const TaskSpec& spec,
                      bool* undefined) {
  check_lengths(predictions.size(), examples.size());
  if (kind == MetricKind::pearson || kind == MetricKind::spearman) {
    // Invalid regression predictions score as the worst-ranked constant; they
    // are represented by a sentinel below the value range.
    std::vector<double> preds, targets;
    preds.reserve(predictions.size());
    for (std::size_t i = 0; i < predictions.size(); ++i) {
      const auto& d = predictions[i];
      preds.push_back(std::holds_alternative<double>(d) ? std::get<double>(d) : -1.0);
      targets.push_back(examples[i].value);
    }
    return kind == MetricKind::pearson ? pearson(preds, targets, undefined)
                                       : spearman(preds, targets, undefined);
  }
  std::vector<int> preds, targets;
  preds.reserve(predictions.size());
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& d = predictions[i];
    preds.push_back(std::holds_alternative<std::size_t>(d)
                        ? static_cast<int>(std::get<std::size_t>(d))
                        : -1);
    targets.push_back(static_cast<int>(examples[i].class_index));
  }
  switch (kind) {
    case MetricKind::accuracy: return accuracy(preds, targets);
    case MetricKind::f1: return f1_binary(preds, targets);
    case MetricKind::mcc: return mcc_binary(preds, targets);
    default: throw std::invalid_argument("compute_metric: unsupported kind");
  }
}

EvalResult evaluate_predictions(const TaskSpec& spec, const std::vector<Decoded>& predictions,
                                const std::vector<Example>& examples) {
  EvalResult r;
  r.n_examples = predictions.size();
  for (const auto& d : predictions)
    if (is_invalid(d)) ++r.invalid_count;
  r.all_invalid = r.invalid_count == r.n_examples && r.n_examples > 0;
  for (MetricKind k : metrics_for_task(spec)) {
    bool undef = false;
    r.scores[to_string(k)] = compute_metric(k, predictions, examples, spec, &undef);
    r.undefined_score = r.undefined_score || undef;
  }
  return r;
}

double score_for_table(const TaskSpec& spec, const EvalResult& result) {
  if (result.all_invalid) return 0.0;  // the "never emits a valid label" rule
  double acc = 0.0;
  for (const auto& [name, value] : result.scores) acc += value;
  return 100.0 * acc / static_cast<double>(result.scores.size());
}

std::vector<MethodStability> standardized_overall_scores(
    const std::vector<std::vector<double>>& score_table) {
  const std::size_t methods = score_table.size();
  if (methods < 2) throw std::invalid_argument("standardized_overall_scores: need >= 2 methods");
  const std::size_t tasks = score_table[0].size();
  if (tasks < 2) throw std::invalid_argument("standardized_overall_scores: need >= 2 tasks");
  for (const auto& row : score_table)
    if (row.size() != tasks)
      throw std::invalid_argument("standardized_overall_scores: ragged score table");

  std::vector<std::vector<double>> scaled(methods, std::vector<double>(tasks));
  for (std::size_t t = 0; t < tasks; ++t) {
    double lo = score_table[0][t], hi = score_table[0][t];
    for (std::size_t m = 1; m < methods; ++m) {
      lo = std::min(lo, score_table[m][t]);
      hi = std::max(hi, score_table[m][t]);
    }
    for (std::size_t m = 0; m < methods; ++m)
      scaled[m][t] = (hi == lo) ? 100.0 : 100.0 * (score_table[m][t] - lo) / (hi - lo);
  }
  std::vector<MethodStability> out(methods);
  for (std::size_t m = 0; m < methods; ++m) {
    double mean = std::accumulate(scaled[m].begin(), scaled[m].end(), 0.0) /
                  static_cast<double>(tasks);
    double var = 0.0;
    for (double v : scaled[m]) var += (v - mean) * (v - mean);
    var /= static_cast<double>(tasks);
    out[m] = {mean, std::sqrt(var)};
  }
  return out;
}

}  // namespace promptlab
