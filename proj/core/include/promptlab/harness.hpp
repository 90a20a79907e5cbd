#pragma once

#include <string>
#include <vector>

#include "promptlab/backbone.hpp"
#include "promptlab/metrics.hpp"
#include "promptlab/reparam.hpp"
#include "promptlab/tasks.hpp"

namespace promptlab {

enum class Method { simple, superpos, softmax_mixture, residual, full_finetune };

Method method_from_string(const std::string& s);
std::string to_string(Method m);

struct ExperimentConfig {
  Method method = Method::superpos;
  bool dropout = false;
  std::size_t prompt_tokens = 10;  // n
  std::size_t superpos_m = 128;    // m
  std::size_t bottleneck = 128;    // b
  double lr = 0.0;                 // 0 = method default
  double weight_decay = -1.0;      // <0 = method default
  std::size_t epochs = 80;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::string task = "parity";
  std::string backbone_path;
  std::string out_dir;  // empty = no artifacts written
  CoefInit coef_init = CoefInit::one_hot;
  bool shared_e = false;

  double effective_lr() const;
  double effective_weight_decay() const;
  void validate() const;

  static ExperimentConfig from_json_file(const std::string& path);
  std::string to_json() const;
};

struct RunResult {
  std::vector<double> train_loss;    // one entry per epoch
  std::vector<double> val_score;     // score_for_table per epoch
  std::vector<double> invalid_frac;  // on validation, per epoch
  double best_val_score = 0.0;
  std::size_t best_epoch = 0;  // 1-based; 0 when no epochs ran
  EvalResult test_result;
  double test_score = 0.0;
  std::uint64_t hash_before = 0, hash_after = 0;
  std::size_t trainable_count = 0;
  bool failed = false;  // NaN loss aborts and scores 0
  double wall_seconds = 0.0;

  // First epoch reaching f x best validation score (1-based).
  std::size_t steps_to_fraction(double f) const;
};

RunResult run_experiment(const ExperimentConfig& config);

// Same run against an already-loaded checkpoint; sweeps use this so the
// backbone JSON is parsed once, not once per run. Prompt-tuning runs share
// the frozen tensors; full fine-tuning works on a private deep copy.
RunResult run_experiment(const ExperimentConfig& config, const Backbone& loaded);

struct ScoreTable {
  std::vector<std::string> methods;  // row labels
  std::vector<std::string> tasks;    // column labels
  std::vector<std::vector<double>> scores;  // seed-averaged, methods x tasks
  std::vector<double> row_means;     // the "Avg." column
};

ScoreTable compare_methods(const ExperimentConfig& base, const std::vector<std::string>& tasks,
                           const std::vector<Method>& methods,
                           const std::vector<std::uint64_t>& seeds);

struct DropoutComparison {
  std::vector<std::string> methods;
  std::vector<double> score_with, score_without;        // mean over tasks x seeds
  std::vector<double> steps09_with, steps09_without;    // mean steps_to_fraction(0.9)
};

DropoutComparison run_dropout_comparison(const ExperimentConfig& base,
                                         const std::vector<std::string>& tasks,
                                         const std::vector<Method>& methods,
                                         const std::vector<std::uint64_t>& seeds);

struct MAblationPoint {
  std::size_t m;
  double mean_best_score;
};

std::vector<MAblationPoint> run_m_ablation(const ExperimentConfig& base,
                                           const std::vector<std::string>& tasks,
                                           const std::vector<std::size_t>& m_values,
                                           const std::vector<std::uint64_t>& seeds);

// Cosine similarity of superposition coefficient vectors; unit diagonal,
// zero vectors score 0 against everything.
TensorPtr prompt_similarity_matrix(const SuperPosParams& params);

std::vector<MethodStability> stability_report(const ScoreTable& table);

// Learning-curve CSV: header epoch,train_loss,val_score,invalid_frac with
// doubles printed to 17 significant digits.
void write_curve_csv(const RunResult& result, const std::string& path);
std::string format_f64(double v);

}  // namespace promptlab
