#include "promptlab/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "promptlab/optimizer.hpp"

namespace promptlab {

namespace {

using nlohmann::json;

struct MethodDefaults {
  double lr, weight_decay;
};

// Per-method learning rate and weight decay defaults.
MethodDefaults defaults_for(Method m) {
  switch (m) {
    case Method::simple: return {0.01, 0.01};
    case Method::residual: return {0.3, 0.01};
    case Method::superpos: return {0.01, 1e-5};
    case Method::softmax_mixture: return {0.01, 1e-5};
    case Method::full_finetune: return {1e-5, 0.0};
  }
  throw std::logic_error("defaults_for: bad method");
}

std::string run_tag(const ExperimentConfig& cfg) {
  return cfg.task + "_" + to_string(cfg.method) + (cfg.dropout ? "_drop" : "_nodrop") + "_s" +
         std::to_string(cfg.seed);
}

}  // namespace

Method method_from_string(const std::string& s) {
  if (s == "simple") return Method::simple;
  if (s == "superpos") return Method::superpos;
  if (s == "softmax_mixture") return Method::softmax_mixture;
  if (s == "residual") return Method::residual;
  if (s == "full_finetune") return Method::full_finetune;
  throw std::invalid_argument("unknown method '" + s + "'");
}

std::string to_string(Method m) {
  switch (m) {
    case Method::simple: return "simple";
    case Method::superpos: return "superpos";
    case Method::softmax_mixture: return "softmax_mixture";
    case Method::residual: return "residual";
    case Method::full_finetune: return "full_finetune";
  }
  return "?";
}

double ExperimentConfig::effective_lr() const { return lr > 0.0 ? lr : defaults_for(method).lr; }

double ExperimentConfig::effective_weight_decay() const {
  return weight_decay >= 0.0 ? weight_decay : defaults_for(method).weight_decay;
}

void ExperimentConfig::validate() const {
  if (method != Method::full_finetune && prompt_tokens == 0)
    throw std::invalid_argument("ExperimentConfig: prompt_tokens must be positive");
  if (batch_size == 0) throw std::invalid_argument("ExperimentConfig: batch_size must be positive");
  if (backbone_path.empty()) throw std::invalid_argument("ExperimentConfig: backbone_path required");
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  json j = json::parse(in);
  ExperimentConfig cfg;
  if (j.contains("method")) cfg.method = method_from_string(j["method"].get<std::string>());
  if (j.contains("dropout")) cfg.dropout = j["dropout"].get<bool>();
  if (j.contains("prompt_tokens")) cfg.prompt_tokens = j["prompt_tokens"].get<std::size_t>();
  if (j.contains("m")) cfg.superpos_m = j["m"].get<std::size_t>();
  if (j.contains("bottleneck")) cfg.bottleneck = j["bottleneck"].get<std::size_t>();
  if (j.contains("lr")) cfg.lr = j["lr"].get<double>();
  if (j.contains("weight_decay")) cfg.weight_decay = j["weight_decay"].get<double>();
  if (j.contains("epochs")) cfg.epochs = j["epochs"].get<std::size_t>();
  if (j.contains("batch_size")) cfg.batch_size = j["batch_size"].get<std::size_t>();
  if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("task")) cfg.task = j["task"].get<std::string>();
  if (j.contains("backbone")) cfg.backbone_path = j["backbone"].get<std::string>();
  if (j.contains("out_dir")) cfg.out_dir = j["out_dir"].get<std::string>();
  if (j.contains("coef_init"))
    cfg.coef_init = j["coef_init"].get<std::string>() == "uniform" ? CoefInit::uniform
                                                                   : CoefInit::one_hot;
  if (j.contains("shared_e")) cfg.shared_e = j["shared_e"].get<bool>();
  return cfg;
}

std::string ExperimentConfig::to_json() const {
  json j{{"method", to_string(method)},
         {"dropout", dropout},
         {"prompt_tokens", prompt_tokens},
         {"m", superpos_m},
         {"bottleneck", bottleneck},
         {"lr", effective_lr()},
         {"weight_decay", effective_weight_decay()},
         {"epochs", epochs},
         {"batch_size", batch_size},
         {"seed", seed},
         {"task", task},
         {"backbone", backbone_path},
         {"coef_init", coef_init == CoefInit::uniform ? "uniform" : "one_hot"},
         {"shared_e", shared_e}};
  return j.dump(2);
}

std::size_t RunResult::steps_to_fraction(double f) const {
  if (val_score.empty()) return 0;
  if (best_val_score <= 0.0) return val_score.size();
  const double threshold = f * best_val_score;
  for (std::size_t i = 0; i < val_score.size(); ++i)
    if (val_score[i] >= threshold) return i + 1;
  return val_score.size();
}

std::string format_f64(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_curve_csv(const RunResult& result, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_curve_csv: cannot open " + path);
  out << "epoch,train_loss,val_score,invalid_frac\n";
  for (std::size_t i = 0; i < result.train_loss.size(); ++i)
    out << (i + 1) << "," << format_f64(result.train_loss[i]) << ","
        << format_f64(result.val_score[i]) << "," << format_f64(result.invalid_frac[i]) << "\n";
}

namespace {

struct EvalOutcome {
  EvalResult result;
  double score;
};

constexpr std::size_t kEvalChunk = 32;

EvalOutcome evaluate_split(const Backbone& backbone, const PromptParams* prompt,
                           const TaskSpec& spec, const std::vector<Example>& split) {
  std::vector<Decoded> predictions;
  predictions.reserve(split.size());
  for (std::size_t start = 0; start < split.size(); start += kEvalChunk) {
    const std::size_t end = std::min(split.size(), start + kEvalChunk);
    Tape tape;  // evaluation never applies dropout: training=false throughout
    TensorPtr p = prompt ? materialize(tape, *prompt) : nullptr;
    std::vector<const TokenSequence*> seqs;
    seqs.reserve(end - start);
    for (std::size_t i = start; i < end; ++i) seqs.push_back(&split[i].tokens);
    Backbone::BatchLayout layout;
    auto hidden = backbone.encode_batch(tape, p, seqs, false, layout);
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      auto cols = tape.slice_cols(hidden, layout.offsets[i], layout.offsets[i] + layout.widths[i]);
      auto logits = backbone.predict_label_distribution(tape, cols);
      predictions.push_back(decode_prediction(spec, Backbone::argmax_token(*logits)));
    }
  }
  EvalOutcome out;
  out.result = evaluate_predictions(spec, predictions, split);
  out.score = score_for_table(spec, out.result);
  return out;
}

void write_summary_json(const ExperimentConfig& cfg, const RunResult& r, const std::string& path) {
  json scores = json::object();
  for (const auto& [k, v] : r.test_result.scores) scores[k] = v;
  json j{{"config", json::parse(cfg.to_json())},
         {"best_val_score", r.best_val_score},
         {"best_epoch", r.best_epoch},
         {"test_score", r.test_score},
         {"test_metrics", scores},
         {"test_invalid_count", r.test_result.invalid_count},
         {"test_examples", r.test_result.n_examples},
         {"weights_hash_before", r.hash_before},
         {"weights_hash_after", r.hash_after},
         {"trainable_parameters", r.trainable_count},
         {"failed", r.failed}};
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_summary_json: cannot open " + path);
  out << j.dump(2) << "\n";
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  return run_experiment(cfg, Backbone::load(cfg.backbone_path));
}

RunResult run_experiment(const ExperimentConfig& cfg, const Backbone& loaded) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();

  // Prompt tuning never touches the frozen tensors (and the hash check below
  // enforces that), so sharing them across runs is safe; full fine-tuning
  // mutates weights and gets its own copy.
  Backbone backbone = cfg.method == Method::full_finetune ? loaded.clone() : loaded;
  backbone.freeze();
  backbone.set_dropout(cfg.dropout);

  TaskSpec spec = builtin_task_spec(cfg.task, backbone.config().vocab_size);
  Dataset ds = generate_task(spec);

  Rng master(cfg.seed);
  Rng init_rng = master.split(1);
  Rng train_rng = master.split(2);

  // Build the trainable state for the chosen method.
  std::optional<PromptParams> prompt;
  std::vector<ParamGroup> groups;
  const double lr = cfg.effective_lr();
  const double wd = cfg.effective_weight_decay();
  if (cfg.method == Method::full_finetune) {
    backbone.set_trainable(true);
    groups.push_back({backbone.parameters(), lr, wd});
  } else {
    switch (cfg.method) {
      case Method::simple:
        prompt = init_simple(backbone, cfg.prompt_tokens, init_rng);
        break;
      case Method::superpos:
        prompt = init_superpos(backbone, cfg.prompt_tokens, cfg.superpos_m, init_rng,
                               cfg.coef_init, cfg.shared_e);
        break;
      case Method::softmax_mixture:
        prompt = init_softmax_mixture(backbone, cfg.prompt_tokens, cfg.superpos_m, init_rng,
                                      cfg.coef_init, cfg.shared_e);
        break;
      case Method::residual:
        prompt = init_residual(backbone, cfg.prompt_tokens, cfg.bottleneck, init_rng);
        break;
      default:
        throw std::logic_error("run_experiment: bad method");
    }
    for (const auto& g : param_groups(*prompt))
      groups.push_back({g.tensors, lr, g.decay ? wd : 0.0});
  }

  RunResult result;
  result.hash_before = backbone.weights_hash();
  result.trainable_count = 0;
  for (const auto& g : groups)
    for (const auto& t : g.params) result.trainable_count += t->size();

  AdamWConfig ocfg;
  ocfg.lr = lr;
  AdamW opt(groups, ocfg);

  std::vector<std::size_t> order(ds.train.size());
  std::iota(order.begin(), order.end(), 0);

  const PromptParams* prompt_ptr = prompt ? &*prompt : nullptr;
  for (std::size_t epoch = 0; epoch < cfg.epochs && !result.failed; ++epoch) {
    // Seeded shuffle per epoch.
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[train_rng.next_below(i)]);

    double epoch_loss = 0.0;
    std::size_t examples_seen = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const std::size_t bsz = end - start;
      opt.zero_grads();
      Tape tape(train_rng.split(3));
      TensorPtr p = prompt_ptr ? materialize(tape, *prompt_ptr) : nullptr;
      std::vector<const TokenSequence*> seqs;
      seqs.reserve(bsz);
      for (std::size_t k = start; k < end; ++k) seqs.push_back(&ds.train[order[k]].tokens);
      Backbone::BatchLayout layout;
      auto hidden = backbone.encode_batch(tape, p, seqs, true, layout);
      TensorPtr loss;
      for (std::size_t k = 0; k < bsz; ++k) {
        const Example& ex = ds.train[order[start + k]];
        auto cols =
            tape.slice_cols(hidden, layout.offsets[k], layout.offsets[k] + layout.widths[k]);
        auto logits = backbone.predict_label_distribution(tape, cols);
        auto ce = tape.cross_entropy(logits, static_cast<std::size_t>(target_token(spec, ex)));
        loss = loss ? tape.add(loss, ce) : ce;
      }
      loss = tape.scale(loss, 1.0 / static_cast<double>(bsz));
      if (!std::isfinite(loss->data[0])) {
        result.failed = true;
        break;
      }
      tape.backward(loss);
      opt.step();
      epoch_loss += loss->data[0] * static_cast<double>(bsz);
      examples_seen += bsz;
    }
    if (result.failed) break;

    auto val = evaluate_split(backbone, prompt_ptr, spec, ds.val);
    result.train_loss.push_back(epoch_loss / static_cast<double>(examples_seen));
    result.val_score.push_back(val.score);
    result.invalid_frac.push_back(static_cast<double>(val.result.invalid_count) /
                                  static_cast<double>(val.result.n_examples));
    if (result.best_epoch == 0 || val.score > result.best_val_score) {
      result.best_val_score = val.score;
      result.best_epoch = result.val_score.size();
    }
  }

  if (!result.failed) {
    auto test = evaluate_split(backbone, prompt_ptr, spec, ds.test);
    result.test_result = test.result;
    result.test_score = test.score;
  } else {
    result.test_score = 0.0;  // mirrors the invalid-label zero rule
  }

  result.hash_after = backbone.weights_hash();
  if (cfg.method != Method::full_finetune && result.hash_after != result.hash_before)
    throw std::runtime_error("run_experiment: frozen backbone weights changed");

  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    const std::string base = cfg.out_dir + "/" + run_tag(cfg);
    write_curve_csv(result, base + ".csv");
    write_summary_json(cfg, result, base + ".json");
    if (prompt) save_prompt_params(*prompt, base + "_prompt.json");
    // Timing is nondeterministic and lives outside the summary document.
    std::ofstream log(base + ".log");
    log << "wall_seconds=" << result.wall_seconds << "\n";
  }
  return result;
}

ScoreTable compare_methods(const ExperimentConfig& base, const std::vector<std::string>& tasks,
                           const std::vector<Method>& methods,
                           const std::vector<std::uint64_t>& seeds) {
  if (tasks.empty() || methods.empty() || seeds.empty())
    throw std::invalid_argument("compare_methods: tasks, methods and seeds must be nonempty");
  ScoreTable table;
  table.tasks = tasks;
  for (Method m : methods) table.methods.push_back(to_string(m));
  table.scores.assign(methods.size(), std::vector<double>(tasks.size(), 0.0));
  const Backbone loaded = Backbone::load(base.backbone_path);
  for (std::size_t mi = 0; mi < methods.size(); ++mi) {
    for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
      double acc = 0.0;
      for (auto seed : seeds) {
        ExperimentConfig cfg = base;
        cfg.method = methods[mi];
        cfg.task = tasks[ti];
        cfg.seed = seed;
        cfg.lr = 0.0;           // per-method defaults
        cfg.weight_decay = -1.0;
        acc += run_experiment(cfg, loaded).test_score;
      }
      table.scores[mi][ti] = acc / static_cast<double>(seeds.size());
    }
  }
  for (const auto& row : table.scores)
    table.row_means.push_back(std::accumulate(row.begin(), row.end(), 0.0) /
                              static_cast<double>(row.size()));
  return table;
}

DropoutComparison run_dropout_comparison(const ExperimentConfig& base,
                                         const std::vector<std::string>& tasks,
                                         const std::vector<Method>& methods,
                                         const std::vector<std::uint64_t>& seeds) {
  DropoutComparison out;
  const Backbone loaded = Backbone::load(base.backbone_path);
  for (Method m : methods) {
    out.methods.push_back(to_string(m));
    double score_on = 0, score_off = 0, steps_on = 0, steps_off = 0;
    std::size_t count = 0;
    for (const auto& task : tasks) {
      for (auto seed : seeds) {
        for (bool drop : {true, false}) {
          ExperimentConfig cfg = base;
          cfg.method = m;
          cfg.task = task;
          cfg.seed = seed;
          cfg.dropout = drop;
          cfg.lr = 0.0;
          cfg.weight_decay = -1.0;
          RunResult r = run_experiment(cfg, loaded);
          (drop ? score_on : score_off) += r.test_score;
          (drop ? steps_on : steps_off) += static_cast<double>(r.steps_to_fraction(0.9));
        }
        ++count;
      }
    }
    const double n = static_cast<double>(count);
    out.score_with.push_back(score_on / n);
    out.score_without.push_back(score_off / n);
    out.steps09_with.push_back(steps_on / n);
    out.steps09_without.push_back(steps_off / n);
  }
  return out;
}

std::vector<MAblationPoint> run_m_ablation(const ExperimentConfig& base,
                                           const std::vector<std::string>& tasks,
                                           const std::vector<std::size_t>& m_values,
                                           const std::vector<std::uint64_t>& seeds) {
  if (m_values.empty()) throw std::invalid_argument("run_m_ablation: no m values");
  std::vector<MAblationPoint> series;
  const Backbone loaded = Backbone::load(base.backbone_path);
  for (std::size_t m : m_values) {
    double acc = 0.0;
    std::size_t count = 0;
    for (const auto& task : tasks) {
      for (auto seed : seeds) {  // identical seeds across m values
        ExperimentConfig cfg = base;
        cfg.method = Method::superpos;
        cfg.superpos_m = m;
        cfg.task = task;
        cfg.seed = seed;
        cfg.lr = 0.0;
        cfg.weight_decay = -1.0;
        acc += run_experiment(cfg, loaded).best_val_score;
        ++count;
      }
    }
    series.push_back({m, acc / static_cast<double>(count)});
  }
  return series;
}

TensorPtr prompt_similarity_matrix(const SuperPosParams& params) {
  const std::size_t n = params.coefficients.size();
  auto s = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const auto& a = params.coefficients[i]->data;
      const auto& b = params.coefficients[j]->data;
      double ab = 0, aa = 0, bb = 0;
      for (std::size_t k = 0; k < a.size(); ++k) {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
      }
      s->data[i * n + j] = (aa == 0.0 || bb == 0.0) ? 0.0 : ab / std::sqrt(aa * bb);
    }
  }
  return s;
}

std::vector<MethodStability> stability_report(const ScoreTable& table) {
  return standardized_overall_scores(table.scores);
}

}  // namespace promptlab
