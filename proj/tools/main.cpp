// Command-line front end: pretraining, single runs, method comparisons,
// ablations, prompt analysis and stability reports.

#if __has_include(<malloc.h>)
#include <malloc.h>
#endif

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "promptlab/harness.hpp"
#include "promptlab/optimizer.hpp"

namespace {

using namespace promptlab;
using nlohmann::json;

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

struct CommonOpts {
  std::string config_path;
  std::string out_dir;
  std::string tasks = "parity,majority,pair_match,order,ratio_reg";
  std::string methods = "simple,residual,superpos";
  std::string seeds = "1,2,3";
  std::int64_t seed = -1;
  std::string task, method;
  bool no_dropout = false;
  bool dropout = false;
  std::int64_t m = -1;
  std::int64_t epochs = -1;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
  cmd->add_option("--config", o.config_path, "Experiment config JSON");
  cmd->add_option("--seed", o.seed, "Override seed");
  cmd->add_option("--task", o.task, "Override task");
  cmd->add_option("--method", o.method, "Override method");
  cmd->add_flag("--no-dropout", o.no_dropout, "Disable backbone dropout");
  cmd->add_flag("--dropout", o.dropout, "Enable backbone dropout");
  cmd->add_option("--m", o.m, "Override superposition token count");
  cmd->add_option("--epochs", o.epochs, "Override epoch count");
  cmd->add_option("--out", o.out_dir, "Artifact output directory");
}

ExperimentConfig build_config(const CommonOpts& o) {
  ExperimentConfig cfg;
  if (!o.config_path.empty()) cfg = ExperimentConfig::from_json_file(o.config_path);
  if (o.seed >= 0) cfg.seed = static_cast<std::uint64_t>(o.seed);
  if (!o.task.empty()) cfg.task = o.task;
  if (!o.method.empty()) cfg.method = method_from_string(o.method);
  if (o.no_dropout) cfg.dropout = false;
  if (o.dropout) cfg.dropout = true;
  if (o.m >= 0) cfg.superpos_m = static_cast<std::size_t>(o.m);
  if (o.epochs >= 0) cfg.epochs = static_cast<std::size_t>(o.epochs);
  if (!o.out_dir.empty()) cfg.out_dir = o.out_dir;
  return cfg;
}

std::vector<Method> parse_methods(const std::string& s) {
  std::vector<Method> out;
  for (const auto& name : split_list(s)) out.push_back(method_from_string(name));
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  for (const auto& v : split_list(s)) out.push_back(std::stoull(v));
  return out;
}

int cmd_pretrain(const CommonOpts& o) {
  BackboneConfig bc;
  std::size_t corpus_size = 4096, steps = 64000;
  double lr = 1e-3;
  std::uint64_t corpus_seed = 7;
  std::string out_path = "backbone.json";
  if (!o.config_path.empty()) {
    std::ifstream in(o.config_path);
    if (!in) throw std::runtime_error("cannot open " + o.config_path);
    json j = json::parse(in);
    if (j.contains("vocab_size")) bc.vocab_size = j["vocab_size"].get<std::size_t>();
    if (j.contains("model_dim")) bc.model_dim = j["model_dim"].get<std::size_t>();
    if (j.contains("num_layers")) bc.num_layers = j["num_layers"].get<std::size_t>();
    if (j.contains("num_heads")) bc.num_heads = j["num_heads"].get<std::size_t>();
    if (j.contains("ffn_dim")) bc.ffn_dim = j["ffn_dim"].get<std::size_t>();
    if (j.contains("max_seq_len")) bc.max_seq_len = j["max_seq_len"].get<std::size_t>();
    if (j.contains("dropout_p")) bc.dropout_p = j["dropout_p"].get<double>();
    if (j.contains("seed")) bc.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("corpus_size")) corpus_size = j["corpus_size"].get<std::size_t>();
    if (j.contains("corpus_seed")) corpus_seed = j["corpus_seed"].get<std::uint64_t>();
    if (j.contains("steps")) steps = j["steps"].get<std::size_t>();
    if (j.contains("lr")) lr = j["lr"].get<double>();
    if (j.contains("out")) out_path = j["out"].get<std::string>();
  }
  if (o.seed >= 0) bc.seed = static_cast<std::uint64_t>(o.seed);
  if (!o.out_dir.empty()) out_path = o.out_dir + "/backbone.json";

  auto corpus = generate_pretrain_corpus(corpus_seed, corpus_size, bc.vocab_size);
  Backbone backbone = Backbone::init(bc);
  std::cout << "pretraining: " << steps << " steps, " << backbone.parameter_count()
            << " parameters\n";
  auto report = backbone.pretrain(corpus, steps, lr, bc.seed);
  backbone.freeze();
  if (!o.out_dir.empty()) std::filesystem::create_directories(o.out_dir);
  backbone.save(out_path);
  std::cout << "final masked accuracy: " << report.final_masked_accuracy
            << " (chance " << 1.0 / static_cast<double>(bc.vocab_size) << ")\n"
            << "saved " << out_path << " hash=" << backbone.weights_hash() << "\n";
  return 0;
}

int cmd_run(const CommonOpts& o) {
  ExperimentConfig cfg = build_config(o);
  if (cfg.out_dir.empty()) cfg.out_dir = "runs";
  RunResult r = run_experiment(cfg);
  std::cout << "task=" << cfg.task << " method=" << to_string(cfg.method)
            << " dropout=" << (cfg.dropout ? "on" : "off") << " seed=" << cfg.seed << "\n"
            << "best_val=" << r.best_val_score << " (epoch " << r.best_epoch << ")"
            << " test=" << r.test_score << " trainable=" << r.trainable_count
            << (r.failed ? " FAILED" : "") << "\n";
  return 0;
}

void write_table_csv(const ScoreTable& t, const std::string& path) {
  std::ofstream out(path);
  out << "method";
  for (const auto& task : t.tasks) out << "," << task;
  out << ",avg\n";
  for (std::size_t m = 0; m < t.methods.size(); ++m) {
    out << t.methods[m];
    for (double s : t.scores[m]) out << "," << format_f64(s);
    out << "," << format_f64(t.row_means[m]) << "\n";
  }
}

int cmd_compare(const CommonOpts& o) {
  ExperimentConfig base = build_config(o);
  ScoreTable table = compare_methods(base, split_list(o.tasks), parse_methods(o.methods),
                                     parse_seeds(o.seeds));
  for (std::size_t m = 0; m < table.methods.size(); ++m) {
    std::cout << table.methods[m] << ":";
    for (std::size_t t = 0; t < table.tasks.size(); ++t)
      std::cout << " " << table.tasks[t] << "=" << table.scores[m][t];
    std::cout << " avg=" << table.row_means[m] << "\n";
  }
  if (!base.out_dir.empty()) {
    std::filesystem::create_directories(base.out_dir);
    write_table_csv(table, base.out_dir + "/score_table.csv");
  }
  return 0;
}

int cmd_ablate_dropout(const CommonOpts& o) {
  ExperimentConfig base = build_config(o);
  auto cmp = run_dropout_comparison(base, split_list(o.tasks), parse_methods(o.methods),
                                    parse_seeds(o.seeds));
  for (std::size_t i = 0; i < cmp.methods.size(); ++i) {
    std::cout << cmp.methods[i] << ": score with=" << cmp.score_with[i]
              << " without=" << cmp.score_without[i]
              << " delta(off-on)=" << cmp.score_without[i] - cmp.score_with[i]
              << " steps09 with=" << cmp.steps09_with[i]
              << " without=" << cmp.steps09_without[i] << "\n";
  }
  return 0;
}

int cmd_ablate_m(const CommonOpts& o, const std::string& m_list) {
  ExperimentConfig base = build_config(o);
  std::vector<std::size_t> ms;
  for (const auto& v : split_list(m_list)) ms.push_back(std::stoull(v));
  auto series = run_m_ablation(base, split_list(o.tasks), ms, parse_seeds(o.seeds));
  std::ofstream csv;
  if (!base.out_dir.empty()) {
    std::filesystem::create_directories(base.out_dir);
    csv.open(base.out_dir + "/m_ablation.csv");
    csv << "m,mean_best_score\n";
  }
  for (const auto& pt : series) {
    std::cout << "m=" << pt.m << " mean_best_score=" << pt.mean_best_score << "\n";
    if (csv.is_open()) csv << pt.m << "," << format_f64(pt.mean_best_score) << "\n";
  }
  return 0;
}

int cmd_analyze_prompts(const std::string& prompt_path, const std::string& out_path) {
  PromptParams params = load_prompt_params(prompt_path);
  const SuperPosParams* sp = std::get_if<SuperPosParams>(&params);
  if (!sp) {
    if (const auto* sm = std::get_if<SoftmaxMixtureParams>(&params)) sp = &sm->inner;
  }
  if (!sp) throw std::runtime_error("analyze-prompts: checkpoint is not a superposition method");
  auto s = prompt_similarity_matrix(*sp);
  const std::size_t n = s->rows();
  std::ostream* out = &std::cout;
  std::ofstream file;
  if (!out_path.empty()) {
    file.open(out_path);
    out = &file;
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) (*out) << (j ? "," : "") << format_f64(s->at(i, j));
    (*out) << "\n";
  }
  return 0;
}

int cmd_stability(const std::string& table_path) {
  std::ifstream in(table_path);
  if (!in) throw std::runtime_error("stability: cannot open " + table_path);
  std::string line;
  std::getline(in, line);  // header: method,task1,...[,avg]
  auto header = split_list(line);
  const bool has_avg = !header.empty() && header.back() == "avg";
  std::vector<std::string> methods;
  std::vector<std::vector<double>> scores;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split_list(line);
    methods.push_back(cells[0]);
    std::vector<double> row;
    for (std::size_t i = 1; i < cells.size() - (has_avg ? 1 : 0); ++i)
      row.push_back(std::stod(cells[i]));
    scores.push_back(std::move(row));
  }
  auto stats = standardized_overall_scores(scores);
  for (std::size_t i = 0; i < methods.size(); ++i)
    std::cout << methods[i] << ": " << stats[i].mean << " +/- " << stats[i].stddev << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Training churns through large short-lived tensors; keep freed blocks on
  // the heap instead of returning them to the kernel every batch.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Soft-prompt tuning laboratory"};
  app.require_subcommand(1);

  CommonOpts o;
  std::string m_list = "1,2,4,16,64,128";
  std::string prompt_path, table_path, analyze_out;

  auto* pretrain = app.add_subcommand("pretrain", "Pretrain and freeze a backbone");
  add_common(pretrain, o);

  auto* run = app.add_subcommand("run", "Run a single experiment");
  add_common(run, o);

  auto* compare = app.add_subcommand("compare", "Compare methods across tasks");
  add_common(compare, o);
  compare->add_option("--tasks", o.tasks, "Comma-separated task list");
  compare->add_option("--methods", o.methods, "Comma-separated method list");
  compare->add_option("--seeds", o.seeds, "Comma-separated seed list");

  auto* ablate_m = app.add_subcommand("ablate-m", "Sweep the superposition token count");
  add_common(ablate_m, o);
  ablate_m->add_option("--tasks", o.tasks, "Comma-separated task list");
  ablate_m->add_option("--m-values", m_list, "Comma-separated m values");
  ablate_m->add_option("--seeds", o.seeds, "Comma-separated seed list");

  auto* ablate_d = app.add_subcommand("ablate-dropout", "Compare dropout on/off per method");
  add_common(ablate_d, o);
  ablate_d->add_option("--tasks", o.tasks, "Comma-separated task list");
  ablate_d->add_option("--methods", o.methods, "Comma-separated method list");
  ablate_d->add_option("--seeds", o.seeds, "Comma-separated seed list");

  auto* analyze = app.add_subcommand("analyze-prompts", "Cosine similarity of learned weights");
  analyze->add_option("--prompt", prompt_path, "Prompt checkpoint JSON")->required();
  analyze->add_option("--out", analyze_out, "Output CSV (default stdout)");

  auto* stability = app.add_subcommand("stability", "Standardized overall scoring of a table");
  stability->add_option("--table", table_path, "Score table CSV (from compare)")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (pretrain->parsed()) return cmd_pretrain(o);
    if (run->parsed()) return cmd_run(o);
    if (compare->parsed()) return cmd_compare(o);
    if (ablate_m->parsed()) return cmd_ablate_m(o, m_list);
    if (ablate_d->parsed()) return cmd_ablate_dropout(o);
    if (analyze->parsed()) return cmd_analyze_prompts(prompt_path, analyze_out);
    if (stability->parsed()) return cmd_stability(table_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
