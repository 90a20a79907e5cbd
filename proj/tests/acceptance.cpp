// Acceptance gate: ten end-to-end criteria, printed one PASS/FAIL line each.
// Exit status is nonzero when any criterion fails.

#if __has_include(<malloc.h>)
#include <malloc.h>
#endif

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "promptlab/harness.hpp"
#include "promptlab/optimizer.hpp"

namespace {

using namespace promptlab;

int failures = 0;

void report(int index, const std::string& name, bool ok, const std::string& detail = "") {
  std::cout << (ok ? "PASS" : "FAIL") << "  " << index << ". " << name;
  if (!detail.empty()) std::cout << "  [" << detail << "]";
  std::cout << std::endl;
  if (!ok) ++failures;
}

std::string format2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double now_seconds() {
  using clock = std::chrono::steady_clock;
  static const clock::time_point origin = clock::now();
  return std::chrono::duration<double>(clock::now() - origin).count();
}

// Small backbone used by the cheap structural criteria (1-5).
Backbone small_backbone() {
  BackboneConfig bc;
  bc.vocab_size = 64;
  bc.model_dim = 16;
  bc.num_layers = 2;
  bc.num_heads = 4;
  bc.ffn_dim = 32;
  bc.max_seq_len = 32;
  bc.dropout_p = 0.0;
  bc.seed = 11;
  Backbone b = Backbone::init(bc);
  b.freeze();
  b.set_dropout(false);
  return b;
}

// Fixed probe batch: three short content sequences with label-token targets.
std::vector<TokenSequence> probe_sequences() {
  return {TokenSequence{{16, 17, 18, 19, 20, 21}},
          TokenSequence{{22, 23, 16, 17, 24}},
          TokenSequence{{25, 26, 27, 28, 29, 30, 31}}};
}

const std::vector<std::size_t> kProbeTargets{2, 3, 4};

// Mean cross-entropy of label prediction over the probe batch, built on tape.
TensorPtr probe_loss(const Backbone& bb, const PromptParams& params,
                     const std::vector<TokenSequence>& seqs, Tape& tape) {
  TensorPtr p = materialize(tape, params);
  std::vector<const TokenSequence*> ptrs;
  ptrs.reserve(seqs.size());
  for (const auto& s : seqs) ptrs.push_back(&s);
  Backbone::BatchLayout layout;
  auto hidden = bb.encode_batch(tape, p, ptrs, false, layout);
  TensorPtr loss;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    auto cols = tape.slice_cols(hidden, layout.offsets[i], layout.offsets[i] + layout.widths[i]);
    auto ce = tape.cross_entropy(bb.predict_label_distribution(tape, cols), kProbeTargets[i]);
    loss = loss ? tape.add(loss, ce) : ce;
  }
  return tape.scale(loss, 1.0 / static_cast<double>(seqs.size()));
}

// --- Criterion 1: analytic vs central-finite-difference gradients ----------

bool gradcheck(const Backbone& bb, const PromptParams& params, double* worst) {
  const auto seqs = probe_sequences();
  auto tensors = trainable_tensors(params);
  for (const auto& t : tensors) {
    t->ensure_grad();
    t->zero_grad();
  }
  Tape tape;
  tape.backward(probe_loss(bb, params, seqs, tape));
  std::vector<std::vector<double>> analytic;
  analytic.reserve(tensors.size());
  for (const auto& t : tensors) analytic.push_back(t->grad);

  auto value = [&]() {
    Tape t2;
    return probe_loss(bb, params, seqs, t2)->data[0];
  };
  bool ok = true;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto fd = finite_difference_gradient(value, *tensors[i]);
    const double err = max_relative_error(analytic[i], fd);
    *worst = std::max(*worst, err);
    if (err > 1e-4) ok = false;
  }
  return ok;
}

// --- Criterion 2: 100 real training steps leave serialized weights intact --

void train_steps(const Backbone& bb, PromptParams& params, const Dataset& ds, std::size_t steps) {
  std::vector<ParamGroup> groups;
  for (const auto& g : param_groups(params)) groups.push_back({g.tensors, 0.01, g.decay ? 0.01 : 0.0});
  AdamWConfig ocfg;
  ocfg.lr = 0.01;
  AdamW opt(groups, ocfg);
  const std::size_t batch = 8;
  for (std::size_t s = 0; s < steps; ++s) {
    opt.zero_grads();
    Tape tape;
    TensorPtr p = materialize(tape, params);
    std::vector<const TokenSequence*> seqs;
    const std::size_t base = (s * batch) % ds.train.size();
    for (std::size_t k = 0; k < batch; ++k)
      seqs.push_back(&ds.train[(base + k) % ds.train.size()].tokens);
    Backbone::BatchLayout layout;
    auto hidden = bb.encode_batch(tape, p, seqs, true, layout);
    TensorPtr loss;
    for (std::size_t k = 0; k < seqs.size(); ++k) {
      auto cols = tape.slice_cols(hidden, layout.offsets[k], layout.offsets[k] + layout.widths[k]);
      const Example& ex = ds.train[(base + k) % ds.train.size()];
      auto ce = tape.cross_entropy(bb.predict_label_distribution(tape, cols),
                                   static_cast<std::size_t>(target_token(ds.spec, ex)));
      loss = loss ? tape.add(loss, ce) : ce;
    }
    tape.backward(tape.scale(loss, 1.0 / static_cast<double>(seqs.size())));
    opt.step();
  }
}

// --- Criterion 6 oracles: metrics re-derived from their definitions --------

double brute_accuracy(const std::vector<int>& p, const std::vector<int>& t) {
  double c = 0;
  for (std::size_t i = 0; i < p.size(); ++i) c += p[i] == t[i] ? 1 : 0;
  return c / static_cast<double>(p.size());
}

double brute_f1(const std::vector<int>& p, const std::vector<int>& t) {
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 1 && t[i] == 1) ++tp;
    if (p[i] == 1 && t[i] == 0) ++fp;
    if (p[i] == 0 && t[i] == 1) ++fn;
  }
  const double precision = tp + fp > 0 ? tp / (tp + fp) : 0;
  const double recall = tp + fn > 0 ? tp / (tp + fn) : 0;
  return precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0;
}

double brute_mcc(const std::vector<int>& p, const std::vector<int>& t) {
  double tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == 1 && t[i] == 1) ++tp;
    else if (p[i] == 1 && t[i] == 0) ++fp;
    else if (p[i] == 0 && t[i] == 1) ++fn;
    else ++tn;
  }
  const double d = std::sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn));
  return d == 0 ? 0 : (tp * tn - fp * fn) / d;
}

double brute_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
  }
  const double mx = sx / n, my = sy / n;
  double num = 0, dx = 0, dy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    num += (x[i] - mx) * (y[i] - my);
    dx += (x[i] - mx) * (x[i] - mx);
    dy += (y[i] - my) * (y[i] - my);
  }
  return num / std::sqrt(dx * dy);
}

std::vector<double> brute_ranks(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double below = 0, equal = 0;
    for (std::size_t j = 0; j < v.size(); ++j) {
      if (v[j] < v[i]) ++below;
      if (v[j] == v[i]) ++equal;
    }
    r[i] = below + (equal + 1) / 2.0;
  }
  return r;
}

// Min-max column scaling to [0, 100] followed by per-row mean and population
// standard deviation, straight from the definition.
std::vector<MethodStability> brute_standardized(const std::vector<std::vector<double>>& table) {
  const std::size_t rows = table.size(), cols = table[0].size();
  std::vector<std::vector<double>> scaled(rows, std::vector<double>(cols));
  for (std::size_t j = 0; j < cols; ++j) {
    double lo = table[0][j], hi = table[0][j];
    for (std::size_t i = 1; i < rows; ++i) {
      lo = std::min(lo, table[i][j]);
      hi = std::max(hi, table[i][j]);
    }
    for (std::size_t i = 0; i < rows; ++i)
      scaled[i][j] = hi == lo ? 100.0 : 100.0 * (table[i][j] - lo) / (hi - lo);
  }
  std::vector<MethodStability> out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    double mean = 0;
    for (double v : scaled[i]) mean += v;
    mean /= static_cast<double>(cols);
    double var = 0;
    for (double v : scaled[i]) var += (v - mean) * (v - mean);
    out[i] = {mean, std::sqrt(var / static_cast<double>(cols))};
  }
  return out;
}

}  // namespace

int main() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  const std::filesystem::path work =
      std::filesystem::temp_directory_path() / "promptlab_acceptance";
  std::filesystem::create_directories(work);

  Backbone small = small_backbone();
  Rng init_rng(101);

  // 1. Gradient correctness: every reparameterization, analytic vs central FD.
  {
    const double t0 = now_seconds();
    double worst = 0.0;
    bool ok = true;
    {
      PromptParams p = init_simple(small, 4, init_rng);
      ok = gradcheck(small, p, &worst) && ok;
    }
    {
      PromptParams p = init_superpos(small, 4, 8, init_rng, CoefInit::uniform);
      ok = gradcheck(small, p, &worst) && ok;
    }
    {
      PromptParams p = init_softmax_mixture(small, 4, 8, init_rng, CoefInit::uniform);
      ok = gradcheck(small, p, &worst) && ok;
    }
    {
      PromptParams p = init_residual(small, 4, 8, init_rng);
      ok = gradcheck(small, p, &worst) && ok;
    }
    const double secs = now_seconds() - t0;
    ok = ok && secs <= 60.0;
    char detail[96];
    std::snprintf(detail, sizeof(detail), "max rel err %.3e, %.1fs", worst, secs);
    report(1, "gradients match finite differences (all four reparameterizations)", ok, detail);
  }

  // 2. Frozen-backbone invariance under 100 real optimizer steps per method.
  {
    const std::string before_path = (work / "theta_before.json").string();
    small.save(before_path);
    const std::string before = slurp(before_path);
    Dataset ds = generate_task(builtin_task_spec("parity", small.config().vocab_size));
    bool ok = true;
    Rng r(202);
    for (int which = 0; which < 4; ++which) {
      PromptParams p = which == 0   ? PromptParams{init_simple(small, 4, r)}
                       : which == 1 ? PromptParams{init_superpos(small, 4, 8, r)}
                       : which == 2 ? PromptParams{init_softmax_mixture(small, 4, 8, r)}
                                    : PromptParams{init_residual(small, 4, 8, r)};
      train_steps(small, p, ds, 100);
      const std::string after_path = (work / "theta_after.json").string();
      small.save(after_path);
      ok = ok && slurp(after_path) == before;
    }
    report(2, "serialized backbone weights byte-identical after 100 steps of each method", ok);
  }

  // 3. SuperPos one-hot init materializes the sampled embeddings bit-exactly.
  {
    Rng r(303);
    SuperPosParams p = init_superpos(small, 4, 8, r, CoefInit::one_hot);
    Tape tape;
    auto mat = materialize_superpos(tape, p);
    const auto& emb = *small.embedding_table();
    bool ok = mat->rows() == small.config().model_dim && mat->cols() == 4;
    for (std::size_t i = 0; ok && i < 4; ++i) {
      const auto row = static_cast<std::size_t>(p.sampled_tokens[i % p.m]);
      for (std::size_t d = 0; d < mat->rows(); ++d)
        if (mat->at(d, i) != emb.at(row, d)) ok = false;
    }
    report(3, "one-hot superposition init reproduces sampled embeddings bit-exactly", ok);
  }

  // 4. Weight-decay grouping: zero gradients, lr=0.01, lambda=1e-5, 10 steps.
  {
    Rng r(404);
    SuperPosParams p = init_superpos(small, 4, 8, r, CoefInit::one_hot);
    Rng noise(405);
    for (auto& c : p.coefficients)
      for (auto& v : c->data) v = noise.next_gaussian();
    std::vector<std::vector<double>> coef_before;
    for (const auto& c : p.coefficients) coef_before.push_back(c->data);
    std::vector<std::vector<double>> emb_before;
    for (const auto& e : p.embeddings) emb_before.push_back(e->data);

    PromptParams params{p};
    std::vector<ParamGroup> groups;
    for (const auto& g : param_groups(params))
      groups.push_back({g.tensors, 0.01, g.decay ? 1e-5 : 0.0});
    AdamWConfig ocfg;
    ocfg.lr = 0.01;
    AdamW opt(groups, ocfg);
    for (int s = 0; s < 10; ++s) {
      opt.zero_grads();  // gradients forced to zero: pure decay behavior
      opt.step();
    }
    const auto& now = std::get<SuperPosParams>(params);
    bool ok = true;
    for (std::size_t i = 0; i < now.embeddings.size(); ++i)
      ok = ok && now.embeddings[i]->data == emb_before[i];
    const double factor = std::pow(1.0 - 1e-7, 10);
    for (std::size_t i = 0; i < now.coefficients.size(); ++i)
      for (std::size_t k = 0; k < now.coefficients[i]->data.size(); ++k)
        if (std::abs(now.coefficients[i]->data[k] - coef_before[i][k] * factor) > 1e-12) ok = false;
    report(4, "decay skips embedding matrices and scales coefficients by (1-1e-7)^10", ok);
  }

  // 5. Softmax-mixture convexity over 1000 random coefficient draws.
  {
    Rng r(505);
    SoftmaxMixtureParams p = init_softmax_mixture(small, 4, 8, r, CoefInit::uniform);
    const std::size_t e = small.config().model_dim, n = 4, m = 8;
    bool ok = true;
    // Containment in the per-component [min, max] of each E's columns.
    Rng noise(506);
    for (int draw = 0; draw < 1000 && ok; ++draw) {
      for (auto& c : p.inner.coefficients)
        for (auto& v : c->data) v = noise.next_gaussian() * 3.0;
      Tape tape;
      auto mat = materialize_softmax(tape, p);
      for (std::size_t i = 0; i < n; ++i) {
        const auto& E = *p.inner.embeddings[i];
        for (std::size_t d = 0; d < e; ++d) {
          double lo = E.at(d, 0), hi = E.at(d, 0);
          for (std::size_t k = 1; k < m; ++k) {
            lo = std::min(lo, E.at(d, k));
            hi = std::max(hi, E.at(d, k));
          }
          if (mat->at(d, i) < lo - 1e-12 || mat->at(d, i) > hi + 1e-12) ok = false;
        }
      }
    }
    // Weight normalization: with every E entry set to one, each output entry
    // equals the sum of that token's mixture weights.
    for (auto& E : p.inner.embeddings) std::fill(E->data.begin(), E->data.end(), 1.0);
    Rng noise2(506);
    for (int draw = 0; draw < 1000 && ok; ++draw) {
      for (auto& c : p.inner.coefficients)
        for (auto& v : c->data) v = noise2.next_gaussian() * 3.0;
      Tape tape;
      auto mat = materialize_softmax(tape, p);
      for (double v : mat->data)
        if (std::abs(v - 1.0) > 1e-12) ok = false;
    }
    report(5, "softmax-mixture weights sum to 1 and outputs stay in the column hull", ok);
  }

  // 6. Metric and standardized-scoring equivalence against brute oracles.
  {
    bool ok = true;
    Rng rng(606);
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t n = 5 + rng.next_below(40);
      std::vector<int> p(n), t(n);
      std::vector<double> x(n), y(n);
      for (std::size_t i = 0; i < n; ++i) {
        p[i] = static_cast<int>(rng.next_below(2));
        t[i] = static_cast<int>(rng.next_below(2));
        x[i] = std::round(rng.next_gaussian() * 4.0) / 2.0;
        y[i] = std::round(rng.next_gaussian() * 4.0) / 2.0;
      }
      if (std::abs(accuracy(p, t) - brute_accuracy(p, t)) > 1e-10) ok = false;
      if (std::abs(f1_binary(p, t) - brute_f1(p, t)) > 1e-10) ok = false;
      if (std::abs(mcc_binary(p, t) - brute_mcc(p, t)) > 1e-10) ok = false;
      bool undef = false;
      const double px = pearson(x, y, &undef);
      if (!undef) {
        if (std::abs(px - brute_pearson(x, y)) > 1e-10) ok = false;
        bool undef_s = false;
        const double sp = spearman(x, y, &undef_s);
        if (!undef_s &&
            std::abs(sp - brute_pearson(brute_ranks(x), brute_ranks(y))) > 1e-10)
          ok = false;
      }
    }
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t rows = 2 + rng.next_below(5), cols = 2 + rng.next_below(7);
      std::vector<std::vector<double>> table(rows, std::vector<double>(cols));
      for (auto& row : table)
        for (auto& v : row) v = rng.next_double() * 100.0;
      auto got = standardized_overall_scores(table);
      auto want = brute_standardized(table);
      for (std::size_t i = 0; i < rows; ++i) {
        if (std::abs(got[i].mean - want[i].mean) > 1e-10) ok = false;
        if (std::abs(got[i].stddev - want[i].stddev) > 1e-10) ok = false;
      }
    }
    report(6, "metrics and standardized scoring match brute-force oracles (200 instances)", ok);
  }

  // Shared fixture for the full-scale criteria: pretrain the default backbone.
  const std::string backbone_path = (work / "backbone.json").string();
  {
    std::cerr << "pretraining fixture backbone..." << std::endl;
    BackboneConfig bc;  // library defaults are the experiment-scale settings
    auto corpus = generate_pretrain_corpus(7, 4096, bc.vocab_size);
    Backbone bb = Backbone::init(bc);
    bb.pretrain(corpus, 64000, 1e-3, bc.seed);
    bb.freeze();
    bb.save(backbone_path);
  }

  ExperimentConfig base;
  base.backbone_path = backbone_path;
  const std::vector<std::string> tasks = builtin_task_names();
  const std::vector<std::uint64_t> seeds{0, 1, 2};

  // 7. Directional reproduction over the 5-task suite, 3 seeds, 80 epochs.
  {
    const double t0 = now_seconds();
    auto cmp = run_dropout_comparison(base, tasks,
                                      {Method::simple, Method::residual, Method::superpos}, seeds);
    const double minutes = (now_seconds() - t0) / 60.0;
    auto overall = [&](std::size_t i) { return 0.5 * (cmp.score_with[i] + cmp.score_without[i]); };
    auto steps09 = [&](std::size_t i) { return 0.5 * (cmp.steps09_with[i] + cmp.steps09_without[i]); };
    const bool a = overall(2) >= overall(0);
    bool b = true;
    for (std::size_t i = 0; i < cmp.methods.size(); ++i)
      b = b && cmp.score_without[i] >= cmp.score_with[i];
    const bool c = steps09(2) <= steps09(1);
    const bool in_time = minutes <= 45.0;
    std::string detail;
    for (std::size_t i = 0; i < cmp.methods.size(); ++i)
      detail += cmp.methods[i] + " on/off " + format2(cmp.score_with[i]) + "/" +
                format2(cmp.score_without[i]) + " steps09 " + format2(steps09(i)) + "; ";
    detail += format2(minutes) + " min";
    report(7, "suite directions: superpos>=simple, no-dropout>=dropout, faster than residual",
           a && b && c && in_time, detail);
  }

  // 8. Mixture-size ablation: mean best score at m=16 >= at m=1, same seeds.
  {
    auto series = run_m_ablation(base, tasks, {1, 16}, seeds);
    const bool ok = series[1].mean_best_score >= series[0].mean_best_score;
    report(8, "mixture-size trend: m=16 mean best score >= m=1", ok,
           "m=1 " + format2(series[0].mean_best_score) + ", m=16 " +
               format2(series[1].mean_best_score));
  }

  // 9. Determinism: the same run twice produces byte-identical artifacts.
  std::size_t run9_trainable = 0;
  {
    ExperimentConfig cfg = base;
    cfg.method = Method::superpos;
    cfg.task = "parity";
    cfg.seed = 0;
    cfg.epochs = 5;
    cfg.out_dir = (work / "det_a").string();
    RunResult first = run_experiment(cfg);
    run9_trainable = first.trainable_count;
    cfg.out_dir = (work / "det_b").string();
    run_experiment(cfg);
    const std::string tag = "/parity_superpos_nodrop_s0";
    const bool csv_same = slurp((work / "det_a").string() + tag + ".csv") ==
                          slurp((work / "det_b").string() + tag + ".csv");
    const bool json_same = slurp((work / "det_a").string() + tag + ".json") ==
                           slurp((work / "det_b").string() + tag + ".json");
    report(9, "repeated run yields byte-identical learning-curve CSV and summary JSON",
           csv_same && json_same);
  }

  // 10. Parameter accounting: closed forms vs enumerated trainable tensors.
  {
    Backbone bb = Backbone::load(backbone_path);
    bb.freeze();
    const std::size_t e = bb.config().model_dim, n = 10, m = 128, b = 128;
    Rng r(1010);
    auto enumerated = [](const PromptParams& p) {
      std::size_t total = 0;
      for (const auto& t : trainable_tensors(p)) total += t->size();
      return total;
    };
    bool ok = true;
    {
      PromptParams p{init_simple(bb, n, r)};
      ok = ok && trainable_parameter_count(p) == e * n && enumerated(p) == e * n;
    }
    {
      PromptParams p{init_superpos(bb, n, m, r)};
      const std::size_t want = n * (e * m + m);
      ok = ok && trainable_parameter_count(p) == want && enumerated(p) == want;
      ok = ok && run9_trainable == want;  // the logged count from criterion 9
    }
    {
      PromptParams p{init_softmax_mixture(bb, n, m, r)};
      const std::size_t want = n * (e * m + m);
      ok = ok && trainable_parameter_count(p) == want && enumerated(p) == want;
    }
    {
      PromptParams p{init_residual(bb, n, b, r)};
      const std::size_t want = e * n + 2 * e * b + 2 * e;
      ok = ok && trainable_parameter_count(p) == want && enumerated(p) == want;
    }
    report(10, "trainable counts equal closed forms and tensor enumeration", ok);
  }

  std::cout << (failures == 0 ? "ALL CRITERIA PASSED" : "CRITERIA FAILED") << std::endl;
  return failures == 0 ? 0 : 1;
}
