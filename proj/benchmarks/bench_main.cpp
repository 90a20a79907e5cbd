// Microbenchmarks for the hot paths: matmul kernels, fused attention, the
// full encoder, prompt materialization and a complete training step.

#include <benchmark/benchmark.h>

#include <vector>

#include "promptlab/harness.hpp"
#include "promptlab/optimizer.hpp"

namespace {

using namespace promptlab;

TensorPtr random_matrix(std::size_t r, std::size_t c, Rng& rng, bool grad = false) {
  return Tensor::gaussian({r, c}, rng, 0.5, grad);
}

void BM_MatmulForward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  auto a = random_matrix(n, n, rng);
  auto b = random_matrix(n, n, rng);
  for (auto _ : state) {
    Tape tape;
    benchmark::DoNotOptimize(tape.matmul(a, b));
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_MatmulForward)->Arg(64)->Arg(128)->Arg(256);

void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  auto a = random_matrix(n, n, rng, true);
  auto b = random_matrix(n, n, rng, true);
  for (auto _ : state) {
    a->zero_grad();
    b->zero_grad();
    Tape tape;
    tape.backward(tape.sum(tape.matmul(a, b)));
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(3 * n * n * n));
}
BENCHMARK(BM_MatmulBackward)->Arg(64)->Arg(128);

void BM_BatchedAttention(benchmark::State& state) {
  const std::size_t batch = static_cast<std::size_t>(state.range(0));
  const std::size_t e = 64, width = 24;
  Rng rng(2);
  std::vector<std::size_t> offsets, widths;
  for (std::size_t i = 0; i < batch; ++i) {
    offsets.push_back(i * width);
    widths.push_back(width);
  }
  auto q = random_matrix(e, batch * width, rng, true);
  auto k = random_matrix(e, batch * width, rng, true);
  auto v = random_matrix(e, batch * width, rng, true);
  for (auto _ : state) {
    q->zero_grad();
    k->zero_grad();
    v->zero_grad();
    Tape tape;
    tape.backward(tape.sum(tape.batched_attention(q, k, v, offsets, widths, 4, 0.0, false)));
  }
}
BENCHMARK(BM_BatchedAttention)->Arg(1)->Arg(8)->Arg(32);

Backbone bench_backbone() {
  BackboneConfig bc;  // library defaults: the experiment-scale encoder
  Backbone b = Backbone::init(bc);
  b.freeze();
  b.set_dropout(false);
  return b;
}

std::vector<TokenSequence> bench_batch(std::size_t batch, std::size_t len) {
  std::vector<TokenSequence> seqs(batch);
  Rng rng(3);
  for (auto& s : seqs)
    for (std::size_t i = 0; i < len; ++i)
      s.token_ids.push_back(kFirstContentToken +
                            static_cast<int>(rng.next_below(512 - kFirstContentToken)));
  return seqs;
}

void BM_EncodeBatchForward(benchmark::State& state) {
  const auto batch = static_cast<std::size_t>(state.range(0));
  Backbone bb = bench_backbone();
  auto seqs = bench_batch(batch, 12);
  std::vector<const TokenSequence*> ptrs;
  for (const auto& s : seqs) ptrs.push_back(&s);
  for (auto _ : state) {
    Tape tape;
    Backbone::BatchLayout layout;
    benchmark::DoNotOptimize(bb.encode_batch(tape, nullptr, ptrs, false, layout));
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(batch));
}
BENCHMARK(BM_EncodeBatchForward)->Arg(1)->Arg(8)->Arg(32);

void BM_MaterializeSuperpos(benchmark::State& state) {
  Backbone bb = bench_backbone();
  Rng rng(4);
  SuperPosParams p = init_superpos(bb, 10, static_cast<std::size_t>(state.range(0)), rng);
  for (auto _ : state) {
    Tape tape;
    benchmark::DoNotOptimize(materialize_superpos(tape, p));
  }
}
BENCHMARK(BM_MaterializeSuperpos)->Arg(16)->Arg(128);

void BM_TrainingStep(benchmark::State& state) {
  Backbone bb = bench_backbone();
  Rng rng(5);
  PromptParams params{init_superpos(bb, 10, 128, rng)};
  std::vector<ParamGroup> groups;
  for (const auto& g : param_groups(params))
    groups.push_back({g.tensors, 0.01, g.decay ? 1e-5 : 0.0});
  AdamWConfig ocfg;
  ocfg.lr = 0.01;
  AdamW opt(groups, ocfg);
  auto seqs = bench_batch(32, 12);
  std::vector<const TokenSequence*> ptrs;
  for (const auto& s : seqs) ptrs.push_back(&s);
  for (auto _ : state) {
    opt.zero_grads();
    Tape tape;
    TensorPtr p = materialize(tape, params);
    Backbone::BatchLayout layout;
    auto hidden = bb.encode_batch(tape, p, ptrs, true, layout);
    TensorPtr loss;
    for (std::size_t i = 0; i < ptrs.size(); ++i) {
      auto cols = tape.slice_cols(hidden, layout.offsets[i], layout.offsets[i] + layout.widths[i]);
      auto ce = tape.cross_entropy(bb.predict_label_distribution(tape, cols),
                                   static_cast<std::size_t>(kFirstLabelToken + (i % 2)));
      loss = loss ? tape.add(loss, ce) : ce;
    }
    tape.backward(tape.scale(loss, 1.0 / static_cast<double>(ptrs.size())));
    opt.step();
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations()) * 32);
}
BENCHMARK(BM_TrainingStep);

}  // namespace

BENCHMARK_MAIN();
