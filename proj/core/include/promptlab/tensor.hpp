#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "promptlab/rng.hpp"

namespace promptlab {

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense f64 tensor, rank 1 or 2, row-major. Gradients live next to the data
// and accumulate additively; zeroing is always explicit.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until ensure_grad(); same length as data after
  bool requires_grad = false;
  int node_id = -1;  // tape position that produced this tensor, -1 for leaves
  std::string name;  // optional, used in diagnostics

  std::size_t size() const { return data.size(); }
  std::size_t rows() const { return shape[0]; }
  std::size_t cols() const { return shape.size() > 1 ? shape[1] : 1; }

  double& at(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
  double at(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
  void zero_grad() {
    if (!grad.empty()) grad.assign(grad.size(), 0.0);
  }

  static TensorPtr zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static TensorPtr full(std::vector<std::size_t> shape, double value, bool requires_grad = false);
  static TensorPtr from_vector(std::vector<double> values, bool requires_grad = false);
  static TensorPtr matrix(std::size_t r, std::size_t c, std::vector<double> values,
                          bool requires_grad = false);
  static TensorPtr gaussian(std::vector<std::size_t> shape, Rng& rng, double std_dev,
                            bool requires_grad = false);
};

bool same_shape(const Tensor& a, const Tensor& b);
std::string shape_string(const Tensor& t);

// Define-by-run tape. Recording an op appends a backward closure; backward()
// replays the closures in reverse. The tape owns a deterministic RNG used by
// stochastic ops (dropout) so a fixed seed reproduces runs bit-for-bit.
class Tape {
 public:
  explicit Tape(Rng rng = Rng(0)) : rng_(rng) {}

  TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);
  TensorPtr transpose(const TensorPtr& a);
  TensorPtr add(const TensorPtr& a, const TensorPtr& b);
  TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
  TensorPtr add_col_broadcast(const TensorPtr& m, const TensorPtr& v);  // v added to each column
  TensorPtr scale(const TensorPtr& a, double c);
  TensorPtr mul(const TensorPtr& a, const TensorPtr& b);  // elementwise
  TensorPtr relu(const TensorPtr& a);
  TensorPtr softmax_columns(const TensorPtr& a);  // rank-1 input treated as one column
  TensorPtr layer_norm(const TensorPtr& x, const TensorPtr& gain, const TensorPtr& bias,
                       double eps);  // rank-1; rank-2 normalizes each column
  TensorPtr dropout(const TensorPtr& x, double p, bool training);
  TensorPtr cross_entropy(const TensorPtr& logits, std::size_t target);
  TensorPtr sum(const TensorPtr& a);
  TensorPtr mean_columns(const TensorPtr& a);  // [p x q] -> [p]
  TensorPtr slice_rows(const TensorPtr& a, std::size_t r0, std::size_t r1);
  TensorPtr slice_cols(const TensorPtr& a, std::size_t c0, std::size_t c1);
  TensorPtr concat_cols(const TensorPtr& a, const TensorPtr& b);
  TensorPtr concat_cols_many(const std::vector<TensorPtr>& parts);  // single part passes through
  TensorPtr concat_rows(const std::vector<TensorPtr>& parts);
  TensorPtr stack_cols(const std::vector<TensorPtr>& columns);  // n vectors [p] -> [p x n]
  TensorPtr embed_tokens(const TensorPtr& table, std::span<const int> ids);  // [V x e] -> [e x l]

  // Scaled-dot-product attention over a column-concatenated batch: example i
  // occupies columns [offsets[i], offsets[i]+widths[i]) of q/k/v [e x total];
  // heads split the e rows evenly. Column j of each score matrix holds the
  // key scores for query j; softmax runs per column, then optional dropout on
  // the attention weights. Returns the per-head context rows re-stacked to
  // [e x total]. One tape node; the backward pass is hand-written.
  TensorPtr batched_attention(const TensorPtr& q, const TensorPtr& k, const TensorPtr& v,
                              const std::vector<std::size_t>& offsets,
                              const std::vector<std::size_t>& widths, std::size_t heads,
                              double dropout_p, bool training);

  // Seeds grad(loss) with 1 and runs every recorded closure in reverse order.
  void backward(const TensorPtr& loss);

  std::size_t num_nodes() const { return nodes_.size(); }
  Rng& rng() { return rng_; }

 private:
  TensorPtr make_output(std::vector<std::size_t> shape, bool requires_grad);
  void record(std::function<void()> backward_fn);

  std::vector<std::function<void()>> nodes_;
  Rng rng_;
};

void backpropagate(const TensorPtr& loss, Tape& tape);

// Central-difference gradient of a scalar-valued function; the testing oracle
// analytic gradients are checked against. Mutates and restores x.
std::vector<double> finite_difference_gradient(const std::function<double()>& f,
                                               Tensor& x, double epsilon = 1e-5);

double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                          double floor = 1e-8);

}  // namespace promptlab
