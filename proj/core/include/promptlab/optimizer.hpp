#pragma once

#include <unordered_map>
#include <vector>

#include "promptlab/tensor.hpp"

namespace promptlab {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double max_grad_norm = 0.0;  // 0 disables clipping

  void validate() const;
};

struct ParamGroup {
  std::vector<TensorPtr> params;
  double lr;
  double weight_decay;
};

// AdamW with decoupled weight decay, applied per group so that superposition
// matrices can sit in a zero-decay group while their coefficients decay.
class AdamW {
 public:
  explicit AdamW(std::vector<ParamGroup> groups, AdamWConfig config = {});

  // One update from current grads; missing grads are treated as zero.
  void step();

  void zero_grads();

  std::size_t step_count() const { return t_; }
  const std::vector<ParamGroup>& groups() const { return groups_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  std::vector<ParamGroup> groups_;
  AdamWConfig cfg_;
  std::unordered_map<Tensor*, Moments> state_;
  std::size_t t_ = 0;
};

void zero_grads(const std::vector<TensorPtr>& tensors);

}  // namespace promptlab
