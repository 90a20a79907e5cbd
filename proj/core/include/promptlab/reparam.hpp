#pragma once

#include <variant>
#include <vector>

#include "promptlab/backbone.hpp"
#include "promptlab/tensor.hpp"

namespace promptlab {

enum class CoefInit { one_hot, uniform };

struct SimplePromptParams {
  TensorPtr p_raw;  // [e x n]
  std::vector<int> sampled_tokens;
};

// Superposition state: per prompt token, a matrix of m sampled embeddings and
// a coefficient vector. All E_i start as copies of the same sampled columns.
struct SuperPosParams {
  std::vector<TensorPtr> embeddings;    // n tensors [e x m] (one when shared_e)
  std::vector<TensorPtr> coefficients;  // n tensors [m]
  std::size_t m = 0;
  bool shared_e = false;
  std::vector<int> sampled_tokens;
};

struct SoftmaxMixtureParams {
  SuperPosParams inner;
};

struct ResidualPromptParams {
  TensorPtr p_raw;               // [e x n]
  TensorPtr down_proj;           // [b x e]
  TensorPtr up_proj;             // [e x b]
  TensorPtr norm_gain, norm_bias;  // [e]
  std::size_t bottleneck = 0;
  std::vector<int> sampled_tokens;
};

using PromptParams =
    std::variant<SimplePromptParams, SuperPosParams, SoftmaxMixtureParams, ResidualPromptParams>;

// Draws count distinct non-reserved vocabulary ids (seeded Fisher-Yates).
std::vector<int> sample_unique_embeddings(const Backbone& backbone, std::size_t count, Rng& rng);

SimplePromptParams init_simple(const Backbone& backbone, std::size_t n, Rng& rng);
SuperPosParams init_superpos(const Backbone& backbone, std::size_t n, std::size_t m, Rng& rng,
                             CoefInit coef_init = CoefInit::one_hot, bool shared_e = false);
SoftmaxMixtureParams init_softmax_mixture(const Backbone& backbone, std::size_t n, std::size_t m,
                                          Rng& rng, CoefInit coef_init = CoefInit::one_hot,
                                          bool shared_e = false);
ResidualPromptParams init_residual(const Backbone& backbone, std::size_t n, std::size_t bottleneck,
                                   Rng& rng);

TensorPtr materialize_superpos(Tape& tape, const SuperPosParams& params);
TensorPtr materialize_softmax(Tape& tape, const SoftmaxMixtureParams& params);
TensorPtr materialize_residual(Tape& tape, const ResidualPromptParams& params);
TensorPtr materialize(Tape& tape, const PromptParams& params);

// Trainable tensors split by whether decoupled weight decay applies.
struct DecayGroup {
  std::vector<TensorPtr> tensors;
  bool decay;
};
std::vector<DecayGroup> param_groups(const PromptParams& params);

// Prompt checkpoint: method tag, shapes, arrays, and the sampled vocabulary
// indices used at init.
void save_prompt_params(const PromptParams& params, const std::string& path);
PromptParams load_prompt_params(const std::string& path);

std::vector<TensorPtr> trainable_tensors(const PromptParams& params);
std::size_t trainable_parameter_count(const PromptParams& params);
std::size_t prompt_length(const PromptParams& params);

}  // namespace promptlab
