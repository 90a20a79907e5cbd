#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "promptlab/tensor.hpp"

namespace promptlab {

// Reserved vocabulary layout. Ids below kFirstContentToken never appear as
// ordinary content; tasks draw their label tokens from the reserved block.
inline constexpr int kMaskToken = 0;
inline constexpr int kSeparatorToken = 1;
inline constexpr int kFirstLabelToken = 2;   // 2..14 usable as label tokens
inline constexpr int kNumLabelTokens = 13;
inline constexpr int kFirstContentToken = 16;

struct BackboneConfig {
  std::size_t vocab_size = 512;
  std::size_t model_dim = 64;
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t max_seq_len = 64;
  double dropout_p = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EncoderLayerWeights {
  TensorPtr wq, wk, wv, wo;      // [e x e]
  TensorPtr ln1_gain, ln1_bias;  // [e]
  TensorPtr w1, b1;              // [ffn x e], [ffn]
  TensorPtr w2, b2;              // [e x ffn]
  TensorPtr ln2_gain, ln2_bias;  // [e]
};

struct TokenSequence {
  std::vector<int> token_ids;
};

struct PretrainReport {
  std::vector<double> loss_curve;
  double final_masked_accuracy = 0.0;
};

// Transformer encoder with a weight-tied LM head. Starts trainable; freeze()
// pins every weight and records a content hash that prompt tuning must not
// change.
class Backbone {
 public:
  static Backbone init(const BackboneConfig& config);

  const BackboneConfig& config() const { return cfg_; }
  const TensorPtr& embedding_table() const { return embedding_; }
  const TensorPtr& position_table() const { return position_; }
  const std::vector<EncoderLayerWeights>& layers() const { return layers_; }

  std::vector<TensorPtr> parameters() const;
  std::size_t parameter_count() const;

  void freeze();
  bool frozen() const { return frozen_; }
  void set_trainable(bool trainable);  // full fine-tuning path
  void set_dropout(bool enabled) { dropout_enabled_ = enabled; }
  bool dropout_enabled() const { return dropout_enabled_; }

  std::uint64_t weights_hash() const;

  // Column i of the result is the embedding-table row for token i.
  TensorPtr embed(Tape& tape, const TokenSequence& seq) const;

  // Runs the encoder stack over [P|X]; P may be null for a plain encoding.
  TensorPtr encode_with_prompt(Tape& tape, const TensorPtr& prompt, const TensorPtr& x,
                               bool training) const;

  // Column layout of a batch matrix: example i occupies columns
  // [offsets[i], offsets[i] + widths[i]).
  struct BatchLayout {
    std::vector<std::size_t> offsets, widths;
  };

  // Encodes a whole minibatch as one column-concatenated matrix so the
  // column-local work (projections, FFN, layer norms) runs as wide matmuls;
  // attention still mixes columns within each example only. With dropout off
  // this produces bit-identical columns to per-example encoding.
  TensorPtr encode_batch(Tape& tape, const TensorPtr& prompt,
                         const std::vector<const TokenSequence*>& seqs, bool training,
                         BatchLayout& layout) const;

  // Mean-pools hidden columns and applies the tied LM head; logits over V.
  TensorPtr predict_label_distribution(Tape& tape, const TensorPtr& hidden) const;

  // Argmax over the full vocabulary; ties break toward the lowest token id.
  static int argmax_token(const Tensor& logits);

  PretrainReport pretrain(const std::vector<TokenSequence>& corpus, std::size_t steps,
                          double lr, std::uint64_t seed);

  void save(const std::string& path) const;
  static Backbone load(const std::string& path);

  // Deep copy: fresh tensors with the same values. Lets sweeps reuse one
  // loaded checkpoint while keeping full fine-tuning runs isolated.
  Backbone clone() const;

 private:
  // Shared encoder stack; h is the position-augmented input [e x total].
  TensorPtr run_encoder(Tape& tape, TensorPtr h, const BatchLayout& layout, bool training) const;

  BackboneConfig cfg_;
  TensorPtr embedding_;  // [V x e]
  TensorPtr position_;   // [max_seq_len x e]
  std::vector<EncoderLayerWeights> layers_;
  TensorPtr final_gain_, final_bias_;
  bool dropout_enabled_ = true;
  bool frozen_ = false;
};

}  // namespace promptlab
