#include "promptlab/backbone.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "promptlab/optimizer.hpp"

namespace promptlab {

namespace {

using nlohmann::json;

constexpr int kCheckpointVersion = 1;

void hash_tensor(const Tensor& t, std::uint64_t& h) {
  h = fnv1a(t.name, h);
  for (auto d : t.shape) h = fnv1a(&d, sizeof(d), h);
  h = fnv1a(t.data.data(), t.data.size() * sizeof(double), h);
}

json tensor_to_json(const Tensor& t) {
  return json{{"shape", t.shape}, {"data", t.data}};
}

void tensor_from_json(const json& j, Tensor& t) {
  std::vector<std::size_t> shape = j.at("shape").get<std::vector<std::size_t>>();
  std::vector<double> data = j.at("data").get<std::vector<double>>();
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  if (data.size() != n) throw std::runtime_error("checkpoint: shape/data mismatch for " + t.name);
  t.shape = std::move(shape);
  t.data = std::move(data);
}

}  // namespace

void BackboneConfig::validate() const {
  if (vocab_size < static_cast<std::size_t>(kFirstContentToken) + 1)
    throw std::invalid_argument("BackboneConfig: vocab too small for reserved tokens");
  if (model_dim == 0 || num_heads == 0 || model_dim % num_heads != 0)
    throw std::invalid_argument("BackboneConfig: model_dim must be divisible by num_heads");
  if (num_layers == 0 || ffn_dim == 0 || max_seq_len == 0)
    throw std::invalid_argument("BackboneConfig: zero-sized dimension");
  if (dropout_p < 0.0 || dropout_p >= 1.0)
    throw std::invalid_argument("BackboneConfig: dropout_p must be in [0, 1)");
}

Backbone Backbone::init(const BackboneConfig& config) {
  config.validate();
  Backbone b;
  b.cfg_ = config;
  Rng rng(config.seed);
  const auto e = config.model_dim;
  const auto ffn = config.ffn_dim;

  auto gauss = [&](std::vector<std::size_t> shape, const std::string& name) {
    auto t = Tensor::gaussian(std::move(shape), rng, 0.02, true);
    t->name = name;
    return t;
  };
  auto ones = [&](std::size_t d, const std::string& name) {
    auto t = Tensor::full({d}, 1.0, true);
    t->name = name;
    return t;
  };
  auto zeros = [&](std::size_t d, const std::string& name) {
    auto t = Tensor::zeros({d}, true);
    t->name = name;
    return t;
  };

  b.embedding_ = gauss({config.vocab_size, e}, "embedding");
  b.position_ = gauss({config.max_seq_len, e}, "position");
  for (std::size_t l = 0; l < config.num_layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    EncoderLayerWeights lw;
    lw.wq = gauss({e, e}, pre + "wq");
    lw.wk = gauss({e, e}, pre + "wk");
    lw.wv = gauss({e, e}, pre + "wv");
    lw.wo = gauss({e, e}, pre + "wo");
    lw.ln1_gain = ones(e, pre + "ln1_gain");
    lw.ln1_bias = zeros(e, pre + "ln1_bias");
    lw.w1 = gauss({ffn, e}, pre + "w1");
    lw.b1 = gauss({ffn}, pre + "b1");
    lw.w2 = gauss({e, ffn}, pre + "w2");
    lw.b2 = gauss({e}, pre + "b2");
    lw.ln2_gain = ones(e, pre + "ln2_gain");
    lw.ln2_bias = zeros(e, pre + "ln2_bias");
    b.layers_.push_back(std::move(lw));
  }
  b.final_gain_ = ones(e, "final_gain");
  b.final_bias_ = zeros(e, "final_bias");
  return b;
}

std::vector<TensorPtr> Backbone::parameters() const {
  std::vector<TensorPtr> out{embedding_, position_};
  for (const auto& lw : layers_) {
    for (const auto& t : {lw.wq, lw.wk, lw.wv, lw.wo, lw.ln1_gain, lw.ln1_bias, lw.w1, lw.b1,
                          lw.w2, lw.b2, lw.ln2_gain, lw.ln2_bias})
      out.push_back(t);
  }
  out.push_back(final_gain_);
  out.push_back(final_bias_);
  return out;
}

std::size_t Backbone::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p->size();
  return n;
}

void Backbone::freeze() {
  for (const auto& p : parameters()) {
    p->requires_grad = false;
    p->grad.clear();
  }
  frozen_ = true;
}

void Backbone::set_trainable(bool trainable) {
  for (const auto& p : parameters()) {
    p->requires_grad = trainable;
    if (trainable) p->ensure_grad();
  }
  frozen_ = !trainable;
}

std::uint64_t Backbone::weights_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : parameters()) hash_tensor(*p, h);
  return h;
}

TensorPtr Backbone::embed(Tape& tape, const TokenSequence& seq) const {
  if (seq.token_ids.empty()) throw std::invalid_argument("embed: empty token sequence");
  return tape.embed_tokens(embedding_, seq.token_ids);
}

TensorPtr Backbone::run_encoder(Tape& tape, TensorPtr h, const BatchLayout& layout,
                                bool training) const {
  const bool use_dropout = training && dropout_enabled_ && cfg_.dropout_p > 0.0;
  constexpr double kLnEps = 1e-6;
  for (const auto& lw : layers_) {
    auto normed = tape.layer_norm(h, lw.ln1_gain, lw.ln1_bias, kLnEps);
    // Projections run over the whole batch; attention mixes within examples.
    auto q = tape.matmul(lw.wq, normed);
    auto k = tape.matmul(lw.wk, normed);
    auto v = tape.matmul(lw.wv, normed);
    auto mixed = tape.batched_attention(q, k, v, layout.offsets, layout.widths, cfg_.num_heads,
                                        use_dropout ? cfg_.dropout_p : 0.0, training);
    auto attn_out = tape.matmul(lw.wo, mixed);
    if (use_dropout) attn_out = tape.dropout(attn_out, cfg_.dropout_p, true);
    h = tape.add(h, attn_out);

    auto normed2 = tape.layer_norm(h, lw.ln2_gain, lw.ln2_bias, kLnEps);
    auto hidden = tape.relu(tape.add_col_broadcast(tape.matmul(lw.w1, normed2), lw.b1));
    if (use_dropout) hidden = tape.dropout(hidden, cfg_.dropout_p, true);
    auto ffn_out = tape.add_col_broadcast(tape.matmul(lw.w2, hidden), lw.b2);
    if (use_dropout) ffn_out = tape.dropout(ffn_out, cfg_.dropout_p, true);
    h = tape.add(h, ffn_out);
  }
  return tape.layer_norm(h, final_gain_, final_bias_, kLnEps);
}

TensorPtr Backbone::encode_with_prompt(Tape& tape, const TensorPtr& prompt, const TensorPtr& x,
                                       bool training) const {
  const auto e = cfg_.model_dim;
  if (x->shape.size() != 2 || x->shape[0] != e)
    throw std::invalid_argument("encode_with_prompt: input rows " + shape_string(*x) +
                                " do not match model_dim " + std::to_string(e));
  TensorPtr h = x;
  if (prompt && prompt->cols() > 0) {
    if (prompt->shape.size() != 2 || prompt->shape[0] != e)
      throw std::invalid_argument("encode_with_prompt: prompt rows " + shape_string(*prompt) +
                                  " do not match model_dim " + std::to_string(e));
    h = tape.concat_cols(prompt, x);
  }
  const std::size_t total = h->cols();
  if (total > cfg_.max_seq_len)
    throw std::invalid_argument("encode_with_prompt: sequence length " + std::to_string(total) +
                                " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));

  std::vector<int> positions(total);
  for (std::size_t i = 0; i < total; ++i) positions[i] = static_cast<int>(i);
  h = tape.add(h, tape.embed_tokens(position_, positions));

  return run_encoder(tape, std::move(h), BatchLayout{{0}, {total}}, training);
}

TensorPtr Backbone::encode_batch(Tape& tape, const TensorPtr& prompt,
                                 const std::vector<const TokenSequence*>& seqs, bool training,
                                 BatchLayout& layout) const {
  if (seqs.empty()) throw std::invalid_argument("encode_batch: empty batch");
  const auto e = cfg_.model_dim;
  if (prompt && prompt->cols() > 0 && (prompt->shape.size() != 2 || prompt->shape[0] != e))
    throw std::invalid_argument("encode_batch: prompt rows " + shape_string(*prompt) +
                                " do not match model_dim " + std::to_string(e));

  layout.offsets.clear();
  layout.widths.clear();
  std::vector<TensorPtr> pieces;
  pieces.reserve(seqs.size());
  std::vector<int> positions;
  std::size_t col = 0;
  for (const auto* seq : seqs) {
    auto x = tape.embed_tokens(embedding_, seq->token_ids);
    auto cat = (prompt && prompt->cols() > 0) ? tape.concat_cols(prompt, x) : x;
    const std::size_t w = cat->cols();
    if (w > cfg_.max_seq_len)
      throw std::invalid_argument("encode_batch: sequence length " + std::to_string(w) +
                                  " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
    layout.offsets.push_back(col);
    layout.widths.push_back(w);
    for (std::size_t i = 0; i < w; ++i) positions.push_back(static_cast<int>(i));
    col += w;
    pieces.push_back(std::move(cat));
  }

  TensorPtr h = tape.add(tape.concat_cols_many(pieces), tape.embed_tokens(position_, positions));
  return run_encoder(tape, std::move(h), layout, training);
}

TensorPtr Backbone::predict_label_distribution(Tape& tape, const TensorPtr& hidden) const {
  if (hidden->size() == 0) throw std::invalid_argument("predict_label_distribution: empty hidden");
  auto pooled = tape.mean_columns(hidden);
  return tape.matmul(embedding_, pooled);  // tied LM head
}

int Backbone::argmax_token(const Tensor& logits) {
  int best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i)
    if (logits.data[i] > logits.data[best]) best = static_cast<int>(i);
  return best;
}

PretrainReport Backbone::pretrain(const std::vector<TokenSequence>& corpus, std::size_t steps,
                                  double lr, std::uint64_t seed) {
  if (corpus.empty()) throw std::invalid_argument("pretrain: empty corpus");
  PretrainReport report;
  if (steps == 0) return report;
  if (frozen_) throw std::logic_error("pretrain: backbone is frozen");

  Rng rng = Rng(seed).split(0x70726574);  // pretraining stream
  AdamWConfig ocfg;
  ocfg.lr = lr;
  AdamW opt({ParamGroup{parameters(), lr, 0.0}}, ocfg);

  report.loss_curve.reserve(steps);
  std::size_t correct = 0, total = 0;
  const std::size_t acc_window_start = steps > 200 ? steps - 200 : 0;

  for (std::size_t step = 0; step < steps; ++step) {
    const auto& seq = corpus[rng.next_below(corpus.size())];
    std::vector<int> masked = seq.token_ids;
    std::vector<std::size_t> mask_positions;
    for (std::size_t i = 0; i < masked.size(); ++i)
      if (rng.next_bernoulli(0.15)) mask_positions.push_back(i);
    if (mask_positions.empty()) mask_positions.push_back(rng.next_below(masked.size()));
    for (auto i : mask_positions) masked[i] = kMaskToken;

    Tape tape(rng.split(step));
    auto x = tape.embed_tokens(embedding_, masked);
    auto hidden = encode_with_prompt(tape, nullptr, x, true);
    auto all_logits = tape.matmul(embedding_, hidden);  // [V x l]
    TensorPtr loss;
    for (auto i : mask_positions) {
      auto col = tape.slice_cols(all_logits, i, i + 1);
      auto ce = tape.cross_entropy(col, static_cast<std::size_t>(seq.token_ids[i]));
      loss = loss ? tape.add(loss, ce) : ce;
      if (step >= acc_window_start) {
        ++total;
        if (argmax_token(*col) == seq.token_ids[i]) ++correct;
      }
    }
    loss = tape.scale(loss, 1.0 / static_cast<double>(mask_positions.size()));

    // Sequences ending in <separator, label token> also train the pooled
    // prediction head on the label: the same pathway later used to read out
    // task answers, so label-token embeddings become reachable targets.
    const auto& ids = seq.token_ids;
    const std::size_t n = ids.size();
    if (n >= 3 && ids[n - 2] == kSeparatorToken && ids[n - 1] >= kFirstLabelToken &&
        ids[n - 1] < kFirstLabelToken + kNumLabelTokens) {
      std::vector<int> body(ids.begin(), ids.end() - 2);
      auto xb = tape.embed_tokens(embedding_, body);
      auto hb = encode_with_prompt(tape, nullptr, xb, true);
      auto pooled_ce = tape.cross_entropy(predict_label_distribution(tape, hb),
                                          static_cast<std::size_t>(ids[n - 1]));
      loss = tape.add(loss, pooled_ce);
    }
    opt.zero_grads();
    tape.backward(loss);
    opt.step();
    report.loss_curve.push_back(loss->data[0]);
  }
  report.final_masked_accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  return report;
}

void Backbone::save(const std::string& path) const {
  json j;
  j["version"] = kCheckpointVersion;
  j["config"] = {{"vocab_size", cfg_.vocab_size}, {"model_dim", cfg_.model_dim},
                 {"num_layers", cfg_.num_layers}, {"num_heads", cfg_.num_heads},
                 {"ffn_dim", cfg_.ffn_dim},       {"max_seq_len", cfg_.max_seq_len},
                 {"dropout_p", cfg_.dropout_p},   {"seed", cfg_.seed}};
  json weights = json::object();
  for (const auto& p : parameters()) weights[p->name] = tensor_to_json(*p);
  j["weights"] = std::move(weights);
  j["parameter_count"] = parameter_count();
  j["weights_hash"] = weights_hash();
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save: cannot open " + path);
  out << j.dump();
}

Backbone Backbone::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load: cannot open " + path);
  json j = json::parse(in);
  if (j.at("version").get<int>() != kCheckpointVersion)
    throw std::runtime_error("load: unsupported checkpoint version");
  const auto& jc = j.at("config");
  BackboneConfig cfg;
  cfg.vocab_size = jc.at("vocab_size").get<std::size_t>();
  cfg.model_dim = jc.at("model_dim").get<std::size_t>();
  cfg.num_layers = jc.at("num_layers").get<std::size_t>();
  cfg.num_heads = jc.at("num_heads").get<std::size_t>();
  cfg.ffn_dim = jc.at("ffn_dim").get<std::size_t>();
  cfg.max_seq_len = jc.at("max_seq_len").get<std::size_t>();
  cfg.dropout_p = jc.at("dropout_p").get<double>();
  cfg.seed = jc.at("seed").get<std::uint64_t>();
  Backbone b = init(cfg);
  const auto& weights = j.at("weights");
  for (const auto& p : b.parameters()) tensor_from_json(weights.at(p->name), *p);
  if (b.parameter_count() != j.at("parameter_count").get<std::size_t>())
    throw std::runtime_error("load: stored parameter count does not match weights");
  if (b.weights_hash() != j.at("weights_hash").get<std::uint64_t>())
    throw std::runtime_error("load: weights_hash mismatch, checkpoint corrupt");
  return b;
}

Backbone Backbone::clone() const {
  Backbone b = init(cfg_);
  auto src = parameters();
  auto dst = b.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i]->data = src[i]->data;
    dst[i]->requires_grad = src[i]->requires_grad;
  }
  b.dropout_enabled_ = dropout_enabled_;
  b.frozen_ = frozen_;
  return b;
}

}  // namespace promptlab
