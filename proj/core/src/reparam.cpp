#include "promptlab/reparam.hpp"

#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace promptlab {

namespace {

constexpr double kResidualNormEps = 1e-6;

// Copies embedding-table rows into the columns of a fresh [e x count] tensor.
TensorPtr rows_as_columns(const Backbone& backbone, const std::vector<int>& ids,
                          const std::string& name) {
  const auto& table = backbone.embedding_table();
  const std::size_t e = backbone.config().model_dim;
  auto t = Tensor::zeros({e, ids.size()}, true);
  t->name = name;
  for (std::size_t j = 0; j < ids.size(); ++j)
    for (std::size_t i = 0; i < e; ++i)
      t->data[i * ids.size() + j] = table->data[static_cast<std::size_t>(ids[j]) * e + i];
  return t;
}

}  // namespace

std::vector<int> sample_unique_embeddings(const Backbone& backbone, std::size_t count, Rng& rng) {
  const std::size_t v = backbone.config().vocab_size;
  const std::size_t pool = v - static_cast<std::size_t>(kFirstContentToken);
  if (count > pool)
    throw std::invalid_argument("sample_unique_embeddings: requested " + std::to_string(count) +
                                " from a pool of " + std::to_string(pool));
  std::vector<int> ids(pool);
  std::iota(ids.begin(), ids.end(), kFirstContentToken);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + rng.next_below(pool - i);
    std::swap(ids[i], ids[j]);
  }
  ids.resize(count);
  return ids;
}

SimplePromptParams init_simple(const Backbone& backbone, std::size_t n, Rng& rng) {
  SimplePromptParams p;
  p.sampled_tokens = sample_unique_embeddings(backbone, n, rng);
  p.p_raw = rows_as_columns(backbone, p.sampled_tokens, "prompt.p_raw");
  return p;
}

SuperPosParams init_superpos(const Backbone& backbone, std::size_t n, std::size_t m, Rng& rng,
                             CoefInit coef_init, bool shared_e) {
  if (n == 0 || m == 0) throw std::invalid_argument("init_superpos: n and m must be positive");
  SuperPosParams p;
  p.m = m;
  p.shared_e = shared_e;
  p.sampled_tokens = sample_unique_embeddings(backbone, m, rng);
  const std::size_t e_count = shared_e ? 1 : n;
  for (std::size_t i = 0; i < e_count; ++i)
    p.embeddings.push_back(
        rows_as_columns(backbone, p.sampled_tokens, "prompt.E" + std::to_string(i)));
  for (std::size_t i = 0; i < n; ++i) {
    auto coef = Tensor::zeros({m}, true);
    coef->name = "prompt.coef" + std::to_string(i);
    if (coef_init == CoefInit::one_hot)
      coef->data[i % m] = 1.0;
    else
      std::fill(coef->data.begin(), coef->data.end(), 1.0 / static_cast<double>(m));
    p.coefficients.push_back(std::move(coef));
  }
  return p;
}

SoftmaxMixtureParams init_softmax_mixture(const Backbone& backbone, std::size_t n, std::size_t m,
                                          Rng& rng, CoefInit coef_init, bool shared_e) {
  return SoftmaxMixtureParams{init_superpos(backbone, n, m, rng, coef_init, shared_e)};
}

ResidualPromptParams init_residual(const Backbone& backbone, std::size_t n, std::size_t bottleneck,
                                   Rng& rng) {
  if (n == 0 || bottleneck == 0)
    throw std::invalid_argument("init_residual: n and bottleneck must be positive");
  ResidualPromptParams p;
  p.bottleneck = bottleneck;
  p.sampled_tokens = sample_unique_embeddings(backbone, n, rng);
  p.p_raw = rows_as_columns(backbone, p.sampled_tokens, "prompt.p_raw");
  const std::size_t e = backbone.config().model_dim;
  p.down_proj = Tensor::gaussian({bottleneck, e}, rng, 0.02, true);
  p.down_proj->name = "prompt.down_proj";
  p.up_proj = Tensor::gaussian({e, bottleneck}, rng, 0.02, true);
  p.up_proj->name = "prompt.up_proj";
  p.norm_gain = Tensor::full({e}, 1.0, true);
  p.norm_gain->name = "prompt.norm_gain";
  p.norm_bias = Tensor::zeros({e}, true);
  p.norm_bias->name = "prompt.norm_bias";
  return p;
}

TensorPtr materialize_superpos(Tape& tape, const SuperPosParams& params) {
  std::vector<TensorPtr> cols;
  cols.reserve(params.coefficients.size());
  for (std::size_t i = 0; i < params.coefficients.size(); ++i) {
    const auto& e = params.embeddings[params.shared_e ? 0 : i];
    cols.push_back(tape.matmul(e, params.coefficients[i]));
  }
  return tape.stack_cols(cols);
}

TensorPtr materialize_softmax(Tape& tape, const SoftmaxMixtureParams& params) {
  const auto& inner = params.inner;
  std::vector<TensorPtr> cols;
  cols.reserve(inner.coefficients.size());
  for (std::size_t i = 0; i < inner.coefficients.size(); ++i) {
    const auto& e = inner.embeddings[inner.shared_e ? 0 : i];
    cols.push_back(tape.matmul(e, tape.softmax_columns(inner.coefficients[i])));
  }
  return tape.stack_cols(cols);
}

TensorPtr materialize_residual(Tape& tape, const ResidualPromptParams& params) {
  auto hidden = tape.relu(tape.matmul(params.down_proj, params.p_raw));
  auto up = tape.matmul(params.up_proj, hidden);
  auto normed = tape.layer_norm(up, params.norm_gain, params.norm_bias, kResidualNormEps);
  return tape.add(normed, params.p_raw);
}

TensorPtr materialize(Tape& tape, const PromptParams& params) {
  return std::visit(
      [&tape](const auto& p) -> TensorPtr {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, SimplePromptParams>)
          return p.p_raw;
        else if constexpr (std::is_same_v<T, SuperPosParams>)
          return materialize_superpos(tape, p);
        else if constexpr (std::is_same_v<T, SoftmaxMixtureParams>)
          return materialize_softmax(tape, p);
        else
          return materialize_residual(tape, p);
      },
      params);
}

std::vector<DecayGroup> param_groups(const PromptParams& params) {
  return std::visit(
      [](const auto& p) -> std::vector<DecayGroup> {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, SimplePromptParams>) {
          return {DecayGroup{{p.p_raw}, true}};
        } else if constexpr (std::is_same_v<T, SuperPosParams>) {
          return {DecayGroup{p.embeddings, false}, DecayGroup{p.coefficients, true}};
        } else if constexpr (std::is_same_v<T, SoftmaxMixtureParams>) {
          return {DecayGroup{p.inner.embeddings, false}, DecayGroup{p.inner.coefficients, true}};
        } else {
          return {DecayGroup{{p.p_raw, p.down_proj, p.up_proj, p.norm_gain, p.norm_bias}, true}};
        }
      },
      params);
}

namespace {

using nlohmann::json;

json tensor_json(const TensorPtr& t) {
  return json{{"name", t->name}, {"shape", t->shape}, {"data", t->data}};
}

TensorPtr tensor_from(const json& j) {
  auto t = Tensor::zeros(j.at("shape").get<std::vector<std::size_t>>(), true);
  t->data = j.at("data").get<std::vector<double>>();
  t->name = j.at("name").get<std::string>();
  if (t->data.size() != t->grad.size())
    throw std::runtime_error("prompt checkpoint: shape/data mismatch");
  return t;
}

}  // namespace

void save_prompt_params(const PromptParams& params, const std::string& path) {
  json j;
  std::visit(
      [&j](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, SimplePromptParams>) {
          j["method"] = "simple";
          j["sampled_tokens"] = p.sampled_tokens;
          j["tensors"] = json::array({tensor_json(p.p_raw)});
        } else if constexpr (std::is_same_v<T, SuperPosParams> ||
                             std::is_same_v<T, SoftmaxMixtureParams>) {
          const SuperPosParams* sp;
          if constexpr (std::is_same_v<T, SoftmaxMixtureParams>) {
            j["method"] = "softmax_mixture";
            sp = &p.inner;
          } else {
            j["method"] = "superpos";
            sp = &p;
          }
          j["m"] = sp->m;
          j["shared_e"] = sp->shared_e;
          j["sampled_tokens"] = sp->sampled_tokens;
          json tensors = json::array();
          for (const auto& t : sp->embeddings) tensors.push_back(tensor_json(t));
          for (const auto& t : sp->coefficients) tensors.push_back(tensor_json(t));
          j["tensors"] = std::move(tensors);
        } else {
          j["method"] = "residual";
          j["bottleneck"] = p.bottleneck;
          j["sampled_tokens"] = p.sampled_tokens;
          j["tensors"] = json::array({tensor_json(p.p_raw), tensor_json(p.down_proj),
                                      tensor_json(p.up_proj), tensor_json(p.norm_gain),
                                      tensor_json(p.norm_bias)});
        }
      },
      params);
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_prompt_params: cannot open " + path);
  out << j.dump();
}

PromptParams load_prompt_params(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_prompt_params: cannot open " + path);
  json j = json::parse(in);
  const std::string method = j.at("method").get<std::string>();
  const auto& tensors = j.at("tensors");
  if (method == "simple") {
    SimplePromptParams p;
    p.sampled_tokens = j.at("sampled_tokens").get<std::vector<int>>();
    p.p_raw = tensor_from(tensors.at(0));
    return p;
  }
  if (method == "superpos" || method == "softmax_mixture") {
    SuperPosParams p;
    p.m = j.at("m").get<std::size_t>();
    p.shared_e = j.at("shared_e").get<bool>();
    p.sampled_tokens = j.at("sampled_tokens").get<std::vector<int>>();
    std::vector<TensorPtr> all;
    for (const auto& t : tensors) all.push_back(tensor_from(t));
    const std::size_t e_count = p.shared_e ? 1 : (all.size() / 2);
    for (std::size_t i = 0; i < e_count; ++i) p.embeddings.push_back(all[i]);
    for (std::size_t i = e_count; i < all.size(); ++i) p.coefficients.push_back(all[i]);
    if (method == "softmax_mixture") return SoftmaxMixtureParams{std::move(p)};
    return p;
  }
  if (method == "residual") {
    ResidualPromptParams p;
    p.bottleneck = j.at("bottleneck").get<std::size_t>();
    p.sampled_tokens = j.at("sampled_tokens").get<std::vector<int>>();
    p.p_raw = tensor_from(tensors.at(0));
    p.down_proj = tensor_from(tensors.at(1));
    p.up_proj = tensor_from(tensors.at(2));
    p.norm_gain = tensor_from(tensors.at(3));
    p.norm_bias = tensor_from(tensors.at(4));
    return p;
  }
  throw std::runtime_error("load_prompt_params: unknown method tag '" + method + "'");
}

std::vector<TensorPtr> trainable_tensors(const PromptParams& params) {
  std::vector<TensorPtr> out;
  for (const auto& g : param_groups(params))
    out.insert(out.end(), g.tensors.begin(), g.tensors.end());
  return out;
}

std::size_t trainable_parameter_count(const PromptParams& params) {
  std::size_t n = 0;
  for (const auto& t : trainable_tensors(params)) n += t->size();
  return n;
}

std::size_t prompt_length(const PromptParams& params) {
  return std::visit(
      [](const auto& p) -> std::size_t {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, SimplePromptParams>)
          return p.p_raw->cols();
        else if constexpr (std::is_same_v<T, SuperPosParams>)
          return p.coefficients.size();
        else if constexpr (std::is_same_v<T, SoftmaxMixtureParams>)
          return p.inner.coefficients.size();
        else
          return p.p_raw->cols();
      },
      params);
}

}  // namespace promptlab
