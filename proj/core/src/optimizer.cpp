#include "promptlab/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace promptlab {

void AdamWConfig::validate() const {
  if (lr <= 0.0) throw std::invalid_argument("AdamWConfig: lr must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw std::invalid_argument("AdamWConfig: betas must be in [0, 1)");
  if (eps <= 0.0) throw std::invalid_argument("AdamWConfig: eps must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("AdamWConfig: weight_decay must be >= 0");
}

AdamW::AdamW(std::vector<ParamGroup> groups, AdamWConfig config)
    : groups_(std::move(groups)), cfg_(config) {
  cfg_.validate();
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));

  double clip_scale = 1.0;
  if (cfg_.max_grad_norm > 0.0) {
    double sq = 0.0;
    for (const auto& g : groups_)
      for (const auto& p : g.params)
        for (double gv : p->grad) sq += gv * gv;
    const double norm = std::sqrt(sq);
    if (norm > cfg_.max_grad_norm) clip_scale = cfg_.max_grad_norm / norm;
  }

  for (const auto& group : groups_) {
    for (const auto& p : group.params) {
      auto& mom = state_[p.get()];
      if (mom.m.size() != p->size()) {
        mom.m.assign(p->size(), 0.0);
        mom.v.assign(p->size(), 0.0);
      }
      const bool has_grad = p->grad.size() == p->size();
      for (std::size_t i = 0; i < p->size(); ++i) {
        const double g = (has_grad ? p->grad[i] : 0.0) * clip_scale;
        if (std::isnan(g))
          throw std::runtime_error("AdamW: NaN gradient in tensor '" +
                                   (p->name.empty() ? std::string("<unnamed>") : p->name) + "'");
        mom.m[i] = cfg_.beta1 * mom.m[i] + (1.0 - cfg_.beta1) * g;
        mom.v[i] = cfg_.beta2 * mom.v[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = mom.m[i] / bc1;
        const double vhat = mom.v[i] / bc2;
        const double theta = p->data[i];
        double next = theta - group.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        // Decoupled decay, skipped entirely for zero-decay groups.
        if (group.weight_decay > 0.0) next -= group.lr * group.weight_decay * theta;
        p->data[i] = next;
      }
    }
  }
}

void AdamW::zero_grads() {
  for (const auto& group : groups_)
    for (const auto& p : group.params) p->zero_grad();
}

void zero_grads(const std::vector<TensorPtr>& tensors) {
  for (const auto& t : tensors) t->zero_grad();
}

}  // namespace promptlab
