// SPDX-License-Identifier: Apache-2.0

#include <spafit/optim.hpp>

#include <spafit/autograd.hpp>

#include <cmath>

namespace spafit {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0))
    throw ConfigError("train config: learning_rate must be positive");
  if (batch_size == 0)
    throw ConfigError("train config: batch_size must be positive");
  if (epochs < 0)
    throw ConfigError("train config: epochs must be non-negative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("train config: betas must lie in [0, 1)");
  if (!(eps > 0.0))
    throw ConfigError("train config: eps must be positive");
  if (!(weight_decay >= 0.0))
    throw ConfigError("train config: weight_decay must be non-negative");
}

void adamw_update(std::span<double> w, std::span<const double> g,
                  std::span<double> m, std::span<double> v, std::uint64_t step,
                  const TrainConfig &cfg) {
  const double t = static_cast<double>(step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < w.size(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    const double m_hat = m[i] / c1;
    const double v_hat = v[i] / c2;
    w[i] -= cfg.learning_rate *
            (m_hat / (std::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * w[i]);
  }
}

void AdamW::update(const std::string &name, Tensor &t) {
  if (!t.has_grad())
    throw ContractError("adamw: trainable tensor '" + name + "' has no gradient");
  auto [it, fresh] = moments_.try_emplace(name);
  if (fresh) {
    it->second.m.assign(t.numel(), 0.0);
    it->second.v.assign(t.numel(), 0.0);
  }
  adamw_update(t.data(), t.grad(), it->second.m, it->second.v, step_, cfg_);
}

void AdamW::step(ParamStore &store) {
  ++step_;
  for (auto &[path, p] : store.params())
    if (is_trainable(p.status))
      update(path, p.value);
  for (auto &[target, pair] : store.lora()) {
    update(lora_a_name(target), pair.A);
    update(lora_b_name(target), pair.B);
  }
}

} // namespace spafit
