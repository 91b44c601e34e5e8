// SPDX-License-Identifier: Apache-2.0
//
// AdamW with decoupled weight decay, restricted to trainable tensors.

#pragma once

#include <spafit/params.hpp>

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace spafit {

struct TrainConfig {
  double learning_rate = 6e-5;
  std::size_t batch_size = 16;
  int epochs = 10;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;

  /// Learning rate grid explored for both full and parameter-efficient runs.
  static constexpr double kLearningRateGrid[] = {2e-3, 6e-3, 2e-5, 6e-5};
  static constexpr double kFullFineTuneLr = 2e-5;
  static constexpr double kPeftLr = 6e-5;

  /// Throws ConfigError. Zero epochs is accepted and means "evaluate only".
  void validate() const;
};

/// One AdamW update of a single tensor; exposed for unit checks.
///   m <- b1 m + (1 - b1) g;   v <- b2 v + (1 - b2) g^2
///   w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + wd * w)
void adamw_update(std::span<double> w, std::span<const double> g,
                  std::span<double> m, std::span<double> v, std::uint64_t step,
                  const TrainConfig &cfg);

class AdamW {
public:
  explicit AdamW(TrainConfig cfg) : cfg_(cfg) { cfg_.validate(); }

  /// Updates every trainable tensor of `store` (Trainable and BiasTunable
  /// parameters plus LoRA factors) from its grad slot. Frozen and
  /// LoRA-augmented base tensors are never touched, even if a gradient is
  /// present. Throws ContractError if a trainable tensor has no gradient.
  void step(ParamStore &store);

  std::uint64_t steps() const { return step_; }
  const TrainConfig &config() const { return cfg_; }
  /// Number of tensors carrying moment estimates.
  std::size_t state_size() const { return moments_.size(); }
  bool has_state(const std::string &name) const { return moments_.contains(name); }

private:
  struct Moments {
    std::vector<double> m, v;
  };
  void update(const std::string &name, Tensor &t);

  TrainConfig cfg_;
  std::uint64_t step_ = 0;
  std::map<std::string, Moments> moments_;
};

} // namespace spafit
