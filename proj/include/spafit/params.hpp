// SPDX-License-Identifier: Apache-2.0
//
// Model configuration, canonical parameter layout and the named parameter
// store shared by the model, plan, optimizer and checkpoint code.

#pragma once

#include <spafit/tensor.hpp>

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace spafit {

class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

struct ModelConfig {
  int num_layers = 4;
  int hidden = 32;
  int num_heads = 4;
  int ffn_size = 64;
  int vocab_size = 64;
  int max_positions = 32;
  int type_vocab = 2;
  /// Width of the task head; 1 selects a regression head.
  int num_labels = 2;
  int lora_rank = 8;
  int lora_alpha = 16;
  double dropout_p = 0.1;
  double layer_norm_eps = 1e-12;

  /// BERT-large-cased dimensions with r = 64, alpha = 128.
  static ModelConfig bert_large();

  /// Throws ConfigError on any violated invariant.
  void validate() const;
  double lora_scale() const {
    return static_cast<double>(lora_alpha) / static_cast<double>(lora_rank);
  }

  friend bool operator==(const ModelConfig &, const ModelConfig &) = default;
};

/// Fine-tune status of one parameter. `Trainable` marks parameters that are
/// updated in full (full fine-tuning, pooler and task head).
enum class ParamStatus : std::uint8_t {
  Frozen = 0,
  Trainable = 1,
  BiasTunable = 2,
  LoraAugmented = 3,
};

std::string_view to_string(ParamStatus s);
bool is_trainable(ParamStatus s);

/// Which part of the network a parameter belongs to.
enum class ParamRole { Embedding, Encoder, Pooler, Classifier };

struct ParamSpec {
  std::string path;
  Shape shape;
  ParamRole role;
  /// 1-based encoder layer index; 0 outside the encoder.
  int layer = 0;
  std::size_t numel() const { return shape_numel(shape); }
};

/// The sub-layer paths each encoder layer owns, relative to
/// `encoder.layer.<i>.`.
extern const std::vector<std::string_view> kEncoderLayerPaths;

std::string layer_prefix(int layer);

/// Every parameter of the model in canonical order, without allocating.
std::vector<ParamSpec> param_layout(const ModelConfig &config);

bool is_bias_path(std::string_view path);

/// Closed-form parameter counts.
std::uint64_t embedding_param_count(const ModelConfig &c);
std::uint64_t encoder_layer_param_count(const ModelConfig &c);
std::uint64_t pooler_param_count(const ModelConfig &c);
std::uint64_t classifier_param_count(const ModelConfig &c);
/// Embeddings + encoder + pooler, optionally with the classifier.
std::uint64_t model_param_count(const ModelConfig &c, bool include_classifier);

/// Low-rank update (alpha / r) * B * A attached to a frozen weight [out x in].
struct LoraPair {
  std::string target;
  Tensor B; ///< [out x r], zero at creation.
  Tensor A; ///< [r x in]
  int rank = 0;
  int alpha = 0;

  double scale() const {
    return static_cast<double>(alpha) / static_cast<double>(rank);
  }
};

std::string lora_a_name(std::string_view target);
std::string lora_b_name(std::string_view target);

struct Param {
  Tensor value;
  ParamStatus status = ParamStatus::Trainable;
};

class ParamStore {
public:
  ParamStore() = default;
  explicit ParamStore(ModelConfig config) : config_(std::move(config)) {}

  const ModelConfig &config() const { return config_; }

  void add(const std::string &path, Tensor value,
           ParamStatus status = ParamStatus::Trainable);
  bool contains(std::string_view path) const;
  Param &at(std::string_view path);
  const Param &at(std::string_view path) const;

  std::map<std::string, Param, std::less<>> &params() { return params_; }
  const std::map<std::string, Param, std::less<>> &params() const {
    return params_;
  }

  std::map<std::string, LoraPair, std::less<>> &lora() { return lora_; }
  const std::map<std::string, LoraPair, std::less<>> &lora() const {
    return lora_;
  }
  const LoraPair *find_lora(std::string_view target) const;

  /// Sum of tensor sizes over base parameters (LoRA factors excluded).
  std::uint64_t parameter_count() const;
  /// Zeroes the gradient slot of every trainable tensor and drops the others.
  void zero_grad();

  /// Bitwise equality of config, statuses, values and LoRA factors.
  bool identical(const ParamStore &other) const;

private:
  ModelConfig config_;
  std::map<std::string, Param, std::less<>> params_;
  std::map<std::string, LoraPair, std::less<>> lora_;
};

} // namespace spafit
