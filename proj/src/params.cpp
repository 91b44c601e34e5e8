// SPDX-License-Identifier: Apache-2.0

#include <spafit/params.hpp>

#include <algorithm>

namespace spafit {

ModelConfig ModelConfig::bert_large() {
  ModelConfig c;
  c.num_layers = 24;
  c.hidden = 1024;
  c.num_heads = 16;
  c.ffn_size = 4096;
  c.vocab_size = 28996;
  c.max_positions = 512;
  c.type_vocab = 2;
  c.num_labels = 2;
  c.lora_rank = 64;
  c.lora_alpha = 128;
  c.dropout_p = 0.1;
  return c;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string &m) { throw ConfigError("model config: " + m); };
  if (num_layers < 0)
    fail("num_layers must be non-negative");
  if (hidden <= 0 || num_heads <= 0 || ffn_size <= 0 || vocab_size <= 0 ||
      max_positions <= 0 || type_vocab <= 0 || num_labels <= 0 ||
      lora_rank <= 0 || lora_alpha <= 0)
    fail("dimensions, rank and alpha must be positive");
  if (hidden % num_heads != 0)
    fail("hidden (" + std::to_string(hidden) + ") not divisible by num_heads (" +
         std::to_string(num_heads) + ")");
  if (lora_rank > std::min(hidden, ffn_size))
    fail("lora_rank exceeds min(hidden, ffn_size)");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0))
    fail("dropout_p must lie in [0, 1)");
  if (!(layer_norm_eps > 0.0))
    fail("layer_norm_eps must be positive");
}

std::string_view to_string(ParamStatus s) {
  switch (s) {
  case ParamStatus::Frozen:
    return "frozen";
  case ParamStatus::Trainable:
    return "trainable";
  case ParamStatus::BiasTunable:
    return "bias-tunable";
  case ParamStatus::LoraAugmented:
    return "lora";
  }
  return "?";
}

bool is_trainable(ParamStatus s) {
  return s == ParamStatus::Trainable || s == ParamStatus::BiasTunable;
}

const std::vector<std::string_view> kEncoderLayerPaths = {
    "attention.self.query.weight",
    "attention.self.query.bias",
    "attention.self.key.weight",
    "attention.self.key.bias",
    "attention.self.value.weight",
    "attention.self.value.bias",
    "attention.output.dense.weight",
    "attention.output.dense.bias",
    "attention.output.LayerNorm.weight",
    "attention.output.LayerNorm.bias",
    "intermediate.dense.weight",
    "intermediate.dense.bias",
    "output.dense.weight",
    "output.dense.bias",
    "output.LayerNorm.weight",
    "output.LayerNorm.bias",
};

std::string layer_prefix(int layer) {
  return "encoder.layer." + std::to_string(layer) + ".";
}

std::vector<ParamSpec> param_layout(const ModelConfig &c) {
  using S = std::size_t;
  const S d = static_cast<S>(c.hidden), f = static_cast<S>(c.ffn_size);
  std::vector<ParamSpec> out;
  auto push = [&](std::string p, Shape s, ParamRole r, int layer = 0) {
    out.push_back({std::move(p), std::move(s), r, layer});
  };
  push("embeddings.word_embeddings.weight", {S(c.vocab_size), d}, ParamRole::Embedding);
  push("embeddings.position_embeddings.weight", {S(c.max_positions), d}, ParamRole::Embedding);
  push("embeddings.token_type_embeddings.weight", {S(c.type_vocab), d}, ParamRole::Embedding);
  push("embeddings.LayerNorm.weight", {d}, ParamRole::Embedding);
  push("embeddings.LayerNorm.bias", {d}, ParamRole::Embedding);
  for (int i = 1; i <= c.num_layers; ++i) {
    const std::string p = layer_prefix(i);
    for (const char *proj : {"query", "key", "value"}) {
      push(p + "attention.self." + proj + ".weight", {d, d}, ParamRole::Encoder, i);
      push(p + "attention.self." + proj + ".bias", {d}, ParamRole::Encoder, i);
    }
    push(p + "attention.output.dense.weight", {d, d}, ParamRole::Encoder, i);
    push(p + "attention.output.dense.bias", {d}, ParamRole::Encoder, i);
    push(p + "attention.output.LayerNorm.weight", {d}, ParamRole::Encoder, i);
    push(p + "attention.output.LayerNorm.bias", {d}, ParamRole::Encoder, i);
    push(p + "intermediate.dense.weight", {f, d}, ParamRole::Encoder, i);
    push(p + "intermediate.dense.bias", {f}, ParamRole::Encoder, i);
    push(p + "output.dense.weight", {d, f}, ParamRole::Encoder, i);
    push(p + "output.dense.bias", {d}, ParamRole::Encoder, i);
    push(p + "output.LayerNorm.weight", {d}, ParamRole::Encoder, i);
    push(p + "output.LayerNorm.bias", {d}, ParamRole::Encoder, i);
  }
  push("pooler.dense.weight", {d, d}, ParamRole::Pooler);
  push("pooler.dense.bias", {d}, ParamRole::Pooler);
  push("classifier.weight", {S(c.num_labels), d}, ParamRole::Classifier);
  push("classifier.bias", {S(c.num_labels)}, ParamRole::Classifier);
  return out;
}

bool is_bias_path(std::string_view path) { return path.ends_with(".bias"); }

std::uint64_t embedding_param_count(const ModelConfig &c) {
  const std::uint64_t d = static_cast<std::uint64_t>(c.hidden);
  return (static_cast<std::uint64_t>(c.vocab_size) + c.max_positions +
          c.type_vocab) * d + 2 * d;
}

std::uint64_t encoder_layer_param_count(const ModelConfig &c) {
  const std::uint64_t d = static_cast<std::uint64_t>(c.hidden);
  const std::uint64_t f = static_cast<std::uint64_t>(c.ffn_size);
  return 4 * (d * d + d) + 2 * d + (f * d + f) + (d * f + d) + 2 * d;
}

std::uint64_t pooler_param_count(const ModelConfig &c) {
  const std::uint64_t d = static_cast<std::uint64_t>(c.hidden);
  return d * d + d;
}

std::uint64_t classifier_param_count(const ModelConfig &c) {
  const std::uint64_t d = static_cast<std::uint64_t>(c.hidden);
  return static_cast<std::uint64_t>(c.num_labels) * (d + 1);
}

std::uint64_t model_param_count(const ModelConfig &c, bool include_classifier) {
  return embedding_param_count(c) +
         static_cast<std::uint64_t>(c.num_layers) * encoder_layer_param_count(c) +
         pooler_param_count(c) + (include_classifier ? classifier_param_count(c) : 0);
}

std::string lora_a_name(std::string_view target) {
  return std::string(target) + ".lora_A";
}

std::string lora_b_name(std::string_view target) {
  return std::string(target) + ".lora_B";
}

void ParamStore::add(const std::string &path, Tensor value, ParamStatus status) {
  if (!params_.emplace(path, Param{std::move(value), status}).second)
    throw std::invalid_argument("duplicate parameter path " + path);
}

bool ParamStore::contains(std::string_view path) const {
  return params_.find(path) != params_.end();
}

Param &ParamStore::at(std::string_view path) {
  auto it = params_.find(path);
  if (it == params_.end())
    throw std::out_of_range("unknown parameter path " + std::string(path));
  return it->second;
}

const Param &ParamStore::at(std::string_view path) const {
  auto it = params_.find(path);
  if (it == params_.end())
    throw std::out_of_range("unknown parameter path " + std::string(path));
  return it->second;
}

const LoraPair *ParamStore::find_lora(std::string_view target) const {
  auto it = lora_.find(target);
  return it == lora_.end() ? nullptr : &it->second;
}

std::uint64_t ParamStore::parameter_count() const {
  std::uint64_t n = 0;
  for (const auto &[_, p] : params_)
    n += p.value.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto &[_, p] : params_) {
    if (is_trainable(p.status))
      p.value.zero_grad();
    else
      p.value.clear_grad();
  }
  for (auto &[_, pair] : lora_) {
    pair.A.zero_grad();
    pair.B.zero_grad();
  }
}

bool ParamStore::identical(const ParamStore &other) const {
  if (!(config_ == other.config_) || params_.size() != other.params_.size() ||
      lora_.size() != other.lora_.size())
    return false;
  for (auto a = params_.begin(), b = other.params_.begin(); a != params_.end();
       ++a, ++b) {
    if (a->first != b->first || a->second.status != b->second.status ||
        !a->second.value.identical(b->second.value))
      return false;
  }
  for (auto a = lora_.begin(), b = other.lora_.begin(); a != lora_.end();
       ++a, ++b) {
    if (a->first != b->first || a->second.rank != b->second.rank ||
        a->second.alpha != b->second.alpha || !a->second.A.identical(b->second.A) ||
        !a->second.B.identical(b->second.B))
      return false;
  }
  return true;
}

} // namespace spafit
