// SPDX-License-Identifier: Apache-2.0
//
// Post-LN transformer encoder over a ParamStore: embeddings, a stack of
// encoder layers, a tanh pooler over the first token and a dense task head.

#pragma once

#include <spafit/autograd.hpp>
#include <spafit/params.hpp>

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <vector>

namespace spafit {

class InputError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Seeded stand-in for pre-trained weights: truncated normal (std 0.02,
/// cut at two standard deviations) for matrices and embeddings, ones for
/// LayerNorm scales, zeros for biases. All parameters start Trainable.
ParamStore build_model(const ModelConfig &config, std::uint64_t seed);

/// Starts a new task from a trained base: every tensor except the classifier
/// is copied from `base`, the classifier is drawn afresh for
/// `config.num_labels` outputs and all statuses reset to Trainable. Dropout,
/// LoRA rank/alpha and the head width come from `config`; the encoder shape
/// must match the base. Throws ConfigError on a shape mismatch or when the
/// base still carries LoRA pairs (merge them first).
ParamStore with_fresh_head(const ParamStore &base, const ModelConfig &config,
                           std::uint64_t seed);

/// Token batch. All vectors are row-major [batch x seq].
struct Batch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<int> token_ids;
  std::vector<int> type_ids;
  /// 1 for real tokens, 0 for padding. Empty means no padding.
  std::vector<int> attention_mask;
};

/// A dense projection with an optional low-rank side path.
struct DenseVars {
  Var weight;
  Var bias;
  struct Lora {
    Var A, B;
    double scale;
  };
  std::optional<Lora> lora;

  /// x W^T + b, plus scale * (x A^T) B^T when a LoRA pair is bound.
  Var apply(Var x) const;
};

struct EncoderLayerVars {
  DenseVars query, key, value, attn_out;
  Var attn_norm_gamma, attn_norm_beta;
  DenseVars intermediate, output;
  Var out_norm_gamma, out_norm_beta;
};

struct LayerHyper {
  std::size_t num_heads = 1;
  double dropout_p = 0.0;
  double layer_norm_eps = 1e-12;
};

/// Binds the parameters of encoder layer `layer` (1-based) into `g`. When
/// `store` is non-const-bound via `grads`, gradients of trainable tensors and
/// LoRA factors flow back into it.
EncoderLayerVars bind_encoder_layer(Graph &g, const ParamStore &store,
                                    int layer, ParamStore *grads);

/// One encoder layer on x[batch, seq, d]:
///   Q,K,V projections -> multi-head attention (H1) -> dropout (H2)
///   H3 = LayerNorm(W3 H2 + b3 + x) -> dropout (H4)
///   H5 = GELU(W5 H4 + b5)
///   H6 = LayerNorm(W6 H5 + b6 + H4) -> dropout (H7)
Var encoder_layer_forward(Var x, const EncoderLayerVars &w,
                          const LayerHyper &hyper,
                          const Tensor *key_bias = nullptr);

/// Full forward pass, returning the head output [batch x num_labels].
/// Gradients are routed into `grads` (normally the same store) for trainable
/// parameters when it is non-null.
Var model_forward(Graph &g, const ParamStore &store, const Batch &batch,
                  ParamStore *grads = nullptr);

/// Eval-mode logits/scores as a plain tensor.
Tensor predict(const ParamStore &store, const Batch &batch);

} // namespace spafit
