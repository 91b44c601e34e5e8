// SPDX-License-Identifier: Apache-2.0

#include <spafit/model.hpp>

#include <random>
#include <string>

namespace spafit {

namespace {

double truncated_normal(std::mt19937_64 &rng, double stddev) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (;;) {
    const double z = n(rng);
    if (z >= -2.0 && z <= 2.0)
      return z * stddev;
  }
}

Var bind_param(Graph &g, const ParamStore &store, std::string_view path,
         ParamStore *grads) {
  const Param &p = store.at(path);
  Tensor *sink = nullptr;
  if (grads && is_trainable(p.status))
    sink = &grads->at(path).value;
  return g.param(p.value, sink);
}

DenseVars bind_dense(Graph &g, const ParamStore &store, const std::string &prefix,
                     ParamStore *grads) {
  const std::string w = prefix + ".weight";
  DenseVars d{bind_param(g, store, w, grads), bind_param(g, store, prefix + ".bias", grads),
              std::nullopt};
  if (const LoraPair *pair = store.find_lora(w)) {
    Tensor *a_sink = nullptr, *b_sink = nullptr;
    if (grads) {
      auto &mine = grads->lora().at(w);
      a_sink = &mine.A;
      b_sink = &mine.B;
    }
    d.lora = DenseVars::Lora{g.param(pair->A, a_sink), g.param(pair->B, b_sink),
                             pair->scale()};
  }
  return d;
}

} // namespace

ParamStore build_model(const ModelConfig &config, std::uint64_t seed) {
  config.validate();
  ParamStore store(config);
  std::mt19937_64 rng(seed);
  for (const ParamSpec &spec : param_layout(config)) {
    Tensor t(spec.shape);
    const bool norm = spec.path.find("LayerNorm.weight") != std::string::npos;
    if (norm) {
      for (auto &v : t.data())
        v = 1.0;
    } else if (!is_bias_path(spec.path)) {
      for (auto &v : t.data())
        v = truncated_normal(rng, 0.02);
    }
    store.add(spec.path, std::move(t));
  }
  return store;
}

ParamStore with_fresh_head(const ParamStore &base, const ModelConfig &config,
                           std::uint64_t seed) {
  config.validate();
  const ModelConfig &b = base.config();
  if (b.num_layers != config.num_layers || b.hidden != config.hidden ||
      b.num_heads != config.num_heads || b.ffn_size != config.ffn_size ||
      b.vocab_size != config.vocab_size || b.max_positions != config.max_positions ||
      b.type_vocab != config.type_vocab)
    throw ConfigError("base model shape does not match the requested config");
  if (!base.lora().empty())
    throw ConfigError("base model carries LoRA pairs; merge them before reuse");
  ParamStore store = build_model(config, seed);
  for (auto &[path, p] : store.params())
    if (!path.starts_with("classifier."))
      p.value = base.at(path).value;
  store.zero_grad();
  return store;
}

Var DenseVars::apply(Var x) const {
  Var y = linear(x, weight, bias);
  if (!lora)
    return y;
  Var side = linear(linear(x, lora->A), lora->B);
  return add(y, scale(side, lora->scale));
}

EncoderLayerVars bind_encoder_layer(Graph &g, const ParamStore &store,
                                    int layer, ParamStore *grads) {
  const std::string p = layer_prefix(layer);
  return EncoderLayerVars{
      bind_dense(g, store, p + "attention.self.query", grads),
      bind_dense(g, store, p + "attention.self.key", grads),
      bind_dense(g, store, p + "attention.self.value", grads),
      bind_dense(g, store, p + "attention.output.dense", grads),
      bind_param(g, store, p + "attention.output.LayerNorm.weight", grads),
      bind_param(g, store, p + "attention.output.LayerNorm.bias", grads),
      bind_dense(g, store, p + "intermediate.dense", grads),
      bind_dense(g, store, p + "output.dense", grads),
      bind_param(g, store, p + "output.LayerNorm.weight", grads),
      bind_param(g, store, p + "output.LayerNorm.bias", grads),
  };
}

Var encoder_layer_forward(Var x, const EncoderLayerVars &w,
                          const LayerHyper &hyper, const Tensor *key_bias) {
  const Tensor &X = x.value();
  if (X.rank() != 3)
    throw ShapeError("encoder layer: expected [batch, seq, d], got " +
                     shape_str(X.shape()));
  const Tensor &Wq = w.query.weight.value();
  if (X.dim(2) != Wq.dim(1))
    throw ShapeError("encoder layer: input " + shape_str(X.shape()) +
                     " does not match hidden size " + std::to_string(Wq.dim(1)));
  Var q = w.query.apply(x);
  Var k = w.key.apply(x);
  Var v = w.value.apply(x);
  Var h1 = attention(q, k, v, hyper.num_heads, key_bias);
  Var h2 = dropout(h1, hyper.dropout_p);
  Var h3 = layer_norm(add(w.attn_out.apply(h2), x), w.attn_norm_gamma,
                      w.attn_norm_beta, hyper.layer_norm_eps);
  Var h4 = dropout(h3, hyper.dropout_p);
  Var h5 = gelu(w.intermediate.apply(h4));
  Var h6 = layer_norm(add(w.output.apply(h5), h4), w.out_norm_gamma,
                      w.out_norm_beta, hyper.layer_norm_eps);
  return dropout(h6, hyper.dropout_p);
}

Var model_forward(Graph &g, const ParamStore &store, const Batch &batch,
                  ParamStore *grads) {
  const ModelConfig &c = store.config();
  const std::size_t n = batch.batch * batch.seq;
  if (n == 0)
    throw InputError("model_forward: empty batch");
  if (batch.token_ids.size() != n || batch.type_ids.size() != n ||
      (!batch.attention_mask.empty() && batch.attention_mask.size() != n))
    throw InputError("model_forward: batch arrays do not match batch x seq");
  if (batch.seq > static_cast<std::size_t>(c.max_positions))
    throw InputError("model_forward: sequence length " +
                     std::to_string(batch.seq) + " exceeds max_positions " +
                     std::to_string(c.max_positions));
  for (int id : batch.token_ids)
    if (id < 0 || id >= c.vocab_size)
      throw InputError("model_forward: token id " + std::to_string(id) +
                       " outside vocabulary of " + std::to_string(c.vocab_size));
  for (int id : batch.type_ids)
    if (id < 0 || id >= c.type_vocab)
      throw InputError("model_forward: token type id " + std::to_string(id) +
                       " outside " + std::to_string(c.type_vocab) + " types");

  const Shape ids_shape{batch.batch, batch.seq};
  Var words = embedding(bind_param(g, store, "embeddings.word_embeddings.weight", grads),
                        batch.token_ids, ids_shape);
  Var pos = position_rows(
      bind_param(g, store, "embeddings.position_embeddings.weight", grads),
      batch.batch, batch.seq);
  Var types = embedding(
      bind_param(g, store, "embeddings.token_type_embeddings.weight", grads),
      batch.type_ids, ids_shape);
  Var h = layer_norm(add(add(words, pos), types),
                     bind_param(g, store, "embeddings.LayerNorm.weight", grads),
                     bind_param(g, store, "embeddings.LayerNorm.bias", grads),
                     c.layer_norm_eps);
  h = dropout(h, c.dropout_p);

  std::optional<Tensor> key_bias;
  if (!batch.attention_mask.empty()) {
    key_bias.emplace(Shape{batch.batch, batch.seq});
    for (std::size_t i = 0; i < n; ++i)
      (*key_bias)[i] = batch.attention_mask[i] ? 0.0 : -1e9;
  }
  const LayerHyper hyper{static_cast<std::size_t>(c.num_heads), c.dropout_p,
                         c.layer_norm_eps};
  for (int layer = 1; layer <= c.num_layers; ++layer)
    h = encoder_layer_forward(h, bind_encoder_layer(g, store, layer, grads),
                              hyper, key_bias ? &*key_bias : nullptr);

  Var pooled = tanh(linear(first_token(h),
                           bind_param(g, store, "pooler.dense.weight", grads),
                           bind_param(g, store, "pooler.dense.bias", grads)));
  return linear(pooled, bind_param(g, store, "classifier.weight", grads),
                bind_param(g, store, "classifier.bias", grads));
}

Tensor predict(const ParamStore &store, const Batch &batch) {
  Graph g(Mode::Eval);
  Tensor out = model_forward(g, store, batch).value();
  return out;
}

} // namespace spafit
