// SPDX-License-Identifier: Apache-2.0

#include <spafit/plan.hpp>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <random>

namespace spafit {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto &c : out)
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

int parse_int(std::string_view s, std::string_view full) {
  int v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw PlanError("malformed plan spec '" + std::string(full) +
                    "': expected an integer, got '" + std::string(s) + "'");
  return v;
}

bool is_qkv_weight(std::string_view rel) {
  return rel == "attention.self.query.weight" ||
         rel == "attention.self.key.weight" ||
         rel == "attention.self.value.weight";
}

bool is_lora_target(std::string_view rel, bool with_attn_out) {
  return is_qkv_weight(rel) ||
         (with_attn_out && rel == "attention.output.dense.weight");
}

bool is_group3_bias(std::string_view rel) {
  return rel == "intermediate.dense.bias" || rel == "output.dense.bias" ||
         rel == "output.LayerNorm.bias";
}

ParamStatus encoder_status(const PlanSpec &spec, int layer, std::string_view rel) {
  const bool bias = is_bias_path(rel);
  switch (spec.kind) {
  case PlanKind::FullFT:
    return ParamStatus::Trainable;
  case PlanKind::FullBitFit:
    return bias ? ParamStatus::BiasTunable : ParamStatus::Frozen;
  case PlanKind::FullLoraI:
    return is_lora_target(rel, false) ? ParamStatus::LoraAugmented
                                      : ParamStatus::Frozen;
  case PlanKind::FullLoraII:
    return is_lora_target(rel, true) ? ParamStatus::LoraAugmented
                                     : ParamStatus::Frozen;
  case PlanKind::Spafit:
    switch (layer_group(spec, layer)) {
    case 1:
      return ParamStatus::Frozen;
    case 2:
      return bias ? ParamStatus::BiasTunable : ParamStatus::Frozen;
    default:
      if (is_lora_target(rel, spec.mode == Group3Mode::FT_II))
        return ParamStatus::LoraAugmented;
      return is_group3_bias(rel) ? ParamStatus::BiasTunable
                                 : ParamStatus::Frozen;
    }
  }
  return ParamStatus::Frozen;
}

std::uint64_t lora_cost(const ModelConfig &c) {
  return static_cast<std::uint64_t>(c.lora_rank) * 2 *
         static_cast<std::uint64_t>(c.hidden);
}

/// Bias vectors of one encoder layer: q, k, v, attention output dense,
/// attention LayerNorm, intermediate, output dense, output LayerNorm.
std::uint64_t layer_bias_count(const ModelConfig &c) {
  return 7 * static_cast<std::uint64_t>(c.hidden) +
         static_cast<std::uint64_t>(c.ffn_size);
}

std::uint64_t group3_bias_count(const ModelConfig &c) {
  return static_cast<std::uint64_t>(c.ffn_size) +
         2 * static_cast<std::uint64_t>(c.hidden);
}

std::string config_diff(const ModelConfig &a, const ModelConfig &b) {
  std::string out;
  auto cmp = [&](const char *name, auto x, auto y) {
    if (x != y) {
      if (!out.empty())
        out += ", ";
      out += std::string(name) + " " + std::to_string(x) + " vs " +
             std::to_string(y);
    }
  };
  cmp("num_layers", a.num_layers, b.num_layers);
  cmp("hidden", a.hidden, b.hidden);
  cmp("num_heads", a.num_heads, b.num_heads);
  cmp("ffn_size", a.ffn_size, b.ffn_size);
  cmp("vocab_size", a.vocab_size, b.vocab_size);
  cmp("max_positions", a.max_positions, b.max_positions);
  cmp("type_vocab", a.type_vocab, b.type_vocab);
  cmp("num_labels", a.num_labels, b.num_labels);
  cmp("lora_rank", a.lora_rank, b.lora_rank);
  cmp("lora_alpha", a.lora_alpha, b.lora_alpha);
  cmp("dropout_p", a.dropout_p, b.dropout_p);
  cmp("layer_norm_eps", a.layer_norm_eps, b.layer_norm_eps);
  return out;
}

} // namespace

void PlanSpec::validate(int num_layers) const {
  if (kind != PlanKind::Spafit)
    return;
  if (n1 < 0 || n1 > n2 || n2 > num_layers)
    throw PlanError("stratified plan requires 0 <= N1 <= N2 <= L; got N1=" +
                    std::to_string(n1) + ", N2=" + std::to_string(n2) +
                    ", L=" + std::to_string(num_layers));
}

PlanSpec parse_plan_spec(std::string_view text) {
  const std::string t = lower(text);
  if (t == "full-ft" || t == "fullft" || t == "full")
    return PlanSpec::full_ft();
  if (t == "bitfit" || t == "full-bitfit")
    return PlanSpec::full_bitfit();
  if (t == "lora-i" || t == "full-lora-i")
    return PlanSpec::full_lora_i();
  if (t == "lora-ii" || t == "full-lora-ii")
    return PlanSpec::full_lora_ii();
  constexpr std::string_view prefix = "spafit:";
  if (!t.starts_with(prefix))
    throw PlanError("malformed plan spec '" + std::string(text) + "'");
  std::optional<int> n1, n2;
  std::optional<Group3Mode> mode;
  std::string_view rest = std::string_view(t).substr(prefix.size());
  while (!rest.empty()) {
    const auto comma = rest.find(',');
    std::string_view item = rest.substr(0, comma);
    rest = comma == std::string_view::npos ? std::string_view{}
                                           : rest.substr(comma + 1);
    const auto eq = item.find('=');
    if (eq == std::string_view::npos)
      throw PlanError("malformed plan spec '" + std::string(text) +
                      "': expected key=value, got '" + std::string(item) + "'");
    const std::string_view key = item.substr(0, eq), val = item.substr(eq + 1);
    if (key == "n1" && !n1)
      n1 = parse_int(val, text);
    else if (key == "n2" && !n2)
      n2 = parse_int(val, text);
    else if (key == "mode" && !mode) {
      if (val == "i" || val == "ft-i" || val == "ft_i")
        mode = Group3Mode::FT_I;
      else if (val == "ii" || val == "ft-ii" || val == "ft_ii")
        mode = Group3Mode::FT_II;
      else
        throw PlanError("malformed plan spec '" + std::string(text) +
                        "': mode must be I or II");
    } else {
      throw PlanError("malformed plan spec '" + std::string(text) +
                      "': unexpected or repeated key '" + std::string(key) + "'");
    }
  }
  if (!n1 || !n2 || !mode)
    throw PlanError("malformed plan spec '" + std::string(text) +
                    "': N1, N2 and mode are all required");
  if (*n1 < 0 || *n2 < 0)
    throw PlanError("malformed plan spec '" + std::string(text) +
                    "': N1 and N2 must be non-negative");
  return PlanSpec::spafit(*n1, *n2, *mode);
}

std::string format_plan_spec(const PlanSpec &s) {
  switch (s.kind) {
  case PlanKind::FullFT:
    return "full-ft";
  case PlanKind::FullBitFit:
    return "bitfit";
  case PlanKind::FullLoraI:
    return "lora-i";
  case PlanKind::FullLoraII:
    return "lora-ii";
  case PlanKind::Spafit:
    return "spafit:N1=" + std::to_string(s.n1) + ",N2=" + std::to_string(s.n2) +
           ",mode=" + (s.mode == Group3Mode::FT_I ? "I" : "II");
  }
  return {};
}

std::string display_name(const PlanSpec &s) {
  switch (s.kind) {
  case PlanKind::FullFT:
    return "Full Fine-tuning";
  case PlanKind::FullBitFit:
    return "Full BitFit";
  case PlanKind::FullLoraI:
    return "Full LoRA-I";
  case PlanKind::FullLoraII:
    return "Full LoRA-II";
  case PlanKind::Spafit:
    return "SPAFIT-" + std::to_string(s.n1) + "-" + std::to_string(s.n2) + "-" +
           (s.mode == Group3Mode::FT_I ? "I" : "II");
  }
  return {};
}

int layer_group(const PlanSpec &spec, int layer) {
  if (layer <= spec.n1)
    return 1;
  if (layer <= spec.n2)
    return 2;
  return 3;
}

FinetunePlan compile_plan(const PlanSpec &spec, const ModelConfig &config) {
  config.validate();
  spec.validate(config.num_layers);
  FinetunePlan plan{spec, config, {}, {}, {}};
  for (const ParamSpec &p : param_layout(config)) {
    ParamStatus status = ParamStatus::Frozen;
    switch (p.role) {
    case ParamRole::Embedding:
      status = spec.kind == PlanKind::FullFT ? ParamStatus::Trainable
                                             : ParamStatus::Frozen;
      break;
    case ParamRole::Pooler:
      status = ParamStatus::Trainable;
      if (spec.kind != PlanKind::FullFT)
        plan.head_paths.insert(p.path);
      break;
    case ParamRole::Classifier:
      status = ParamStatus::Trainable;
      plan.head_paths.insert(p.path);
      break;
    case ParamRole::Encoder: {
      const std::string_view rel =
          std::string_view(p.path).substr(layer_prefix(p.layer).size());
      status = encoder_status(spec, p.layer, rel);
      break;
    }
    }
    if (status == ParamStatus::LoraAugmented)
      plan.lora_targets.push_back(p.path);
    plan.assignments.emplace(p.path, status);
  }
  return plan;
}

std::uint64_t count_trainable(const FinetunePlan &plan, const ModelConfig &c,
                              bool include_head) {
  const PlanSpec &s = plan.spec;
  const std::uint64_t L = static_cast<std::uint64_t>(c.num_layers);
  std::uint64_t n = 0;
  switch (s.kind) {
  case PlanKind::FullFT:
    n = model_param_count(c, include_head);
    return n;
  case PlanKind::FullBitFit:
    n = L * layer_bias_count(c);
    break;
  case PlanKind::FullLoraI:
    n = L * 3 * lora_cost(c);
    break;
  case PlanKind::FullLoraII:
    n = L * 4 * lora_cost(c);
    break;
  case PlanKind::Spafit: {
    const std::uint64_t g2 = static_cast<std::uint64_t>(s.n2 - s.n1);
    const std::uint64_t g3 = L - static_cast<std::uint64_t>(s.n2);
    const std::uint64_t targets = s.mode == Group3Mode::FT_I ? 3 : 4;
    n = g2 * layer_bias_count(c) + g3 * (targets * lora_cost(c) + group3_bias_count(c));
    break;
  }
  }
  if (include_head)
    n += pooler_param_count(c) + classifier_param_count(c);
  return n;
}

std::uint64_t census_trainable(const FinetunePlan &plan, const ModelConfig &c,
                               bool include_head) {
  std::uint64_t n = 0;
  const std::uint64_t r = static_cast<std::uint64_t>(c.lora_rank);
  for (const ParamSpec &p : param_layout(c)) {
    if (!include_head && plan.head_paths.contains(p.path))
      continue;
    const ParamStatus s = plan.assignments.at(p.path);
    if (is_trainable(s))
      n += p.numel();
    else if (s == ParamStatus::LoraAugmented)
      n += r * (p.shape[0] + p.shape[1]);
  }
  return n;
}

void attach_lora(ParamStore &store, const FinetunePlan &plan, std::uint64_t seed) {
  if (!(store.config() == plan.config))
    throw PlanError("plan was compiled for a different model config (" +
                    config_diff(plan.config, store.config()) + ")");
  for (const auto &[path, status] : plan.assignments)
    if (!store.contains(path))
      throw PlanError("plan target '" + path + "' is missing from the store");
  if (store.params().size() != plan.assignments.size())
    throw PlanError("store holds parameters the plan does not assign");
  for (const auto &target : plan.lora_targets)
    if (store.at(target).value.rank() != 2)
      throw PlanError("LoRA target '" + target + "' is not a 2-D weight");

  for (auto &[path, p] : store.params())
    p.status = plan.assignments.at(path);
  store.lora().clear();
  const int r = store.config().lora_rank;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (const auto &target : plan.lora_targets) {
    const Tensor &w = store.at(target).value;
    LoraPair pair{target, Tensor({w.dim(0), static_cast<std::size_t>(r)}),
                  Tensor({static_cast<std::size_t>(r), w.dim(1)}), r,
                  store.config().lora_alpha};
    for (auto &v : pair.A.data())
      v = normal(rng);
    store.lora().emplace(target, std::move(pair));
  }
}

Tensor lora_delta(const LoraPair &pair) {
  const Tensor &B = pair.B;
  const Tensor &A = pair.A;
  if (B.rank() != 2 || A.rank() != 2 || B.dim(1) != A.dim(0) ||
      static_cast<int>(A.dim(0)) != pair.rank)
    throw ShapeError("lora_delta: factors " + shape_str(B.shape()) + " and " +
                     shape_str(A.shape()) + " inconsistent with rank " +
                     std::to_string(pair.rank));
  const std::size_t out = B.dim(0), r = B.dim(1), in = A.dim(1);
  const double s = pair.scale();
  Tensor D({out, in});
  for (std::size_t i = 0; i < out; ++i)
    for (std::size_t k = 0; k < r; ++k) {
      const double b = B[i * r + k];
      for (std::size_t j = 0; j < in; ++j)
        D[i * in + j] += b * A[k * in + j];
    }
  for (auto &v : D.data())
    v *= s;
  return D;
}

ParamStore merge_lora(const ParamStore &store, const FinetunePlan &plan) {
  if (store.lora().empty())
    throw PlanError("merge_lora: no LoRA pairs attached");
  ParamStore merged = store;
  for (const auto &target : plan.lora_targets) {
    const LoraPair *pair = store.find_lora(target);
    if (!pair)
      throw PlanError("merge_lora: target '" + target + "' has no LoRA pair");
    const Tensor delta = lora_delta(*pair);
    Param &p = merged.at(target);
    for (std::size_t i = 0; i < delta.numel(); ++i)
      p.value[i] += delta[i];
    p.status = ParamStatus::Frozen;
  }
  if (plan.lora_targets.size() != store.lora().size())
    throw PlanError("merge_lora: store holds LoRA pairs outside the plan");
  merged.lora().clear();
  return merged;
}

Container adapter_container(const ParamStore &store, const FinetunePlan &plan) {
  if (!(store.config() == plan.config))
    throw CompatibilityError("adapter export: plan config differs from store (" +
                             config_diff(plan.config, store.config()) + ")");
  Container c;
  c.header["kind"] = "adapter";
  c.header["plan"] = format_plan_spec(plan.spec);
  put_config(c.header, store.config());
  for (const auto &[path, status] : plan.assignments) {
    if (!is_trainable(status))
      continue;
    Tensor t = store.at(path).value;
    t.clear_grad();
    c.tensors.push_back({path, status, std::move(t)});
  }
  for (const auto &target : plan.lora_targets) {
    const LoraPair *pair = store.find_lora(target);
    if (!pair)
      throw PlanError("adapter export: target '" + target + "' has no LoRA pair");
    Tensor a = pair->A, b = pair->B;
    a.clear_grad();
    b.clear_grad();
    c.tensors.push_back({lora_a_name(target), ParamStatus::Trainable, std::move(a)});
    c.tensors.push_back({lora_b_name(target), ParamStatus::Trainable, std::move(b)});
  }
  return c;
}

void export_adapter(const ParamStore &store, const FinetunePlan &plan,
                    const std::filesystem::path &path) {
  write_container(adapter_container(store, plan), path);
}

FinetunePlan apply_adapter(ParamStore &store, const Container &adapter) {
  auto kind = adapter.header.find("kind");
  if (kind == adapter.header.end() || kind->second != "adapter")
    throw FormatError("container is not an adapter");
  auto plan_it = adapter.header.find("plan");
  if (plan_it == adapter.header.end())
    throw FormatError("adapter header is missing 'plan'");
  const ModelConfig config = get_config(adapter.header);
  if (!(config == store.config()))
    throw CompatibilityError("adapter does not fit this model (" +
                             config_diff(config, store.config()) + ")");
  FinetunePlan plan;
  try {
    plan = compile_plan(parse_plan_spec(plan_it->second), config);
  } catch (const PlanError &e) {
    throw FormatError(std::string("adapter holds an invalid plan: ") + e.what());
  }

  // Validate everything before touching the store.
  std::map<std::string, const NamedTensor *, std::less<>> by_name;
  for (const NamedTensor &t : adapter.tensors)
    if (!by_name.emplace(t.name, &t).second)
      throw FormatError("duplicate tensor '" + t.name + "' in adapter");
  std::set<std::string, std::less<>> expected;
  for (const auto &[path, status] : plan.assignments)
    if (is_trainable(status))
      expected.insert(path);
  for (const auto &target : plan.lora_targets) {
    expected.insert(lora_a_name(target));
    expected.insert(lora_b_name(target));
  }
  for (const auto &[name, _] : by_name)
    if (!expected.contains(name))
      throw UnknownTensorError(name);
  for (const auto &name : expected)
    if (!by_name.contains(name))
      throw MissingTensorError("adapter is missing tensor '" + name + "'");
  const std::size_t r = static_cast<std::size_t>(config.lora_rank);
  for (const auto &[path, status] : plan.assignments) {
    if (is_trainable(status) &&
        by_name.at(path)->tensor.shape() != store.at(path).value.shape())
      throw FormatError("adapter tensor '" + path + "' has the wrong shape");
  }
  for (const auto &target : plan.lora_targets) {
    const Shape &w = store.at(target).value.shape();
    if (by_name.at(lora_a_name(target))->tensor.shape() != Shape{r, w[1]} ||
        by_name.at(lora_b_name(target))->tensor.shape() != Shape{w[0], r})
      throw FormatError("adapter LoRA factors for '" + target +
                        "' have the wrong shape");
  }

  for (auto &[path, p] : store.params()) {
    p.status = plan.assignments.at(path);
    if (is_trainable(p.status))
      p.value = by_name.at(path)->tensor;
  }
  store.lora().clear();
  for (const auto &target : plan.lora_targets)
    store.lora().emplace(target,
                         LoraPair{target, by_name.at(lora_b_name(target))->tensor,
                                  by_name.at(lora_a_name(target))->tensor,
                                  config.lora_rank, config.lora_alpha});
  return plan;
}

FinetunePlan swap_adapter(ParamStore &store, const std::filesystem::path &path) {
  return apply_adapter(store, read_container(path));
}

} // namespace spafit
