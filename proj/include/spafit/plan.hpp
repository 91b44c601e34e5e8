// SPDX-License-Identifier: Apache-2.0
//
// Fine-tuning plans: which parameters train, and how.
//
// A PlanSpec names one of five recipes. compile_plan turns it into a status
// for every parameter path of a model configuration. For the stratified
// recipe the encoder layers split into three groups by two boundaries
// N1 <= N2 (1-based, inclusive):
//
//   group 1  layers 1..N1       everything frozen
//   group 2  layers N1+1..N2    every bias vector of the layer tunable
//   group 3  layers N2+1..L     LoRA on query/key/value (mode I) and also on
//                               attention.output.dense (mode II); biases of
//                               the intermediate and output sub-layers
//                               tunable
//
// Embeddings train only under full fine-tuning. The pooler and classifier
// train under every plan.

#pragma once

#include <spafit/checkpoint.hpp>
#include <spafit/params.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace spafit {

class PlanError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

class CompatibilityError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

enum class PlanKind { FullFT, FullBitFit, FullLoraI, FullLoraII, Spafit };
enum class Group3Mode { FT_I, FT_II };

struct PlanSpec {
  PlanKind kind = PlanKind::FullFT;
  int n1 = 0;
  int n2 = 0;
  Group3Mode mode = Group3Mode::FT_II;

  static PlanSpec full_ft() { return {PlanKind::FullFT}; }
  static PlanSpec full_bitfit() { return {PlanKind::FullBitFit}; }
  static PlanSpec full_lora_i() { return {PlanKind::FullLoraI}; }
  static PlanSpec full_lora_ii() { return {PlanKind::FullLoraII}; }
  static PlanSpec spafit(int n1, int n2, Group3Mode mode) {
    return {PlanKind::Spafit, n1, n2, mode};
  }

  /// Throws PlanError unless 0 <= N1 <= N2 <= num_layers.
  void validate(int num_layers) const;
  bool uses_lora() const { return kind != PlanKind::FullFT && kind != PlanKind::FullBitFit; }

  friend bool operator==(const PlanSpec &a, const PlanSpec &b) {
    if (a.kind != b.kind)
      return false;
    return a.kind != PlanKind::Spafit ||
           (a.n1 == b.n1 && a.n2 == b.n2 && a.mode == b.mode);
  }
};

/// Text form: "full-ft", "bitfit", "lora-i", "lora-ii",
/// "spafit:N1=8,N2=12,mode=II". Parsing is case-insensitive on the mode and
/// throws PlanError on anything else.
PlanSpec parse_plan_spec(std::string_view text);
std::string format_plan_spec(const PlanSpec &spec);
/// Display name such as "SPAFIT-8-12-II" or "Full LoRA-I".
std::string display_name(const PlanSpec &spec);

/// Group (1, 2 or 3) of a 1-based encoder layer under a stratified spec.
int layer_group(const PlanSpec &spec, int layer);

struct FinetunePlan {
  PlanSpec spec;
  ModelConfig config;
  std::map<std::string, ParamStatus, std::less<>> assignments;
  /// Weight paths with status LoraAugmented, in layout order.
  std::vector<std::string> lora_targets;
  /// Paths trained only because every plan tunes the task head; left out of
  /// head-excluded counts. Under full fine-tuning only the classifier
  /// qualifies since the pooler is then trained as part of the model.
  std::set<std::string, std::less<>> head_paths;
};

FinetunePlan compile_plan(const PlanSpec &spec, const ModelConfig &config);

/// Closed-form trainable parameter count. LoRA targets contribute
/// r * (out + in); base weights under LoRA contribute nothing.
std::uint64_t count_trainable(const FinetunePlan &plan, const ModelConfig &config,
                              bool include_head);
/// Same quantity by walking the assignment map against the layout.
std::uint64_t census_trainable(const FinetunePlan &plan, const ModelConfig &config,
                               bool include_head);

/// Applies plan statuses to `store` and attaches a LoRA pair (A Gaussian,
/// std 0.02; B zero) to every target. Throws PlanError if the plan does not
/// match the store.
void attach_lora(ParamStore &store, const FinetunePlan &plan, std::uint64_t seed);

/// (alpha / r) * B * A.
Tensor lora_delta(const LoraPair &pair);

/// Copy of `store` with every LoRA delta folded into its base weight and no
/// pairs left. Throws PlanError when the plan's targets are not attached.
ParamStore merge_lora(const ParamStore &store, const FinetunePlan &plan);

/// Writes LoRA pairs, BiasTunable biases and Trainable tensors together with
/// the plan spec and model config.
void export_adapter(const ParamStore &store, const FinetunePlan &plan,
                    const std::filesystem::path &path);
Container adapter_container(const ParamStore &store, const FinetunePlan &plan);

/// Restores an exported adapter into `store`, replacing its LoRA pairs and
/// statuses. Frozen tensors are left untouched. Returns the adapter's plan.
/// Throws CompatibilityError when configurations differ.
FinetunePlan swap_adapter(ParamStore &store, const std::filesystem::path &path);
FinetunePlan apply_adapter(ParamStore &store, const Container &adapter);

} // namespace spafit
