// SPDX-License-Identifier: Apache-2.0
//
// Run manifests: a flat, sectioned key = value file that is the single source
// of configuration for the command-line tool.
//
//   # comment
//   [model]    num_layers hidden num_heads ffn_size vocab_size max_positions
//              type_vocab lora_rank lora_alpha dropout_p layer_norm_eps seed*
//              base (checkpoint to start from instead of a seeded build)
//   [plan]     spec
//   [train]    learning_rate batch_size epochs weight_decay beta1 beta2 eps seed*
//   [task]     kind vocab_size segment_length train_size val_size score_noise
//              metric seed*
//   [output]   dir
//   [compare]  specs (';'-separated) seeds (','-separated) workers
//              full_ft_learning_rate
//
// Keys marked * are mandatory whenever their section is present. Unknown
// sections, unknown keys and repeated keys are rejected. The model head
// width follows the task kind. Relative paths resolve against the manifest's
// directory.

#pragma once

#include <spafit/harness.hpp>
#include <spafit/plan.hpp>

#include <filesystem>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace spafit {

class ManifestError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

struct RunManifest {
  std::set<std::string> sections;

  ModelConfig model;
  std::uint64_t model_seed = 0;
  std::optional<std::filesystem::path> base;
  std::optional<PlanSpec> plan;
  TrainConfig train;
  TaskSpec task;
  std::filesystem::path out_dir = "spafit-out";

  std::vector<PlanSpec> compare_specs;
  std::vector<std::uint64_t> compare_seeds;
  unsigned workers = 1;
  std::optional<double> full_ft_learning_rate;

  bool has(const std::string &section) const { return sections.contains(section); }
  /// Throws ManifestError naming the missing section.
  void require(const std::string &section) const;
};

/// Relative output paths resolve against `base_dir`.
RunManifest parse_manifest(const std::string &text,
                           const std::filesystem::path &base_dir = {});
RunManifest load_manifest(const std::filesystem::path &path);

/// Every key with its default, for --help.
std::string manifest_reference();

} // namespace spafit
