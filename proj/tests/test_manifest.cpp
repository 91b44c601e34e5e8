// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <spafit/checkpoint.hpp>
#include <spafit/manifest.hpp>

#include <filesystem>
#include <fstream>

using namespace spafit;

namespace {

const char *kFull = R"(# toy run
[model]
num_layers = 4
hidden = 32
num_heads = 4
ffn_size = 64
vocab_size = 64
lora_rank = 8
lora_alpha = 16
dropout_p = 0.1
seed = 42
base = bases/pre.ckpt

[plan]
spec = spafit:N1=1,N2=2,mode=II

[train]
learning_rate = 2e-3
batch_size = 8
epochs = 3
seed = 7

[task]
kind = pair_regression
train_size = 200
val_size = 50
seed = 9

[output]
dir = runs/a

[compare]
specs = full-ft; bitfit ;lora-i
seeds = 1, 2,3
workers = 2
full_ft_learning_rate = 1e-3
)";

} // namespace

TEST_CASE("a complete manifest") {
  const RunManifest m = parse_manifest(kFull, "/work");
  CHECK(m.model.num_layers == 4);
  CHECK(m.model.dropout_p == 0.1);
  CHECK(m.model.num_labels == 1); // follows the regression task
  CHECK(m.model_seed == 42);
  REQUIRE(m.base.has_value());
  CHECK(*m.base == std::filesystem::path("/work/bases/pre.ckpt"));
  REQUIRE(m.plan.has_value());
  CHECK(*m.plan == PlanSpec::spafit(1, 2, Group3Mode::FT_II));
  CHECK(m.train.learning_rate == 2e-3);
  CHECK(m.train.batch_size == 8);
  CHECK(m.train.epochs == 3);
  CHECK(m.train.seed == 7);
  CHECK(m.train.weight_decay == 0.01);
  CHECK(m.task.kind == TaskKind::PairRegression);
  CHECK(m.task.seed == 9);
  CHECK(m.out_dir == std::filesystem::path("/work/runs/a"));
  CHECK(m.compare_specs ==
        std::vector<PlanSpec>{PlanSpec::full_ft(), PlanSpec::full_bitfit(), PlanSpec::full_lora_i()});
  CHECK(m.compare_seeds == std::vector<std::uint64_t>{1, 2, 3});
  CHECK(m.workers == 2);
  CHECK(m.full_ft_learning_rate == 1e-3);
  CHECK(m.has("compare"));
  CHECK_NOTHROW(m.require("train"));
}

TEST_CASE("sections are optional, their seeds are not") {
  const RunManifest m = parse_manifest("[plan]\nspec = lora-ii\n");
  CHECK_FALSE(m.has("model"));
  CHECK_THROWS_AS(m.require("model"), ManifestError);
  CHECK_THROWS_AS(parse_manifest("[train]\nepochs = 2\n"), ManifestError);
  CHECK_THROWS_AS(parse_manifest("[model]\nhidden = 32\n"), ManifestError);
  CHECK_THROWS_AS(parse_manifest("[task]\nkind = pair_classification\n"), ManifestError);
}

TEST_CASE("strict rejection") {
  for (const char *bad : {
           "[model]\nseed = 1\nhiden = 32\n",              // unknown key
           "[models]\nseed = 1\n",                          // unknown section
           "seed = 1\n",                                    // key outside a section
           "[model]\nseed = 1\nseed = 2\n",                 // repeated key
           "[model]\nseed = 1\n[model]\n",                  // repeated section
           "[model]\nseed = x\n",                           // not a number
           "[model]\nseed = 1\nhidden = 32.5\n",            // not an integer
           "[model]\nseed = 1\nhidden\n",                   // no '='
           "[model\nseed = 1\n",                            // broken header
           "[plan]\nspec = spafit:N1=2\n",                  // bad plan spec
           "[model]\nseed = 1\nnum_layers = 2\n[plan]\nspec = spafit:N1=1,N2=3,mode=I\n",
           "[model]\nseed = 1\nnum_heads = 5\n",            // invalid model
           "[train]\nseed = 1\nlearning_rate = -1\n",       // invalid train config
           "[task]\nseed = 1\nkind = sentiment\n",          // unknown task
           "[task]\nseed = 1\nkind = pair_regression\nmetric = f1\n",
       })
    CHECK_THROWS_AS_MESSAGE(parse_manifest(bad), ManifestError, bad);
}

TEST_CASE("comments and whitespace") {
  const RunManifest m = parse_manifest("  # header\n\n[ train ]  \n  seed=3 # trailing\n"
                                       "epochs=0\n");
  CHECK(m.train.seed == 3);
  CHECK(m.train.epochs == 0);
}

TEST_CASE("loading from disk") {
  const auto dir = std::filesystem::temp_directory_path() / "spafit_test_manifest";
  std::filesystem::create_directories(dir);
  const auto path = dir / "run.ini";
  std::ofstream(path) << "[output]\ndir = out\n";
  CHECK(load_manifest(path).out_dir == dir / "out");
  CHECK_THROWS_AS(load_manifest(dir / "missing.ini"), IoError);
}

TEST_CASE("reference lists every section") {
  const std::string ref = manifest_reference();
  for (const char *s : {"[model]", "[plan]", "[train]", "[task]", "[output]", "[compare]"})
    CHECK(ref.find(s) != std::string::npos);
  CHECK(ref.find("learning_rate") != std::string::npos);
  CHECK(ref.find("6e-5") != std::string::npos);
}
