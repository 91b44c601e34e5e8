// SPDX-License-Identifier: Apache-2.0

#include "test_support.hpp"

#include <doctest.h>

#include <spafit/optim.hpp>
#include <spafit/plan.hpp>

#include <filesystem>

using namespace spafit;
using spafit::test::random_batch;
using spafit::test::random_tensor;
using spafit::test::toy_config;

namespace {

// Independent statement of the assignment rules, written from the plan
// table rather than from plan.cpp.
ParamStatus oracle_status(const PlanSpec &s, const std::string &path) {
  if (path.starts_with("pooler.") || path.starts_with("classifier."))
    return ParamStatus::Trainable;
  if (s.kind == PlanKind::FullFT)
    return ParamStatus::Trainable;
  if (path.starts_with("embeddings."))
    return ParamStatus::Frozen;
  // encoder.layer.<i>.<rel>
  const auto dot = path.find('.', 14);
  const int layer = std::stoi(path.substr(14, dot - 14));
  const std::string rel = path.substr(dot + 1);
  const bool bias = rel.ends_with(".bias");
  const bool qkv = rel == "attention.self.query.weight" || rel == "attention.self.key.weight" ||
                   rel == "attention.self.value.weight";
  const bool attn_out = rel == "attention.output.dense.weight";
  switch (s.kind) {
  case PlanKind::FullBitFit:
    return bias ? ParamStatus::BiasTunable : ParamStatus::Frozen;
  case PlanKind::FullLoraI:
    return qkv ? ParamStatus::LoraAugmented : ParamStatus::Frozen;
  case PlanKind::FullLoraII:
    return qkv || attn_out ? ParamStatus::LoraAugmented : ParamStatus::Frozen;
  default:
    break;
  }
  if (layer <= s.n1)
    return ParamStatus::Frozen;
  if (layer <= s.n2)
    return bias ? ParamStatus::BiasTunable : ParamStatus::Frozen;
  if (qkv || (attn_out && s.mode == Group3Mode::FT_II))
    return ParamStatus::LoraAugmented;
  if (bias && (rel.starts_with("intermediate.") || rel.starts_with("output.")))
    return ParamStatus::BiasTunable;
  return ParamStatus::Frozen;
}

// Brute-force count over a built store.
std::uint64_t oracle_count(const PlanSpec &s, const ModelConfig &c, bool include_head) {
  const ParamStore store = build_model(c, 0);
  std::uint64_t n = 0;
  for (const auto &[path, p] : store.params()) {
    const bool head = path.starts_with("classifier.") ||
                      (path.starts_with("pooler.") && s.kind != PlanKind::FullFT);
    if (head && !include_head)
      continue;
    const ParamStatus st = oracle_status(s, path);
    if (st == ParamStatus::Trainable || st == ParamStatus::BiasTunable)
      n += p.value.numel();
    else if (st == ParamStatus::LoraAugmented)
      n += static_cast<std::uint64_t>(c.lora_rank) * (p.value.dim(0) + p.value.dim(1));
  }
  return n;
}

int numeric_rank(Tensor m, double tol = 1e-10) {
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  int rank = 0;
  std::vector<bool> used(rows, false);
  for (std::size_t c = 0; c < cols; ++c) {
    std::size_t best = rows;
    double best_v = tol;
    for (std::size_t r = 0; r < rows; ++r)
      if (!used[r] && std::abs(m.at(r, c)) > best_v) {
        best = r;
        best_v = std::abs(m.at(r, c));
      }
    if (best == rows)
      continue;
    used[best] = true;
    ++rank;
    for (std::size_t r = 0; r < rows; ++r)
      if (r != best) {
        const double f = m.at(r, c) / m.at(best, c);
        for (std::size_t k = 0; k < cols; ++k)
          m.at(r, k) -= f * m.at(best, k);
      }
  }
  return rank;
}

std::filesystem::path scratch(const std::string &name) {
  const auto dir = std::filesystem::temp_directory_path() / "spafit_test_plan";
  std::filesystem::create_directories(dir);
  return dir / name;
}

// A few AdamW steps so the adapter and head move away from their init.
void train_a_little(ParamStore &s, std::uint64_t seed, int steps = 5) {
  TrainConfig tc;
  tc.learning_rate = 5e-2;
  AdamW opt(tc);
  std::mt19937_64 rng(seed);
  for (int i = 0; i < steps; ++i) {
    const Batch b = random_batch(s.config(), 4, 6, rng);
    std::vector<int> labels;
    for (int k = 0; k < 4; ++k)
      labels.push_back(static_cast<int>(rng() % 2));
    s.zero_grad();
    Graph g(Mode::Train, seed + static_cast<std::uint64_t>(i));
    g.backward(cross_entropy(model_forward(g, s, b, &s), labels));
    opt.step(s);
  }
}

const PlanSpec kAllKinds[] = {PlanSpec::full_ft(), PlanSpec::full_bitfit(),
                              PlanSpec::full_lora_i(), PlanSpec::full_lora_ii(),
                              PlanSpec::spafit(1, 2, Group3Mode::FT_I),
                              PlanSpec::spafit(0, 1, Group3Mode::FT_II)};

} // namespace

TEST_CASE("SPAFIT-8-12-II on 24 layers") {
  const ModelConfig c = ModelConfig::bert_large();
  const FinetunePlan plan = compile_plan(PlanSpec::spafit(8, 12, Group3Mode::FT_II), c);
  for (auto rel : kEncoderLayerPaths) {
    const std::string r(rel);
    CHECK(plan.assignments.at(layer_prefix(5) + r) == ParamStatus::Frozen);
    CHECK(plan.assignments.at(layer_prefix(8) + r) == ParamStatus::Frozen);
    CHECK(plan.assignments.at(layer_prefix(10) + r) ==
          (r.ends_with(".bias") ? ParamStatus::BiasTunable : ParamStatus::Frozen));
  }
  const std::string l20 = layer_prefix(20);
  for (auto w : {"attention.self.query.weight", "attention.self.key.weight",
                 "attention.self.value.weight", "attention.output.dense.weight"})
    CHECK(plan.assignments.at(l20 + w) == ParamStatus::LoraAugmented);
  for (auto b : {"intermediate.dense.bias", "output.dense.bias", "output.LayerNorm.bias"})
    CHECK(plan.assignments.at(l20 + b) == ParamStatus::BiasTunable);
  for (auto f : {"attention.self.query.bias", "attention.output.dense.bias",
                 "attention.output.LayerNorm.bias", "intermediate.dense.weight",
                 "output.dense.weight", "output.LayerNorm.weight"})
    CHECK(plan.assignments.at(l20 + f) == ParamStatus::Frozen);
  CHECK(plan.lora_targets.size() == 12 * 4);
  CHECK(plan.assignments.at("embeddings.word_embeddings.weight") == ParamStatus::Frozen);
  CHECK(plan.assignments.at("pooler.dense.weight") == ParamStatus::Trainable);
  CHECK(plan.assignments.at("classifier.weight") == ParamStatus::Trainable);
  CHECK(layer_group(plan.spec, 12) == 2);
  CHECK(layer_group(plan.spec, 13) == 3);
}

TEST_CASE("degenerate stratifications") {
  const ModelConfig c = toy_config(3);
  const FinetunePlan s00 = compile_plan(PlanSpec::spafit(0, 0, Group3Mode::FT_II), c);
  const FinetunePlan lora = compile_plan(PlanSpec::full_lora_ii(), c);
  CHECK(s00.lora_targets == lora.lora_targets);

  const FinetunePlan probe = compile_plan(PlanSpec::spafit(3, 3, Group3Mode::FT_I), c);
  for (const auto &[path, st] : probe.assignments) {
    if (path.starts_with("encoder.") || path.starts_with("embeddings."))
      CHECK(st == ParamStatus::Frozen);
    else
      CHECK(st == ParamStatus::Trainable);
  }
  CHECK(count_trainable(probe, c, false) == 0);
  CHECK(count_trainable(probe, c, true) == pooler_param_count(c) + classifier_param_count(c));
}

TEST_CASE("plan errors") {
  const ModelConfig c = toy_config(4);
  CHECK_THROWS_AS(compile_plan(PlanSpec::spafit(3, 2, Group3Mode::FT_I), c), PlanError);
  CHECK_THROWS_AS(compile_plan(PlanSpec::spafit(1, 5, Group3Mode::FT_I), c), PlanError);
  CHECK_THROWS_AS(compile_plan(PlanSpec::spafit(-1, 2, Group3Mode::FT_I), c), PlanError);
  ParamStore other = build_model(toy_config(3), 1);
  CHECK_THROWS_AS(attach_lora(other, compile_plan(PlanSpec::full_lora_i(), c), 1), PlanError);
}

TEST_CASE("plan spec text round trip") {
  for (const auto &s : kAllKinds)
    CHECK(parse_plan_spec(format_plan_spec(s)) == s);
  CHECK(parse_plan_spec("spafit:N1=8,N2=12,mode=ii") == PlanSpec::spafit(8, 12, Group3Mode::FT_II));
  CHECK(parse_plan_spec("SPAFIT:n1=0,n2=4,mode=I") == PlanSpec::spafit(0, 4, Group3Mode::FT_I));
  CHECK(display_name(PlanSpec::spafit(8, 12, Group3Mode::FT_II)) == "SPAFIT-8-12-II");
  for (auto bad : {"", "lora-iii", "spafit:", "spafit:N1=1,N2=2", "spafit:N1=1,N2=x,mode=I",
                   "spafit:N1=1,N2=2,mode=III", "spafit:N1=1,N1=2,N2=2,mode=I",
                   "spafit:N1=-1,N2=2,mode=I", "spafit:N1=1;N2=2;mode=I"})
    CHECK_THROWS_AS(parse_plan_spec(bad), PlanError);
}

TEST_CASE("LoRA scale and delta") {
  CHECK(ModelConfig::bert_large().lora_scale() == 2.0);

  LoraPair ones{"w", Tensor(Shape{4, 2}, 1.0), Tensor(Shape{2, 4}, 1.0), 2, 2};
  const Tensor d = lora_delta(ones);
  CHECK(d.shape() == Shape{4, 4});
  for (double v : d.data())
    CHECK(v == 2.0);

  LoraPair outer{"w", Tensor({2, 1}, {1, 1}), Tensor({1, 2}, {1, 2}), 1, 1};
  CHECK(lora_delta(outer).identical(Tensor({2, 2}, {1, 2, 1, 2})));

  LoraPair zero{"w", Tensor(Shape{3, 2}), Tensor(Shape{2, 5}, 1.0), 2, 4};
  const Tensor zd = lora_delta(zero);
  for (double v : zd.data())
    CHECK(v == 0.0);

  std::mt19937_64 rng(11);
  for (int r : {1, 2, 3}) {
    LoraPair p{"w", random_tensor({6, static_cast<std::size_t>(r)}, rng),
               random_tensor({static_cast<std::size_t>(r), 5}, rng), r, 2 * r};
    CHECK(numeric_rank(lora_delta(p)) == r);
  }
}

TEST_CASE("attach initialisation and zero-init transparency") {
  const ModelConfig c = toy_config(3);
  const ParamStore base = build_model(c, 6);
  std::mt19937_64 rng(1);
  const Batch b = random_batch(c, 3, 7, rng);
  const Tensor before = predict(base, b);
  for (const auto &spec : kAllKinds) {
    const FinetunePlan plan = compile_plan(spec, c);
    ParamStore s = base;
    attach_lora(s, plan, 3);
    CHECK(s.lora().size() == plan.lora_targets.size());
    for (const auto &[t, pair] : s.lora()) {
      CHECK(s.at(t).status == ParamStatus::LoraAugmented);
      CHECK(pair.B.shape() == Shape{s.at(t).value.dim(0), 4});
      CHECK(pair.A.shape() == Shape{4, s.at(t).value.dim(1)});
      for (double v : pair.B.data())
        CHECK(v == 0.0);
      CHECK(pair.scale() == 2.0);
    }
    CHECK_MESSAGE(predict(s, b).identical(before), format_plan_spec(spec));
  }
  // A drawn from N(0, 0.02).
  ModelConfig wide = toy_config(2, 64, 4, 128);
  wide.lora_rank = 16;
  ParamStore big = build_model(wide, 0);
  attach_lora(big, compile_plan(PlanSpec::full_lora_ii(), wide), 9);
  double ss = 0.0;
  std::size_t n = 0;
  for (const auto &[t, pair] : big.lora())
    for (double v : pair.A.data()) {
      ss += v * v;
      ++n;
    }
  CHECK(n == 2 * 4 * 16 * 64);
  CHECK(std::sqrt(ss / static_cast<double>(n)) == doctest::Approx(0.02).epsilon(0.03));
}

TEST_CASE("merge") {
  const ModelConfig c = toy_config(2);
  const ParamStore base = build_model(c, 2);
  const FinetunePlan plan = compile_plan(PlanSpec::spafit(0, 1, Group3Mode::FT_II), c);
  ParamStore s = base;
  attach_lora(s, plan, 8);

  ParamStore fresh = merge_lora(s, plan);
  CHECK(fresh.lora().empty());
  for (const auto &[path, p] : base.params())
    CHECK(fresh.at(path).value.identical(p.value));

  train_a_little(s, 4);
  bool moved = false;
  for (const auto &[t, pair] : s.lora())
    for (double v : pair.B.data())
      moved = moved || v != 0.0;
  REQUIRE(moved);
  const ParamStore merged = merge_lora(s, plan);
  std::mt19937_64 rng(17);
  for (int k = 0; k < 5; ++k) {
    const Batch b = random_batch(c, 4, 8, rng);
    const Tensor a = predict(s, b), m = predict(merged, b);
    for (std::size_t i = 0; i < a.numel(); ++i)
      CHECK(std::abs(a[i] - m[i]) < 1e-9);
  }
  CHECK_THROWS_AS(merge_lora(merged, plan), PlanError);
}

TEST_CASE("export and swap") {
  const ModelConfig c = toy_config(3);
  const ParamStore base = build_model(c, 12);
  const FinetunePlan plan = compile_plan(PlanSpec::spafit(1, 2, Group3Mode::FT_II), c);
  std::mt19937_64 rng(5);
  const Batch b = random_batch(c, 3, 6, rng);

  ParamStore a = base;
  attach_lora(a, plan, 1);
  train_a_little(a, 21);
  const Tensor out_a = predict(a, b);
  const auto file_a = scratch("a.spafit");
  export_adapter(a, plan, file_a);

  SUBCASE("immediate swap keeps outputs") {
    swap_adapter(a, file_a);
    CHECK(predict(a, b).identical(out_a));
  }
  SUBCASE("swap onto the same plan trained on other data") {
    ParamStore other = base;
    attach_lora(other, plan, 2);
    train_a_little(other, 99);
    REQUIRE_FALSE(predict(other, b).identical(out_a));
    const FinetunePlan got = swap_adapter(other, file_a);
    CHECK(got.spec == plan.spec);
    CHECK(predict(other, b).identical(out_a));
  }
  SUBCASE("frozen tensors are left alone") {
    // BitFit trains layer-1 biases, which the stratified plan freezes; the
    // swap must not reset them to the base values.
    ParamStore other = base;
    attach_lora(other, compile_plan(PlanSpec::full_bitfit(), c), 2);
    train_a_little(other, 99);
    const ParamStore before = other;
    swap_adapter(other, file_a);
    for (const auto &[path, st] : plan.assignments) {
      if (st == ParamStatus::Frozen || st == ParamStatus::LoraAugmented)
        CHECK(other.at(path).value.identical(before.at(path).value));
      else
        CHECK(other.at(path).value.identical(a.at(path).value));
      CHECK(other.at(path).status == st);
    }
    CHECK(other.lora().size() == plan.lora_targets.size());
    CHECK_FALSE(before.at("encoder.layer.1.output.dense.bias")
                    .value.identical(base.at("encoder.layer.1.output.dense.bias").value));
  }
  SUBCASE("rank mismatch") {
    ModelConfig c2 = c;
    c2.lora_rank = 2;
    ParamStore s2 = build_model(c2, 12);
    CHECK_THROWS_AS(swap_adapter(s2, file_a), CompatibilityError);
  }
}

TEST_CASE("counts at BERT-large scale") {
  const ModelConfig c = ModelConfig::bert_large();
  CHECK(count_trainable(compile_plan(PlanSpec::full_lora_i(), c), c, false) == 9437184u);
  CHECK(count_trainable(compile_plan(PlanSpec::full_lora_ii(), c), c, false) == 12582912u);
  CHECK(count_trainable(compile_plan(PlanSpec::full_ft(), c), c, false) == 333579264u);
  CHECK(count_trainable(compile_plan(PlanSpec::full_bitfit(), c), c, false) == 270336u);

  ModelConfig toy = toy_config(2, 4, 2, 8);
  toy.lora_rank = 2;
  CHECK(count_trainable(compile_plan(PlanSpec::full_bitfit(), toy), toy, false) == 72u);
  CHECK(oracle_count(PlanSpec::full_bitfit(), toy, false) == 72u);
}

TEST_CASE("plan ordering under both bias-tuning conventions") {
  // Encoder-only bias tuning (the convention implemented here) puts BitFit
  // last. Counting embeddings and pooler as tunable too gives 31,540,224 and
  // restores FullFT > BitFit > LoRA-II > LoRA-I.
  const ModelConfig c = ModelConfig::bert_large();
  auto n = [&](PlanSpec s) { return count_trainable(compile_plan(s, c), c, false); };
  const auto ft = n(PlanSpec::full_ft()), bf = n(PlanSpec::full_bitfit()),
             l1 = n(PlanSpec::full_lora_i()), l2 = n(PlanSpec::full_lora_ii());
  CHECK(ft > l2);
  CHECK(l2 > l1);
  CHECK(l1 > bf);
  const auto bf_wide = bf + embedding_param_count(c) + pooler_param_count(c);
  CHECK(bf_wide == 31540224u);
  CHECK(ft > bf_wide);
  CHECK(bf_wide > l2);
}

TEST_CASE("assignment totality and closed form against brute force") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const int L = static_cast<int>(rng() % 5);
    const int heads = 1 + static_cast<int>(rng() % 3);
    const int d = heads * (1 + static_cast<int>(rng() % 3)) * 2;
    const int ffn = d * (1 + static_cast<int>(rng() % 3));
    ModelConfig c = toy_config(L, d, heads, ffn);
    c.lora_rank = 1 + static_cast<int>(rng() % static_cast<unsigned>(d));
    c.num_labels = 1 + static_cast<int>(rng() % 3);
    PlanSpec s;
    switch (rng() % 5) {
    case 0:
      s = PlanSpec::full_ft();
      break;
    case 1:
      s = PlanSpec::full_bitfit();
      break;
    case 2:
      s = PlanSpec::full_lora_i();
      break;
    case 3:
      s = PlanSpec::full_lora_ii();
      break;
    default: {
      const int n2 = static_cast<int>(rng() % static_cast<unsigned>(L + 1));
      const int n1 = static_cast<int>(rng() % static_cast<unsigned>(n2 + 1));
      s = PlanSpec::spafit(n1, n2, rng() % 2 ? Group3Mode::FT_I : Group3Mode::FT_II);
    }
    }
    const FinetunePlan plan = compile_plan(s, c);
    const auto layout = param_layout(c);
    REQUIRE(plan.assignments.size() == layout.size());
    for (const auto &p : layout) {
      REQUIRE(plan.assignments.contains(p.path));
      CHECK_MESSAGE(plan.assignments.at(p.path) == oracle_status(s, p.path),
                    p.path << " under " << format_plan_spec(s));
    }
    for (bool head : {false, true}) {
      const auto want = oracle_count(s, c, head);
      CHECK(count_trainable(plan, c, head) == want);
      CHECK(census_trainable(plan, c, head) == want);
    }
  }
}

TEST_CASE("count monotonicity") {
  for (const ModelConfig &c : {ModelConfig::bert_large(), toy_config(6, 8, 2, 16)}) {
    const int L = c.num_layers;
    for (auto mode : {Group3Mode::FT_I, Group3Mode::FT_II}) {
      for (int n2 = 0; n2 <= L; ++n2)
        for (int n1 = 1; n1 <= n2; ++n1) {
          auto at = [&](int a) {
            return count_trainable(compile_plan(PlanSpec::spafit(a, n2, mode), c), c, false);
          };
          CHECK(at(n1) <= at(n1 - 1));
        }
      // Moving a layer from group 3 to group 2 trades LoRA on 3 or 4 square
      // weights plus three biases for all eight biases. For both configs the
      // group-3 layer costs more, so the count falls as N2 grows.
      const std::uint64_t r = static_cast<std::uint64_t>(c.lora_rank),
                          d = static_cast<std::uint64_t>(c.hidden),
                          f = static_cast<std::uint64_t>(c.ffn_size);
      const std::uint64_t g3 = (mode == Group3Mode::FT_I ? 3 : 4) * 2 * r * d + f + 2 * d;
      const std::uint64_t g2 = 7 * d + f;
      REQUIRE(g3 > g2);
      for (int n2 = 1; n2 <= L; ++n2) {
        auto at = [&](int b) {
          return count_trainable(compile_plan(PlanSpec::spafit(0, b, mode), c), c, false);
        };
        CHECK(at(n2) < at(n2 - 1));
        CHECK(at(n2 - 1) - at(n2) == g3 - g2);
      }
    }
  }
}
