// SPDX-License-Identifier: Apache-2.0
//
// spafit: plan compilation, parameter audits, training, evaluation,
// comparison runs and adapter export/swap, all driven by a run manifest.

#include <spafit/checkpoint.hpp>
#include <spafit/harness.hpp>
#include <spafit/manifest.hpp>
#include <spafit/plan.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>

namespace {

using namespace spafit;

enum Exit : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kIncompatible = 3,
  kDiverged = 4,
  kIo = 5,
};

struct Flags {
  std::string manifest;
  std::string spec;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<double> lr;
  std::optional<std::size_t> batch;
  std::optional<int> epochs;
  std::string checkpoint;
  std::string adapter;
  std::vector<std::string> audit_specs;
};

class UsageError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Without a manifest, plan and audit work on BERT-large dimensions.
RunManifest load(const Flags &f, bool required) {
  RunManifest m;
  if (!f.manifest.empty())
    m = load_manifest(f.manifest);
  else if (required)
    throw UsageError("--manifest is required");
  else
    m.model = ModelConfig::bert_large();
  if (!f.spec.empty())
    m.plan = parse_plan_spec(f.spec);
  if (f.seed)
    m.train.seed = *f.seed;
  if (f.lr)
    m.train.learning_rate = *f.lr;
  if (f.batch)
    m.train.batch_size = *f.batch;
  if (f.epochs)
    m.train.epochs = *f.epochs;
  if (!f.out.empty())
    m.out_dir = f.out;
  m.train.validate();
  if (m.plan)
    m.plan->validate(m.model.num_layers);
  return m;
}

PlanSpec require_plan(const RunManifest &m) {
  if (!m.plan)
    throw UsageError("no plan: give --spec or a [plan] section");
  return *m.plan;
}

void require_task(const RunManifest &m) {
  if (!m.has("task"))
    throw UsageError("manifest needs a [task] section");
}

std::filesystem::path out_file(const RunManifest &m, const char *name) {
  std::filesystem::create_directories(m.out_dir);
  return m.out_dir / name;
}

void write_text(const std::filesystem::path &path, const std::string &text) {
  std::ofstream out(path);
  out << text;
  if (!out)
    throw IoError("cannot write '" + path.string() + "'");
}

std::string with_commas(std::uint64_t n) {
  std::string s = std::to_string(n);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3)
    s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

std::string millions(std::uint64_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", static_cast<double>(n) / 1e6);
  return buf;
}

/// Model to fine-tune: the manifest's base checkpoint with a fresh head, or
/// a seeded build.
ParamStore initial_store(const RunManifest &m) {
  if (m.base)
    return with_fresh_head(load_checkpoint(*m.base), m.model, m.model_seed);
  return build_model(m.model, m.model_seed);
}

// ---------------------------------------------------------------------------

int cmd_plan(const Flags &f) {
  RunManifest m = load(f, false);
  const PlanSpec spec = require_plan(m);
  const FinetunePlan plan = compile_plan(spec, m.model);
  const ModelConfig &c = m.model;
  std::cout << "plan        " << format_plan_spec(spec) << "  (" << display_name(spec)
            << ")\n"
            << "model       L=" << c.num_layers << " d=" << c.hidden
            << " heads=" << c.num_heads << " ffn=" << c.ffn_size << " r=" << c.lora_rank
            << "\n";
  if (spec.kind == PlanKind::Spafit) {
    auto range = [](int lo, int hi) {
      return hi < lo ? std::string("none")
                     : "layers " + std::to_string(lo) + "-" + std::to_string(hi);
    };
    std::cout << "groups      1: " << range(1, spec.n1) << " (" << spec.n1 << ")"
              << "   2: " << range(spec.n1 + 1, spec.n2) << " (" << spec.n2 - spec.n1
              << ")"
              << "   3: " << range(spec.n2 + 1, c.num_layers) << " ("
              << c.num_layers - spec.n2 << ")\n";
    if (spec.n2 == c.num_layers && spec.n1 == spec.n2)
      std::cout << "            linear probing: every encoder layer frozen\n";
  }

  std::map<ParamStatus, std::size_t> totals;
  for (const auto &[path, status] : plan.assignments)
    ++totals[status];
  for (int layer = 1; layer <= c.num_layers; ++layer) {
    std::map<ParamStatus, std::size_t> counts;
    const std::string prefix = layer_prefix(layer);
    for (const auto &[path, status] : plan.assignments)
      if (path.starts_with(prefix))
        ++counts[status];
    std::printf("layer %3d  ", layer);
    if (spec.kind == PlanKind::Spafit)
      std::printf("group %d  ", layer_group(spec, layer));
    for (const auto &[status, n] : counts)
      std::printf(" %s=%zu", std::string(to_string(status)).c_str(), n);
    std::printf("\n");
  }
  std::cout << "paths      ";
  for (const auto &[status, n] : totals)
    std::cout << " " << to_string(status) << "=" << n;
  std::cout << "\n";
  const auto encoder_only = count_trainable(plan, c, false);
  std::cout << "trainable   " << with_commas(encoder_only) << " (" << millions(encoder_only)
            << "M, head excluded); " << with_commas(count_trainable(plan, c, true))
            << " with head\n";
  return kOk;
}

struct Reference {
  PlanSpec spec;
  double millions;
};

/// Reference parameter counts (millions) for the BERT-large configurations.
const std::vector<Reference> &reference_counts() {
  static const std::vector<Reference> refs = {
      {PlanSpec::full_ft(), 333.58},
      {PlanSpec::full_bitfit(), 31.52},
      {PlanSpec::full_lora_i(), 9.44},
      {PlanSpec::full_lora_ii(), 12.59},
      {PlanSpec::spafit(8, 12, Group3Mode::FT_I), 4.44},
      {PlanSpec::spafit(8, 12, Group3Mode::FT_II), 5.88},
      {PlanSpec::spafit(8, 16, Group3Mode::FT_II), 3.81},
      {PlanSpec::spafit(4, 9, Group3Mode::FT_I), 5.65},
      {PlanSpec::spafit(4, 9, Group3Mode::FT_II), 7.49},
      {PlanSpec::spafit(4, 14, Group3Mode::FT_II), 4.89},
  };
  return refs;
}

bool bert_large_shape(const ModelConfig &c) {
  const ModelConfig b = ModelConfig::bert_large();
  return c.num_layers == b.num_layers && c.hidden == b.hidden &&
         c.num_heads == b.num_heads && c.ffn_size == b.ffn_size &&
         c.vocab_size == b.vocab_size && c.max_positions == b.max_positions &&
         c.type_vocab == b.type_vocab && c.lora_rank == b.lora_rank;
}

int cmd_audit(const Flags &f) {
  RunManifest m = load(f, false);
  std::vector<PlanSpec> specs;
  for (const auto &s : f.audit_specs)
    specs.push_back(parse_plan_spec(s));
  const bool with_refs = bert_large_shape(m.model);
  if (specs.empty() && !m.compare_specs.empty())
    specs = m.compare_specs;
  if (specs.empty() && m.plan)
    specs.push_back(*m.plan);
  if (specs.empty() && with_refs)
    for (const auto &r : reference_counts())
      specs.push_back(r.spec);
  if (specs.empty())
    specs = {PlanSpec::full_ft(), PlanSpec::full_bitfit(), PlanSpec::full_lora_i(),
             PlanSpec::full_lora_ii()};

  std::printf("%-26s %-18s %14s %9s %9s %14s\n", "spec", "name", "trainable", "M",
              "ref M", "census");
  bool any_diff = false;
  for (const PlanSpec &spec : specs) {
    const FinetunePlan plan = compile_plan(spec, m.model);
    const auto n = count_trainable(plan, m.model, false);
    const auto census = census_trainable(plan, m.model, false);
    std::string ref = "-", flag;
    if (with_refs)
      for (const auto &r : reference_counts())
        if (r.spec == spec) {
          char buf[16];
          std::snprintf(buf, sizeof buf, "%.2f", r.millions);
          ref = buf;
          if (millions(n) != ref) {
            flag = "  * differs";
            any_diff = true;
          }
        }
    std::printf("%-26s %-18s %14s %9s %9s %14s%s\n", format_plan_spec(spec).c_str(),
                display_name(spec).c_str(), with_commas(n).c_str(), millions(n).c_str(),
                ref.c_str(), with_commas(census).c_str(), flag.c_str());
  }
  if (any_diff)
    std::printf("\n* The reference counts for these rows cannot be reconciled with the\n"
                "  group assignments (e.g. LoRA-I factors on 12 layers alone exceed the\n"
                "  4.44M reference for spafit:N1=8,N2=12,mode=I). Exact counts are shown;\n"
                "  no alternative counting convention is assumed.\n");
  return kOk;
}

int cmd_gen_data(const Flags &f) {
  RunManifest m = load(f, true);
  require_task(m);
  const TaskData data = generate_task(m.task);
  write_jsonl(data.train, out_file(m, "train.jsonl"));
  write_jsonl(data.val, out_file(m, "val.jsonl"));
  std::cout << "wrote " << data.train.size() << " train and " << data.val.size()
            << " validation records to " << m.out_dir.string() << "\n";
  return kOk;
}

int cmd_pretrain(const Flags &f) {
  RunManifest m = load(f, true);
  require_task(m);
  RunResult r;
  const ParamStore base = pretrain_base(m.model, m.model_seed, m.task, m.train, &r);
  save_checkpoint(base, out_file(m, "base.ckpt"));
  write_text(out_file(m, "pretrain.json"), run_result_json(r) + "\n");
  std::cout << run_result_json(r) << "\n";
  return kOk;
}

int cmd_train(const Flags &f) {
  RunManifest m = load(f, true);
  require_task(m);
  const FinetunePlan plan = compile_plan(require_plan(m), m.model);
  ParamStore store = initial_store(m);
  attach_lora(store, plan, m.train.seed);
  const RunResult r = train_run(store, plan, m.task, generate_task(m.task), m.train);
  save_checkpoint(store, out_file(m, "checkpoint.ckpt"));
  export_adapter(store, plan, out_file(m, "adapter.spafit"));
  write_text(out_file(m, "run.json"), run_result_json(r) + "\n");
  std::cout << run_result_json(r) << "\n";
  return kOk;
}

void print_metric(const TaskSpec &task, double value) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  std::cout << "{\"split\": \"val\", \"metric_name\": \""
            << to_string(task.resolved_metric()) << "\", \"metric\": " << buf << "}\n";
}

int cmd_eval(const Flags &f) {
  RunManifest m = load(f, true);
  require_task(m);
  const std::filesystem::path ck =
      f.checkpoint.empty() ? m.out_dir / "checkpoint.ckpt" : std::filesystem::path(f.checkpoint);
  const ParamStore store = load_checkpoint(ck);
  const TaskData data = generate_task(m.task);
  print_metric(m.task, evaluate(store, data.val, m.task.kind, m.task.resolved_metric()));
  return kOk;
}

int cmd_compare(const Flags &f) {
  RunManifest m = load(f, true);
  require_task(m);
  std::vector<PlanSpec> specs = m.compare_specs;
  if (!f.spec.empty() || specs.empty())
    specs = {require_plan(m)};
  CompareOptions o;
  o.model = m.model;
  o.model_seed = m.model_seed;
  if (m.base)
    o.base = std::make_shared<const ParamStore>(load_checkpoint(*m.base));
  o.task = m.task;
  o.train = m.train;
  o.seeds = m.compare_seeds.empty() || f.seed
                ? std::vector<std::uint64_t>{m.train.seed}
                : m.compare_seeds;
  o.full_ft_learning_rate = m.full_ft_learning_rate;
  o.workers = m.workers;
  const ComparisonTable table = compare_configs(specs, o);
  std::ofstream csv(out_file(m, "compare.csv"));
  write_csv(table, csv);
  if (!csv)
    throw IoError("cannot write compare.csv");
  write_csv(table, std::cout);
  return kOk;
}

int cmd_export_adapter(const Flags &f) {
  RunManifest m = load(f, true);
  const std::filesystem::path ck =
      f.checkpoint.empty() ? m.out_dir / "checkpoint.ckpt" : std::filesystem::path(f.checkpoint);
  const ParamStore store = load_checkpoint(ck);
  const FinetunePlan plan = compile_plan(require_plan(m), store.config());
  const std::filesystem::path dest =
      f.adapter.empty() ? out_file(m, "adapter.spafit") : std::filesystem::path(f.adapter);
  export_adapter(store, plan, dest);
  std::cout << "exported " << format_plan_spec(plan.spec) << " adapter to "
            << dest.string() << "\n";
  return kOk;
}

int cmd_swap_adapter(const Flags &f) {
  RunManifest m = load(f, true);
  if (f.adapter.empty())
    throw UsageError("--adapter is required");
  const std::filesystem::path ck =
      f.checkpoint.empty() ? m.out_dir / "checkpoint.ckpt" : std::filesystem::path(f.checkpoint);
  ParamStore store = load_checkpoint(ck);
  const FinetunePlan plan = swap_adapter(store, f.adapter);
  save_checkpoint(store, out_file(m, "swapped.ckpt"));
  std::cerr << "swapped in " << format_plan_spec(plan.spec) << " adapter\n";
  if (m.has("task")) {
    const TaskData data = generate_task(m.task);
    print_metric(m.task, evaluate(store, data.val, m.task.kind, m.task.resolved_metric()));
  }
  return kOk;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"spafit: stratified parameter-efficient fine-tuning of a small "
               "transformer encoder"};
  app.require_subcommand(1);
  app.footer("Manifest keys and defaults:\n" + manifest_reference() +
             "\nPlan specs: full-ft, bitfit, lora-i, lora-ii, spafit:N1=<n>,N2=<n>,mode=I|II\n"
             "Learning-rate grid: 2e-3, 6e-3, 2e-5, 6e-5\n"
             "Exit codes: 0 ok, 1 other failure, 2 usage or configuration error,\n"
             "            3 incompatible adapter, 4 training diverged, 5 I/O or file format "
             "error\n");

  Flags f;
  auto common = [&](CLI::App *sub, bool manifest_required) {
    auto *opt = sub->add_option("--manifest", f.manifest, "run manifest");
    if (manifest_required)
      opt->required();
    sub->add_option("--spec", f.spec, "plan spec, overrides [plan] spec");
    sub->add_option("--out", f.out, "output directory, overrides [output] dir");
  };
  auto training = [&](CLI::App *sub) {
    sub->add_option("--seed", f.seed, "training seed, overrides [train] seed");
    sub->add_option("--lr", f.lr, "learning rate, overrides [train] learning_rate");
    sub->add_option("--batch", f.batch, "batch size, overrides [train] batch_size");
    sub->add_option("--epochs", f.epochs, "epochs, overrides [train] epochs");
  };

  std::map<CLI::App *, int (*)(const Flags &)> handlers;
  auto *plan = app.add_subcommand("plan", "print the parameter partition of a plan "
                                          "(BERT-large dims without a manifest)");
  common(plan, false);
  handlers[plan] = cmd_plan;

  auto *audit = app.add_subcommand("audit", "exact trainable-parameter counts per plan");
  common(audit, false);
  audit->add_option("--audit-spec", f.audit_specs, "plan spec to audit (repeatable)");
  handlers[audit] = cmd_audit;

  auto *gen = app.add_subcommand("gen-data", "write the task's train/val splits as JSONL");
  common(gen, true);
  handlers[gen] = cmd_gen_data;

  auto *pre = app.add_subcommand("pretrain", "fully train a seeded build on the "
                                             "manifest task and save it as base.ckpt");
  common(pre, true);
  training(pre);
  handlers[pre] = cmd_pretrain;

  auto *train = app.add_subcommand("train", "fine-tune under the plan; writes "
                                            "checkpoint.ckpt, adapter.spafit, run.json");
  common(train, true);
  training(train);
  handlers[train] = cmd_train;

  auto *eval = app.add_subcommand("eval", "validation metric of a checkpoint");
  common(eval, true);
  eval->add_option("--checkpoint", f.checkpoint, "default <out>/checkpoint.ckpt");
  handlers[eval] = cmd_eval;

  auto *compare = app.add_subcommand("compare", "train every [compare] spec per seed; "
                                                "writes compare.csv");
  common(compare, true);
  training(compare);
  handlers[compare] = cmd_compare;

  auto *exp = app.add_subcommand("export-adapter", "write the plan's trainable tensors "
                                                   "of a checkpoint");
  common(exp, true);
  exp->add_option("--checkpoint", f.checkpoint, "default <out>/checkpoint.ckpt");
  exp->add_option("--adapter", f.adapter, "destination, default <out>/adapter.spafit");
  handlers[exp] = cmd_export_adapter;

  auto *swap = app.add_subcommand("swap-adapter", "load an adapter into a checkpoint; "
                                                  "writes swapped.ckpt");
  common(swap, true);
  swap->add_option("--checkpoint", f.checkpoint, "default <out>/checkpoint.ckpt");
  swap->add_option("--adapter", f.adapter, "adapter file")->required();
  handlers[swap] = cmd_swap_adapter;

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    for (auto &[sub, handler] : handlers)
      if (sub->parsed())
        return handler(f);
  } catch (const CompatibilityError &e) {
    std::cerr << "spafit: incompatible adapter: " << e.what() << "\n";
    return kIncompatible;
  } catch (const DivergenceError &e) {
    std::cerr << "spafit: " << e.what() << "\n";
    return kDiverged;
  } catch (const CheckpointError &e) {
    std::cerr << "spafit: " << e.what() << "\n";
    return kIo;
  } catch (const std::filesystem::filesystem_error &e) {
    std::cerr << "spafit: " << e.what() << "\n";
    return kIo;
  } catch (const MetricError &e) {
    std::cerr << "spafit: " << e.what() << "\n";
    return kFailure;
  } catch (const std::invalid_argument &e) {
    std::cerr << "spafit: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception &e) {
    std::cerr << "spafit: " << e.what() << "\n";
    return kFailure;
  }
  return kFailure;
}
