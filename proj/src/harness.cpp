// SPDX-License-Identifier: Apache-2.0

#include <spafit/harness.hpp>

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <future>
#include <numeric>
#include <ostream>
#include <random>
#include <set>

namespace spafit {

using nlohmann::json;

DivergenceError::DivergenceError(std::uint64_t step, double loss)
    : std::runtime_error("training diverged at step " + std::to_string(step) +
                         " (loss " + std::to_string(loss) + ")"),
      step_(step) {}

std::string_view to_string(TaskKind k) {
  switch (k) {
  case TaskKind::SingleSentence:
    return "single_sentence_classification";
  case TaskKind::PairClassification:
    return "pair_classification";
  case TaskKind::PairRegression:
    return "pair_regression";
  }
  return "?";
}

TaskKind parse_task_kind(std::string_view s) {
  for (TaskKind k : {TaskKind::SingleSentence, TaskKind::PairClassification,
                     TaskKind::PairRegression})
    if (s == to_string(k))
      return k;
  throw TaskError("unknown task kind '" + std::string(s) + "'");
}

MetricKind TaskSpec::resolved_metric() const {
  if (metric)
    return *metric;
  return kind == TaskKind::PairRegression ? MetricKind::Pearson
                                          : MetricKind::Accuracy;
}

std::size_t TaskSpec::sequence_length() const {
  const auto n = static_cast<std::size_t>(segment_length);
  return is_pair() ? 2 * n + 3 : n + 2;
}

void TaskSpec::validate() const {
  if (segment_length <= 0)
    throw TaskError("task: segment_length must be positive");
  if (train_size == 0 || val_size == 0)
    throw TaskError("task: train_size and val_size must be positive");
  const int content = vocab_size - kFirstContentToken;
  if (kind == TaskKind::SingleSentence) {
    if (content < kTriggerTokens + 2)
      throw TaskError("task: vocab_size " + std::to_string(vocab_size) +
                      " too small for the trigger vocabulary");
  } else if (content < 2 * segment_length) {
    throw TaskError("task: vocab_size " + std::to_string(vocab_size) +
                    " cannot supply two disjoint segments of " +
                    std::to_string(segment_length) + " tokens");
  }
  if (!(score_noise >= 0.0))
    throw TaskError("task: score_noise must be non-negative");
  const MetricKind m = resolved_metric();
  if ((kind == TaskKind::PairRegression) != (m == MetricKind::Pearson))
    throw TaskError("task: metric " + std::string(to_string(m)) +
                    " does not fit task kind " + std::string(to_string(kind)));
}

namespace {

std::size_t overlap(const std::vector<int> &a, const std::vector<int> &b) {
  std::set<int> sa(a.begin(), a.end());
  std::set<int> seen;
  std::size_t n = 0;
  for (int t : b)
    if (sa.contains(t) && seen.insert(t).second)
      ++n;
  return n;
}

int uniform_int(std::mt19937_64 &rng, int lo, int hi_exclusive) {
  return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi_exclusive - lo));
}

/// `n` distinct content tokens not in `exclude`.
std::vector<int> distinct_tokens(std::mt19937_64 &rng, const TaskSpec &spec,
                                 std::size_t n, const std::set<int> &exclude) {
  std::vector<int> out;
  std::set<int> used = exclude;
  while (out.size() < n) {
    const int t = uniform_int(rng, kFirstContentToken, spec.vocab_size);
    if (used.insert(t).second)
      out.push_back(t);
  }
  return out;
}

void shuffle(std::mt19937_64 &rng, std::vector<int> &v) {
  for (std::size_t i = v.size(); i > 1; --i)
    std::swap(v[i - 1], v[rng() % i]);
}

DatasetRecord make_record(const TaskSpec &spec, std::mt19937_64 &rng) {
  const std::size_t n = static_cast<std::size_t>(spec.segment_length);
  DatasetRecord r;
  switch (spec.kind) {
  case TaskKind::SingleSentence: {
    const bool positive = (rng() >> 63) != 0;
    r.text_a.resize(n);
    for (auto &t : r.text_a)
      t = uniform_int(rng, kFirstContentToken + kTriggerTokens, spec.vocab_size);
    if (positive)
      r.text_a[rng() % n] =
          uniform_int(rng, kFirstContentToken, kFirstContentToken + kTriggerTokens);
    r.label = positive ? 1.0 : 0.0;
    break;
  }
  case TaskKind::PairClassification: {
    const bool positive = (rng() >> 63) != 0;
    r.text_a = distinct_tokens(rng, spec, n, {});
    const std::set<int> in_a(r.text_a.begin(), r.text_a.end());
    std::vector<int> b;
    if (positive) {
      // Paraphrase analog: shuffled copy with at most one substitution.
      b = r.text_a;
      if (n > 2 && (rng() >> 63) != 0)
        b[rng() % n] = distinct_tokens(rng, spec, 1, in_a)[0];
      shuffle(rng, b);
    } else {
      b = distinct_tokens(rng, spec, n, in_a);
    }
    r.text_b = std::move(b);
    r.label = positive ? 1.0 : 0.0;
    break;
  }
  case TaskKind::PairRegression: {
    r.text_a = distinct_tokens(rng, spec, n, {});
    const std::set<int> in_a(r.text_a.begin(), r.text_a.end());
    const std::size_t shared = rng() % (n + 1);
    std::vector<int> b(r.text_a.begin(), r.text_a.end());
    shuffle(rng, b);
    b.resize(shared);
    for (int t : distinct_tokens(rng, spec, n - shared, in_a))
      b.push_back(t);
    shuffle(rng, b);
    r.text_b = std::move(b);
    std::normal_distribution<double> noise(0.0, 1.0);
    const double z = noise(rng);
    r.label = std::clamp(planted_score(r) + spec.score_noise * z, 0.0, kMaxScore);
    break;
  }
  }
  return r;
}

std::vector<int> to_labels(std::span<const double> v) {
  std::vector<int> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    out[i] = static_cast<int>(std::lround(v[i]));
  return out;
}

double score(TaskKind kind, MetricKind metric, std::span<const double> pred,
             std::span<const double> gold) {
  if (kind == TaskKind::PairRegression) {
    if (metric != MetricKind::Pearson)
      throw TaskError("regression tasks are scored by Pearson correlation");
    return pearson_corr(pred, gold);
  }
  const auto p = to_labels(pred), g = to_labels(gold);
  switch (metric) {
  case MetricKind::Accuracy:
    return accuracy(p, g);
  case MetricKind::F1:
    return f1_binary(p, g);
  case MetricKind::Matthews:
    return matthews_corr(p, g);
  case MetricKind::Pearson:
    break;
  }
  throw TaskError("classification tasks cannot be scored by Pearson correlation");
}

std::vector<double> gold_of(const Dataset &data) {
  std::vector<double> g(data.size());
  for (std::size_t i = 0; i < data.size(); ++i)
    g[i] = data[i].label;
  return g;
}

} // namespace

TaskData generate_task(const TaskSpec &spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  TaskData d;
  d.train.reserve(spec.train_size);
  d.val.reserve(spec.val_size);
  for (std::size_t i = 0; i < spec.train_size; ++i)
    d.train.push_back(make_record(spec, rng));
  for (std::size_t i = 0; i < spec.val_size; ++i)
    d.val.push_back(make_record(spec, rng));
  return d;
}

int planted_label(const TaskSpec &spec, const DatasetRecord &r) {
  switch (spec.kind) {
  case TaskKind::SingleSentence:
    return std::any_of(r.text_a.begin(), r.text_a.end(), [](int t) {
      return t >= kFirstContentToken && t < kFirstContentToken + kTriggerTokens;
    });
  case TaskKind::PairClassification:
    if (!r.text_b)
      throw TaskError("pair record without text_b");
    return 2 * overlap(r.text_a, *r.text_b) > r.text_a.size() ? 1 : 0;
  case TaskKind::PairRegression:
    break;
  }
  throw TaskError("planted_label: regression tasks have scores, not labels");
}

double planted_score(const DatasetRecord &r) {
  if (!r.text_b)
    throw TaskError("pair record without text_b");
  const std::set<int> sa(r.text_a.begin(), r.text_a.end());
  const std::set<int> sb(r.text_b->begin(), r.text_b->end());
  const double denom = static_cast<double>(std::min(sa.size(), sb.size()));
  return denom == 0.0 ? 0.0
                      : kMaxScore * static_cast<double>(overlap(r.text_a, *r.text_b)) /
                            denom;
}

Batch make_batch(const Dataset &records, std::span<const std::size_t> indices) {
  Batch b;
  b.batch = indices.size();
  for (auto i : indices) {
    const auto &r = records.at(i);
    const std::size_t len =
        r.text_a.size() + 2 + (r.text_b ? r.text_b->size() + 1 : 0);
    b.seq = std::max(b.seq, len);
  }
  const std::size_t n = b.batch * b.seq;
  b.token_ids.assign(n, kPadToken);
  b.type_ids.assign(n, 0);
  std::vector<int> mask(n, 0);
  bool padded = false;
  for (std::size_t row = 0; row < indices.size(); ++row) {
    const auto &r = records[indices[row]];
    std::size_t pos = row * b.seq;
    auto put = [&](int tok, int type) {
      b.token_ids[pos] = tok;
      b.type_ids[pos] = type;
      mask[pos] = 1;
      ++pos;
    };
    put(kClsToken, 0);
    for (int t : r.text_a)
      put(t, 0);
    put(kSepToken, 0);
    if (r.text_b) {
      for (int t : *r.text_b)
        put(t, 1);
      put(kSepToken, 1);
    }
    padded |= pos != (row + 1) * b.seq;
  }
  if (padded)
    b.attention_mask = std::move(mask);
  return b;
}

void write_jsonl(const Dataset &data, std::ostream &out) {
  for (const auto &r : data) {
    json j;
    j["text_a"] = r.text_a;
    if (r.text_b)
      j["text_b"] = *r.text_b;
    j["label"] = r.label;
    out << j.dump() << '\n';
  }
}

Dataset read_jsonl(std::istream &in) {
  Dataset d;
  std::size_t line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (line.empty())
      continue;
    try {
      const json j = json::parse(line);
      for (const auto &[key, _] : j.items())
        if (key != "text_a" && key != "text_b" && key != "label")
          throw TaskError("unknown field '" + key + "'");
      DatasetRecord r;
      r.text_a = j.at("text_a").get<std::vector<int>>();
      if (j.contains("text_b"))
        r.text_b = j.at("text_b").get<std::vector<int>>();
      r.label = j.at("label").get<double>();
      d.push_back(std::move(r));
    } catch (const std::exception &e) {
      throw TaskError("dataset line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return d;
}

void write_jsonl(const Dataset &data, const std::filesystem::path &path) {
  std::ofstream out(path);
  if (!out)
    throw IoError("cannot open '" + path.string() + "' for writing");
  write_jsonl(data, out);
  if (!out)
    throw IoError("write to '" + path.string() + "' failed");
}

Dataset read_jsonl(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw IoError("cannot open '" + path.string() + "' for reading");
  return read_jsonl(in);
}

std::vector<double> predict_all(const ParamStore &store, const Dataset &data,
                                std::size_t batch_size) {
  std::vector<double> out;
  out.reserve(data.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i)
      idx.push_back(i);
    const Tensor logits = predict(store, make_batch(data, idx));
    const std::size_t width = logits.cols();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (width == 1) {
        out.push_back(logits[r]);
      } else {
        const double *row = &logits[r * width];
        out.push_back(static_cast<double>(std::max_element(row, row + width) - row));
      }
    }
  }
  return out;
}

double evaluate(const ParamStore &store, const Dataset &data, TaskKind kind,
                MetricKind metric) {
  const auto pred = predict_all(store, data);
  const auto gold = gold_of(data);
  return score(kind, metric, pred, gold);
}

std::string run_result_json(const RunResult &r) {
  json j;
  j["plan_spec"] = r.plan_spec;
  j["trainable_params"] = r.trainable_params;
  j["epoch_losses"] = r.epoch_losses;
  j["metric_name"] = r.metric_name;
  j["metric"] = r.metric;
  j["train_metric"] = r.train_metric;
  j["wall_seconds"] = r.wall_seconds;
  j["seed"] = r.seed;
  j["hyperparameters"] = {
      {"learning_rate", r.train.learning_rate},
      {"batch_size", r.train.batch_size},
      {"epochs", r.train.epochs},
      {"weight_decay", r.train.weight_decay},
      {"beta1", r.train.beta1},
      {"beta2", r.train.beta2},
      {"eps", r.train.eps},
      {"seed", r.train.seed},
  };
  return j.dump(2);
}

RunResult parse_run_result_json(const std::string &text) {
  const json j = json::parse(text);
  RunResult r;
  r.plan_spec = j.at("plan_spec").get<std::string>();
  r.trainable_params = j.at("trainable_params").get<std::uint64_t>();
  r.epoch_losses = j.at("epoch_losses").get<std::vector<double>>();
  r.metric_name = j.at("metric_name").get<std::string>();
  r.metric = j.at("metric").get<double>();
  r.train_metric = j.at("train_metric").get<double>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  const json &h = j.at("hyperparameters");
  r.train.learning_rate = h.at("learning_rate").get<double>();
  r.train.batch_size = h.at("batch_size").get<std::size_t>();
  r.train.epochs = h.at("epochs").get<int>();
  r.train.weight_decay = h.at("weight_decay").get<double>();
  r.train.beta1 = h.at("beta1").get<double>();
  r.train.beta2 = h.at("beta2").get<double>();
  r.train.eps = h.at("eps").get<double>();
  r.train.seed = h.at("seed").get<std::uint64_t>();
  return r;
}

RunResult train_run(ParamStore &store, const FinetunePlan &plan,
                    const TaskSpec &task, const TaskData &data,
                    const TrainConfig &cfg) {
  cfg.validate();
  task.validate();
  if (store.config().num_labels != task.head_width())
    throw ConfigError("model head has " + std::to_string(store.config().num_labels) +
                      " outputs but task " + std::string(to_string(task.kind)) +
                      " needs " + std::to_string(task.head_width()));
  if (!(plan.config == store.config()))
    throw PlanError("plan was compiled for a different model config");
  for (const auto &[path, status] : plan.assignments)
    if (store.at(path).status != status)
      throw PlanError("store statuses do not match the plan at '" + path +
                      "'; call attach_lora first");
  if (store.lora().size() != plan.lora_targets.size())
    throw PlanError("store LoRA pairs do not match the plan");

  const auto start = std::chrono::steady_clock::now();
  RunResult result;
  result.plan_spec = format_plan_spec(plan.spec);
  result.trainable_params = count_trainable(plan, store.config(), false);
  result.metric_name = std::string(to_string(task.resolved_metric()));
  result.seed = cfg.seed;
  result.train = cfg;

  AdamW opt(cfg);
  std::mt19937_64 order_rng(cfg.seed);
  std::vector<std::size_t> order(data.train.size());
  std::vector<int> labels;
  std::vector<double> targets;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[order_rng() % i]);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      const std::span<const std::size_t> idx(
          order.data() + s, std::min(cfg.batch_size, order.size() - s));
      const Batch batch = make_batch(data.train, idx);
      store.zero_grad();
      // Each step gets its own dropout stream derived from the run seed.
      Graph g(Mode::Train, cfg.seed * 0x9E3779B97F4A7C15ull + opt.steps() + 1);
      Var out = model_forward(g, store, batch, &store);
      Var loss;
      if (task.kind == TaskKind::PairRegression) {
        targets.clear();
        for (auto i : idx)
          targets.push_back(data.train[i].label);
        loss = mse(out, targets);
      } else {
        labels.clear();
        for (auto i : idx)
          labels.push_back(static_cast<int>(std::lround(data.train[i].label)));
        loss = cross_entropy(out, labels);
      }
      const double lv = loss.value()[0];
      if (!std::isfinite(lv))
        throw DivergenceError(opt.steps() + 1, lv);
      g.backward(loss);
      opt.step(store);
      loss_sum += lv;
      ++batches;
    }
    result.epoch_losses.push_back(batches ? loss_sum / static_cast<double>(batches)
                                          : 0.0);
  }
  store.zero_grad();
  const MetricKind m = task.resolved_metric();
  result.metric = evaluate(store, data.val, task.kind, m);
  result.train_metric = evaluate(store, data.train, task.kind, m);
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

ParamStore pretrain_base(const ModelConfig &config, std::uint64_t model_seed,
                         const TaskSpec &task, const TrainConfig &cfg,
                         RunResult *result) {
  ModelConfig c = config;
  c.num_labels = task.head_width();
  ParamStore store = build_model(c, model_seed);
  const FinetunePlan plan = compile_plan(PlanSpec::full_ft(), c);
  attach_lora(store, plan, cfg.seed);
  RunResult r = train_run(store, plan, task, generate_task(task), cfg);
  if (result)
    *result = std::move(r);
  return store;
}

ComparisonTable compare_configs(const std::vector<PlanSpec> &specs,
                                const CompareOptions &o) {
  ComparisonTable table;
  table.seeds = o.seeds;
  if (o.seeds.empty())
    throw ConfigError("compare: at least one seed is required");
  ModelConfig model = o.model;
  model.num_labels = o.task.head_width();
  std::vector<FinetunePlan> plans;
  for (const PlanSpec &s : specs)
    plans.push_back(compile_plan(s, model));
  const TaskData data = generate_task(o.task);

  struct Job {
    std::size_t row;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::size_t r = 0; r < specs.size(); ++r)
    for (auto seed : o.seeds)
      jobs.push_back({r, seed});

  auto run = [&](const Job &job) {
    const FinetunePlan &plan = plans[job.row];
    ParamStore store = o.base ? with_fresh_head(*o.base, model, o.model_seed)
                              : build_model(model, o.model_seed);
    attach_lora(store, plan, job.seed);
    TrainConfig cfg = o.train;
    cfg.seed = job.seed;
    if (plan.spec.kind == PlanKind::FullFT && o.full_ft_learning_rate)
      cfg.learning_rate = *o.full_ft_learning_rate;
    return train_run(store, plan, o.task, data, cfg);
  };

  std::vector<RunResult> results(jobs.size());
  const std::size_t workers = std::max(1u, o.workers);
  for (std::size_t start = 0; start < jobs.size(); start += workers) {
    const std::size_t end = std::min(jobs.size(), start + workers);
    if (workers == 1) {
      results[start] = run(jobs[start]);
      continue;
    }
    std::vector<std::future<RunResult>> pending;
    for (std::size_t j = start; j < end; ++j)
      pending.push_back(std::async(std::launch::async, run, jobs[j]));
    for (std::size_t j = start; j < end; ++j)
      results[j] = pending[j - start].get();
  }

  for (std::size_t r = 0; r < specs.size(); ++r) {
    ComparisonRow row;
    row.spec = specs[r];
    row.trainable_params = count_trainable(plans[r], model, false);
    row.metric_name = std::string(to_string(o.task.resolved_metric()));
    for (std::size_t j = 0; j < jobs.size(); ++j)
      if (jobs[j].row == r)
        row.runs.push_back(results[j]);
    row.best = row.runs.front().metric;
    for (const auto &run_result : row.runs)
      row.best = std::max(row.best, run_result.metric);
    table.rows.push_back(std::move(row));
  }

  const bool any_peft =
      std::any_of(table.rows.begin(), table.rows.end(),
                  [](const ComparisonRow &row) { return row.spec.kind != PlanKind::FullFT; });
  ComparisonRow *best = nullptr;
  for (auto &row : table.rows) {
    if (any_peft && row.spec.kind == PlanKind::FullFT)
      continue;
    if (!best || row.best > best->best)
      best = &row;
  }
  if (best)
    best->best_peft = true;
  return table;
}

void write_csv(const ComparisonTable &table, std::ostream &out) {
  out << "spec,name,trainable_params,metric,max,best_peft";
  for (auto s : table.seeds)
    out << ",seed_" << s;
  out << '\n';
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  for (const auto &row : table.rows) {
    out << '"' << format_plan_spec(row.spec) << "\"," << display_name(row.spec)
        << ',' << row.trainable_params << ',' << row.metric_name << ','
        << num(row.best) << ',' << (row.best_peft ? 1 : 0);
    for (const auto &r : row.runs)
      out << ',' << num(r.metric);
    out << '\n';
  }
}

} // namespace spafit
