// SPDX-License-Identifier: Apache-2.0

#include <spafit/manifest.hpp>

#include <spafit/checkpoint.hpp>

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace spafit {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos)
    return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(const std::string &s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    item = trim(item);
    if (!item.empty())
      out.push_back(item);
  }
  return out;
}

template <typename T> T parse_number(const std::string &v, const std::string &where) {
  T out{};
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ManifestError(where + ": '" + v + "' is not a valid number");
  return out;
}

using Setter = std::function<void(RunManifest &, const std::string &, const std::string &)>;

struct Key {
  Setter set;
  bool required = false;
  const char *doc = "";
};

#define SPAFIT_INT(field)                                                      \
  [](RunManifest &m, const std::string &v, const std::string &w) {             \
    field = parse_number<int>(v, w);                                           \
  }
#define SPAFIT_DBL(field)                                                      \
  [](RunManifest &m, const std::string &v, const std::string &w) {             \
    field = parse_number<double>(v, w);                                        \
  }
#define SPAFIT_U64(field)                                                      \
  [](RunManifest &m, const std::string &v, const std::string &w) {             \
    field = parse_number<std::uint64_t>(v, w);                                 \
  }
#define SPAFIT_SIZE(field)                                                     \
  [](RunManifest &m, const std::string &v, const std::string &w) {             \
    field = parse_number<std::size_t>(v, w);                                   \
  }

const std::map<std::string, std::map<std::string, Key>> &schema() {
  static const std::map<std::string, std::map<std::string, Key>> s = {
      {"model",
       {
           {"num_layers", {SPAFIT_INT(m.model.num_layers), false, "4"}},
           {"hidden", {SPAFIT_INT(m.model.hidden), false, "32"}},
           {"num_heads", {SPAFIT_INT(m.model.num_heads), false, "4"}},
           {"ffn_size", {SPAFIT_INT(m.model.ffn_size), false, "64"}},
           {"vocab_size", {SPAFIT_INT(m.model.vocab_size), false, "64"}},
           {"max_positions", {SPAFIT_INT(m.model.max_positions), false, "32"}},
           {"type_vocab", {SPAFIT_INT(m.model.type_vocab), false, "2"}},
           {"lora_rank", {SPAFIT_INT(m.model.lora_rank), false, "8"}},
           {"lora_alpha", {SPAFIT_INT(m.model.lora_alpha), false, "16"}},
           {"dropout_p", {SPAFIT_DBL(m.model.dropout_p), false, "0.1"}},
           {"layer_norm_eps", {SPAFIT_DBL(m.model.layer_norm_eps), false, "1e-12"}},
           {"seed", {SPAFIT_U64(m.model_seed), true, "required"}},
           {"base",
            {[](RunManifest &m, const std::string &v, const std::string &) {
               m.base = v;
             },
             false, "unset (seeded random build)"}},
       }},
      {"plan",
       {
           {"spec",
            {[](RunManifest &m, const std::string &v, const std::string &w) {
               try {
                 m.plan = parse_plan_spec(v);
               } catch (const PlanError &e) {
                 throw ManifestError(w + ": " + e.what());
               }
             },
             true, "required, e.g. spafit:N1=8,N2=12,mode=II"}},
       }},
      {"train",
       {
           {"learning_rate", {SPAFIT_DBL(m.train.learning_rate), false, "6e-5"}},
           {"batch_size", {SPAFIT_SIZE(m.train.batch_size), false, "16"}},
           {"epochs", {SPAFIT_INT(m.train.epochs), false, "10"}},
           {"weight_decay", {SPAFIT_DBL(m.train.weight_decay), false, "0.01"}},
           {"beta1", {SPAFIT_DBL(m.train.beta1), false, "0.9"}},
           {"beta2", {SPAFIT_DBL(m.train.beta2), false, "0.999"}},
           {"eps", {SPAFIT_DBL(m.train.eps), false, "1e-8"}},
           {"seed", {SPAFIT_U64(m.train.seed), true, "required"}},
       }},
      {"task",
       {
           {"kind",
            {[](RunManifest &m, const std::string &v, const std::string &w) {
               try {
                 m.task.kind = parse_task_kind(v);
               } catch (const TaskError &e) {
                 throw ManifestError(w + ": " + e.what());
               }
             },
             false, "pair_classification"}},
           {"vocab_size", {SPAFIT_INT(m.task.vocab_size), false, "64"}},
           {"segment_length", {SPAFIT_INT(m.task.segment_length), false, "6"}},
           {"train_size", {SPAFIT_SIZE(m.task.train_size), false, "2000"}},
           {"val_size", {SPAFIT_SIZE(m.task.val_size), false, "500"}},
           {"score_noise", {SPAFIT_DBL(m.task.score_noise), false, "0.1"}},
           {"metric",
            {[](RunManifest &m, const std::string &v, const std::string &w) {
               try {
                 m.task.metric = parse_metric(v);
               } catch (const MetricError &e) {
                 throw ManifestError(w + ": " + e.what());
               }
             },
             false, "accuracy (classification) / pearson (regression)"}},
           {"seed", {SPAFIT_U64(m.task.seed), true, "required"}},
       }},
      {"output",
       {
           {"dir",
            {[](RunManifest &m, const std::string &v, const std::string &) {
               m.out_dir = v;
             },
             false, "spafit-out"}},
       }},
      {"compare",
       {
           {"specs",
            {[](RunManifest &m, const std::string &v, const std::string &w) {
               for (const auto &s : split(v, ';')) {
                 try {
                   m.compare_specs.push_back(parse_plan_spec(s));
                 } catch (const PlanError &e) {
                   throw ManifestError(w + ": " + e.what());
                 }
               }
             },
             false, "the [plan] spec"}},
           {"seeds",
            {[](RunManifest &m, const std::string &v, const std::string &w) {
               for (const auto &s : split(v, ','))
                 m.compare_seeds.push_back(parse_number<std::uint64_t>(s, w));
             },
             false, "the [train] seed"}},
           {"workers",
            {[](RunManifest &m, const std::string &v, const std::string &w) {
               m.workers = parse_number<unsigned>(v, w);
             },
             false, "1"}},
           {"full_ft_learning_rate", {SPAFIT_DBL(m.full_ft_learning_rate), false,
                                      "unset (use [train] learning_rate)"}},
       }},
  };
  return s;
}

#undef SPAFIT_INT
#undef SPAFIT_DBL
#undef SPAFIT_U64
#undef SPAFIT_SIZE

} // namespace

void RunManifest::require(const std::string &section) const {
  if (!has(section))
    throw ManifestError("manifest has no [" + section + "] section");
}

RunManifest parse_manifest(const std::string &text,
                           const std::filesystem::path &base_dir) {
  RunManifest m;
  const auto &keys = schema();
  std::map<std::string, std::set<std::string>> seen;
  std::string section;
  std::istringstream in(text);
  std::size_t line_no = 0;
  for (std::string raw; std::getline(in, raw);) {
    ++line_no;
    const std::string where = "manifest line " + std::to_string(line_no);
    std::string line = raw;
    if (auto hash = line.find('#'); hash != std::string::npos)
      line.resize(hash);
    line = trim(line);
    if (line.empty())
      continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ManifestError(where + ": malformed section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      if (!keys.contains(section))
        throw ManifestError(where + ": unknown section [" + section + "]");
      if (!m.sections.insert(section).second)
        throw ManifestError(where + ": repeated section [" + section + "]");
      continue;
    }
    if (section.empty())
      throw ManifestError(where + ": key outside of any section");
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ManifestError(where + ": expected key = value");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    const auto &section_keys = keys.at(section);
    auto it = section_keys.find(key);
    if (it == section_keys.end())
      throw ManifestError(where + ": unknown key '" + key + "' in [" + section + "]");
    if (!seen[section].insert(key).second)
      throw ManifestError(where + ": repeated key '" + key + "'");
    it->second.set(m, value, where + " (" + section + "." + key + ")");
  }
  for (const auto &s : m.sections)
    for (const auto &[key, spec] : keys.at(s))
      if (spec.required && !seen[s].contains(key))
        throw ManifestError("manifest: [" + s + "] requires '" + key + "'");

  if (m.has("task"))
    m.model.num_labels = m.task.head_width();
  if (m.out_dir.is_relative() && !base_dir.empty())
    m.out_dir = base_dir / m.out_dir;
  if (m.base && m.base->is_relative() && !base_dir.empty())
    m.base = base_dir / *m.base;
  try {
    if (m.has("model"))
      m.model.validate();
    if (m.has("train"))
      m.train.validate();
    if (m.has("task"))
      m.task.validate();
    if (m.plan && m.has("model"))
      m.plan->validate(m.model.num_layers);
  } catch (const std::invalid_argument &e) {
    throw ManifestError(e.what());
  }
  return m;
}

RunManifest load_manifest(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw IoError("cannot open manifest '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_manifest(ss.str(), path.parent_path());
}

std::string manifest_reference() {
  std::ostringstream os;
  for (const auto &[section, keys] : schema()) {
    os << "  [" << section << "]\n";
    for (const auto &[key, spec] : keys)
      os << "    " << key << " = " << spec.doc << "\n";
  }
  return os.str();
}

} // namespace spafit
