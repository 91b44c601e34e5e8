// SPDX-License-Identifier: Apache-2.0

#include <spafit/checkpoint.hpp>

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

namespace spafit {

namespace {

constexpr char kMagic[8] = {'S', 'P', 'A', 'F', 'I', 'T', 'C', 'K'};
constexpr std::uint8_t kDtypeF64 = 0;

class Writer {
public:
  void bytes(const void *p, std::size_t n) {
    auto b = static_cast<const std::uint8_t *>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T> void le(T v) {
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i)
      out_.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  void str32(const std::string &s) {
    le(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

private:
  std::vector<std::uint8_t> out_;
};

class Reader {
public:
  explicit Reader(const std::vector<std::uint8_t> &in) : in_(in) {}
  void need(std::size_t n, const char *what) {
    if (in_.size() - pos_ < n)
      throw TruncatedError(std::string("checkpoint truncated while reading ") +
                           what);
  }
  template <typename T> T le(const char *what) {
    need(sizeof(T), what);
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      u |= static_cast<std::make_unsigned_t<T>>(in_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(u);
  }
  double f64(const char *what) {
    return std::bit_cast<double>(le<std::uint64_t>(what));
  }
  std::string str(std::size_t n, const char *what) {
    need(n, what);
    std::string s(reinterpret_cast<const char *>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == in_.size(); }

private:
  const std::vector<std::uint8_t> &in_;
  std::size_t pos_ = 0;
};

std::string fmt_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

} // namespace

std::vector<std::uint8_t> encode_container(const Container &c) {
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.le(kContainerVersion);
  std::string header;
  for (const auto &[k, v] : c.header) {
    if (k.find_first_of("=\n") != std::string::npos ||
        v.find('\n') != std::string::npos)
      throw FormatError("header entry '" + k + "' contains a reserved character");
    header += k + "=" + v + "\n";
  }
  w.str32(header);
  w.le(static_cast<std::uint32_t>(c.tensors.size()));
  for (const NamedTensor &t : c.tensors) {
    w.str32(t.name);
    w.le(kDtypeF64);
    w.le(static_cast<std::uint8_t>(t.status));
    w.le(static_cast<std::uint8_t>(t.tensor.rank()));
    for (auto d : t.tensor.shape())
      w.le(static_cast<std::uint64_t>(d));
    for (double v : t.tensor.data())
      w.f64(v);
  }
  return w.take();
}

Container decode_container(const std::vector<std::uint8_t> &bytes) {
  if (bytes.size() < sizeof kMagic ||
      std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0)
    throw FormatError("not a spafit container (bad magic)");
  Reader r(bytes);
  r.str(sizeof kMagic, "magic");
  const auto version = r.le<std::uint8_t>("version");
  if (version != kContainerVersion)
    throw VersionError("unsupported container version " +
                       std::to_string(version) + " (expected " +
                       std::to_string(kContainerVersion) + ")");
  Container c;
  const std::string header = r.str(r.le<std::uint32_t>("header length"), "header");
  std::istringstream hs(header);
  for (std::string line; std::getline(hs, line);) {
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw FormatError("malformed header line '" + line + "'");
    c.header[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto count = r.le<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str(r.le<std::uint32_t>("name length"), "tensor name");
    if (r.le<std::uint8_t>("dtype") != kDtypeF64)
      throw FormatError("tensor '" + t.name + "' has unsupported dtype");
    const auto status = r.le<std::uint8_t>("status");
    if (status > static_cast<std::uint8_t>(ParamStatus::LoraAugmented))
      throw FormatError("tensor '" + t.name + "' has invalid status byte");
    t.status = static_cast<ParamStatus>(status);
    const auto rank = r.le<std::uint8_t>("rank");
    Shape shape(rank);
    std::uint64_t numel = 1;
    for (auto &d : shape) {
      const auto v = r.le<std::uint64_t>("shape");
      if (v == 0)
        throw FormatError("tensor '" + t.name + "' has a zero dimension");
      d = static_cast<std::size_t>(v);
      numel *= v;
    }
    if (rank == 0)
      throw FormatError("tensor '" + t.name + "' has rank 0");
    r.need(numel * sizeof(double), "tensor payload");
    std::vector<double> data(numel);
    for (auto &v : data)
      v = r.f64("tensor payload");
    t.tensor = Tensor(std::move(shape), std::move(data));
    c.tensors.push_back(std::move(t));
  }
  if (!r.done())
    throw FormatError("trailing bytes after last tensor");
  return c;
}

void write_container(const Container &c, const std::filesystem::path &path) {
  const auto bytes = encode_container(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char *>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out)
    throw IoError("write to '" + path.string() + "' failed");
}

Container read_container(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_container(bytes);
}

void put_config(std::map<std::string, std::string> &h, const ModelConfig &c) {
  h["model.num_layers"] = std::to_string(c.num_layers);
  h["model.hidden"] = std::to_string(c.hidden);
  h["model.num_heads"] = std::to_string(c.num_heads);
  h["model.ffn_size"] = std::to_string(c.ffn_size);
  h["model.vocab_size"] = std::to_string(c.vocab_size);
  h["model.max_positions"] = std::to_string(c.max_positions);
  h["model.type_vocab"] = std::to_string(c.type_vocab);
  h["model.num_labels"] = std::to_string(c.num_labels);
  h["model.lora_rank"] = std::to_string(c.lora_rank);
  h["model.lora_alpha"] = std::to_string(c.lora_alpha);
  h["model.dropout_p"] = fmt_double(c.dropout_p);
  h["model.layer_norm_eps"] = fmt_double(c.layer_norm_eps);
}

ModelConfig get_config(const std::map<std::string, std::string> &h) {
  auto get = [&](const std::string &k) -> const std::string & {
    auto it = h.find(k);
    if (it == h.end())
      throw FormatError("header is missing '" + k + "'");
    return it->second;
  };
  auto as_int = [&](const std::string &k) {
    const std::string &s = get(k);
    int v = 0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
      throw FormatError("header entry '" + k + "' is not an integer");
    return v;
  };
  auto as_double = [&](const std::string &k) {
    const std::string &s = get(k);
    double v = 0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
      throw FormatError("header entry '" + k + "' is not a number");
    return v;
  };
  ModelConfig c;
  c.num_layers = as_int("model.num_layers");
  c.hidden = as_int("model.hidden");
  c.num_heads = as_int("model.num_heads");
  c.ffn_size = as_int("model.ffn_size");
  c.vocab_size = as_int("model.vocab_size");
  c.max_positions = as_int("model.max_positions");
  c.type_vocab = as_int("model.type_vocab");
  c.num_labels = as_int("model.num_labels");
  c.lora_rank = as_int("model.lora_rank");
  c.lora_alpha = as_int("model.lora_alpha");
  c.dropout_p = as_double("model.dropout_p");
  c.layer_norm_eps = as_double("model.layer_norm_eps");
  try {
    c.validate();
  } catch (const ConfigError &e) {
    throw FormatError(std::string("header holds an invalid ") + e.what());
  }
  return c;
}

Container checkpoint_container(const ParamStore &store) {
  Container c;
  c.header["kind"] = "checkpoint";
  put_config(c.header, store.config());
  for (const auto &[path, p] : store.params())
    c.tensors.push_back({path, p.status, p.value});
  for (const auto &[target, pair] : store.lora()) {
    c.tensors.push_back({lora_a_name(target), ParamStatus::Trainable, pair.A});
    c.tensors.push_back({lora_b_name(target), ParamStatus::Trainable, pair.B});
  }
  for (auto &t : c.tensors)
    t.tensor.clear_grad();
  return c;
}

ParamStore store_from_container(const Container &c) {
  auto kind = c.header.find("kind");
  if (kind == c.header.end() || kind->second != "checkpoint")
    throw FormatError("container is not a checkpoint");
  const ModelConfig config = get_config(c.header);
  ParamStore store(config);

  std::map<std::string, Shape, std::less<>> expected;
  for (const ParamSpec &s : param_layout(config))
    expected.emplace(s.path, s.shape);

  std::map<std::string, std::pair<const Tensor *, const Tensor *>> pairs;
  for (const NamedTensor &t : c.tensors) {
    if (auto it = expected.find(t.name); it != expected.end()) {
      if (t.tensor.shape() != it->second)
        throw FormatError("tensor '" + t.name + "' has shape " +
                          shape_str(t.tensor.shape()) + ", expected " +
                          shape_str(it->second));
      if (store.contains(t.name))
        throw FormatError("duplicate tensor '" + t.name + "'");
      store.add(t.name, t.tensor, t.status);
      continue;
    }
    const bool is_a = t.name.ends_with(".lora_A");
    const bool is_b = t.name.ends_with(".lora_B");
    if (!is_a && !is_b)
      throw UnknownTensorError(t.name);
    const std::string target = t.name.substr(0, t.name.size() - 7);
    auto it = expected.find(target);
    if (it == expected.end() || it->second.size() != 2)
      throw UnknownTensorError(t.name);
    auto &slot = pairs[target];
    (is_a ? slot.first : slot.second) = &t.tensor;
  }
  for (const auto &[path, _] : expected)
    if (!store.contains(path))
      throw MissingTensorError("checkpoint is missing tensor '" + path + "'");

  const std::size_t r = static_cast<std::size_t>(config.lora_rank);
  for (const auto &[target, slot] : pairs) {
    if (!slot.first || !slot.second)
      throw MissingTensorError("LoRA pair for '" + target + "' is incomplete");
    const Shape &w = expected.at(target);
    if (slot.first->shape() != Shape{r, w[1]} ||
        slot.second->shape() != Shape{w[0], r})
      throw FormatError("LoRA factors for '" + target + "' have wrong shapes");
    store.lora().emplace(target, LoraPair{target, *slot.second, *slot.first,
                                          config.lora_rank, config.lora_alpha});
  }
  return store;
}

void save_checkpoint(const ParamStore &store, const std::filesystem::path &path) {
  write_container(checkpoint_container(store), path);
}

ParamStore load_checkpoint(const std::filesystem::path &path) {
  return store_from_container(read_container(path));
}

} // namespace spafit
