#include "mmt/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "mmt/errors.hpp"

namespace mmt {

namespace {

constexpr char kMagic[4] = {'M', 'M', 'T', 'B'};
constexpr std::string_view kAdamFirst = "adam.m/";
constexpr std::string_view kAdamSecond = "adam.v/";

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}
  template <typename T>
  void put(T v) {
    v = to_little(v);
    os_.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  void bytes(const std::string& s) { os_.write(s.data(), static_cast<std::streamsize>(s.size())); }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  Reader(std::istream& is, std::string path) : is_(is), path_(std::move(path)) {}
  template <typename T>
  T get() {
    T v;
    is_.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is_) truncated();
    return to_little(v);
  }
  std::string bytes(std::uint64_t n) {
    if (n > (1ULL << 32)) throw FormatError(path_ + ": implausible block length");
    std::string s(n, '\0');
    is_.read(s.data(), static_cast<std::streamsize>(n));
    if (!is_) truncated();
    return s;
  }
  [[noreturn]] void truncated() const { throw FormatError(path_ + ": truncated checkpoint"); }

 private:
  std::istream& is_;
  std::string path_;
};

void write_tensor(Writer& w, const NamedTensor& t) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.name.size()));
  w.bytes(t.name);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(t.dims.size()));
  for (auto d : t.dims) w.put<std::uint64_t>(d);
  for (float f : t.data) w.put<float>(f);
}

NamedTensor read_tensor(Reader& r) {
  NamedTensor t;
  t.name = r.bytes(r.get<std::uint32_t>());
  const auto rank = r.get<std::uint32_t>();
  if (rank > 8) throw FormatError("checkpoint tensor '" + t.name + "' has implausible rank");
  std::uint64_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    t.dims.push_back(r.get<std::uint64_t>());
    count *= t.dims.back();
  }
  if (count > (1ULL << 31)) throw FormatError("checkpoint tensor '" + t.name + "' is implausibly large");
  t.data.resize(count);
  for (auto& f : t.data) f = r.get<float>();
  return t;
}

std::string join_kv(const std::map<std::string, std::string>& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

std::map<std::string, std::string> split_kv(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("checkpoint block line without '='");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

NamedTensor from_matrix(const std::string& name, const MatrixF& m) {
  NamedTensor t;
  t.name = name;
  t.dims = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  t.data.assign(m.data(), m.data() + m.size());
  return t;
}

MatrixF to_matrix(const NamedTensor& t, Index rows, Index cols) {
  const bool as_matrix = t.dims.size() == 2 && t.dims[0] == static_cast<std::uint64_t>(rows) &&
                         t.dims[1] == static_cast<std::uint64_t>(cols);
  const bool as_vector = rows == 1 && t.dims.size() == 1 && t.dims[0] == static_cast<std::uint64_t>(cols);
  if (!as_matrix && !as_vector) throw FormatError("checkpoint tensor '" + t.name + "' has the wrong shape");
  return Eigen::Map<const MatrixF>(t.data.data(), rows, cols);
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write checkpoint '" + path + "'");
    Writer w(os);
    os.write(kMagic, 4);
    w.put<std::uint32_t>(ckpt.version);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.parameters.size() + ckpt.optimizer.size()));
    for (const auto& t : ckpt.parameters) write_tensor(w, t);
    for (const auto& t : ckpt.optimizer) write_tensor(w, t);
    auto config = ckpt.model.to_map();
    for (const auto& [k, v] : ckpt.state) config["state." + k] = v;
    config["state.step"] = std::to_string(ckpt.step);
    const std::string config_text = join_kv(config);
    w.put<std::uint64_t>(config_text.size());
    w.bytes(config_text);
    const std::string rng_text = join_kv(ckpt.rng);
    w.put<std::uint64_t>(rng_text.size());
    w.bytes(rng_text);
    if (!os) throw DataError("failed writing checkpoint '" + path + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read checkpoint '" + path + "'");
  Reader r(is, path);
  char magic[4];
  is.read(magic, 4);
  if (!is) r.truncated();
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError(path + ": not a checkpoint (bad magic)");
  Checkpoint ckpt;
  ckpt.version = r.get<std::uint32_t>();
  if (ckpt.version != Checkpoint::kVersion) {
    throw FormatError(path + ": unsupported checkpoint version " + std::to_string(ckpt.version));
  }
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t = read_tensor(r);
    if (t.name.starts_with(kAdamFirst) || t.name.starts_with(kAdamSecond)) {
      ckpt.optimizer.push_back(std::move(t));
    } else {
      ckpt.parameters.push_back(std::move(t));
    }
  }
  auto config = split_kv(r.bytes(r.get<std::uint64_t>()));
  ckpt.rng = split_kv(r.bytes(r.get<std::uint64_t>()));
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError(path + ": trailing bytes after checkpoint");
  ckpt.model = ModelConfig::from_map(config);
  for (const auto& [k, v] : config) {
    if (k.starts_with("state.")) ckpt.state[k.substr(6)] = v;
  }
  auto it = ckpt.state.find("step");
  if (it == ckpt.state.end()) throw FormatError(path + ": missing step");
  ckpt.step = std::stol(it->second);
  ckpt.state.erase(it);
  return ckpt;
}

Checkpoint make_checkpoint(const Model& model, const AdamState* adam) {
  Checkpoint ckpt;
  ckpt.model = model.config();
  for (const auto& p : model.parameters()) ckpt.parameters.push_back(from_matrix(p.name, p.tensor.value()));
  if (adam != nullptr && !adam->first_moment.empty()) {
    for (std::size_t i = 0; i < model.parameters().size(); ++i) {
      const auto& name = model.parameters()[i].name;
      ckpt.optimizer.push_back(from_matrix(std::string(kAdamFirst) + name, adam->first_moment[i]));
      ckpt.optimizer.push_back(from_matrix(std::string(kAdamSecond) + name, adam->second_moment[i]));
    }
    ckpt.state["adam_step"] = std::to_string(adam->step);
  }
  return ckpt;
}

void restore_parameters(Model& model, const Checkpoint& ckpt) {
  if (!(ckpt.model == model.config())) throw FormatError("checkpoint model configuration differs from the model");
  auto& params = model.parameters();
  if (ckpt.parameters.size() != params.size()) throw FormatError("checkpoint parameter count differs");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (ckpt.parameters[i].name != params[i].name) {
      throw FormatError("checkpoint parameter '" + ckpt.parameters[i].name + "' where '" + params[i].name +
                        "' was expected");
    }
    params[i].tensor.mutable_value() = to_matrix(ckpt.parameters[i], params[i].tensor.rows(), params[i].tensor.cols());
  }
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  try {
    ckpt.model.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint model configuration: ") + e.what());
  }
  Model model(ckpt.model, 0);
  restore_parameters(model, ckpt);
  return model;
}

AdamState restore_optimizer(const Model& model, const Checkpoint& ckpt) {
  AdamState st;
  if (!ckpt.has_optimizer()) return st;
  const auto& params = model.parameters();
  if (ckpt.optimizer.size() != 2 * params.size()) throw FormatError("checkpoint optimizer state is incomplete");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& m = ckpt.optimizer[2 * i];
    const auto& v = ckpt.optimizer[2 * i + 1];
    if (m.name != std::string(kAdamFirst) + params[i].name || v.name != std::string(kAdamSecond) + params[i].name) {
      throw FormatError("checkpoint optimizer state does not match the parameters");
    }
    st.first_moment.push_back(to_matrix(m, params[i].tensor.rows(), params[i].tensor.cols()));
    st.second_moment.push_back(to_matrix(v, params[i].tensor.rows(), params[i].tensor.cols()));
  }
  auto it = ckpt.state.find("adam_step");
  if (it == ckpt.state.end()) throw FormatError("checkpoint optimizer state lacks a step counter");
  st.step = std::stol(it->second);
  return st;
}

Checkpoint average_checkpoints(const std::vector<Checkpoint>& ckpts) {
  if (ckpts.empty()) throw FormatError("average_checkpoints: no inputs");
  const Checkpoint& first = ckpts.front();
  Checkpoint out;
  out.model = first.model;
  out.step = first.step;
  for (const auto& c : ckpts) {
    if (!(c.model == first.model) || c.parameters.size() != first.parameters.size()) {
      throw FormatError("average_checkpoints: checkpoints describe different models");
    }
    for (std::size_t i = 0; i < c.parameters.size(); ++i) {
      if (c.parameters[i].name != first.parameters[i].name || c.parameters[i].dims != first.parameters[i].dims) {
        throw FormatError("average_checkpoints: parameter '" + c.parameters[i].name + "' does not match");
      }
    }
    out.step = std::max(out.step, c.step);
  }
  const double n = static_cast<double>(ckpts.size());
  for (std::size_t i = 0; i < first.parameters.size(); ++i) {
    NamedTensor t;
    t.name = first.parameters[i].name;
    t.dims = first.parameters[i].dims;
    t.data.resize(first.parameters[i].data.size());
    for (std::size_t k = 0; k < t.data.size(); ++k) {
      double acc = 0.0;
      for (const auto& c : ckpts) acc += static_cast<double>(c.parameters[i].data[k]);
      t.data[k] = static_cast<float>(acc / n);
    }
    out.parameters.push_back(std::move(t));
  }
  return out;
}

Checkpoint average_checkpoints(const std::vector<std::string>& paths) {
  std::vector<Checkpoint> ckpts;
  for (const auto& p : paths) ckpts.push_back(load_checkpoint(p));
  return average_checkpoints(ckpts);
}

std::vector<std::string> list_step_checkpoints(const std::string& dir) {
  static const std::regex pattern(R"(checkpoint_(\d+)\.mmtb)");
  std::vector<std::pair<long, std::string>> found;
  if (!std::filesystem::is_directory(dir)) throw DataError("not a directory: '" + dir + "'");
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (std::regex_match(name, m, pattern)) found.emplace_back(std::stol(m[1]), entry.path().string());
  }
  std::sort(found.begin(), found.end());
  std::vector<std::string> out;
  for (auto& [step, path] : found) out.push_back(std::move(path));
  return out;
}

}  // namespace mmt
