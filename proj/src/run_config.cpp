#include "mmt/run_config.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "mmt/errors.hpp"

namespace mmt {

namespace {

const std::set<std::string>& path_keys() {
  static const std::set<std::string> keys = {"data.vocab",         "data.src",           "data.tgt", "data.images",
                                             "data.syn_features", "data.aut_features", "output.dir"};
  return keys;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::map<std::string, std::string> parse_key_values(const std::string& text, const std::string& origin) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(number) + ": expected key=value");
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(number) + ": empty key");
    if (kv.count(key)) throw ConfigError(origin + ":" + std::to_string(number) + ": duplicate key '" + key + "'");
    kv[key] = trim(t.substr(eq + 1));
  }
  return kv;
}

std::map<std::string, std::string> read_key_values(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str(), path);
}

std::map<std::string, std::string> RunConfig::to_map() const {
  auto kv = model.to_map();
  for (auto& [k, v] : trainer.to_map()) kv[k] = v;
  kv["data.vocab"] = vocab;
  kv["data.src"] = src;
  kv["data.tgt"] = tgt;
  kv["data.images"] = images;
  kv["data.syn_features"] = syn_features;
  kv["data.aut_features"] = aut_features;
  kv["output.dir"] = output_dir;
  return kv;
}

std::string RunConfig::echo() const {
  std::string out;
  for (const auto& [k, v] : to_map()) out += k + "=" + v + "\n";
  return out;
}

RunConfig RunConfig::from_map(const std::map<std::string, std::string>& kv) {
  RunConfig c;
  auto known = c.to_map();
  for (const auto& [k, v] : kv) {
    if (!known.count(k)) throw ConfigError("unknown configuration key '" + k + "'");
  }
  // Unset model keys keep their defaults.
  auto model_kv = c.model.to_map();
  for (auto& [k, v] : model_kv) {
    if (auto it = kv.find(k); it != kv.end()) v = it->second;
  }
  try {
    c.model = ModelConfig::from_map(model_kv);
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
  c.trainer = TrainerConfig::from_map(kv);
  auto str = [&](const char* key, std::string& out) {
    if (auto it = kv.find(key); it != kv.end()) out = it->second;
  };
  str("data.vocab", c.vocab);
  str("data.src", c.src);
  str("data.tgt", c.tgt);
  str("data.images", c.images);
  str("data.syn_features", c.syn_features);
  str("data.aut_features", c.aut_features);
  str("output.dir", c.output_dir);
  return c;
}

void RunConfig::validate() const {
  trainer.validate();
  // vocab_size comes from the vocabulary file; check the rest with a
  // placeholder.
  ModelConfig m = model;
  if (m.vocab_size == 0) m.vocab_size = 5;
  m.validate();
  const auto kv = to_map();
  for (const auto& key : path_keys()) {
    const auto& value = kv.at(key);
    if (value.empty()) throw ConfigError("missing required setting '" + key + "'");
    if (key != "output.dir" && !std::filesystem::exists(value))
      throw ConfigError(key + ": path '" + value + "' does not exist");
  }
}

RunConfig load_run_config(const std::string& path, const std::map<std::string, std::string>& overrides) {
  auto kv = read_key_values(path);
  for (const auto& [k, v] : overrides) kv[k] = v;
  return RunConfig::from_map(kv);
}

}  // namespace mmt
