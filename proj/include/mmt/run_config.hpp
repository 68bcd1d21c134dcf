#pragma once

#include <map>
#include <string>
#include <vector>

#include "mmt/model.hpp"
#include "mmt/trainer.hpp"

namespace mmt {

// Flat key=value run description. Keys are model.*, trainer.*, weights.*,
// data.* (vocab, src, tgt, images, syn_features, aut_features) and
// output.dir. Lines starting with '#' and blank lines are ignored.
struct RunConfig {
  ModelConfig model;
  TrainerConfig trainer;
  std::string vocab;
  std::string src;
  std::string tgt;
  std::string images;
  std::string syn_features;
  std::string aut_features;
  std::string output_dir;

  std::map<std::string, std::string> to_map() const;
  // Resolved configuration, one sorted key=value line per setting.
  std::string echo() const;

  // Throws ConfigError on unknown keys, malformed values, invalid numeric
  // settings or data paths that do not exist.
  void validate() const;

  static RunConfig from_map(const std::map<std::string, std::string>& kv);
};

std::map<std::string, std::string> parse_key_values(const std::string& text, const std::string& origin);
std::map<std::string, std::string> read_key_values(const std::string& path);

// File settings overlaid with `overrides` (already stripped of "--").
RunConfig load_run_config(const std::string& path, const std::map<std::string, std::string>& overrides);

}  // namespace mmt
