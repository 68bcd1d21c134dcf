#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mmt/model.hpp"
#include "mmt/optimizer.hpp"

namespace mmt {

struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<float> data;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

// Unit of persistence and averaging. On disk (little-endian):
//   "MMTB", u32 version, u32 tensor count,
//   per tensor: u32 name length, name, u32 rank, u64 dims[rank], f32 data,
//   u64 length + config block (key=value lines),
//   u64 length + RNG block (name=state lines).
// Optimizer moments travel as extra tensors named "adam.m/<param>" and
// "adam.v/<param>".
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint32_t version = kVersion;
  ModelConfig model;
  std::vector<NamedTensor> parameters;
  std::vector<NamedTensor> optimizer;             // empty when dropped
  std::map<std::string, std::string> state;       // trainer state and settings
  std::map<std::string, std::string> rng;         // stream name -> engine state
  long step = 0;

  bool has_optimizer() const { return !optimizer.empty(); }
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Parameters (and optionally optimizer moments) captured from a model.
Checkpoint make_checkpoint(const Model& model, const AdamState* adam = nullptr);

// Copies parameters into `model`. FormatError when names, shapes or the
// model configuration disagree.
void restore_parameters(Model& model, const Checkpoint& ckpt);
Model model_from_checkpoint(const Checkpoint& ckpt);
AdamState restore_optimizer(const Model& model, const Checkpoint& ckpt);

// Element-wise mean of the parameters (accumulated in double); optimizer
// state dropped, step = max step. FormatError on mismatched sets.
Checkpoint average_checkpoints(const std::vector<Checkpoint>& ckpts);
Checkpoint average_checkpoints(const std::vector<std::string>& paths);

// Checkpoint files in `dir` named checkpoint_<step>.mmtb, sorted by step.
std::vector<std::string> list_step_checkpoints(const std::string& dir);

}  // namespace mmt
