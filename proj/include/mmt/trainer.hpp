#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mmt/batching.hpp"
#include "mmt/checkpoint.hpp"
#include "mmt/losses.hpp"
#include "mmt/model.hpp"
#include "mmt/optimizer.hpp"

namespace mmt {

struct TrainerConfig {
  std::uint64_t seed = 1;
  int max_epochs = 0;  // 0: unbounded (max_steps must be set)
  long max_steps = 0;  // 0: unbounded (max_epochs must be set)
  AdamConfig adam;
  int update_freq = 4;
  Index token_budget = 2048;
  long checkpoint_every = 0;  // steps; 0 checkpoints at every epoch end
  int keep_last = 10;
  LossWeights weights;
  double label_smoothing = 0.1;

  void validate() const;
  std::map<std::string, std::string> to_map() const;
  static TrainerConfig from_map(const std::map<std::string, std::string>& kv);
};

// Independent dropout streams for the two forwards of a pair.
struct DropoutStreams {
  Rng syn;
  Rng aut;
};

template <typename S>
struct Objective {
  Tensor<S> total;
  LossBreakdown breakdown;
};

// Weighted objective of one micro-batch as a differentiable scalar. Null
// streams select evaluation mode (no dropout).
template <typename S>
Objective<S> pair_objective(const MultimodalTransformer<S>& model, const Batch& batch, const LossWeights& weights,
                            double label_smoothing, Rng* syn_dropout, Rng* aut_dropout);

extern template Objective<float> pair_objective(const MultimodalTransformer<float>&, const Batch&,
                                                const LossWeights&, double, Rng*, Rng*);
extern template Objective<double> pair_objective(const MultimodalTransformer<double>&, const Batch&,
                                                 const LossWeights&, double, Rng*, Rng*);

// Per-micro-batch objective: both forwards, L_trans, KL and OT terms, summed
// into the weighted total. Runs backward on the total when `accumulate` is
// set, adding into the parameter gradients.
LossBreakdown micro_batch_loss(const Model& model, const Batch& batch, const LossWeights& weights,
                               double label_smoothing, DropoutStreams* dropout, bool accumulate);

// One optimizer update over the micro-batches: gradients accumulate across
// them and are scaled by 1/count before a single Adam step. On a
// non-finite loss, gradient or parameter the parameters and optimizer state
// are restored and NumericsError is thrown. Returns the averaged breakdown.
LossBreakdown train_step(Model& model, AdamState& adam, const AdamConfig& adam_config,
                         std::span<const Batch> micro_batches, const LossWeights& weights, double label_smoothing,
                         DropoutStreams* dropout);

struct StepReport {
  long step = 0;
  int epoch = 0;
  double lr = 0.0;
  LossBreakdown loss;
  Index target_tokens = 0;
  bool skipped = false;  // rolled back after a numerics failure
  std::string message;
  bool epoch_end = false;
};

// Owns the model, optimizer state, data order and RNG streams for a run.
// Epoch e visits the batches of plan_batches(seed + e); a step consumes up
// to update_freq of them and never crosses an epoch boundary.
class Trainer {
 public:
  Trainer(Model model, TrainerConfig config, std::vector<ParallelExample> examples, FeatureTable syn,
          FeatureTable aut);

  StepReport step();
  bool done() const;

  Checkpoint checkpoint() const;
  // Restores parameters, optimizer state, data cursor and RNG streams.
  void resume(const Checkpoint& ckpt);

  Model& model() { return model_; }
  const Model& model() const { return model_; }
  const TrainerConfig& config() const { return config_; }
  const AdamState& optimizer_state() const { return adam_; }
  long steps() const { return step_; }
  int epoch() const { return epoch_; }

 private:
  void plan_epoch();

  Model model_;
  TrainerConfig config_;
  std::vector<ParallelExample> examples_;
  FeatureTable syn_;
  FeatureTable aut_;
  AdamState adam_;
  DropoutStreams dropout_;
  long step_ = 0;
  int epoch_ = 0;
  std::size_t cursor_ = 0;
  std::vector<std::vector<std::size_t>> plan_;
};

}  // namespace mmt
