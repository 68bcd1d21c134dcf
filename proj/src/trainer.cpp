#include "mmt/trainer.hpp"

#include <cmath>
#include <optional>

#include "mmt/errors.hpp"
#include "mmt/vocab.hpp"

namespace mmt {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

bool all_finite(const MatrixF& m) { return m.allFinite(); }

}  // namespace

void TrainerConfig::validate() const {
  if (update_freq < 1) throw ConfigError("trainer.update_freq must be >= 1");
  if (keep_last < 1) throw ConfigError("trainer.keep_last must be >= 1");
  if (token_budget < 1) throw ConfigError("trainer.token_budget must be >= 1");
  if (max_epochs <= 0 && max_steps <= 0) throw ConfigError("set trainer.max_epochs or trainer.max_steps");
  if (!(adam.lr > 0.0)) throw ConfigError("trainer.lr must be positive");
  if (adam.warmup_steps < 0) throw ConfigError("trainer.warmup_steps must be >= 0");
  if (checkpoint_every < 0) throw ConfigError("trainer.checkpoint_every must be >= 0");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) throw ConfigError("trainer.label_smoothing must lie in [0, 1)");
  weights.validate();
}

std::map<std::string, std::string> TrainerConfig::to_map() const {
  return {{"trainer.seed", std::to_string(seed)},
          {"trainer.max_epochs", std::to_string(max_epochs)},
          {"trainer.max_steps", std::to_string(max_steps)},
          {"trainer.lr", fmt_double(adam.lr)},
          {"trainer.warmup_steps", std::to_string(adam.warmup_steps)},
          {"trainer.beta1", fmt_double(adam.beta1)},
          {"trainer.beta2", fmt_double(adam.beta2)},
          {"trainer.adam_eps", fmt_double(adam.eps)},
          {"trainer.weight_decay", fmt_double(adam.weight_decay)},
          {"trainer.update_freq", std::to_string(update_freq)},
          {"trainer.token_budget", std::to_string(token_budget)},
          {"trainer.checkpoint_every", std::to_string(checkpoint_every)},
          {"trainer.keep_last", std::to_string(keep_last)},
          {"trainer.label_smoothing", fmt_double(label_smoothing)},
          {"weights.lambda", fmt_double(weights.lambda)},
          {"weights.gamma", fmt_double(weights.gamma)}};
}

TrainerConfig TrainerConfig::from_map(const std::map<std::string, std::string>& kv) {
  TrainerConfig c;
  auto num = [&](const char* key, auto& out) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    try {
      std::size_t used = 0;
      if constexpr (std::is_floating_point_v<std::remove_reference_t<decltype(out)>>) {
        out = std::stod(it->second, &used);
      } else {
        out = static_cast<std::remove_reference_t<decltype(out)>>(std::stoll(it->second, &used));
      }
      if (used != it->second.size()) throw std::invalid_argument(key);
    } catch (const std::logic_error&) {
      throw ConfigError(std::string("invalid value for ") + key + ": '" + it->second + "'");
    }
  };
  num("trainer.seed", c.seed);
  num("trainer.max_epochs", c.max_epochs);
  num("trainer.max_steps", c.max_steps);
  num("trainer.lr", c.adam.lr);
  num("trainer.warmup_steps", c.adam.warmup_steps);
  num("trainer.beta1", c.adam.beta1);
  num("trainer.beta2", c.adam.beta2);
  num("trainer.adam_eps", c.adam.eps);
  num("trainer.weight_decay", c.adam.weight_decay);
  num("trainer.update_freq", c.update_freq);
  num("trainer.token_budget", c.token_budget);
  num("trainer.checkpoint_every", c.checkpoint_every);
  num("trainer.keep_last", c.keep_last);
  num("trainer.label_smoothing", c.label_smoothing);
  num("weights.lambda", c.weights.lambda);
  num("weights.gamma", c.weights.gamma);
  return c;
}

template <typename S>
Objective<S> pair_objective(const MultimodalTransformer<S>& model, const Batch& batch, const LossWeights& weights,
                            double label_smoothing, Rng* syn_dropout, Rng* aut_dropout) {
  ForwardContext<S> syn_ctx{syn_dropout != nullptr, syn_dropout, nullptr};
  ForwardContext<S> aut_ctx{aut_dropout != nullptr, aut_dropout, nullptr};
  const auto out = model.forward_pair(batch, syn_ctx, aut_ctx);
  std::span<const int> targets(batch.tgt_out.data(), static_cast<std::size_t>(batch.tgt_out.size()));
  const auto l_syn = cross_entropy_label_smoothed(out.logits_syn, targets, Vocabulary::kPad, label_smoothing);
  const auto l_aut = cross_entropy_label_smoothed(out.logits_aut, targets, Vocabulary::kPad, label_smoothing);
  const auto l_kl = kl_consistency(out.logits_syn, out.logits_aut, batch.tgt_mask);

  Tensor<S> total = scale(l_syn + l_aut, S(0.5));
  if (weights.lambda > 0.0) total = total + scale(l_kl, static_cast<S>(weights.lambda));

  double ot_value = 0.0;
  if (weights.gamma > 0.0) {
    const auto l_ot = ot_loss(out.h_syn, out.h_aut);
    ot_value = static_cast<double>(l_ot.item());
    total = total + scale(l_ot, static_cast<S>(weights.gamma));
  } else {
    // Reported only; a zero representation is not an error when unweighted.
    try {
      NoGradGuard guard;
      ot_value = static_cast<double>(ot_loss(out.h_syn.detach(), out.h_aut.detach()).item());
    } catch (const DegenerateMassError&) {
      ot_value = 0.0;
    }
  }
  const LossBreakdown b = total_loss(l_syn.item(), l_aut.item(), l_kl.item(), ot_value, weights);
  return {total, b};
}

template Objective<float> pair_objective(const MultimodalTransformer<float>&, const Batch&, const LossWeights&,
                                         double, Rng*, Rng*);
template Objective<double> pair_objective(const MultimodalTransformer<double>&, const Batch&, const LossWeights&,
                                          double, Rng*, Rng*);

LossBreakdown micro_batch_loss(const Model& model, const Batch& batch, const LossWeights& weights,
                               double label_smoothing, DropoutStreams* dropout, bool accumulate) {
  std::optional<NoGradGuard> no_grad;
  if (!accumulate) no_grad.emplace();
  const bool train = dropout != nullptr;
  auto obj = pair_objective(model, batch, weights, label_smoothing, train ? &dropout->syn : nullptr,
                            train ? &dropout->aut : nullptr);
  if (accumulate) backward(obj.total);
  return obj.breakdown;
}

LossBreakdown train_step(Model& model, AdamState& adam, const AdamConfig& adam_config,
                         std::span<const Batch> micro_batches, const LossWeights& weights, double label_smoothing,
                         DropoutStreams* dropout) {
  if (micro_batches.empty()) throw DataError("train_step: no micro-batches");
  auto& params = model.parameters();
  std::vector<MatrixF> saved_params;
  saved_params.reserve(params.size());
  for (const auto& p : params) saved_params.push_back(p.tensor.value());
  const AdamState saved_adam = adam;
  auto rollback = [&](const std::string& why) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor.mutable_value() = saved_params[i];
    adam = saved_adam;
    model.zero_grad();
    throw NumericsError(why);
  };

  model.zero_grad();
  LossBreakdown avg;
  for (const auto& mb : micro_batches) {
    LossBreakdown b;
    try {
      b = micro_batch_loss(model, mb, weights, label_smoothing, dropout, true);
    } catch (const NumericsError& e) {
      rollback(e.what());
    } catch (const DegenerateMassError& e) {
      rollback(e.what());
    }
    avg.l_syn += b.l_syn;
    avg.l_aut += b.l_aut;
    avg.l_trans += b.l_trans;
    avg.l_kl += b.l_kl;
    avg.l_ot += b.l_ot;
    avg.total += b.total;
  }
  const double n = static_cast<double>(micro_batches.size());
  avg.l_syn /= n;
  avg.l_aut /= n;
  avg.l_trans /= n;
  avg.l_kl /= n;
  avg.l_ot /= n;
  avg.total /= n;

  for (const auto& p : params)
    if (p.tensor.has_grad() && !all_finite(p.tensor.grad())) rollback("non-finite gradient in " + p.name);
  adam_update(params, adam, adam_config, 1.0 / n);
  for (const auto& p : params)
    if (!all_finite(p.tensor.value())) rollback("non-finite parameter " + p.name + " after update");
  model.zero_grad();
  return avg;
}

Trainer::Trainer(Model model, TrainerConfig config, std::vector<ParallelExample> examples, FeatureTable syn,
                 FeatureTable aut)
    : model_(std::move(model)),
      config_(config),
      examples_(std::move(examples)),
      syn_(std::move(syn)),
      aut_(std::move(aut)),
      dropout_{Rng(config.seed, "dropout-syn"), Rng(config.seed, "dropout-aut")} {
  config_.validate();
  if (examples_.empty()) throw DataError("no training examples");
  if (syn_.dim() != model_.config().d_feat || aut_.dim() != model_.config().d_feat) {
    throw DataError("feature dimension does not match model.d_feat");
  }
  for (const auto& ex : examples_) {
    if (!syn_.contains(ex.image_id) || !aut_.contains(ex.image_id)) {
      throw DataError("image id '" + ex.image_id + "' cannot be resolved in both feature tables");
    }
    for (int id : ex.src)
      if (id >= model_.config().vocab_size) throw DataError("source id beyond model vocabulary");
    for (int id : ex.tgt)
      if (id >= model_.config().vocab_size) throw DataError("target id beyond model vocabulary");
  }
  plan_epoch();
}

void Trainer::plan_epoch() {
  plan_ = plan_batches(examples_, config_.token_budget, config_.seed + static_cast<std::uint64_t>(epoch_));
  cursor_ = 0;
}

bool Trainer::done() const {
  if (config_.max_steps > 0 && step_ >= config_.max_steps) return true;
  if (config_.max_epochs > 0 && epoch_ >= config_.max_epochs) return true;
  return false;
}

StepReport Trainer::step() {
  std::vector<Batch> micro;
  while (static_cast<int>(micro.size()) < config_.update_freq && cursor_ < plan_.size()) {
    micro.push_back(collate(examples_, plan_[cursor_], syn_, aut_));
    ++cursor_;
  }
  StepReport report;
  for (const auto& b : micro) report.target_tokens += b.tgt_tokens();
  ++step_;
  report.step = step_;
  report.epoch = epoch_;
  try {
    report.loss = train_step(model_, adam_, config_.adam, micro, config_.weights, config_.label_smoothing, &dropout_);
  } catch (const NumericsError& e) {
    report.skipped = true;
    report.message = e.what();
  }
  report.lr = inverse_sqrt_lr(config_.adam, adam_.step);
  if (cursor_ >= plan_.size()) {
    report.epoch_end = true;
    ++epoch_;
    plan_epoch();
  }
  return report;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint ckpt = make_checkpoint(model_, &adam_);
  ckpt.step = step_;
  ckpt.state["epoch"] = std::to_string(epoch_);
  ckpt.state["cursor"] = std::to_string(cursor_);
  for (const auto& [k, v] : config_.to_map()) ckpt.state[k] = v;
  ckpt.rng["dropout-syn"] = dropout_.syn.state();
  ckpt.rng["dropout-aut"] = dropout_.aut.state();
  return ckpt;
}

void Trainer::resume(const Checkpoint& ckpt) {
  restore_parameters(model_, ckpt);
  if (!ckpt.has_optimizer()) throw FormatError("checkpoint has no optimizer state; cannot resume training");
  auto need = [&](const std::map<std::string, std::string>& m, const std::string& key) -> const std::string& {
    auto it = m.find(key);
    if (it == m.end()) throw FormatError("checkpoint lacks '" + key + "'");
    return it->second;
  };
  adam_ = restore_optimizer(model_, ckpt);
  step_ = ckpt.step;
  epoch_ = std::stoi(need(ckpt.state, "epoch"));
  plan_epoch();
  cursor_ = std::stoul(need(ckpt.state, "cursor"));
  if (cursor_ > plan_.size()) throw FormatError("checkpoint data cursor beyond the epoch plan");
  dropout_.syn.set_state(need(ckpt.rng, "dropout-syn"));
  dropout_.aut.set_state(need(ckpt.rng, "dropout-aut"));
}

}  // namespace mmt
