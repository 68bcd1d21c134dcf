#include "mmt/optimizer.hpp"

#include <cmath>

namespace mmt {

double inverse_sqrt_lr(const AdamConfig& config, long step) {
  if (step < 1) step = 1;
  if (config.warmup_steps <= 0) return config.lr;
  if (step < config.warmup_steps) return config.lr * static_cast<double>(step) / static_cast<double>(config.warmup_steps);
  return config.lr * std::sqrt(static_cast<double>(config.warmup_steps) / static_cast<double>(step));
}

double adam_update(std::vector<NamedParameter<float>>& params, AdamState& state, const AdamConfig& config,
                   double grad_scale) {
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.push_back(MatrixF::Zero(p.tensor.rows(), p.tensor.cols()));
      state.second_moment.push_back(MatrixF::Zero(p.tensor.rows(), p.tensor.cols()));
    }
  }
  if (state.first_moment.size() != params.size()) throw ShapeError("adam_update: optimizer state does not match");
  ++state.step;
  const double lr = inverse_sqrt_lr(config, state.step);
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  const float b1 = static_cast<float>(config.beta1);
  const float b2 = static_cast<float>(config.beta2);
  const float step_size = static_cast<float>(lr / bc1);
  const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  const float eps = static_cast<float>(config.eps);
  const float decay = static_cast<float>(lr * config.weight_decay);
  const float gs = static_cast<float>(grad_scale);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (m.rows() != t.rows() || m.cols() != t.cols()) throw ShapeError("adam_update: moment shape mismatch");
    MatrixF& w = t.mutable_value();
    if (t.has_grad()) {
      const MatrixF g = t.grad() * gs;
      m = b1 * m + (1.0f - b1) * g;
      v = b2 * v + (1.0f - b2) * g.cwiseAbs2();
    } else {
      m *= b1;
      v *= b2;
    }
    if (decay != 0.0f) w -= decay * w;
    w.array() -= step_size * m.array() / (v.array().sqrt() * inv_sqrt_bc2 + eps);
  }
  return lr;
}

}  // namespace mmt
