#include "mmt/losses.hpp"

#include <algorithm>
#include <numeric>

namespace mmt {

void LossWeights::validate() const {
  if (!(lambda >= 0.0) || !(gamma >= 0.0)) throw ConfigError("loss weights lambda and gamma must be >= 0");
}

LossBreakdown total_loss(double l_syn, double l_aut, double l_kl, double l_ot, const LossWeights& weights) {
  LossBreakdown b;
  b.l_syn = l_syn;
  b.l_aut = l_aut;
  b.l_trans = 0.5 * (l_syn + l_aut);
  b.l_kl = l_kl;
  b.l_ot = l_ot;
  b.total = b.l_trans + weights.lambda * l_kl + weights.gamma * l_ot;
  for (double v : {b.l_syn, b.l_aut, b.l_kl, b.l_ot, b.total}) {
    if (!std::isfinite(v)) throw NumericsError("non-finite loss component");
  }
  return b;
}

Eigen::VectorXd mass(const Eigen::Ref<const Eigen::VectorXd>& h, double eps) {
  const double norm = h.cwiseAbs().sum();
  if (!(norm > eps)) throw DegenerateMassError("mass: vector L1 norm " + std::to_string(norm) + " is degenerate");
  return h.cwiseAbs() / norm;
}

OtResult relaxed_ot_distance(const Eigen::Ref<const Eigen::VectorXd>& source,
                             const Eigen::Ref<const Eigen::VectorXd>& target) {
  if (source.size() != target.size() || source.size() == 0) throw ShapeError("relaxed_ot_distance: size mismatch");
  const Index d = source.size();
  OtResult r;
  r.plan.source_mass = mass(source);
  r.plan.target_mass = mass(target);
  r.plan.plan = MatrixD::Zero(d, d);
  const Eigen::VectorXd t = target;
  for (Index i = 0; i < d; ++i) {
    const int j = detail::nearest_index(source[i], t.data(), d);
    r.plan.plan(i, j) = r.plan.source_mass[i];
    r.distance += r.plan.source_mass[i] * std::abs(source[i] - target[j]);
  }
  return r;
}

OtResult exact_ot_distance(const Eigen::Ref<const Eigen::VectorXd>& source,
                           const Eigen::Ref<const Eigen::VectorXd>& target) {
  if (source.size() != target.size() || source.size() == 0) throw ShapeError("exact_ot_distance: size mismatch");
  const Index d = source.size();
  if (d > 64) throw ShapeError("exact_ot_distance: oracle limited to d <= 64");
  OtResult r;
  r.plan.source_mass = mass(source);
  r.plan.target_mass = mass(target);
  r.plan.plan = MatrixD::Zero(d, d);

  std::vector<Index> si(static_cast<std::size_t>(d));
  std::vector<Index> ti(static_cast<std::size_t>(d));
  std::iota(si.begin(), si.end(), Index{0});
  std::iota(ti.begin(), ti.end(), Index{0});
  std::stable_sort(si.begin(), si.end(), [&](Index a, Index b) { return source[a] < source[b]; });
  std::stable_sort(ti.begin(), ti.end(), [&](Index a, Index b) { return target[a] < target[b]; });

  // Sweep both cumulative distributions, pairing equal quantile segments.
  std::size_t a = 0;
  std::size_t b = 0;
  double left_a = r.plan.source_mass[si[0]];
  double left_b = r.plan.target_mass[ti[0]];
  while (a < si.size() && b < ti.size()) {
    const double move = std::min(left_a, left_b);
    if (move > 0.0) {
      r.plan.plan(si[a], ti[b]) += move;
      r.distance += move * std::abs(source[si[a]] - target[ti[b]]);
    }
    left_a -= move;
    left_b -= move;
    // Advance whichever side is exhausted; on the final pair rounding may
    // leave a sliver that belongs to it.
    const bool last_a = a + 1 == si.size();
    const bool last_b = b + 1 == ti.size();
    if (last_a && last_b) break;
    if ((left_a <= left_b && !last_a) || last_b) {
      if (++a < si.size()) left_a += r.plan.source_mass[si[a]];
    } else {
      if (++b < ti.size()) left_b += r.plan.target_mass[ti[b]];
    }
  }
  return r;
}

double ot_loss(const Eigen::Ref<const Eigen::VectorXd>& hs, const Eigen::Ref<const Eigen::VectorXd>& ha) {
  return 0.5 * (relaxed_ot_distance(hs, ha).distance + relaxed_ot_distance(ha, hs).distance);
}

double kl_divergence(const Eigen::Ref<const Eigen::VectorXd>& logits_p, const Eigen::Ref<const Eigen::VectorXd>& logits_q) {
  if (logits_p.size() != logits_q.size()) throw ShapeError("kl_divergence: size mismatch");
  MatrixD p = logits_p.transpose();
  MatrixD q = logits_q.transpose();
  const MatrixD lp = detail::log_softmax_rows(p);
  const MatrixD lq = detail::log_softmax_rows(q);
  double kl = 0.0;
  for (Index c = 0; c < lp.cols(); ++c) kl += std::exp(lp(0, c)) * (lp(0, c) - lq(0, c));
  return kl;
}

}  // namespace mmt
