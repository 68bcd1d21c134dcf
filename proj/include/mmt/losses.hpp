#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mmt/autodiff.hpp"
#include "mmt/ops.hpp"

namespace mmt {

// Relative weights of the consistency terms in
// total = l_trans + lambda * l_kl + gamma * l_ot.
struct LossWeights {
  double lambda = 0.5;
  double gamma = 0.1;

  void validate() const;
};

struct LossBreakdown {
  double l_syn = 0.0;
  double l_aut = 0.0;
  double l_trans = 0.0;
  double l_kl = 0.0;
  double l_ot = 0.0;
  double total = 0.0;
};

// l_trans = (l_syn + l_aut) / 2 and the weighted total. Throws
// NumericsError if any component is not finite.
LossBreakdown total_loss(double l_syn, double l_aut, double l_kl, double l_ot, const LossWeights& weights);

inline constexpr double kMassEpsilon = 1e-8;

// Coupling between the coordinates of two representation vectors.
struct TransportPlan {
  MatrixD plan;  // plan(i, j): mass moved from source coordinate i to target coordinate j
  Eigen::VectorXd source_mass;
  Eigen::VectorXd target_mass;
};

struct OtResult {
  double distance = 0.0;
  TransportPlan plan;
};

// m_i = |h_i| / sum_j |h_j|. Throws DegenerateMassError when the L1 norm is
// at most eps.
Eigen::VectorXd mass(const Eigen::Ref<const Eigen::VectorXd>& h, double eps = kMassEpsilon);

// Optimal transport with only the source-marginal constraint: each source
// coordinate sends its whole mass to the target coordinate with the nearest
// value (cost |a - b|, ties to the lowest index). Lower bound on the exact
// distance.
OtResult relaxed_ot_distance(const Eigen::Ref<const Eigen::VectorXd>& source,
                             const Eigen::Ref<const Eigen::VectorXd>& target);

// Exact 1-D Wasserstein-1 distance between the two coordinate distributions
// via the monotone (quantile) coupling. Intended as a test oracle; d <= 64.
OtResult exact_ot_distance(const Eigen::Ref<const Eigen::VectorXd>& source,
                           const Eigen::Ref<const Eigen::VectorXd>& target);

// (D(s, a) + D(a, s)) / 2 with the relaxed distance.
double ot_loss(const Eigen::Ref<const Eigen::VectorXd>& hs, const Eigen::Ref<const Eigen::VectorXd>& ha);

// KL[p || q] for two logit rows, in nats.
double kl_divergence(const Eigen::Ref<const Eigen::VectorXd>& logits_p, const Eigen::Ref<const Eigen::VectorXd>& logits_q);

namespace detail {

inline int nearest_index(double value, const double* target, Index n) {
  int best = 0;
  double best_cost = std::abs(value - target[0]);
  for (Index j = 1; j < n; ++j) {
    const double c = std::abs(value - target[j]);
    if (c < best_cost) {
      best_cost = c;
      best = static_cast<int>(j);
    }
  }
  return best;
}

inline double sign(double x) { return static_cast<double>((x > 0.0) - (x < 0.0)); }

}  // namespace detail

// Differentiable relaxed OT distance between matching rows of `source` and
// `target` (each B x d), averaged over rows. The nearest-target assignment is
// held fixed in the backward pass; gradients reach both the costs and the
// mass normalisation.
template <typename S>
Tensor<S> relaxed_ot_distance(const Tensor<S>& source, const Tensor<S>& target) {
  if (source.rows() != target.rows() || source.cols() != target.cols() || source.rows() == 0) {
    throw ShapeError("relaxed_ot_distance: inputs must share a non-empty shape");
  }
  const Index rows = source.rows();
  const Index d = source.cols();
  const MatrixD s = source.value().template cast<double>();
  const MatrixD t = target.value().template cast<double>();
  std::vector<int> assign(static_cast<std::size_t>(rows * d));
  std::vector<double> norms(static_cast<std::size_t>(rows));
  std::vector<double> dists(static_cast<std::size_t>(rows));
  double total = 0.0;
  for (Index r = 0; r < rows; ++r) {
    const double norm = s.row(r).cwiseAbs().sum();
    if (!(norm > kMassEpsilon)) throw DegenerateMassError("relaxed_ot_distance: zero representation");
    double dist = 0.0;
    for (Index i = 0; i < d; ++i) {
      const int j = detail::nearest_index(s(r, i), t.row(r).data(), d);
      assign[static_cast<std::size_t>(r * d + i)] = j;
      dist += std::abs(s(r, i)) / norm * std::abs(s(r, i) - t(r, j));
    }
    norms[static_cast<std::size_t>(r)] = norm;
    dists[static_cast<std::size_t>(r)] = dist;
    total += dist;
  }
  Matrix<S> out(1, 1);
  out(0, 0) = static_cast<S>(total / static_cast<double>(rows));
  auto* ns = &source.node();
  auto* nt = &target.node();
  return Tensor<S>::make(
      std::move(out), {source, target},
      [ns, nt, s, t, assign = std::move(assign), norms = std::move(norms), dists = std::move(dists)](
          const Matrix<S>& g) {
        const Index rows = s.rows();
        const Index d = s.cols();
        const double scale = static_cast<double>(g(0, 0)) / static_cast<double>(rows);
        Matrix<S> ds = Matrix<S>::Zero(rows, d);
        Matrix<S> dt = Matrix<S>::Zero(rows, d);
        for (Index r = 0; r < rows; ++r) {
          const double norm = norms[static_cast<std::size_t>(r)];
          const double dist = dists[static_cast<std::size_t>(r)];
          for (Index i = 0; i < d; ++i) {
            const int j = assign[static_cast<std::size_t>(r * d + i)];
            const double diff = s(r, i) - t(r, j);
            const double m = std::abs(s(r, i)) / norm;
            const double cost = std::abs(diff);
            // d/ds_i of m_i * c_i through both the cost and the normaliser.
            const double grad_s = detail::sign(s(r, i)) / norm * (cost - dist) + m * detail::sign(diff);
            ds(r, i) += static_cast<S>(scale * grad_s);
            dt(r, j) -= static_cast<S>(scale * m * detail::sign(diff));
          }
        }
        ns->accumulate(ds);
        nt->accumulate(dt);
      });
}

template <typename S>
Tensor<S> ot_loss(const Tensor<S>& hs, const Tensor<S>& ha) {
  return scale(relaxed_ot_distance(hs, ha) + relaxed_ot_distance(ha, hs), S(0.5));
}

// Sum over kept rows of KL[softmax(logits_syn) || softmax(logits_aut)],
// divided by the number of kept rows. `keep` is read in row-major order and
// must have one entry per logits row. Gradients reach both inputs.
template <typename S>
Tensor<S> kl_consistency(const Tensor<S>& logits_syn, const Tensor<S>& logits_aut, const Mask& keep) {
  if (logits_syn.rows() != logits_aut.rows() || logits_syn.cols() != logits_aut.cols()) {
    throw ShapeError("kl_consistency: logits shapes differ");
  }
  if (keep.size() != logits_syn.rows()) throw ShapeError("kl_consistency: mask needs one entry per row");
  const MatrixD lp = detail::log_softmax_rows(logits_syn.value());
  const MatrixD lq = detail::log_softmax_rows(logits_aut.value());
  const Index rows = lp.rows();
  std::vector<char> kept(static_cast<std::size_t>(rows));
  std::vector<double> row_kl(static_cast<std::size_t>(rows), 0.0);
  Index count = 0;
  double total = 0.0;
  for (Index r = 0; r < rows; ++r) {
    kept[static_cast<std::size_t>(r)] = keep.data()[r] ? 1 : 0;
    if (!keep.data()[r]) continue;
    ++count;
    double kl = 0.0;
    for (Index c = 0; c < lp.cols(); ++c) kl += std::exp(lp(r, c)) * (lp(r, c) - lq(r, c));
    row_kl[static_cast<std::size_t>(r)] = kl;
    total += kl;
  }
  if (count == 0) throw ShapeError("kl_consistency: no unmasked positions");
  const double norm = 1.0 / static_cast<double>(count);
  Matrix<S> out(1, 1);
  out(0, 0) = static_cast<S>(total * norm);
  auto* np = &logits_syn.node();
  auto* nq = &logits_aut.node();
  return Tensor<S>::make(
      std::move(out), {logits_syn, logits_aut},
      [np, nq, lp, lq, kept = std::move(kept), row_kl = std::move(row_kl), norm](const Matrix<S>& g) {
        const double scale = static_cast<double>(g(0, 0)) * norm;
        Matrix<S> dp = Matrix<S>::Zero(lp.rows(), lp.cols());
        Matrix<S> dq = Matrix<S>::Zero(lp.rows(), lp.cols());
        for (Index r = 0; r < lp.rows(); ++r) {
          if (!kept[static_cast<std::size_t>(r)]) continue;
          const double kl = row_kl[static_cast<std::size_t>(r)];
          for (Index c = 0; c < lp.cols(); ++c) {
            const double p = std::exp(lp(r, c));
            const double q = std::exp(lq(r, c));
            dp(r, c) = static_cast<S>(scale * p * (lp(r, c) - lq(r, c) - kl));
            dq(r, c) = static_cast<S>(scale * (q - p));
          }
        }
        np->accumulate(dp);
        nq->accumulate(dq);
      });
}

}  // namespace mmt
