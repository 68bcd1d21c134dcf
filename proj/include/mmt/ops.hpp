#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mmt/autodiff.hpp"
#include "mmt/rng.hpp"

namespace mmt {

namespace detail {

inline std::string shape_str(Index r, Index c) { return "[" + std::to_string(r) + "x" + std::to_string(c) + "]"; }

template <typename S>
void require_same_shape(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.rows(), a.cols()) + " vs " +
                     shape_str(b.rows(), b.cols()));
  }
}

}  // namespace detail

// C = A * B.
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + detail::shape_str(a.rows(), a.cols()) + " * " +
                     detail::shape_str(b.rows(), b.cols()));
  }
  Matrix<S> out = a.value() * b.value();
  auto* na = &a.node();
  auto* nb = &b.node();
  return Tensor<S>::make(std::move(out), {a, b}, [na, nb](const Matrix<S>& g) {
    if (na->requires_grad) na->accumulate(g * nb->value.transpose());
    if (nb->requires_grad) nb->accumulate(na->value.transpose() * g);
  });
}

// C = A * B^T.
template <typename S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: inner dimensions differ " + detail::shape_str(a.rows(), a.cols()) + " * " +
                     detail::shape_str(b.rows(), b.cols()) + "^T");
  }
  Matrix<S> out = a.value() * b.value().transpose();
  auto* na = &a.node();
  auto* nb = &b.node();
  return Tensor<S>::make(std::move(out), {a, b}, [na, nb](const Matrix<S>& g) {
    if (na->requires_grad) na->accumulate(g * nb->value);
    if (nb->requires_grad) nb->accumulate(g.transpose() * na->value);
  });
}

template <typename S>
Tensor<S> operator+(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "add");
  auto* na = &a.node();
  auto* nb = &b.node();
  return Tensor<S>::make(a.value() + b.value(), {a, b}, [na, nb](const Matrix<S>& g) {
    na->accumulate(g);
    nb->accumulate(g);
  });
}

template <typename S>
Tensor<S> operator-(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "sub");
  auto* na = &a.node();
  auto* nb = &b.node();
  return Tensor<S>::make(a.value() - b.value(), {a, b}, [na, nb](const Matrix<S>& g) {
    na->accumulate(g);
    nb->accumulate(-g);
  });
}

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return a + b;
}

// Elementwise product.
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape(a, b, "mul");
  auto* na = &a.node();
  auto* nb = &b.node();
  Matrix<S> out = a.value().cwiseProduct(b.value());
  return Tensor<S>::make(std::move(out), {a, b}, [na, nb](const Matrix<S>& g) {
    if (na->requires_grad) na->accumulate(g.cwiseProduct(nb->value));
    if (nb->requires_grad) nb->accumulate(g.cwiseProduct(na->value));
  });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S factor) {
  auto* nx = &x.node();
  return Tensor<S>::make(x.value() * factor, {x}, [nx, factor](const Matrix<S>& g) { nx->accumulate(g * factor); });
}

template <typename S>
Tensor<S> operator*(const Tensor<S>& x, S factor) {
  return scale(x, factor);
}

template <typename S>
Tensor<S> operator*(S factor, const Tensor<S>& x) {
  return scale(x, factor);
}

// x + broadcast of a 1 x n bias over rows.
template <typename S>
Tensor<S> add_bias(const Tensor<S>& x, const Tensor<S>& bias) {
  if (bias.rows() != 1 || bias.cols() != x.cols()) {
    throw ShapeError("add_bias: bias " + detail::shape_str(bias.rows(), bias.cols()) + " for input " +
                     detail::shape_str(x.rows(), x.cols()));
  }
  Matrix<S> out = x.value().rowwise() + bias.value().row(0);
  auto* nx = &x.node();
  auto* nb = &bias.node();
  return Tensor<S>::make(std::move(out), {x, bias}, [nx, nb](const Matrix<S>& g) {
    nx->accumulate(g);
    if (nb->requires_grad) nb->accumulate(g.colwise().sum());
  });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  Matrix<S> out = x.value().cwiseMax(S(0));
  auto* nx = &x.node();
  return Tensor<S>::make(std::move(out), {x}, [nx](const Matrix<S>& g) {
    nx->accumulate((nx->value.array() > S(0)).select(g.array(), S(0)).matrix());
  });
}

// Sum of all entries as a 1 x 1 tensor; accumulated in double.
template <typename S>
Tensor<S> sum(const Tensor<S>& x) {
  const double total = x.value().template cast<double>().sum();
  auto* nx = &x.node();
  const Index r = x.rows();
  const Index c = x.cols();
  Matrix<S> out(1, 1);
  out(0, 0) = static_cast<S>(total);
  return Tensor<S>::make(std::move(out), {x}, [nx, r, c](const Matrix<S>& g) {
    nx->accumulate(Matrix<S>::Constant(r, c, g(0, 0)));
  });
}

// Inverted dropout: in training mode zero each element with probability p and
// rescale survivors by 1/(1-p); identity in evaluation mode.
template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double p, Rng& rng, bool train) {
  if (!train || p <= 0.0) return x;
  if (p >= 1.0) throw ShapeError("dropout: p must be < 1");
  const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
  Matrix<S> keep(x.rows(), x.cols());
  for (Index i = 0; i < keep.size(); ++i) keep.data()[i] = rng.uniform() < p ? S(0) : keep_scale;
  Matrix<S> out = x.value().cwiseProduct(keep);
  auto* nx = &x.node();
  return Tensor<S>::make(std::move(out), {x}, [nx, keep = std::move(keep)](const Matrix<S>& g) {
    nx->accumulate(g.cwiseProduct(keep));
  });
}

// Row-wise layer normalisation with affine gain/bias (each 1 x n). Mean and
// variance are accumulated in double.
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias, double eps = 1e-5) {
  const Index n = x.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n) {
    throw ShapeError("layer_norm: affine parameters must be 1x" + std::to_string(n));
  }
  const Index rows = x.rows();
  Matrix<S> xhat(rows, n);
  std::vector<double> inv_std(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    double mean = 0.0;
    for (Index c = 0; c < n; ++c) mean += static_cast<double>(x.value()(r, c));
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (Index c = 0; c < n; ++c) {
      const double d = static_cast<double>(x.value()(r, c)) - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    for (Index c = 0; c < n; ++c) xhat(r, c) = static_cast<S>((static_cast<double>(x.value()(r, c)) - mean) * is);
  }
  Matrix<S> out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  auto* nx = &x.node();
  auto* ng = &gain.node();
  auto* nb = &bias.node();
  return Tensor<S>::make(
      std::move(out), {x, gain, bias},
      [nx, ng, nb, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Matrix<S>& g) {
        if (ng->requires_grad) ng->accumulate(g.cwiseProduct(xhat).colwise().sum());
        if (nb->requires_grad) nb->accumulate(g.colwise().sum());
        if (!nx->requires_grad) return;
        const Index rows = g.rows();
        const Index n = g.cols();
        Matrix<S> dx(rows, n);
        for (Index r = 0; r < rows; ++r) {
          double mean_d = 0.0;
          double mean_dx = 0.0;
          for (Index c = 0; c < n; ++c) {
            const double dxh = static_cast<double>(g(r, c)) * static_cast<double>(ng->value(0, c));
            mean_d += dxh;
            mean_dx += dxh * static_cast<double>(xhat(r, c));
          }
          mean_d /= static_cast<double>(n);
          mean_dx /= static_cast<double>(n);
          const double is = inv_std[static_cast<std::size_t>(r)];
          for (Index c = 0; c < n; ++c) {
            const double dxh = static_cast<double>(g(r, c)) * static_cast<double>(ng->value(0, c));
            dx(r, c) = static_cast<S>(is * (dxh - mean_d - static_cast<double>(xhat(r, c)) * mean_dx));
          }
        }
        nx->accumulate(dx);
      });
}

// Rows of an embedding table selected by id.
template <typename S>
Tensor<S> embedding(const Tensor<S>& table, std::span<const int> ids) {
  const Index vocab = table.rows();
  Matrix<S> out(static_cast<Index>(ids.size()), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= vocab) {
      throw VocabError("embedding: id " + std::to_string(ids[i]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    out.row(static_cast<Index>(i)) = table.value().row(ids[i]);
  }
  auto* nt = &table.node();
  std::vector<int> saved(ids.begin(), ids.end());
  return Tensor<S>::make(std::move(out), {table}, [nt, saved = std::move(saved)](const Matrix<S>& g) {
    Matrix<S> dt = Matrix<S>::Zero(nt->value.rows(), nt->value.cols());
    for (std::size_t i = 0; i < saved.size(); ++i) dt.row(saved[i]) += g.row(static_cast<Index>(i));
    nt->accumulate(dt);
  });
}

// Softmax along each row restricted to entries where mask is true. Masked
// entries come out exactly zero. Max-subtracted, denominator in double.
template <typename S>
Tensor<S> masked_softmax(const Tensor<S>& scores, const Mask& mask) {
  if (mask.rows() != scores.rows() || mask.cols() != scores.cols()) {
    throw ShapeError("masked_softmax: mask " + detail::shape_str(mask.rows(), mask.cols()) + " for scores " +
                     detail::shape_str(scores.rows(), scores.cols()));
  }
  const auto& x = scores.value();
  Matrix<S> p = Matrix<S>::Zero(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index c = 0; c < x.cols(); ++c)
      if (mask(r, c)) mx = std::max(mx, static_cast<double>(x(r, c)));
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw MaskError("masked_softmax: row " + std::to_string(r) + " has no unmasked entry");
    }
    double denom = 0.0;
    for (Index c = 0; c < x.cols(); ++c)
      if (mask(r, c)) denom += std::exp(static_cast<double>(x(r, c)) - mx);
    for (Index c = 0; c < x.cols(); ++c)
      if (mask(r, c)) p(r, c) = static_cast<S>(std::exp(static_cast<double>(x(r, c)) - mx) / denom);
  }
  auto* ns = &scores.node();
  Matrix<S> saved = p;
  return Tensor<S>::make(std::move(p), {scores}, [ns, p = std::move(saved)](const Matrix<S>& g) {
    Matrix<S> dx(p.rows(), p.cols());
    for (Index r = 0; r < p.rows(); ++r) {
      double dot = 0.0;
      for (Index c = 0; c < p.cols(); ++c) dot += static_cast<double>(g(r, c)) * static_cast<double>(p(r, c));
      for (Index c = 0; c < p.cols(); ++c)
        dx(r, c) = static_cast<S>(static_cast<double>(p(r, c)) * (static_cast<double>(g(r, c)) - dot));
    }
    ns->accumulate(dx);
  });
}

namespace detail {

// Row-wise log-softmax values computed in double.
template <typename S>
MatrixD log_softmax_rows(const Matrix<S>& x) {
  MatrixD out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Index c = 0; c < x.cols(); ++c) mx = std::max(mx, static_cast<double>(x(r, c)));
    double denom = 0.0;
    for (Index c = 0; c < x.cols(); ++c) denom += std::exp(static_cast<double>(x(r, c)) - mx);
    const double lse = mx + std::log(denom);
    for (Index c = 0; c < x.cols(); ++c) out(r, c) = static_cast<double>(x(r, c)) - lse;
  }
  return out;
}

}  // namespace detail

template <typename S>
Tensor<S> log_softmax(const Tensor<S>& x) {
  MatrixD lp = detail::log_softmax_rows(x.value());
  Matrix<S> out = lp.template cast<S>();
  auto* nx = &x.node();
  return Tensor<S>::make(std::move(out), {x}, [nx, lp = std::move(lp)](const Matrix<S>& g) {
    Matrix<S> dx(lp.rows(), lp.cols());
    for (Index r = 0; r < lp.rows(); ++r) {
      const double gs = g.row(r).template cast<double>().sum();
      for (Index c = 0; c < lp.cols(); ++c)
        dx(r, c) = static_cast<S>(static_cast<double>(g(r, c)) - std::exp(lp(r, c)) * gs);
    }
    nx->accumulate(dx);
  });
}

// Contiguous sub-block copy.
template <typename S>
Tensor<S> block(const Tensor<S>& x, Index row, Index col, Index rows, Index cols) {
  if (row < 0 || col < 0 || rows < 0 || cols < 0 || row + rows > x.rows() || col + cols > x.cols()) {
    throw ShapeError("block: " + detail::shape_str(rows, cols) + " at (" + std::to_string(row) + "," +
                     std::to_string(col) + ") outside " + detail::shape_str(x.rows(), x.cols()));
  }
  Matrix<S> out = x.value().block(row, col, rows, cols);
  auto* nx = &x.node();
  return Tensor<S>::make(std::move(out), {x}, [nx, row, col](const Matrix<S>& g) {
    if (!nx->requires_grad) return;
    if (nx->grad.size() == 0) nx->grad = Matrix<S>::Zero(nx->value.rows(), nx->value.cols());
    nx->grad.block(row, col, g.rows(), g.cols()) += g;
  });
}

template <typename S>
Tensor<S> rows_of(const Tensor<S>& x, Index row, Index count) {
  return block(x, row, 0, count, x.cols());
}

// Row gather: out.row(i) = x.row(index[i]). Indices may repeat.
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& x, std::span<const Index> index) {
  Matrix<S> out(static_cast<Index>(index.size()), x.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= x.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = x.value().row(index[i]);
  }
  auto* nx = &x.node();
  std::vector<Index> saved(index.begin(), index.end());
  return Tensor<S>::make(std::move(out), {x}, [nx, saved = std::move(saved)](const Matrix<S>& g) {
    if (!nx->requires_grad) return;
    if (nx->grad.size() == 0) nx->grad = Matrix<S>::Zero(nx->value.rows(), nx->value.cols());
    for (std::size_t i = 0; i < saved.size(); ++i) nx->grad.row(saved[i]) += g.row(static_cast<Index>(i));
  });
}

template <typename S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Index rows = 0;
  const Index cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix<S> out(rows, cols);
  std::vector<typename Tensor<S>::NodeT*> nodes;
  nodes.reserve(parts.size());
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
    nodes.push_back(&p.node());
  }
  return Tensor<S>::make_n(std::move(out), parts, [nodes = std::move(nodes)](const Matrix<S>& g) {
    Index at = 0;
    for (auto* n : nodes) {
      const Index r = n->value.rows();
      n->accumulate(g.middleRows(at, r));
      at += r;
    }
  });
}

template <typename S>
Tensor<S> concat_cols(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Index cols = 0;
  const Index rows = parts.front().rows();
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix<S> out(rows, cols);
  std::vector<typename Tensor<S>::NodeT*> nodes;
  nodes.reserve(parts.size());
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
    nodes.push_back(&p.node());
  }
  return Tensor<S>::make_n(std::move(out), parts, [nodes = std::move(nodes)](const Matrix<S>& g) {
    Index at = 0;
    for (auto* n : nodes) {
      const Index c = n->value.cols();
      n->accumulate(g.middleCols(at, c));
      at += c;
    }
  });
}

// Label-smoothed cross entropy over the rows of `logits`, one target per
// row. The smoothed target puts (1 - eps) on the gold id plus eps spread
// uniformly over every non-pad id (gold included). Rows whose target is
// pad_id are skipped; the sum is divided by the number of included rows.
template <typename S>
Tensor<S> cross_entropy_label_smoothed(const Tensor<S>& logits, std::span<const int> targets, int pad_id,
                                       double eps) {
  const Index rows = logits.rows();
  const Index vocab = logits.cols();
  if (static_cast<Index>(targets.size()) != rows) throw ShapeError("cross_entropy: one target per row required");
  if (eps < 0.0 || eps >= 1.0) throw ShapeError("cross_entropy: smoothing must lie in [0, 1)");
  const bool pad_in_vocab = pad_id >= 0 && pad_id < vocab;
  const double share = eps / static_cast<double>(pad_in_vocab ? vocab - 1 : vocab);
  for (int t : targets)
    if (t < 0 || t >= vocab) throw VocabError("cross_entropy: target " + std::to_string(t) + " outside vocabulary");

  const MatrixD lp = detail::log_softmax_rows(logits.value());
  double total = 0.0;
  Index count = 0;
  for (Index r = 0; r < rows; ++r) {
    const int gold = targets[static_cast<std::size_t>(r)];
    if (gold == pad_id) continue;
    ++count;
    double row_sum = 0.0;
    if (share > 0.0) {
      for (Index c = 0; c < vocab; ++c)
        if (c != pad_id) row_sum += lp(r, c);
    }
    total -= (1.0 - eps) * lp(r, gold) + share * row_sum;
  }
  if (count == 0) throw ShapeError("cross_entropy: every target is padding");
  const double norm = 1.0 / static_cast<double>(count);
  Matrix<S> out(1, 1);
  out(0, 0) = static_cast<S>(total * norm);

  auto* nl = &logits.node();
  std::vector<int> saved(targets.begin(), targets.end());
  return Tensor<S>::make(std::move(out), {logits},
                         [nl, lp, saved = std::move(saved), pad_id, eps, share, norm](const Matrix<S>& g) {
                           const double scale = static_cast<double>(g(0, 0)) * norm;
                           Matrix<S> dx = Matrix<S>::Zero(lp.rows(), lp.cols());
                           for (Index r = 0; r < lp.rows(); ++r) {
                             const int gold = saved[static_cast<std::size_t>(r)];
                             if (gold == pad_id) continue;
                             for (Index c = 0; c < lp.cols(); ++c) {
                               double q = c == pad_id ? 0.0 : share;
                               if (c == gold) q += 1.0 - eps;
                               dx(r, c) = static_cast<S>(scale * (std::exp(lp(r, c)) - q));
                             }
                           }
                           nl->accumulate(dx);
                         });
}

// Copies a tensor's value into another scalar type (graph is not carried).
template <typename To, typename From>
Tensor<To> cast_constant(const Tensor<From>& x) {
  return Tensor<To>::constant(x.value().template cast<To>());
}

}  // namespace mmt
