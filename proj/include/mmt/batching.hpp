#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mmt/autodiff.hpp"
#include "mmt/corpus.hpp"
#include "mmt/features.hpp"

namespace mmt {

using IdMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Padded mini-batch. tgt_in is the decoder input (<s> y1 .. yM) and tgt_out
// the prediction targets (y1 .. yM </s>); both share tgt_mask.
struct Batch {
  IdMatrix src;
  Mask src_mask;
  IdMatrix tgt_in;
  IdMatrix tgt_out;
  Mask tgt_mask;
  MatrixF syn;
  MatrixF aut;
  std::vector<std::size_t> example_index;

  Index size() const { return src.rows(); }
  Index src_tokens() const { return src_mask.count(); }
  Index tgt_tokens() const { return tgt_mask.count(); }
};

// Tokens an example charges against the budget: max(source length, number
// of predicted target tokens).
Index budget_tokens(const ParallelExample& ex);

// Length-sorted greedy packing into groups under the token budget (an
// over-long example forms its own group), then a seeded shuffle of the
// group order.
std::vector<std::vector<std::size_t>> plan_batches(std::span<const ParallelExample> examples, Index token_budget,
                                                   std::uint64_t seed);

Batch collate(std::span<const ParallelExample> examples, std::span<const std::size_t> indices,
              const FeatureTable& syn, const FeatureTable& aut);

std::vector<Batch> make_batches(std::span<const ParallelExample> examples, Index token_budget, std::uint64_t seed,
                                const FeatureTable& syn, const FeatureTable& aut);

}  // namespace mmt
