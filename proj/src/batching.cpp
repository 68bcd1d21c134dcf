#include "mmt/batching.hpp"

#include <algorithm>
#include <numeric>

#include "mmt/errors.hpp"
#include "mmt/rng.hpp"
#include "mmt/vocab.hpp"

namespace mmt {

Index budget_tokens(const ParallelExample& ex) {
  return std::max(static_cast<Index>(ex.src.size()), static_cast<Index>(ex.tgt.size()) - 1);
}

std::vector<std::vector<std::size_t>> plan_batches(std::span<const ParallelExample> examples, Index token_budget,
                                                   std::uint64_t seed) {
  if (token_budget < 1) throw DataError("token budget must be positive");
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return budget_tokens(examples[a]) < budget_tokens(examples[b]);
  });

  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::size_t> current;
  Index used = 0;
  for (std::size_t i : order) {
    const Index n = budget_tokens(examples[i]);
    if (!current.empty() && used + n > token_budget) {
      groups.push_back(std::move(current));
      current.clear();
      used = 0;
    }
    current.push_back(i);
    used += n;
  }
  if (!current.empty()) groups.push_back(std::move(current));

  Rng rng(seed, "shuffle");
  rng.shuffle(groups.begin(), groups.end());
  return groups;
}

Batch collate(std::span<const ParallelExample> examples, std::span<const std::size_t> indices,
              const FeatureTable& syn, const FeatureTable& aut) {
  if (indices.empty()) throw DataError("collate: empty batch");
  Index src_len = 0;
  Index tgt_len = 0;
  for (std::size_t i : indices) {
    src_len = std::max(src_len, static_cast<Index>(examples[i].src.size()));
    tgt_len = std::max(tgt_len, static_cast<Index>(examples[i].tgt.size()) - 1);
  }
  const auto rows = static_cast<Index>(indices.size());
  if (syn.dim() != aut.dim()) throw DataError("synthetic and authentic feature tables differ in dimension");
  Batch b;
  b.src = IdMatrix::Constant(rows, src_len, Vocabulary::kPad);
  b.src_mask = Mask::Constant(rows, src_len, false);
  b.tgt_in = IdMatrix::Constant(rows, tgt_len, Vocabulary::kPad);
  b.tgt_out = IdMatrix::Constant(rows, tgt_len, Vocabulary::kPad);
  b.tgt_mask = Mask::Constant(rows, tgt_len, false);
  b.syn.resize(rows, syn.dim());
  b.aut.resize(rows, aut.dim());
  for (Index r = 0; r < rows; ++r) {
    const auto& ex = examples[indices[static_cast<std::size_t>(r)]];
    if (!syn.contains(ex.image_id)) throw DataError("image id '" + ex.image_id + "' missing from synthetic features");
    if (!aut.contains(ex.image_id)) throw DataError("image id '" + ex.image_id + "' missing from authentic features");
    for (std::size_t t = 0; t < ex.src.size(); ++t) {
      b.src(r, static_cast<Index>(t)) = ex.src[t];
      b.src_mask(r, static_cast<Index>(t)) = true;
    }
    for (std::size_t t = 0; t + 1 < ex.tgt.size(); ++t) {
      b.tgt_in(r, static_cast<Index>(t)) = ex.tgt[t];
      b.tgt_out(r, static_cast<Index>(t)) = ex.tgt[t + 1];
      b.tgt_mask(r, static_cast<Index>(t)) = true;
    }
    b.syn.row(r) = syn.at(ex.image_id);
    b.aut.row(r) = aut.at(ex.image_id);
    b.example_index.push_back(indices[static_cast<std::size_t>(r)]);
  }
  return b;
}

std::vector<Batch> make_batches(std::span<const ParallelExample> examples, Index token_budget, std::uint64_t seed,
                                const FeatureTable& syn, const FeatureTable& aut) {
  for (const auto& ex : examples) {
    if (!syn.contains(ex.image_id) || !aut.contains(ex.image_id)) {
      throw DataError("image id '" + ex.image_id + "' cannot be resolved in both feature tables");
    }
  }
  std::vector<Batch> out;
  for (const auto& group : plan_batches(examples, token_budget, seed)) out.push_back(collate(examples, group, syn, aut));
  return out;
}

}  // namespace mmt
