#pragma once

#include <span>
#include <string>
#include <vector>

#include "mmt/bleu.hpp"
#include "mmt/corpus.hpp"
#include "mmt/features.hpp"
#include "mmt/model.hpp"
#include "mmt/vocab.hpp"

namespace mmt {

// Generated target tokens (no <s>, ending in </s>) and their summed
// log-probability.
struct Hypothesis {
  std::vector<int> tokens;
  double log_prob = 0.0;
  bool finished = false;

  // Length-normalised score (length penalty 1.0).
  double score() const { return tokens.empty() ? log_prob : log_prob / static_cast<double>(tokens.size()); }
};

// Default length cap: 1.5 * source length + 10, bounded by the model's
// position table.
int default_max_len(const Model& model, std::size_t src_len);

// Beam search over one sentence. Hypotheses ending in </s> are frozen; the
// search stops once `beam` hypotheses have finished, when no live hypothesis
// can still beat the best finished score, or at max_len, where </s> is
// forced. Ties are broken by hypothesis rank, then token id. max_len <= 0
// selects default_max_len().
Hypothesis beam_search(const Model& model, std::span<const int> src, const FeatureVector& feature, int beam,
                       int max_len = 0);

// Argmax decoding with the same length rule.
Hypothesis greedy_decode(const Model& model, std::span<const int> src, const FeatureVector& feature, int max_len = 0);

// Per-sentence beam search; results follow input order.
std::vector<Hypothesis> translate(const Model& model, const std::vector<std::vector<int>>& sources,
                                  const std::vector<FeatureVector>& features, int beam, int max_len = 0);

// Ids -> detokenised words (subword markers joined).
Tokens to_words(const Vocabulary& vocab, const std::vector<int>& ids);
std::string to_sentence(const Vocabulary& vocab, const std::vector<int>& ids);

struct SimilarityReport {
  std::vector<double> similarities;  // NaN where undefined
  double mean = 0.0;
  long undefined = 0;
  std::vector<long> histogram;  // 20 equal bins over [-1, 1]

  std::string to_text() const;
  std::string to_jsonl() const;
};

// Cosine similarity between the synthetic and authentic projector outputs of
// every example, computed in evaluation mode. Zero-norm representations are
// counted as undefined and excluded from the mean.
SimilarityReport similarity_probe(const Model& model, std::span<const ParallelExample> corpus, const FeatureTable& syn,
                                  const FeatureTable& aut);

struct IncongruentReport {
  BleuReport congruent;
  BleuReport zeroed;
  double delta = 0.0;  // congruent - zeroed

  std::string to_text() const;
};

// Decodes the corpus with its real features and again with all-zero feature
// vectors (before the projector), scoring both against `references`. Only
// src and image_id of each example are read.
IncongruentReport incongruent_decode(const Model& model, const Vocabulary& vocab,
                                     std::span<const ParallelExample> corpus, const FeatureTable& features,
                                     const std::vector<Tokens>& references, int beam, int max_len = 0);

}  // namespace mmt
