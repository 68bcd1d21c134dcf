#pragma once

#include <array>
#include <string>
#include <vector>

namespace mmt {

using Tokens = std::vector<std::string>;

struct BleuReport {
  double bleu = 0.0;  // 0..100
  std::array<double, 4> precisions{};
  std::array<long, 4> matches{};
  std::array<long, 4> totals{};
  double brevity_penalty = 0.0;
  long candidate_length = 0;
  long reference_length = 0;

  // key=value lines.
  std::string to_text() const;
};

// Corpus-level BLEU-4 with clipped n-gram counts, single reference per
// sentence, brevity penalty exp(1 - r/c) when c < r, no smoothing.
BleuReport corpus_bleu(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references);

}  // namespace mmt
