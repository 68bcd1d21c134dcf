#include "mmt/bleu.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>

#include "mmt/errors.hpp"

namespace mmt {

namespace {

std::map<std::vector<std::string>, long> ngram_counts(const Tokens& tokens, std::size_t n) {
  std::map<std::vector<std::string>, long> counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i)
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<long>(i), tokens.begin() + static_cast<long>(i + n))];
  return counts;
}

}  // namespace

BleuReport corpus_bleu(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references) {
  if (candidates.empty()) throw DataError("corpus_bleu: empty corpus");
  if (candidates.size() != references.size()) {
    throw DataError("corpus_bleu: " + std::to_string(candidates.size()) + " candidates for " +
                    std::to_string(references.size()) + " references");
  }
  BleuReport r;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    r.candidate_length += static_cast<long>(candidates[s].size());
    r.reference_length += static_cast<long>(references[s].size());
    for (std::size_t n = 1; n <= 4; ++n) {
      const auto cand = ngram_counts(candidates[s], n);
      const auto ref = ngram_counts(references[s], n);
      for (const auto& [gram, c] : cand) {
        auto it = ref.find(gram);
        if (it != ref.end()) r.matches[n - 1] += std::min(c, it->second);
      }
      r.totals[n - 1] += static_cast<long>(candidates[s].size() >= n ? candidates[s].size() - n + 1 : 0);
    }
  }
  bool all_positive = true;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < 4; ++n) {
    r.precisions[n] = r.totals[n] > 0 ? static_cast<double>(r.matches[n]) / static_cast<double>(r.totals[n]) : 0.0;
    if (r.precisions[n] > 0.0) {
      log_sum += std::log(r.precisions[n]);
    } else {
      all_positive = false;
    }
  }
  const double c = static_cast<double>(r.candidate_length);
  const double ref_len = static_cast<double>(r.reference_length);
  r.brevity_penalty = c >= ref_len ? 1.0 : (c > 0.0 ? std::exp(1.0 - ref_len / c) : 0.0);
  r.bleu = all_positive ? 100.0 * r.brevity_penalty * std::exp(log_sum / 4.0) : 0.0;
  return r;
}

std::string BleuReport::to_text() const {
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "bleu=%.2f\np1=%.4f\np2=%.4f\np3=%.4f\np4=%.4f\nbrevity_penalty=%.4f\ncandidate_length=%ld\n"
                "reference_length=%ld\n",
                bleu, precisions[0], precisions[1], precisions[2], precisions[3], brevity_penalty, candidate_length,
                reference_length);
  return buf;
}

}  // namespace mmt
