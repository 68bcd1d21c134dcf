#include "mmt/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "mmt/bpe.hpp"
#include "mmt/errors.hpp"

namespace mmt {

namespace {

struct Candidate {
  double log_prob;
  std::size_t parent;
  int token;
};

// Runs the encoder once for a single sentence.
EncoderOutput<float> encode_one(const Model& model, std::span<const int> src, const FeatureVector& feature) {
  if (src.empty()) throw DataError("cannot decode an empty source sentence");
  IdMatrix ids(1, static_cast<Index>(src.size()));
  for (std::size_t i = 0; i < src.size(); ++i) ids(0, static_cast<Index>(i)) = src[i];
  const Mask mask = Mask::Constant(1, ids.cols(), true);
  ForwardContext<float> ctx;
  const auto visual = model.project_features(Tensor<float>::constant(feature));
  return model.encode(ids, mask, visual, ctx);
}

// Log-probabilities of the next token for each prefix.
MatrixD next_token_log_probs(const Model& model, const EncoderOutput<float>& enc,
                             const std::vector<std::vector<int>>& prefixes) {
  const auto k = static_cast<Index>(prefixes.size());
  const auto t = static_cast<Index>(prefixes.front().size()) + 1;
  IdMatrix tgt(k, t);
  for (Index r = 0; r < k; ++r) {
    tgt(r, 0) = Vocabulary::kBos;
    for (Index c = 1; c < t; ++c) tgt(r, c) = prefixes[static_cast<std::size_t>(r)][static_cast<std::size_t>(c - 1)];
  }
  const Mask mask = Mask::Constant(k, t, true);
  ForwardContext<float> ctx;
  const auto expanded = k == 1 ? enc : enc.repeat_first(k);
  const auto logits = model.decode(tgt, mask, expanded, ctx);
  MatrixF last(k, logits.cols());
  for (Index r = 0; r < k; ++r) last.row(r) = logits.value().row(r * t + t - 1);
  return detail::log_softmax_rows(last);
}

bool allowed(int token) { return token != Vocabulary::kPad && token != Vocabulary::kBos; }

}  // namespace

int default_max_len(const Model& model, std::size_t src_len) {
  const int cap = model.config().max_positions;
  return std::max(1, std::min(cap, static_cast<int>(1.5 * static_cast<double>(src_len)) + 10));
}

Hypothesis beam_search(const Model& model, std::span<const int> src, const FeatureVector& feature, int beam,
                       int max_len) {
  if (beam < 1) throw DataError("beam size must be >= 1");
  NoGradGuard no_grad;
  if (max_len <= 0) max_len = default_max_len(model, src.size());
  max_len = std::min(max_len, model.config().max_positions);
  const auto enc = encode_one(model, src, feature);

  std::vector<Hypothesis> live(1);
  std::vector<Hypothesis> finished;
  for (int t = 0; t < max_len && !live.empty(); ++t) {
    std::vector<std::vector<int>> prefixes;
    for (const auto& h : live) prefixes.push_back(h.tokens);
    const MatrixD lp = next_token_log_probs(model, enc, prefixes);
    const bool force_eos = t == max_len - 1;

    std::vector<Candidate> cands;
    for (std::size_t k = 0; k < live.size(); ++k) {
      if (force_eos) {
        cands.push_back({live[k].log_prob + lp(static_cast<Index>(k), Vocabulary::kEos), k, Vocabulary::kEos});
        continue;
      }
      // The best `beam` tokens of each hypothesis are enough to fill the
      // next beam.
      std::vector<Candidate> own;
      for (Index v = 0; v < lp.cols(); ++v)
        if (allowed(static_cast<int>(v))) own.push_back({live[k].log_prob + lp(static_cast<Index>(k), v), k, static_cast<int>(v)});
      const auto keep = std::min<std::size_t>(own.size(), static_cast<std::size_t>(2 * beam));
      std::partial_sort(own.begin(), own.begin() + static_cast<long>(keep), own.end(),
                        [](const Candidate& a, const Candidate& b) {
                          return a.log_prob > b.log_prob || (a.log_prob == b.log_prob && a.token < b.token);
                        });
      cands.insert(cands.end(), own.begin(), own.begin() + static_cast<long>(keep));
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      if (a.parent != b.parent) return a.parent < b.parent;
      return a.token < b.token;
    });

    std::vector<Hypothesis> next;
    for (std::size_t rank = 0; rank < cands.size(); ++rank) {
      const auto& c = cands[rank];
      Hypothesis h;
      h.tokens = live[c.parent].tokens;
      h.tokens.push_back(c.token);
      h.log_prob = c.log_prob;
      if (c.token == Vocabulary::kEos) {
        if (rank < static_cast<std::size_t>(beam)) {
          h.finished = true;
          finished.push_back(std::move(h));
        }
      } else if (next.size() < static_cast<std::size_t>(beam)) {
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);

    if (finished.size() >= static_cast<std::size_t>(beam)) break;
    if (!finished.empty()) {
      double best = -std::numeric_limits<double>::infinity();
      for (const auto& f : finished) best = std::max(best, f.score());
      // Log-probs only fall as tokens are added, so a live hypothesis can at
      // best reach log_prob / max_len.
      bool can_improve = false;
      for (const auto& h : live) can_improve = can_improve || h.log_prob / static_cast<double>(max_len) > best;
      if (!can_improve) break;
    }
  }
  if (finished.empty()) throw NumericsError("beam search produced no hypothesis");
  std::size_t best = 0;
  for (std::size_t i = 1; i < finished.size(); ++i)
    if (finished[i].score() > finished[best].score()) best = i;
  return finished[best];
}

Hypothesis greedy_decode(const Model& model, std::span<const int> src, const FeatureVector& feature, int max_len) {
  NoGradGuard no_grad;
  if (max_len <= 0) max_len = default_max_len(model, src.size());
  max_len = std::min(max_len, model.config().max_positions);
  const auto enc = encode_one(model, src, feature);
  Hypothesis h;
  for (int t = 0; t < max_len; ++t) {
    const MatrixD lp = next_token_log_probs(model, enc, {h.tokens});
    int token = Vocabulary::kEos;
    if (t < max_len - 1) {
      double best = -std::numeric_limits<double>::infinity();
      for (Index v = 0; v < lp.cols(); ++v) {
        if (allowed(static_cast<int>(v)) && lp(0, v) > best) {
          best = lp(0, v);
          token = static_cast<int>(v);
        }
      }
    }
    h.tokens.push_back(token);
    h.log_prob += lp(0, token);
    if (token == Vocabulary::kEos) break;
  }
  h.finished = true;
  return h;
}

std::vector<Hypothesis> translate(const Model& model, const std::vector<std::vector<int>>& sources,
                                  const std::vector<FeatureVector>& features, int beam, int max_len) {
  if (sources.size() != features.size()) throw DataError("translate: one feature vector per source required");
  std::vector<Hypothesis> out;
  out.reserve(sources.size());
  for (std::size_t i = 0; i < sources.size(); ++i) out.push_back(beam_search(model, sources[i], features[i], beam, max_len));
  return out;
}

Tokens to_words(const Vocabulary& vocab, const std::vector<int>& ids) {
  return split_whitespace(detokenize(vocab.decode(ids)));
}

std::string to_sentence(const Vocabulary& vocab, const std::vector<int>& ids) { return detokenize(vocab.decode(ids)); }

SimilarityReport similarity_probe(const Model& model, std::span<const ParallelExample> corpus, const FeatureTable& syn,
                                  const FeatureTable& aut) {
  NoGradGuard no_grad;
  SimilarityReport r;
  r.histogram.assign(20, 0);
  double sum = 0.0;
  long defined = 0;
  for (const auto& ex : corpus) {
    const MatrixD hs = model.project_features(Tensor<float>::constant(syn.at(ex.image_id))).value().cast<double>();
    const MatrixD ha = model.project_features(Tensor<float>::constant(aut.at(ex.image_id))).value().cast<double>();
    const double ns = hs.norm();
    const double na = ha.norm();
    if (ns == 0.0 || na == 0.0) {
      r.similarities.push_back(std::numeric_limits<double>::quiet_NaN());
      ++r.undefined;
      continue;
    }
    const double cos = std::clamp(hs.cwiseProduct(ha).sum() / (ns * na), -1.0, 1.0);
    r.similarities.push_back(cos);
    sum += cos;
    ++defined;
    const auto bin = std::min<long>(19, static_cast<long>((cos + 1.0) / 2.0 * 20.0));
    ++r.histogram[static_cast<std::size_t>(bin)];
  }
  r.mean = defined > 0 ? sum / static_cast<double>(defined) : std::numeric_limits<double>::quiet_NaN();
  return r;
}

std::string SimilarityReport::to_text() const {
  std::ostringstream os;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", mean);
  os << "examples=" << similarities.size() << "\nmean_cosine=" << buf << "\nundefined=" << undefined << "\n";
  for (std::size_t b = 0; b < histogram.size(); ++b) {
    std::snprintf(buf, sizeof buf, "hist[%.1f,%.1f)=", -1.0 + 0.1 * static_cast<double>(b),
                  -0.9 + 0.1 * static_cast<double>(b));
    os << buf << histogram[b] << "\n";
  }
  return os.str();
}

std::string SimilarityReport::to_jsonl() const {
  std::ostringstream os;
  char buf[64];
  for (std::size_t i = 0; i < similarities.size(); ++i) {
    if (std::isnan(similarities[i])) {
      os << "{\"index\":" << i << ",\"cosine\":null}\n";
    } else {
      std::snprintf(buf, sizeof buf, "%.9g", similarities[i]);
      os << "{\"index\":" << i << ",\"cosine\":" << buf << "}\n";
    }
  }
  return os.str();
}

IncongruentReport incongruent_decode(const Model& model, const Vocabulary& vocab,
                                     std::span<const ParallelExample> corpus, const FeatureTable& features,
                                     const std::vector<Tokens>& references, int beam, int max_len) {
  if (references.size() != corpus.size()) throw DataError("incongruent_decode: one reference per example required");
  std::vector<std::vector<int>> sources;
  std::vector<FeatureVector> real;
  std::vector<FeatureVector> zero;
  for (const auto& ex : corpus) {
    sources.push_back(ex.src);
    real.push_back(features.at(ex.image_id));
    zero.push_back(FeatureVector::Zero(features.dim()));
  }
  auto score = [&](const std::vector<FeatureVector>& feats) {
    std::vector<Tokens> cands;
    for (const auto& h : translate(model, sources, feats, beam, max_len)) cands.push_back(to_words(vocab, h.tokens));
    return corpus_bleu(cands, references);
  };
  IncongruentReport r;
  r.congruent = score(real);
  r.zeroed = score(zero);
  r.delta = r.congruent.bleu - r.zeroed.bleu;
  return r;
}

std::string IncongruentReport::to_text() const {
  char buf[160];
  std::snprintf(buf, sizeof buf, "congruent_bleu=%.2f\nzeroed_bleu=%.2f\ndelta_bleu=%.2f\n", congruent.bleu,
                zeroed.bleu, delta);
  return buf;
}

}  // namespace mmt
