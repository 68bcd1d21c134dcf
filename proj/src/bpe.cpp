#include "mmt/bpe.hpp"

#include <fstream>
#include <limits>
#include <sstream>
#include <unordered_map>

#include "mmt/errors.hpp"

namespace mmt {

namespace {

constexpr std::string_view kMarker = "@@";

bool ends_with_marker(const std::string& s) {
  return s.size() >= kMarker.size() && s.compare(s.size() - kMarker.size(), kMarker.size(), kMarker) == 0;
}

}  // namespace

std::vector<std::string> split_whitespace(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

std::vector<std::string> utf8_chars(const std::string& word) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < word.size()) {
    const auto lead = static_cast<unsigned char>(word[i]);
    std::size_t len = 1;
    if (lead >= 0xF0) {
      len = 4;
    } else if (lead >= 0xE0) {
      len = 3;
    } else if (lead >= 0xC0) {
      len = 2;
    }
    len = std::min(len, word.size() - i);
    out.push_back(word.substr(i, len));
    i += len;
  }
  return out;
}

BpeModel::BpeModel(std::vector<Pair> merges) : merges_(std::move(merges)) {
  for (std::size_t i = 0; i < merges_.size(); ++i) {
    if (!rank_.emplace(merges_[i], i).second) {
      throw FormatError("duplicate BPE merge '" + merges_[i].first + " " + merges_[i].second + "'");
    }
  }
}

std::vector<std::string> BpeModel::apply(const std::string& word) const {
  std::vector<std::string> symbols = utf8_chars(word);
  while (symbols.size() > 1) {
    std::size_t best_rank = std::numeric_limits<std::size_t>::max();
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = rank_.find({symbols[i], symbols[i + 1]});
      if (it != rank_.end() && it->second < best_rank) best_rank = it->second;
    }
    if (best_rank == std::numeric_limits<std::size_t>::max()) break;
    const Pair& merge = merges_[best_rank];
    std::vector<std::string> next;
    next.reserve(symbols.size());
    for (std::size_t i = 0; i < symbols.size();) {
      if (i + 1 < symbols.size() && symbols[i] == merge.first && symbols[i + 1] == merge.second) {
        next.push_back(symbols[i] + symbols[i + 1]);
        i += 2;
      } else {
        next.push_back(symbols[i]);
        ++i;
      }
    }
    symbols = std::move(next);
  }
  return symbols;
}

std::vector<std::string> BpeModel::segment(const std::string& word) const {
  std::vector<std::string> pieces = apply(word);
  for (std::size_t i = 0; i + 1 < pieces.size(); ++i) pieces[i] += kMarker;
  return pieces;
}

std::string BpeModel::segment_line(const std::string& line) const {
  std::string out;
  for (const auto& word : split_whitespace(line)) {
    for (const auto& piece : segment(word)) {
      if (!out.empty()) out += ' ';
      out += piece;
    }
  }
  return out;
}

void BpeModel::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write BPE model '" + path + "'");
  for (const auto& [l, r] : merges_) os << l << ' ' << r << '\n';
}

BpeModel BpeModel::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read BPE model '" + path + "'");
  std::vector<Pair> merges;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto parts = split_whitespace(line);
    if (parts.size() != 2) throw FormatError(path + ":" + std::to_string(lineno) + ": expected '<left> <right>'");
    merges.emplace_back(parts[0], parts[1]);
  }
  return BpeModel(std::move(merges));
}

BpeModel learn_bpe(const std::vector<std::string>& corpus_lines, std::size_t n_merges) {
  std::map<std::string, long> word_counts;
  for (const auto& line : corpus_lines)
    for (const auto& w : split_whitespace(line)) ++word_counts[w];
  if (word_counts.empty()) throw DataError("learn_bpe: empty corpus");

  std::vector<std::vector<std::string>> words;
  std::vector<long> counts;
  for (const auto& [w, c] : word_counts) {
    words.push_back(utf8_chars(w));
    counts.push_back(c);
  }

  std::vector<BpeModel::Pair> merges;
  while (merges.size() < n_merges) {
    std::map<BpeModel::Pair, long> pair_counts;
    for (std::size_t k = 0; k < words.size(); ++k) {
      const auto& sym = words[k];
      for (std::size_t i = 0; i + 1 < sym.size(); ++i) pair_counts[{sym[i], sym[i + 1]}] += counts[k];
    }
    // std::map iterates in lexicographic order, so the first maximum wins ties.
    const BpeModel::Pair* best = nullptr;
    long best_count = 1;
    for (const auto& [pair, c] : pair_counts) {
      if (c > best_count) {
        best = &pair;
        best_count = c;
      }
    }
    if (best == nullptr) break;
    const BpeModel::Pair merge = *best;
    for (auto& sym : words) {
      std::vector<std::string> next;
      next.reserve(sym.size());
      for (std::size_t i = 0; i < sym.size();) {
        if (i + 1 < sym.size() && sym[i] == merge.first && sym[i + 1] == merge.second) {
          next.push_back(sym[i] + sym[i + 1]);
          i += 2;
        } else {
          next.push_back(sym[i]);
          ++i;
        }
      }
      sym = std::move(next);
    }
    merges.push_back(merge);
  }
  return BpeModel(std::move(merges));
}

std::string detokenize(const std::vector<std::string>& tokens) {
  std::string out;
  bool glue = false;
  for (const auto& tok : tokens) {
    if (!out.empty() && !glue) out += ' ';
    if (ends_with_marker(tok)) {
      out.append(tok, 0, tok.size() - kMarker.size());
      glue = true;
    } else {
      out += tok;
      glue = false;
    }
  }
  return out;
}

std::string detokenize_line(const std::string& line) { return detokenize(split_whitespace(line)); }

}  // namespace mmt
