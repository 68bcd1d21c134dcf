#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace mmt {

// Marker appended to every subword that does not end its word.
inline constexpr const char* kContinuation = "@@";

// Ordered list of learned merges; position is the merge rank.
class BpeModel {
 public:
  using Pair = std::pair<std::string, std::string>;

  BpeModel() = default;
  explicit BpeModel(std::vector<Pair> merges);

  const std::vector<Pair>& merges() const { return merges_; }
  std::size_t size() const { return merges_.size(); }

  // Segments one word: merges are applied in training order, leftmost
  // occurrence first. Unknown characters pass through untouched.
  std::vector<std::string> apply(const std::string& word) const;

  // apply() with the continuation marker on every piece but the last.
  std::vector<std::string> segment(const std::string& word) const;

  // Segments a whitespace-tokenised line and joins pieces with spaces.
  std::string segment_line(const std::string& line) const;

  void save(const std::string& path) const;
  static BpeModel load(const std::string& path);

 private:
  std::vector<Pair> merges_;
  std::map<Pair, std::size_t> rank_;
};

// Greedy most-frequent-pair learning over the words of `corpus_lines`
// (whitespace tokenised). Stops after n_merges or when no adjacent pair
// occurs at least twice. Ties go to the lexicographically smallest pair.
BpeModel learn_bpe(const std::vector<std::string>& corpus_lines, std::size_t n_merges);

// Splits a UTF-8 word into code points.
std::vector<std::string> utf8_chars(const std::string& word);

// Joins subword tokens, removing continuation markers.
std::string detokenize(const std::vector<std::string>& tokens);
std::string detokenize_line(const std::string& line);

std::vector<std::string> split_whitespace(const std::string& line);

}  // namespace mmt
