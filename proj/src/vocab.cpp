#include "mmt/vocab.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include "mmt/bpe.hpp"
#include "mmt/errors.hpp"

namespace mmt {

Vocabulary::Vocabulary() {
  for (const char* s : {"<pad>", "<s>", "</s>", "<unk>"}) add(s);
}

void Vocabulary::add(const std::string& symbol) {
  if (!ids_.emplace(symbol, size()).second) throw FormatError("duplicate vocabulary symbol '" + symbol + "'");
  symbols_.push_back(symbol);
}

Vocabulary Vocabulary::build(const std::vector<std::string>& segmented_lines) {
  std::map<std::string, long> counts;
  for (const auto& line : segmented_lines)
    for (const auto& tok : split_whitespace(line)) ++counts[tok];
  std::vector<std::pair<std::string, long>> items(counts.begin(), counts.end());
  std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (const auto& [sym, c] : items)
    if (!v.contains(sym)) v.add(sym);
  return v;
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read vocabulary '" + path + "'");
  Vocabulary v;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) throw FormatError(path + ": empty vocabulary line");
    v.add(line);
  }
  return v;
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write vocabulary '" + path + "'");
  for (int i = kReserved; i < size(); ++i) os << symbols_[static_cast<std::size_t>(i)] << '\n';
}

int Vocabulary::id(const std::string& symbol) const {
  auto it = ids_.find(symbol);
  return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::symbol(int id) const {
  if (id < 0 || id >= size()) throw VocabError("id " + std::to_string(id) + " outside vocabulary");
  return symbols_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::string& segmented_line) const {
  std::vector<int> out;
  for (const auto& tok : split_whitespace(segmented_line)) out.push_back(id(tok));
  return out;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  for (int i : ids) {
    if (i == kEos) break;
    if (i == kPad || i == kBos) continue;
    out.push_back(symbol(i));
  }
  return out;
}

}  // namespace mmt
