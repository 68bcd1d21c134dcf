#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace mmt {

// Shared source/target symbol table. Ids 0..3 are reserved.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kReserved = 4;

  Vocabulary();

  // Symbols ordered by descending frequency, ties broken lexicographically.
  static Vocabulary build(const std::vector<std::string>& segmented_lines);

  // One symbol per line; line k holds id k + 4.
  static Vocabulary load(const std::string& path);
  void save(const std::string& path) const;

  int size() const { return static_cast<int>(symbols_.size()); }
  int id(const std::string& symbol) const;
  const std::string& symbol(int id) const;
  bool contains(const std::string& symbol) const { return ids_.count(symbol) != 0; }

  // Whitespace-split line to ids; unknown symbols map to kUnk.
  std::vector<int> encode(const std::string& segmented_line) const;
  // Ids to symbols, stopping at eos and skipping pad/bos.
  std::vector<std::string> decode(const std::vector<int>& ids) const;

 private:
  void add(const std::string& symbol);

  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> ids_;
};

}  // namespace mmt
