#include "mmt/corpus.hpp"

#include <fstream>

#include "mmt/errors.hpp"

namespace mmt {

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  return lines;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write '" + path + "'");
  for (const auto& l : lines) os << l << '\n';
}

std::vector<ParallelExample> make_examples(const std::vector<std::string>& src_lines,
                                           const std::vector<std::string>& tgt_lines,
                                           const std::vector<std::string>& image_ids, const Vocabulary& vocab) {
  if (src_lines.size() != tgt_lines.size() || src_lines.size() != image_ids.size()) {
    throw DataError("corpus files are not aligned: " + std::to_string(src_lines.size()) + " source, " +
                    std::to_string(tgt_lines.size()) + " target, " + std::to_string(image_ids.size()) +
                    " image lines");
  }
  std::vector<ParallelExample> out;
  out.reserve(src_lines.size());
  for (std::size_t i = 0; i < src_lines.size(); ++i) {
    ParallelExample ex;
    ex.src = vocab.encode(src_lines[i]);
    ex.tgt.push_back(Vocabulary::kBos);
    for (int id : vocab.encode(tgt_lines[i])) ex.tgt.push_back(id);
    ex.tgt.push_back(Vocabulary::kEos);
    ex.image_id = image_ids[i];
    if (ex.src.empty() || ex.tgt.size() < 3) throw DataError("empty sentence at line " + std::to_string(i + 1));
    if (ex.image_id.empty()) throw DataError("empty image id at line " + std::to_string(i + 1));
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<ParallelExample> load_examples(const std::string& src_path, const std::string& tgt_path,
                                           const std::string& images_path, const Vocabulary& vocab) {
  return make_examples(read_lines(src_path), read_lines(tgt_path), read_lines(images_path), vocab);
}

}  // namespace mmt
