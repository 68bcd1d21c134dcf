#pragma once

#include <string>
#include <vector>

#include "mmt/vocab.hpp"

namespace mmt {

// One training/evaluation pair. tgt is framed as <s> ... </s>; the image id
// resolves against both the synthetic and the authentic feature tables.
struct ParallelExample {
  std::vector<int> src;
  std::vector<int> tgt;
  std::string image_id;
};

std::vector<std::string> read_lines(const std::string& path);
void write_lines(const std::string& path, const std::vector<std::string>& lines);

// Builds examples from BPE-segmented corpora and an aligned image index.
std::vector<ParallelExample> make_examples(const std::vector<std::string>& src_lines,
                                           const std::vector<std::string>& tgt_lines,
                                           const std::vector<std::string>& image_ids, const Vocabulary& vocab);

std::vector<ParallelExample> load_examples(const std::string& src_path, const std::string& tgt_path,
                                           const std::string& images_path, const Vocabulary& vocab);

}  // namespace mmt
