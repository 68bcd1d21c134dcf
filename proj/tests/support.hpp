#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mmt/autodiff.hpp"
#include "mmt/batching.hpp"
#include "mmt/corpus.hpp"
#include "mmt/features.hpp"
#include "mmt/model.hpp"
#include "mmt/ops.hpp"
#include "mmt/rng.hpp"
#include "mmt/vocab.hpp"

namespace mmt::testing {

// Relative error with a floor so near-zero gradients compare absolutely.
inline constexpr double kGradFloor = 1e-3;

inline double rel_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), kGradFloor});
}

inline MatrixD random_matrix(Rng& rng, Index r, Index c, double sd = 1.0) {
  MatrixD m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal(0.0, sd);
  return m;
}

// Largest relative error between analytic and central-difference gradients
// of f over every entry of every input.
inline double gradient_error(std::vector<Tensor<double>> inputs,
                             const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& f,
                             double h = 1e-6) {
  for (auto& t : inputs) t.zero_grad();
  backward(f(inputs));
  double worst = 0.0;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    const MatrixD analytic = t.has_grad() ? t.grad() : MatrixD::Zero(t.rows(), t.cols());
    for (Index i = 0; i < t.size(); ++i) {
      NoGradGuard guard;
      const double x = t.value().data()[i];
      t.mutable_value().data()[i] = x + h;
      const double fp = f(inputs).item();
      t.mutable_value().data()[i] = x - h;
      const double fm = f(inputs).item();
      t.mutable_value().data()[i] = x;
      worst = std::max(worst, rel_error(analytic.data()[i], (fp - fm) / (2 * h)));
    }
  }
  return worst;
}

// Scalar probe of a matrix-valued op: sum(out .* R) for a fixed R.
inline Tensor<double> project(const Tensor<double>& out, const MatrixD& r) {
  return sum(mul(out, Tensor<double>::constant(r)));
}

inline ModelConfig tiny_config(int vocab_size) {
  ModelConfig c;
  c.vocab_size = vocab_size;
  c.layers = 1;
  c.d_model = 8;
  c.ffn_dim = 16;
  c.heads = 2;
  c.dropout = 0.1;
  c.d_feat = 6;
  c.max_positions = 64;
  return c;
}

// Vocabulary of "s0".."s{n-1}" source words and "t0".."t{n-1}" target words.
inline Vocabulary toy_vocab(int n) {
  std::vector<std::string> lines;
  std::string src;
  std::string tgt;
  for (int i = 0; i < n; ++i) {
    src += "s" + std::to_string(i) + " ";
    tgt += "t" + std::to_string(i) + " ";
  }
  lines.push_back(src);
  lines.push_back(tgt);
  return Vocabulary::build(lines);
}

struct ToyCorpus {
  Vocabulary vocab;
  std::vector<std::string> src;
  std::vector<std::string> tgt;
  std::vector<std::string> images;
  std::vector<ParallelExample> examples;
  FeatureTable syn;
  FeatureTable aut;
};

// Random sentences translated word by word (s_i -> t_i) and reversed, with
// one random feature vector per sentence.
inline ToyCorpus toy_corpus(int sentences, int words, int min_len, int max_len, Index d_feat, std::uint64_t seed) {
  ToyCorpus c{toy_vocab(words), {}, {}, {}, {}, FeatureTable(d_feat), FeatureTable(d_feat)};
  Rng rng(seed, "toy-corpus");
  for (int s = 0; s < sentences; ++s) {
    const int len = min_len + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_len - min_len + 1)));
    // Distinct words within a sentence where the vocabulary allows it.
    std::vector<int> pool(static_cast<std::size_t>(words));
    for (int i = 0; i < words; ++i) pool[static_cast<std::size_t>(i)] = i;
    rng.shuffle(pool.begin(), pool.end());
    std::vector<int> w(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i)
      w[static_cast<std::size_t>(i)] = i < words ? pool[static_cast<std::size_t>(i)]
                                                 : static_cast<int>(rng.below(static_cast<std::uint64_t>(words)));
    std::string src;
    std::string tgt;
    for (int i = 0; i < len; ++i) {
      src += (i ? " s" : "s") + std::to_string(w[static_cast<std::size_t>(i)]);
      tgt += (i ? " t" : "t") + std::to_string(w[static_cast<std::size_t>(len - 1 - i)]);
    }
    const std::string id = "img" + std::to_string(s);
    FeatureVector f(d_feat);
    for (Index k = 0; k < d_feat; ++k) f[k] = static_cast<float>(rng.normal());
    c.syn.insert(id, f);
    c.aut.insert(id, f);
    c.src.push_back(src);
    c.tgt.push_back(tgt);
    c.images.push_back(id);
  }
  c.examples = make_examples(c.src, c.tgt, c.images, c.vocab);
  return c;
}

// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("mmt-" + tag + "-" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace mmt::testing
