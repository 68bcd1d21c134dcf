#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mmt/autodiff.hpp"
#include "mmt/batching.hpp"
#include "mmt/ops.hpp"
#include "mmt/rng.hpp"

namespace mmt {

// Transformer-Tiny defaults.
struct ModelConfig {
  int vocab_size = 0;
  int layers = 4;
  int d_model = 128;
  int ffn_dim = 256;
  int heads = 4;
  double dropout = 0.3;
  int d_feat = 512;
  int max_positions = 256;

  void validate() const;
  std::map<std::string, std::string> to_map() const;
  static ModelConfig from_map(const std::map<std::string, std::string>& kv);
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Per-forward switches. `rng` supplies dropout masks and is only consulted in
// training mode. When `attention_log` is set, every encoder attention
// probability matrix ((N+1) x N per example and head) is appended to it.
template <typename S>
struct ForwardContext {
  bool train = false;
  Rng* rng = nullptr;
  std::vector<Matrix<S>>* attention_log = nullptr;
};

template <typename S>
struct NamedParameter {
  std::string name;
  Tensor<S> tensor;
};

// Encoder states laid out per example as N text rows followed by one visual
// row: example b occupies rows [b*(N+1), (b+1)*(N+1)).
template <typename S>
struct EncoderOutput {
  Tensor<S> states;
  Index batch = 0;
  Index src_len = 0;
  Mask key_mask;  // batch x (N+1); text padding false, visual row true

  Index stride() const { return src_len + 1; }
  // Replicates example 0 `count` times (beam expansion).
  EncoderOutput repeat_first(Index count) const;
};

template <typename S>
struct StreamOutput {
  Tensor<S> logits;  // (B*T) x V, row b*T + t
  Tensor<S> visual;  // B x d_model, projector output
};

template <typename S>
struct PairOutput {
  Tensor<S> logits_syn;
  Tensor<S> logits_aut;
  Tensor<S> h_syn;
  Tensor<S> h_aut;
};

template <typename S>
class MultimodalTransformer {
 public:
  // Seeded initialisation: uniform(+-1/sqrt(fan_in)) for linear maps with
  // zero biases, N(0, d^-1/2) token embeddings with a zero pad row.
  MultimodalTransformer(const ModelConfig& config, std::uint64_t seed);
  // Parameters are shared handles; copies would alias them.
  MultimodalTransformer(const MultimodalTransformer&) = delete;
  MultimodalTransformer& operator=(const MultimodalTransformer&) = delete;
  MultimodalTransformer(MultimodalTransformer&&) noexcept = default;
  MultimodalTransformer& operator=(MultimodalTransformer&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  std::vector<NamedParameter<S>>& parameters() { return params_; }
  const std::vector<NamedParameter<S>>& parameters() const { return params_; }
  Index parameter_count() const;
  Tensor<S>& parameter(const std::string& name);

  void zero_grad();

  // Same architecture and values in another scalar type.
  template <typename T>
  MultimodalTransformer<T> cast() const {
    MultimodalTransformer<T> out(config_, 0);
    for (std::size_t i = 0; i < params_.size(); ++i)
      out.parameters()[i].tensor.mutable_value() = params_[i].tensor.value().template cast<T>();
    return out;
  }

  // Shared visual projector FFN: d_feat -> ffn_dim (relu) -> d_model.
  Tensor<S> project_features(const Tensor<S>& features) const;

  EncoderOutput<S> encode(const IdMatrix& src, const Mask& src_mask, const Tensor<S>& visual,
                          const ForwardContext<S>& ctx) const;

  // Causal decoder over `tgt_in`, cross-attending to all N+1 encoder rows.
  Tensor<S> decode(const IdMatrix& tgt_in, const Mask& tgt_mask, const EncoderOutput<S>& enc,
                   const ForwardContext<S>& ctx) const;

  StreamOutput<S> forward(const IdMatrix& src, const Mask& src_mask, const IdMatrix& tgt_in, const Mask& tgt_mask,
                          const Matrix<S>& features, const ForwardContext<S>& ctx) const;

  // Two forwards sharing every parameter, differing only in the visual
  // stream.
  PairOutput<S> forward_pair(const Batch& batch, const ForwardContext<S>& syn_ctx,
                             const ForwardContext<S>& aut_ctx) const;

 private:
  struct Linear {
    Tensor<S> weight;  // in x out
    Tensor<S> bias;    // 1 x out
  };
  struct Norm {
    Tensor<S> gain;
    Tensor<S> bias;
  };
  struct Attention {
    Linear q, k, v, o;
  };
  struct EncoderLayer {
    Norm attn_norm;
    Attention attn;
    Norm ffn_norm;
    Linear fc1, fc2;
  };
  struct DecoderLayer {
    Norm self_norm;
    Attention self_attn;
    Norm cross_norm;
    Attention cross_attn;
    Norm ffn_norm;
    Linear fc1, fc2;
  };

  Linear make_linear(const std::string& name, int in, int out, Rng& rng);
  Norm make_norm(const std::string& name, int dim);
  Attention make_attention(const std::string& name, Rng& rng);
  Tensor<S> register_parameter(const std::string& name, Matrix<S> value);

  Tensor<S> apply(const Linear& l, const Tensor<S>& x) const { return add_bias(matmul(x, l.weight), l.bias); }
  Tensor<S> apply(const Norm& n, const Tensor<S>& x) const { return layer_norm(x, n.gain, n.bias); }
  Tensor<S> feed_forward(const Linear& fc1, const Linear& fc2, const Tensor<S>& x,
                         const ForwardContext<S>& ctx) const;

  // Multi-head attention. Queries are the `query_len` rows per example of
  // `queries`; keys and values are the first `key_len` rows of each
  // `kv_stride`-row block of `memory`. masks[b] is query_len x key_len.
  Tensor<S> attend(const Attention& a, const Tensor<S>& queries, Index query_len, const Tensor<S>& memory,
                   Index kv_stride, Index key_len, const std::vector<Mask>& masks, const ForwardContext<S>& ctx,
                   bool log) const;

  Tensor<S> embed(const IdMatrix& ids) const;
  Tensor<S> drop(const Tensor<S>& x, const ForwardContext<S>& ctx) const;

  ModelConfig config_;
  std::vector<NamedParameter<S>> params_;
  Tensor<S> embed_;
  Linear proj_fc1_, proj_fc2_;
  Tensor<S> visual_query_;  // W^a
  std::vector<EncoderLayer> encoder_;
  Norm encoder_norm_;
  std::vector<DecoderLayer> decoder_;
  Norm decoder_norm_;
  Matrix<S> positions_;
};

extern template class MultimodalTransformer<float>;
extern template class MultimodalTransformer<double>;

using Model = MultimodalTransformer<float>;

// Sinusoidal position table, rows = positions.
MatrixD sinusoidal_positions(int max_positions, int d_model);

}  // namespace mmt
