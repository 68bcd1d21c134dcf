#include "mmt/model.hpp"

#include <numeric>

#include "mmt/errors.hpp"
#include "mmt/vocab.hpp"

namespace mmt {

void ModelConfig::validate() const {
  if (vocab_size <= Vocabulary::kReserved) throw ConfigError("model.vocab_size must exceed the reserved ids");
  if (layers < 1 || d_model < 1 || ffn_dim < 1 || heads < 1 || d_feat < 1 || max_positions < 2) {
    throw ConfigError("model extents must be positive");
  }
  if (d_model % heads != 0) throw ConfigError("model.d_model must be divisible by model.heads");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model.dropout must lie in [0, 1)");
}

std::map<std::string, std::string> ModelConfig::to_map() const {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", dropout);
  return {{"model.vocab_size", std::to_string(vocab_size)}, {"model.layers", std::to_string(layers)},
          {"model.d_model", std::to_string(d_model)},       {"model.ffn_dim", std::to_string(ffn_dim)},
          {"model.heads", std::to_string(heads)},           {"model.dropout", buf},
          {"model.d_feat", std::to_string(d_feat)},         {"model.max_positions", std::to_string(max_positions)}};
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(std::string("missing ") + key);
    return it->second;
  };
  try {
    c.vocab_size = std::stoi(get("model.vocab_size"));
    c.layers = std::stoi(get("model.layers"));
    c.d_model = std::stoi(get("model.d_model"));
    c.ffn_dim = std::stoi(get("model.ffn_dim"));
    c.heads = std::stoi(get("model.heads"));
    c.dropout = std::stod(get("model.dropout"));
    c.d_feat = std::stoi(get("model.d_feat"));
    c.max_positions = std::stoi(get("model.max_positions"));
  } catch (const std::logic_error&) {
    throw FormatError("unreadable model configuration value");
  }
  return c;
}

MatrixD sinusoidal_positions(int max_positions, int d_model) {
  MatrixD pe(max_positions, d_model);
  for (int pos = 0; pos < max_positions; ++pos) {
    for (int i = 0; i < d_model; i += 2) {
      const double angle = pos / std::pow(10000.0, static_cast<double>(i) / d_model);
      pe(pos, i) = std::sin(angle);
      if (i + 1 < d_model) pe(pos, i + 1) = std::cos(angle);
    }
  }
  return pe;
}

template <typename S>
EncoderOutput<S> EncoderOutput<S>::repeat_first(Index count) const {
  std::vector<Index> rows;
  rows.reserve(static_cast<std::size_t>(count * stride()));
  for (Index c = 0; c < count; ++c)
    for (Index r = 0; r < stride(); ++r) rows.push_back(r);
  EncoderOutput out;
  out.states = gather_rows(states, rows);
  out.batch = count;
  out.src_len = src_len;
  out.key_mask = key_mask.row(0).replicate(count, 1);
  return out;
}

template <typename S>
Tensor<S> MultimodalTransformer<S>::register_parameter(const std::string& name, Matrix<S> value) {
  auto t = Tensor<S>::parameter(std::move(value));
  params_.push_back({name, t});
  return t;
}

template <typename S>
typename MultimodalTransformer<S>::Linear MultimodalTransformer<S>::make_linear(const std::string& name, int in,
                                                                                int out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Matrix<S> w(in, out);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<S>(rng.uniform(-bound, bound));
  Linear l;
  l.weight = register_parameter(name + ".weight", std::move(w));
  l.bias = register_parameter(name + ".bias", Matrix<S>::Zero(1, out));
  return l;
}

template <typename S>
typename MultimodalTransformer<S>::Norm MultimodalTransformer<S>::make_norm(const std::string& name, int dim) {
  Norm n;
  n.gain = register_parameter(name + ".gain", Matrix<S>::Ones(1, dim));
  n.bias = register_parameter(name + ".bias", Matrix<S>::Zero(1, dim));
  return n;
}

template <typename S>
typename MultimodalTransformer<S>::Attention MultimodalTransformer<S>::make_attention(const std::string& name,
                                                                                     Rng& rng) {
  const int d = config_.d_model;
  Attention a;
  a.q = make_linear(name + ".q", d, d, rng);
  a.k = make_linear(name + ".k", d, d, rng);
  a.v = make_linear(name + ".v", d, d, rng);
  a.o = make_linear(name + ".o", d, d, rng);
  return a;
}

template <typename S>
MultimodalTransformer<S>::MultimodalTransformer(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed, "init");
  const int d = config_.d_model;

  Matrix<S> emb(config_.vocab_size, d);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(d));
  for (Index i = 0; i < emb.size(); ++i) emb.data()[i] = static_cast<S>(rng.normal(0.0, stddev));
  emb.row(Vocabulary::kPad).setZero();
  embed_ = register_parameter("embed.weight", std::move(emb));

  proj_fc1_ = make_linear("projector.fc1", config_.d_feat, config_.ffn_dim, rng);
  proj_fc2_ = make_linear("projector.fc2", config_.ffn_dim, d, rng);
  {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    Matrix<S> wa(d, d);
    for (Index i = 0; i < wa.size(); ++i) wa.data()[i] = static_cast<S>(rng.uniform(-bound, bound));
    visual_query_ = register_parameter("visual_query.weight", std::move(wa));
  }

  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = "encoder.layers." + std::to_string(l);
    EncoderLayer layer;
    layer.attn_norm = make_norm(p + ".attn_norm", d);
    layer.attn = make_attention(p + ".attn", rng);
    layer.ffn_norm = make_norm(p + ".ffn_norm", d);
    layer.fc1 = make_linear(p + ".fc1", d, config_.ffn_dim, rng);
    layer.fc2 = make_linear(p + ".fc2", config_.ffn_dim, d, rng);
    encoder_.push_back(std::move(layer));
  }
  encoder_norm_ = make_norm("encoder.norm", d);

  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = "decoder.layers." + std::to_string(l);
    DecoderLayer layer;
    layer.self_norm = make_norm(p + ".self_norm", d);
    layer.self_attn = make_attention(p + ".self_attn", rng);
    layer.cross_norm = make_norm(p + ".cross_norm", d);
    layer.cross_attn = make_attention(p + ".cross_attn", rng);
    layer.ffn_norm = make_norm(p + ".ffn_norm", d);
    layer.fc1 = make_linear(p + ".fc1", d, config_.ffn_dim, rng);
    layer.fc2 = make_linear(p + ".fc2", config_.ffn_dim, d, rng);
    decoder_.push_back(std::move(layer));
  }
  decoder_norm_ = make_norm("decoder.norm", d);

  positions_ = sinusoidal_positions(config_.max_positions, d).template cast<S>();
}

template <typename S>
Index MultimodalTransformer<S>::parameter_count() const {
  Index n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

template <typename S>
Tensor<S>& MultimodalTransformer<S>::parameter(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return p.tensor;
  throw ShapeError("no parameter named '" + name + "'");
}

template <typename S>
void MultimodalTransformer<S>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename S>
Tensor<S> MultimodalTransformer<S>::drop(const Tensor<S>& x, const ForwardContext<S>& ctx) const {
  if (!ctx.train || config_.dropout <= 0.0) return x;
  if (ctx.rng == nullptr) throw ShapeError("training forward needs a dropout stream");
  return dropout(x, config_.dropout, *ctx.rng, true);
}

template <typename S>
Tensor<S> MultimodalTransformer<S>::feed_forward(const Linear& fc1, const Linear& fc2, const Tensor<S>& x,
                                                 const ForwardContext<S>& ctx) const {
  return apply(fc2, drop(relu(apply(fc1, x)), ctx));
}

template <typename S>
Tensor<S> MultimodalTransformer<S>::embed(const IdMatrix& ids) const {
  const Index batch = ids.rows();
  const Index len = ids.cols();
  if (len > config_.max_positions) {
    throw ShapeError("sequence length " + std::to_string(len) + " exceeds max_positions " +
                     std::to_string(config_.max_positions));
  }
  std::span<const int> flat(ids.data(), static_cast<std::size_t>(ids.size()));
  Matrix<S> pos(batch * len, config_.d_model);
  for (Index b = 0; b < batch; ++b) pos.middleRows(b * len, len) = positions_.topRows(len);
  const S factor = static_cast<S>(std::sqrt(static_cast<double>(config_.d_model)));
  return scale(embedding(embed_, flat), factor) + Tensor<S>::constant(std::move(pos));
}

template <typename S>
Tensor<S> MultimodalTransformer<S>::project_features(const Tensor<S>& features) const {
  if (features.cols() != config_.d_feat) {
    throw ShapeError("feature dimension " + std::to_string(features.cols()) + " differs from model.d_feat " +
                     std::to_string(config_.d_feat));
  }
  return apply(proj_fc2_, relu(apply(proj_fc1_, features)));
}

template <typename S>
Tensor<S> MultimodalTransformer<S>::attend(const Attention& a, const Tensor<S>& queries, Index query_len,
                                           const Tensor<S>& memory, Index kv_stride, Index key_len,
                                           const std::vector<Mask>& masks, const ForwardContext<S>& ctx,
                                           bool log) const {
  const Index batch = static_cast<Index>(masks.size());
  const Index heads = config_.heads;
  const Index dk = config_.d_model / heads;
  const S inv_sqrt_dk = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dk)));
  const Tensor<S> q = scale(apply(a.q, queries), inv_sqrt_dk);
  const Tensor<S> k = apply(a.k, memory);
  const Tensor<S> v = apply(a.v, memory);

  std::vector<Tensor<S>> rows;
  rows.reserve(static_cast<std::size_t>(batch));
  std::vector<Tensor<S>> cols(static_cast<std::size_t>(heads));
  for (Index b = 0; b < batch; ++b) {
    for (Index h = 0; h < heads; ++h) {
      auto qb = block(q, b * query_len, h * dk, query_len, dk);
      auto kb = block(k, b * kv_stride, h * dk, key_len, dk);
      auto vb = block(v, b * kv_stride, h * dk, key_len, dk);
      auto p = masked_softmax(matmul_nt(qb, kb), masks[static_cast<std::size_t>(b)]);
      if (log && ctx.attention_log != nullptr) ctx.attention_log->push_back(p.value());
      cols[static_cast<std::size_t>(h)] = matmul(drop(p, ctx), vb);
    }
    rows.push_back(heads == 1 ? cols.front() : concat_cols(cols));
  }
  return apply(a.o, batch == 1 ? rows.front() : concat_rows(rows));
}

template <typename S>
EncoderOutput<S> MultimodalTransformer<S>::encode(const IdMatrix& src, const Mask& src_mask,
                                                  const Tensor<S>& visual, const ForwardContext<S>& ctx) const {
  const Index batch = src.rows();
  const Index n = src.cols();
  if (n < 1) throw ShapeError("encode: empty source");
  if (src_mask.rows() != batch || src_mask.cols() != n) throw ShapeError("encode: source mask shape");
  if (visual.rows() != batch || visual.cols() != config_.d_model) {
    throw ShapeError("encode: visual representation must be " + std::to_string(batch) + "x" +
                     std::to_string(config_.d_model));
  }
  for (Index b = 0; b < batch; ++b)
    if (!src_mask.row(b).any()) throw MaskError("encode: source " + std::to_string(b) + " is all padding");

  const Index stride = n + 1;
  std::vector<Index> layout;
  layout.reserve(static_cast<std::size_t>(batch * stride));
  for (Index b = 0; b < batch; ++b) {
    for (Index i = 0; i < n; ++i) layout.push_back(b * n + i);
    layout.push_back(batch * n + b);
  }
  Tensor<S> x = gather_rows(concat_rows<S>({embed(src), matmul(visual, visual_query_)}), layout);
  x = drop(x, ctx);

  // Every query row (text and visual) sees the real text keys only.
  std::vector<Mask> masks;
  masks.reserve(static_cast<std::size_t>(batch));
  for (Index b = 0; b < batch; ++b) masks.push_back(src_mask.row(b).replicate(stride, 1));

  for (const auto& layer : encoder_) {
    auto h = apply(layer.attn_norm, x);
    x = x + drop(attend(layer.attn, h, stride, h, stride, n, masks, ctx, true), ctx);
    x = x + drop(feed_forward(layer.fc1, layer.fc2, apply(layer.ffn_norm, x), ctx), ctx);
  }

  EncoderOutput<S> out;
  out.states = apply(encoder_norm_, x);
  out.batch = batch;
  out.src_len = n;
  out.key_mask.resize(batch, stride);
  out.key_mask.leftCols(n) = src_mask;
  out.key_mask.col(n).setConstant(true);
  return out;
}

template <typename S>
Tensor<S> MultimodalTransformer<S>::decode(const IdMatrix& tgt_in, const Mask& tgt_mask, const EncoderOutput<S>& enc,
                                           const ForwardContext<S>& ctx) const {
  const Index batch = tgt_in.rows();
  const Index t = tgt_in.cols();
  if (batch != enc.batch) throw ShapeError("decode: batch differs from encoder output");
  if (t < 1) throw ShapeError("decode: empty target prefix");
  if (tgt_mask.rows() != batch || tgt_mask.cols() != t) throw ShapeError("decode: target mask shape");

  std::vector<Mask> self_masks;
  std::vector<Mask> cross_masks;
  for (Index b = 0; b < batch; ++b) {
    Mask m(t, t);
    for (Index i = 0; i < t; ++i)
      for (Index j = 0; j < t; ++j) m(i, j) = j <= i && (tgt_mask(b, j) || j == 0);
    self_masks.push_back(std::move(m));
    cross_masks.push_back(enc.key_mask.row(b).replicate(t, 1));
  }

  Tensor<S> x = drop(embed(tgt_in), ctx);
  for (const auto& layer : decoder_) {
    auto h = apply(layer.self_norm, x);
    x = x + drop(attend(layer.self_attn, h, t, h, t, t, self_masks, ctx, false), ctx);
    x = x + drop(attend(layer.cross_attn, apply(layer.cross_norm, x), t, enc.states, enc.stride(), enc.stride(),
                        cross_masks, ctx, false),
                 ctx);
    x = x + drop(feed_forward(layer.fc1, layer.fc2, apply(layer.ffn_norm, x), ctx), ctx);
  }
  return matmul_nt(apply(decoder_norm_, x), embed_);
}

template <typename S>
StreamOutput<S> MultimodalTransformer<S>::forward(const IdMatrix& src, const Mask& src_mask, const IdMatrix& tgt_in,
                                                  const Mask& tgt_mask, const Matrix<S>& features,
                                                  const ForwardContext<S>& ctx) const {
  StreamOutput<S> out;
  out.visual = project_features(Tensor<S>::constant(features));
  const auto enc = encode(src, src_mask, out.visual, ctx);
  out.logits = decode(tgt_in, tgt_mask, enc, ctx);
  return out;
}

template <typename S>
PairOutput<S> MultimodalTransformer<S>::forward_pair(const Batch& batch, const ForwardContext<S>& syn_ctx,
                                                     const ForwardContext<S>& aut_ctx) const {
  auto syn = forward(batch.src, batch.src_mask, batch.tgt_in, batch.tgt_mask, batch.syn.template cast<S>(), syn_ctx);
  auto aut = forward(batch.src, batch.src_mask, batch.tgt_in, batch.tgt_mask, batch.aut.template cast<S>(), aut_ctx);
  return {syn.logits, aut.logits, syn.visual, aut.visual};
}

template struct EncoderOutput<float>;
template struct EncoderOutput<double>;
template class MultimodalTransformer<float>;
template class MultimodalTransformer<double>;

}  // namespace mmt
