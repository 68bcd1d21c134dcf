#include <doctest.h>

#include "mmt/errors.hpp"
#include "mmt/model.hpp"
#include "mmt/trainer.hpp"
#include "support.hpp"

using namespace mmt;
using namespace mmt::testing;

namespace {

IdMatrix ids(Index rows, Index cols, std::initializer_list<int> v) {
  IdMatrix m(rows, cols);
  std::copy(v.begin(), v.end(), m.data());
  return m;
}

MatrixF features(Index rows, Index dim, std::uint64_t seed) {
  Rng rng(seed, "features");
  MatrixF f(rows, dim);
  for (Index i = 0; i < f.size(); ++i) f.data()[i] = static_cast<float>(rng.normal());
  return f;
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("visual projector") {
    ModelConfig cfg;
    cfg.vocab_size = 20;
    const Model model(cfg, 1);
    const auto zero = model.project_features(Tensor<float>::constant(MatrixF::Zero(1, 512)));
    CHECK(zero.rows() == 1);
    CHECK(zero.cols() == 128);
    CHECK(zero.value().cwiseAbs().maxCoeff() == 0.0f);

    const auto f = Tensor<float>::constant(features(1, 512, 3));
    CHECK(model.project_features(f).value() == model.project_features(f).value());
    CHECK_THROWS_AS(model.project_features(Tensor<float>::constant(MatrixF::Zero(1, 511))), ShapeError);
  }

  TEST_CASE("encoder layout and attention") {
    ModelConfig cfg;
    cfg.vocab_size = 20;
    const Model model(cfg, 2);
    const auto src = ids(1, 3, {5, 6, 7});
    const Mask mask = Mask::Constant(1, 3, true);
    const auto visual = model.project_features(Tensor<float>::constant(features(1, 512, 4)));
    std::vector<MatrixF> log;
    ForwardContext<float> ctx{false, nullptr, &log};
    const auto enc = model.encode(src, mask, visual, ctx);
    CHECK(enc.states.rows() == 4);
    CHECK(enc.states.cols() == 128);
    REQUIRE(log.size() == static_cast<std::size_t>(cfg.layers * cfg.heads));
    for (const auto& p : log) {
      CHECK(p.rows() == 4);
      CHECK(p.cols() == 3);
      for (Index r = 0; r < p.rows(); ++r) CHECK(p.row(r).sum() == doctest::Approx(1.0f).epsilon(1e-6));
    }

    CHECK_THROWS_AS(model.encode(ids(1, 2, {0, 0}), Mask::Constant(1, 2, false),
                                 model.project_features(Tensor<float>::constant(features(1, 512, 4))), ctx),
                    MaskError);
  }

  TEST_CASE("zeroed query and key projections give uniform attention over text") {
    const auto cfg = tiny_config(12);
    Model model(cfg, 3);
    for (auto& p : model.parameters())
      if (p.name.find("encoder.layers.0.attn.q.") == 0 || p.name.find("encoder.layers.0.attn.k.") == 0)
        p.tensor.mutable_value().setZero();
    std::vector<MatrixF> log;
    ForwardContext<float> ctx{false, nullptr, &log};
    const auto visual = model.project_features(Tensor<float>::constant(features(1, cfg.d_feat, 5)));
    Mask mask(1, 5);
    mask << true, true, true, true, false;
    model.encode(ids(1, 5, {4, 5, 6, 7, 0}), mask, visual, ctx);
    for (const auto& p : log) {
      for (Index r = 0; r < p.rows(); ++r) {
        for (Index c = 0; c < 4; ++c) CHECK(p(r, c) == doctest::Approx(0.25f).epsilon(1e-6));
        CHECK(p(r, 4) == 0.0f);
      }
    }
  }

  TEST_CASE("decoder shape, causality and position limit") {
    auto cfg = tiny_config(12);
    const Model model(cfg, 4);
    const auto f = features(1, cfg.d_feat, 6);
    const auto src = ids(1, 3, {4, 5, 6});
    const Mask sm = Mask::Constant(1, 3, true);
    const auto a = ids(1, 4, {1, 7, 8, 9});
    const auto b = ids(1, 4, {1, 7, 10, 11});
    const Mask tm = Mask::Constant(1, 4, true);
    ForwardContext<float> ctx;
    const auto la = model.forward(src, sm, a, tm, f, ctx).logits.value();
    const auto lb = model.forward(src, sm, b, tm, f, ctx).logits.value();
    CHECK(la.rows() == 4);
    CHECK(la.cols() == 12);
    CHECK(la.topRows(2) == lb.topRows(2));
    CHECK(la.row(2) != lb.row(2));

    cfg.max_positions = 3;
    const Model small(cfg, 4);
    CHECK_THROWS_AS(small.forward(src, sm, a, tm, f, ctx), ShapeError);
  }

  TEST_CASE("padding does not change real positions") {
    const auto cfg = tiny_config(14);
    const Model model(cfg, 5);
    const auto f = features(2, cfg.d_feat, 7);
    const auto src = ids(2, 3, {4, 5, 6, 7, 8, 0});
    Mask sm(2, 3);
    sm << true, true, true, true, true, false;
    const auto tgt = ids(2, 3, {1, 9, 10, 1, 11, 0});
    Mask tm(2, 3);
    tm << true, true, true, true, true, false;

    IdMatrix src_p = IdMatrix::Zero(2, 11);
    Mask sm_p = Mask::Constant(2, 11, false);
    src_p.leftCols(3) = src;
    sm_p.leftCols(3) = sm;
    IdMatrix tgt_p = IdMatrix::Zero(2, 11);
    Mask tm_p = Mask::Constant(2, 11, false);
    tgt_p.leftCols(3) = tgt;
    tm_p.leftCols(3) = tm;

    ForwardContext<float> ctx;
    const auto base = model.forward(src, sm, tgt, tm, f, ctx).logits.value();
    const auto padded = model.forward(src_p, sm_p, tgt_p, tm_p, f, ctx).logits.value();
    double worst = 0.0;
    for (Index b = 0; b < 2; ++b)
      for (Index t = 0; t < 3; ++t)
        if (tm(b, t)) worst = std::max(worst, static_cast<double>((base.row(b * 3 + t) - padded.row(b * 11 + t))
                                                                      .cwiseAbs()
                                                                      .maxCoeff()));
    CHECK(worst <= 1e-5);
  }

  TEST_CASE("paired forward shares parameters") {
    const auto c = toy_corpus(4, 5, 2, 4, 6, 11);
    const Model model(tiny_config(c.vocab.size()), 6);
    const std::vector<std::size_t> idx = {0, 1, 2, 3};
    const auto batch = collate(c.examples, idx, c.syn, c.aut);
    ForwardContext<float> ctx;
    const auto same = model.forward_pair(batch, ctx, ctx);
    CHECK(same.logits_syn.value() == same.logits_aut.value());
    CHECK(same.h_syn.value() == same.h_aut.value());
    CHECK(same.h_syn.rows() == 4);
    CHECK(same.h_syn.cols() == 8);

    auto noisy = c.syn;
    for (const auto& id : c.syn.ids()) noisy.insert(id, c.syn.at(id) * 0.5f);
    const auto other = collate(c.examples, idx, noisy, c.aut);
    const auto diff = model.forward_pair(other, ctx, ctx);
    CHECK(diff.logits_syn.value() != diff.logits_aut.value());
  }

  TEST_CASE("seeded initialisation and casting") {
    const auto cfg = tiny_config(10);
    const Model a(cfg, 9);
    const Model b(cfg, 9);
    const Model c(cfg, 10);
    bool same = true;
    bool differs = false;
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
      same = same && a.parameters()[i].tensor.value() == b.parameters()[i].tensor.value();
      differs = differs || a.parameters()[i].tensor.value() != c.parameters()[i].tensor.value();
    }
    CHECK(same);
    CHECK(differs);
    const auto d = a.cast<double>();
    CHECK(d.parameter_count() == a.parameter_count());
    CHECK(d.parameters()[3].tensor.value().cast<float>() == a.parameters()[3].tensor.value());
    CHECK(a.parameters()[0].name == "embed.weight");
    CHECK(a.parameters()[0].tensor.value().row(Vocabulary::kPad).isZero());
  }

  TEST_CASE("full objective gradients, fp32 analytic against fp64 differences") {
    const auto c = toy_corpus(3, 4, 1, 4, 6, 13);
    const auto cfg = tiny_config(c.vocab.size());
    const std::vector<std::size_t> idx = {0, 1, 2};
    const auto batch = collate(c.examples, idx, c.syn, c.aut);
    auto noisy = c.syn;
    for (const auto& id : c.syn.ids()) noisy.insert(id, c.syn.at(id) + FeatureVector::Constant(cfg.d_feat, 0.3f));
    const auto pair_batch = collate(c.examples, idx, noisy, c.aut);

    Model model(cfg, 14);
    const LossWeights w{0.5, 0.1};
    auto run_f = [&]() {
      Rng s(1, "syn");
      Rng a(1, "aut");
      return pair_objective(model, pair_batch, w, 0.1, &s, &a);
    };
    model.zero_grad();
    backward(run_f().total);

    auto ref = model.cast<double>();
    auto run_d = [&]() {
      NoGradGuard guard;
      Rng s(1, "syn");
      Rng a(1, "aut");
      return pair_objective(ref, pair_batch, w, 0.1, &s, &a).total.item();
    };
    Rng pick(3, "pick");
    double worst = 0.0;
    const double h = 1e-5;
    for (int k = 0; k < 60; ++k) {
      const auto pi = pick.below(model.parameters().size());
      auto& pf = model.parameters()[pi].tensor;
      auto& pd = ref.parameters()[pi].tensor;
      const auto e = static_cast<Index>(pick.below(static_cast<std::uint64_t>(pf.size())));
      const double x = pd.value().data()[e];
      pd.mutable_value().data()[e] = x + h;
      const double fp = run_d();
      pd.mutable_value().data()[e] = x - h;
      const double fm = run_d();
      pd.mutable_value().data()[e] = x;
      const double analytic = pf.has_grad() ? pf.grad().data()[e] : 0.0;
      worst = std::max(worst, rel_error(analytic, (fp - fm) / (2 * h)));
    }
    CHECK(worst < 1e-3);
    (void)batch;
  }
}
