#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "mmt/checkpoint.hpp"
#include "mmt/errors.hpp"
#include "mmt/optimizer.hpp"
#include "mmt/trainer.hpp"
#include "support.hpp"

using namespace mmt;
using namespace mmt::testing;

namespace {

std::vector<NamedParameter<float>> scalar_param(float value, float grad) {
  auto t = Tensor<float>::parameter(MatrixF::Constant(1, 1, value));
  t.mutable_grad() = MatrixF::Constant(1, 1, grad);
  return {{"p", t}};
}

bool same_parameters(const Model& a, const Model& b) {
  for (std::size_t i = 0; i < a.parameters().size(); ++i)
    if (a.parameters()[i].tensor.value() != b.parameters()[i].tensor.value()) return false;
  return true;
}

TrainerConfig small_trainer() {
  TrainerConfig t;
  t.seed = 3;
  t.max_steps = 12;
  t.update_freq = 2;
  t.token_budget = 12;
  t.adam.lr = 1e-3;
  t.adam.warmup_steps = 4;
  return t;
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("adam step by hand") {
    AdamConfig cfg;
    cfg.lr = 0.01;
    cfg.warmup_steps = 0;
    auto params = scalar_param(1.0f, 1.0f);
    AdamState state;
    const double lr = adam_update(params, state, cfg);
    CHECK(lr == 0.01);
    // m = 0.1, v = 0.02; bias corrected both are 1.
    const double m_hat = (1 - cfg.beta1) * 1.0 / (1 - cfg.beta1);
    const double v_hat = (1 - cfg.beta2) * 1.0 / (1 - cfg.beta2);
    const double expected = 1.0 - cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    CHECK(params[0].tensor.value()(0, 0) == doctest::Approx(expected).epsilon(1e-7));
    CHECK(state.first_moment[0](0, 0) == doctest::Approx(0.1).epsilon(1e-7));
    CHECK(state.second_moment[0](0, 0) == doctest::Approx(0.02).epsilon(1e-7));
  }

  TEST_CASE("zero gradients leave parameters unchanged") {
    AdamConfig cfg;
    auto params = scalar_param(0.75f, 0.0f);
    AdamState state;
    for (int i = 0; i < 3; ++i) adam_update(params, state, cfg);
    CHECK(params[0].tensor.value()(0, 0) == 0.75f);
  }

  TEST_CASE("schedule peaks at the end of warmup") {
    AdamConfig cfg;
    CHECK(inverse_sqrt_lr(cfg, cfg.warmup_steps) == cfg.lr);
    CHECK(inverse_sqrt_lr(cfg, cfg.warmup_steps / 2) == doctest::Approx(cfg.lr / 2));
    CHECK(inverse_sqrt_lr(cfg, 4 * cfg.warmup_steps) == doctest::Approx(cfg.lr / 2));
    cfg.warmup_steps = 0;
    CHECK(inverse_sqrt_lr(cfg, 123) == cfg.lr);
  }

  TEST_CASE("identical streams give zero consistency terms") {
    const auto c = toy_corpus(6, 5, 2, 5, 6, 21);
    Model model(tiny_config(c.vocab.size()), 1);
    const std::vector<std::size_t> idx = {0, 1, 2, 3, 4, 5};
    const auto batch = collate(c.examples, idx, c.syn, c.aut);
    const auto b = micro_batch_loss(model, batch, LossWeights{}, 0.1, nullptr, false);
    CHECK(std::abs(b.l_kl) <= 1e-7);
    CHECK(std::abs(b.l_ot) <= 1e-9);
    CHECK(b.l_syn == b.l_aut);
  }

  TEST_CASE("zero weights reduce to the two-stream translation loss") {
    const auto c = toy_corpus(4, 5, 2, 5, 6, 22);
    auto noisy = c.syn;
    for (const auto& id : c.syn.ids()) noisy.insert(id, -c.syn.at(id));
    const std::vector<std::size_t> idx = {0, 1, 2, 3};
    const auto batch = collate(c.examples, idx, noisy, c.aut);
    Model model(tiny_config(c.vocab.size()), 2);
    const auto b = micro_batch_loss(model, batch, LossWeights{0.0, 0.0}, 0.1, nullptr, true);
    CHECK(b.total == b.l_trans);
    CHECK(b.l_kl > 0.0);
    std::vector<MatrixF> grads;
    for (const auto& p : model.parameters()) grads.push_back(p.tensor.has_grad() ? p.tensor.grad() : MatrixF());
    model.zero_grad();

    ForwardContext<float> ctx;
    const auto out = model.forward_pair(batch, ctx, ctx);
    std::span<const int> targets(batch.tgt_out.data(), static_cast<std::size_t>(batch.tgt_out.size()));
    backward(scale(cross_entropy_label_smoothed(out.logits_syn, targets, Vocabulary::kPad, 0.1) +
                       cross_entropy_label_smoothed(out.logits_aut, targets, Vocabulary::kPad, 0.1),
                   0.5f));
    for (std::size_t i = 0; i < grads.size(); ++i) {
      const auto& p = model.parameters()[i].tensor;
      if (p.has_grad()) CHECK(p.grad() == grads[i]);
    }
  }

  TEST_CASE("accumulating two halves equals one full micro-batch") {
    // Two examples with equal token counts.
    auto c = toy_corpus(2, 5, 4, 4, 6, 23);
    auto noisy = c.syn;
    for (const auto& id : c.syn.ids()) noisy.insert(id, c.syn.at(id) * 0.7f);
    const std::vector<std::size_t> both = {0, 1};
    const std::vector<std::size_t> first = {0};
    const std::vector<std::size_t> second = {1};
    const std::vector<Batch> full = {collate(c.examples, both, noisy, c.aut)};
    const std::vector<Batch> halves = {collate(c.examples, first, noisy, c.aut),
                                       collate(c.examples, second, noisy, c.aut)};
    AdamConfig cfg;
    cfg.warmup_steps = 0;
    cfg.lr = 1e-3;
    // A first Adam step is close to lr * sign(g); a larger eps keeps
    // gradients that are zero up to rounding from being amplified.
    cfg.eps = 1e-3;
    Model a(tiny_config(c.vocab.size()), 4);
    Model b(tiny_config(c.vocab.size()), 4);
    AdamState sa;
    AdamState sb;
    train_step(a, sa, cfg, full, LossWeights{}, 0.1, nullptr);
    train_step(b, sb, cfg, halves, LossWeights{}, 0.1, nullptr);
    double worst = 0.0;
    for (std::size_t i = 0; i < a.parameters().size(); ++i)
      worst = std::max(worst, static_cast<double>((a.parameters()[i].tensor.value() - b.parameters()[i].tensor.value())
                                                      .cwiseAbs()
                                                      .maxCoeff()));
    CHECK(worst <= 1e-6);
  }

  TEST_CASE("loss falls on a tiny corpus") {
    const auto c = toy_corpus(4, 5, 2, 4, 6, 24);
    TrainerConfig t;
    t.max_steps = 150;
    t.update_freq = 1;
    t.token_budget = 100;
    t.adam.lr = 3e-3;
    t.adam.warmup_steps = 5;
    auto cfg = tiny_config(c.vocab.size());
    cfg.dropout = 0.0;
    Trainer trainer(Model(cfg, 5), t, c.examples, c.syn, c.aut);
    const double first = trainer.step().loss.total;
    double last = first;
    while (!trainer.done()) last = trainer.step().loss.total;
    CHECK(trainer.steps() == 150);
    MESSAGE("loss " << first << " -> " << last);
    CHECK(last < 0.6 * first);
  }

  TEST_CASE("non-finite loss rolls the step back") {
    const auto c = toy_corpus(2, 5, 2, 4, 6, 25);
    Model model(tiny_config(c.vocab.size()), 6);
    model.parameter("decoder.norm.gain").mutable_value()(0, 0) = std::numeric_limits<float>::infinity();
    const auto before = model.parameter("embed.weight").value();
    const std::vector<std::size_t> idx = {0, 1};
    const std::vector<Batch> batches = {collate(c.examples, idx, c.syn, c.aut)};
    AdamState state;
    CHECK_THROWS_AS(train_step(model, state, AdamConfig{}, batches, LossWeights{}, 0.1, nullptr), NumericsError);
    CHECK(state.step == 0);
    CHECK(model.parameter("embed.weight").value() == before);
  }

  TEST_CASE("checkpoint round trip and corruption") {
    TempDir dir("ckpt");
    const Model model(tiny_config(11), 7);
    auto ckpt = make_checkpoint(model);
    ckpt.step = 42;
    ckpt.state["note"] = "x=y";
    ckpt.rng["s"] = "1 2 3";
    save_checkpoint(ckpt, dir.file("a.mmtb"));
    const auto back = load_checkpoint(dir.file("a.mmtb"));
    CHECK(back.step == 42);
    CHECK(back.model == model.config());
    CHECK(back.parameters == ckpt.parameters);
    CHECK(back.state.at("note") == "x=y");
    CHECK(back.rng.at("s") == "1 2 3");
    CHECK(same_parameters(model_from_checkpoint(back), model));

    const auto size = std::filesystem::file_size(dir.file("a.mmtb"));
    std::filesystem::copy_file(dir.file("a.mmtb"), dir.file("cut.mmtb"));
    std::filesystem::resize_file(dir.file("cut.mmtb"), size - 7);
    CHECK_THROWS_AS(load_checkpoint(dir.file("cut.mmtb")), FormatError);

    {
      std::fstream f(dir.file("a.mmtb"), std::ios::in | std::ios::out | std::ios::binary);
      f.seekp(4);
      const std::uint32_t v = 99;
      f.write(reinterpret_cast<const char*>(&v), 4);
    }
    CHECK_THROWS_AS(load_checkpoint(dir.file("a.mmtb")), FormatError);

    Model other(tiny_config(12), 7);
    CHECK_THROWS_AS(restore_parameters(other, back), FormatError);
  }

  TEST_CASE("checkpoint averaging") {
    const Model model(tiny_config(11), 8);
    const auto ckpt = make_checkpoint(model);
    const auto same = average_checkpoints(std::vector<Checkpoint>(10, ckpt));
    CHECK(same.parameters == ckpt.parameters);

    auto zero = ckpt;
    auto two = ckpt;
    for (auto& p : zero.parameters) std::fill(p.data.begin(), p.data.end(), 0.0f);
    for (auto& p : two.parameters) std::fill(p.data.begin(), p.data.end(), 2.0f);
    for (const auto& p : average_checkpoints(std::vector<Checkpoint>{zero, two}).parameters)
      for (float v : p.data) CHECK(v == 1.0f);

    Rng rng(9, "avg");
    std::vector<Checkpoint> many(10, ckpt);
    for (auto& c : many)
      for (auto& p : c.parameters)
        for (auto& v : p.data) v = static_cast<float>(rng.normal());
    const auto mean = average_checkpoints(many);
    double worst = 0.0;
    for (std::size_t t = 0; t < mean.parameters.size(); ++t) {
      for (std::size_t i = 0; i < mean.parameters[t].data.size(); ++i) {
        double ref = 0.0;
        for (const auto& c : many) ref += c.parameters[t].data[i];
        worst = std::max(worst, std::abs(ref / 10.0 - mean.parameters[t].data[i]));
      }
    }
    CHECK(worst <= 1e-6);

    auto bad = ckpt;
    bad.parameters.pop_back();
    CHECK_THROWS_AS(average_checkpoints(std::vector<Checkpoint>{ckpt, bad}), FormatError);
  }

  TEST_CASE("resumed training matches an uninterrupted run bitwise") {
    const auto c = toy_corpus(10, 6, 2, 6, 6, 26);
    const auto cfg = tiny_config(c.vocab.size());
    const auto t = small_trainer();
    TempDir dir("resume");

    Trainer full(Model(cfg, 11), t, c.examples, c.syn, c.aut);
    while (!full.done()) full.step();

    Trainer first(Model(cfg, 11), t, c.examples, c.syn, c.aut);
    for (int i = 0; i < 5; ++i) first.step();
    save_checkpoint(first.checkpoint(), dir.file("mid.mmtb"));

    Trainer resumed(Model(cfg, 999), t, c.examples, c.syn, c.aut);
    resumed.resume(load_checkpoint(dir.file("mid.mmtb")));
    CHECK(resumed.steps() == 5);
    while (!resumed.done()) resumed.step();
    CHECK(same_parameters(full.model(), resumed.model()));
    const auto& ma = full.optimizer_state().first_moment;
    const auto& mb = resumed.optimizer_state().first_moment;
    bool moments = ma.size() == mb.size();
    for (std::size_t i = 0; moments && i < ma.size(); ++i) moments = ma[i] == mb[i];
    CHECK(moments);
  }

  TEST_CASE("trainer configuration round trip and validation") {
    auto t = small_trainer();
    t.weights.gamma = 0.25;
    const auto back = TrainerConfig::from_map(t.to_map());
    CHECK(back.to_map() == t.to_map());
    TrainerConfig none;
    CHECK_THROWS_AS(none.validate(), ConfigError);
    auto bad = small_trainer();
    bad.weights.lambda = -1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK_THROWS_AS(TrainerConfig::from_map({{"trainer.lr", "fast"}}), ConfigError);
  }
}
