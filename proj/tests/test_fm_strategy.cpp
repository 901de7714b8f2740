#include <gtest/gtest.h>

#include <cmath>

#include "featmine/fm_strategy.hpp"
#include "support/oracles.hpp"

using namespace featmine;
using featmine::testing::random_tensor;

namespace {

ModelSpec tiny_resnet() {
  ModelSpec s;
  s.family = Family::resnet;
  s.depth = 8;
  s.stage_widths = {4, 6, 8};
  s.input_size = 8;
  return s;
}

FMConfig sites(std::vector<std::string> names, MaskKind variant = MaskKind::box,
               Pairing pairing = Pairing::complementary) {
  FMConfig c;
  c.enabled = !names.empty();
  c.sites = std::move(names);
  c.variant = variant;
  c.pairing = pairing;
  return c;
}

std::vector<int> labels_for(std::int64_t n, int classes, CounterRng& rng) {
  std::vector<int> out(static_cast<std::size_t>(n));
  for (auto& l : out) l = static_cast<int>(rng.below(static_cast<std::uint64_t>(classes)));
  return out;
}

// Two-class logits whose cross-entropy against label 0 equals `ce`.
Tensor logits_with_ce(double ce) {
  const double d = -std::log(std::exp(ce) - 1.0);
  return Tensor(Shape{1, 2, 1, 1}, {static_cast<float>(d), 0.0f});
}

}  // namespace

TEST(Segment, HandExample) {
  const Var<float> x(Tensor(Shape{1, 1, 2, 2}, {1, 2, 3, 4}));
  auto m = BinaryMask::spatial(MaskKind::box, 2, 2);
  m(0, 0) = 1;
  auto [x1, x2] = segment(x, std::make_pair(m, complement(m)));
  EXPECT_TRUE(x1.value() == Tensor(Shape{1, 1, 2, 2}, {1, 0, 0, 0}));
  EXPECT_TRUE(x2.value() == Tensor(Shape{1, 1, 2, 2}, {0, 2, 3, 4}));
  EXPECT_TRUE(x.value() == Tensor(Shape{1, 1, 2, 2}, {1, 2, 3, 4}));

  auto ones = BinaryMask::spatial(MaskKind::box, 2, 2, 1);
  auto [y1, y2] = segment(x, std::make_pair(ones, complement(ones)));
  EXPECT_TRUE(y1.value() == x.value());
  for (float v : y2.value().data()) EXPECT_EQ(v, 0.0f);

  auto wrong = BinaryMask::spatial(MaskKind::box, 3, 3);
  EXPECT_THROW(segment(x, std::make_pair(wrong, complement(wrong))), ConfigError);
}

TEST(Segment, ComplementarySumIsExact) {
  CounterRng rng(1);
  RngStream stream("mask", 1);
  for (int t = 0; t < 1000; ++t) {
    const std::int64_t h = 1 + rng.below(9), w = 1 + rng.below(9), c = 2 + rng.below(5);
    const Var<float> x(random_tensor(Shape{2, c, h, w}, rng, -10, 10));
    const auto kind = static_cast<MaskKind>(t % 3);
    auto pair = sample_pair(kind, Pairing::complementary, c, h, w, stream);
    auto [x1, x2] = segment(x, pair);
    for (std::int64_t i = 0; i < x.value().numel(); ++i)
      ASSERT_EQ(x1.value()[i] + x2.value()[i], x.value()[i]);
  }
}

TEST(HeadForward, ZeroPartGivesBias) {
  Head<float> head{Parameter("w", Tensor(Shape{3, 4, 1, 1}, 0.7f)),
                   Parameter("b", Tensor(Shape{1, 3, 1, 1}, {0.1f, -0.2f, 0.3f}))};
  const auto logits = head_forward(Var<float>(Tensor(Shape{2, 4, 3, 3})), head);
  for (std::int64_t n = 0; n < 2; ++n)
    for (std::int64_t k = 0; k < 3; ++k) EXPECT_EQ(logits.value().at(n, k, 0, 0), head.bias.value()[k]);
}

TEST(HeadForward, ConstantPartClosedForm) {
  const float c = 1.5f, w = 0.25f, bias = -0.5f;
  Head<float> head{Parameter("w", Tensor(Shape{5, 6, 1, 1}, w)),
                   Parameter("b", Tensor(Shape{1, 5, 1, 1}, bias))};
  const auto logits = head_forward(Var<float>(Tensor(Shape{1, 6, 4, 4}, c)), head);
  for (float v : logits.value().data()) EXPECT_NEAR(v, c * 6 * w + bias, 1e-6);
  EXPECT_THROW(head_forward(Var<float>(Tensor(Shape{1, 5, 4, 4})), head), ConfigError);
}

TEST(HeadForward, MatchesPoolThenAffineOracle) {
  CounterRng rng(2);
  for (int t = 0; t < 50; ++t) {
    const Tensor part = random_tensor(Shape{3, 5, 4, 4}, rng);
    Head<float> head{Parameter("w", random_tensor(Shape{7, 5, 1, 1}, rng)),
                     Parameter("b", random_tensor(Shape{1, 7, 1, 1}, rng))};
    const auto got = head_forward(Var<float>(part), head).value();
    const auto want = featmine::testing::naive_affine(
        featmine::testing::naive_gap(BasicTensor<double>::cast_from(part)),
        BasicTensor<double>::cast_from(head.weight.value()),
        BasicTensor<double>::cast_from(head.bias.value()));
    for (std::int64_t i = 0; i < got.numel(); ++i) ASSERT_NEAR(got[i], want[i], 1e-5);
  }
}

TEST(FmLoss, SumsHeadCrossEntropies) {
  const Var<float> a(logits_with_ce(1.0)), b(logits_with_ce(2.0)), c(logits_with_ce(3.0));
  const std::vector<int> labels{0};
  const auto r = fm_loss(a, {{b, c}}, labels);
  ASSERT_EQ(r.per_head_losses.size(), 3u);
  EXPECT_NEAR(r.per_head_losses[0], 1.0, 1e-6);
  EXPECT_NEAR(r.per_head_losses[1], 2.0, 1e-6);
  EXPECT_NEAR(r.per_head_losses[2], 3.0, 1e-6);
  EXPECT_NEAR(r.total, 6.0, 1e-5);
  EXPECT_NEAR(r.total_loss.value()[0], 6.0, 1e-5);
}

TEST(FmLoss, UniformLogitsHundredClasses) {
  const Var<float> u(Tensor(Shape{4, 100, 1, 1}, 0.0f));
  const std::vector<int> labels{0, 17, 42, 99};
  const auto r = fm_loss(u, {{u, u}}, labels);
  EXPECT_NEAR(r.total, 3.0 * std::log(100.0), 1e-5);
  EXPECT_NEAR(r.total, 13.8155, 1e-4);
}

TEST(FmLoss, SingleHeadIsPlainCrossEntropy) {
  CounterRng rng(3);
  const Tensor logits = random_tensor(Shape{5, 10, 1, 1}, rng, -3, 3);
  const auto labels = labels_for(5, 10, rng);
  const auto r = fm_loss(Var<float>(logits), {}, labels);
  ASSERT_EQ(r.per_head_losses.size(), 1u);
  EXPECT_NEAR(r.total, featmine::testing::direct_cross_entropy(
                           BasicTensor<double>::cast_from(logits), labels),
              1e-6);
  EXPECT_THROW(fm_loss(Var<float>(logits), {{Var<float>(Tensor(Shape{5, 9, 1, 1})),
                                             Var<float>(Tensor(Shape{5, 9, 1, 1}))}},
                       labels),
               ConfigError);
}

TEST(TrainForward, HeadCountAndAdditivity) {
  CounterRng rng(4);
  const ModelSpec spec = tiny_resnet();
  for (int t = 0; t < 1000; ++t) {
    std::vector<std::string> chosen;
    for (const auto& s : stage_names())
      if (rng.below(2)) chosen.push_back(s);
    const auto cfg = sites(chosen, static_cast<MaskKind>(rng.below(3)),
                           rng.below(2) ? Pairing::complementary : Pairing::non_complementary);
    ModelSpec local = spec;
    local.input_size = 4;
    Model model(local, RngStream("init", t));
    FeatureMining<float> fm(cfg, local, RngStream("init.fm", t));
    RngStream masks("mask", t);
    const Tensor x = random_tensor(Shape{2, 3, 4, 4}, rng);
    const auto labels = labels_for(2, 10, rng);
    NoGradGuard guard;
    const auto r = train_forward(model, fm, Var<float>(x), labels, masks);
    ASSERT_EQ(r.per_head_losses.size(), cfg.num_classifiers());
    ASSERT_EQ(r.per_head_losses.size(), 1 + 2 * chosen.size());
    double sum = 0.0;
    for (double l : r.per_head_losses) sum += l;
    ASSERT_NEAR(r.total_loss.value()[0] - sum, 0.0, 1e-6 * (1.0 + sum));
    ASSERT_EQ(r.masks_used.size(), chosen.size());
  }
}

TEST(TrainForward, NoSitesEqualsPlainForward) {
  CounterRng rng(5);
  const ModelSpec spec = tiny_resnet();
  Model a(spec, RngStream("init", 1));
  Model b(spec, RngStream("init", 1));
  FeatureMining<float> none(sites({}), spec, RngStream("init.fm", 1));
  FMConfig enabled_empty;
  enabled_empty.enabled = true;
  FeatureMining<float> empty(enabled_empty, spec, RngStream("init.fm", 1));
  const Tensor x = random_tensor(Shape{3, 3, 8, 8}, rng);
  const auto labels = labels_for(3, 10, rng);
  RngStream masks("mask", 1);
  const auto r = train_forward(a, none, Var<float>(x), labels, masks);
  const auto r2 = train_forward(a, empty, Var<float>(x), labels, masks);
  const auto logits = b.forward(Var<float>(x));
  EXPECT_TRUE(r.main_logits.value() == logits.value());
  EXPECT_EQ(r.total_loss.value()[0], softmax_cross_entropy(logits, labels).value()[0]);
  EXPECT_EQ(r2.per_head_losses.size(), 1u);
  EXPECT_EQ(masks.counter(), 0u);
}

TEST(TrainForward, TwoSitesFiveLossesIndependentMasks) {
  CounterRng rng(6);
  const ModelSpec spec = tiny_resnet();
  Model model(spec, RngStream("init", 1));
  FeatureMining<float> fm(sites({"stage2", "stage3"}), spec, RngStream("init.fm", 1));
  RngStream masks("mask", 3);
  const auto r = train_forward(model, fm, Var<float>(random_tensor(Shape{2, 3, 8, 8}, rng)),
                               labels_for(2, 10, rng), masks);
  EXPECT_EQ(r.per_head_losses.size(), 5u);
  ASSERT_EQ(r.masks_used.size(), 2u);
  EXPECT_EQ(r.masks_used[0].first.height, 4);
  EXPECT_EQ(r.masks_used[1].first.height, 2);
  EXPECT_NE(r.masks_used[0].first.seed_draw->counter, r.masks_used[1].first.seed_draw->counter);
}

TEST(TrainForward, PerSampleMasks) {
  CounterRng rng(7);
  const ModelSpec spec = tiny_resnet();
  Model model(spec, RngStream("init", 1));
  auto cfg = sites({"stage3"});
  cfg.per_sample = true;
  FeatureMining<float> fm(cfg, spec, RngStream("init.fm", 1));
  RngStream masks("mask", 3);
  const auto r = train_forward(model, fm, Var<float>(random_tensor(Shape{3, 3, 8, 8}, rng)),
                               labels_for(3, 10, rng), masks);
  EXPECT_EQ(r.masks_used.size(), 3u);
  EXPECT_EQ(masks.counter(), 3u);
}

TEST(TrainForward, FixedSeedIsBitIdentical) {
  CounterRng rng(8);
  const ModelSpec spec = tiny_resnet();
  const Tensor x = random_tensor(Shape{2, 3, 8, 8}, rng);
  const auto labels = labels_for(2, 10, rng);
  auto run = [&]() {
    Model model(spec, RngStream("init", 9));
    FeatureMining<float> fm(sites({"stage2", "stage3"}), spec, RngStream("init.fm", 9));
    RngStream masks("mask", 9);
    return train_forward(model, fm, Var<float>(x), labels, masks);
  };
  const auto a = run();
  const auto b = run();
  EXPECT_EQ(a.total_loss.value()[0], b.total_loss.value()[0]);
  for (std::size_t i = 0; i < a.masks_used.size(); ++i) {
    EXPECT_TRUE(a.masks_used[i].first.same_bits(b.masks_used[i].first));
    EXPECT_TRUE(a.masks_used[i].second.same_bits(b.masks_used[i].second));
  }
}

TEST(EvalForward, IndependentOfFeatureMining) {
  CounterRng rng(9);
  for (int t = 0; t < 1000; ++t) {
    ModelSpec spec = tiny_resnet();
    spec.input_size = 4;
    Model with_fm(spec, RngStream("init", t));
    FeatureMining<float> fm(sites({"stage2", "stage3"}), spec, RngStream("init.fm", t));
    Model plain(spec, RngStream("init", t + 5000));
    plain.load_state(with_fm.state());
    const Tensor x = random_tensor(Shape{2, 3, 4, 4}, rng);
    const auto a = eval_forward(with_fm, Var<float>(x));
    const auto b = eval_forward(plain, Var<float>(x));
    ASSERT_TRUE(a.value() == b.value());
    ASSERT_EQ(argmax_rows(a.value()), argmax_rows(b.value()));
    ASSERT_TRUE(eval_forward(with_fm, Var<float>(x)).value() == a.value());
    ASSERT_EQ(with_fm.mode(), Mode::train);
  }
}

TEST(TrainForward, GradientAdditivity) {
  CounterRng rng(10);
  const ModelSpec spec = tiny_resnet();
  const Tensor x = random_tensor(Shape{2, 3, 8, 8}, rng);
  const auto labels = labels_for(2, 10, rng);
  const auto cfg = sites({"stage2", "stage3"});

  auto grads_for = [&](int head) {
    Model model(spec, RngStream("init", 3));
    FeatureMining<float> fm(cfg, spec, RngStream("init.fm", 3));
    RngStream masks("mask", 3);
    auto r = train_forward(model, fm, Var<float>(x), labels, masks);
    backward(head < 0 ? r.total_loss : r.head_losses[static_cast<std::size_t>(head)]);
    std::vector<Tensor> out;
    for (auto* p : model.parameters()) {
      out.push_back(p->var.has_grad() ? p->grad() : Tensor(p->shape()));
    }
    return out;
  };
  const auto total = grads_for(-1);
  std::vector<Tensor> sum;
  for (int h = 0; h < 5; ++h) {
    const auto g = grads_for(h);
    if (sum.empty()) sum = g;
    else
      for (std::size_t i = 0; i < g.size(); ++i) sum[i] += g[i];
  }
  for (std::size_t i = 0; i < total.size(); ++i)
    for (std::int64_t j = 0; j < total[i].numel(); ++j)
      ASSERT_NEAR(total[i][j], sum[i][j], 1e-5) << "parameter " << i;
}
