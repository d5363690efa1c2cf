#include <gtest/gtest.h>

#include <sstream>

#include "model_checks.hpp"
#include "qat_gradient.hpp"
#include "q4fg/data.hpp"
#include "q4fg/distill.hpp"

using namespace q4fg;

namespace {

std::vector<double> softmax_row(std::span<const double> z, double t) {
  std::vector<double> p(z.size());
  double mx = -1e300, s = 0;
  for (double v : z) mx = std::max(mx, v / t);
  for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] / t - mx);
  for (auto& v : p) v /= s;
  return p;
}

ForwardResult<double> fake_result(std::mt19937_64& rng, std::size_t layers, MaskMode mode) {
  ForwardResult<double> r;
  r.class_logits = testutil::random_tensor<double>({2, 3}, rng);
  for (std::size_t l = 0; l < layers; ++l) {
    LayerTrace<double> t;
    t.hidden = testutil::random_tensor<double>({6, 4}, rng);
    t.scores = testutil::random_tensor<double>({2, 1, 3, 3}, rng);
    t.probs = masked_softmax(t.scores, mode);
    t.mask = mode;
    r.layers.push_back(t);
  }
  return r;
}

}  // namespace

TEST(KdLoss, MatchesHandComputedTerms) {
  std::mt19937_64 rng(1);
  const auto s = fake_result(rng, 2, MaskMode::causal);
  const auto t = fake_result(rng, 3, MaskMode::causal);
  KDConfig cfg;
  cfg.w_logit = 0.7;
  cfg.w_att = 0.2;
  cfg.w_rep = 0.3;
  cfg.w_task = 0.4;
  cfg.temperature = 1.5;
  cfg.att = AttVariant::prenorm;
  const BatchTargets targets{TaskKind::classification, {2, 0}};
  const std::vector<std::size_t> map{0, 2};
  const auto loss = kd_loss(s, t, cfg, targets, map);

  double kl = 0, ce = 0;
  for (std::size_t r = 0; r < 2; ++r) {
    const auto ps = softmax_row(s.class_logits.data().subspan(r * 3, 3), cfg.temperature);
    const auto pt = softmax_row(t.class_logits.data().subspan(r * 3, 3), cfg.temperature);
    for (std::size_t k = 0; k < 3; ++k) kl += pt[k] * std::log(pt[k] / ps[k]);
    ce -= std::log(softmax_row(s.class_logits.data().subspan(r * 3, 3), 1.0)[targets.targets[r]]);
  }
  kl = kl / 2 * cfg.temperature * cfg.temperature;
  ce /= 2;
  double att = 0, rep = 0;
  for (std::size_t l = 0; l < 2; ++l) {
    const auto& a = s.layers[l].scores.data();
    const auto& b = t.layers[map[l]].scores.data();
    double se = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const std::size_t k = i % 3, q = (i / 3) % 3;
      if (k > q) continue;  // causal positions only
      se += (a[i] - b[i]) * (a[i] - b[i]);
      ++n;
    }
    att += se / static_cast<double>(n) / 2;
    double sr = 0;
    for (std::size_t i = 0; i < 24; ++i) {
      const double d = s.layers[l].hidden.data()[i] - t.layers[map[l]].hidden.data()[i];
      sr += d * d;
    }
    rep += sr / 24 / 2;
  }
  EXPECT_NEAR(loss.logit, kl, 1e-12);
  EXPECT_NEAR(loss.task, ce, 1e-12);
  EXPECT_NEAR(loss.att, att, 1e-12);
  EXPECT_NEAR(loss.rep, rep, 1e-12);
  EXPECT_NEAR(loss.total.item(), 0.7 * kl + 0.2 * att + 0.3 * rep + 0.4 * ce, 1e-12);
}

TEST(KdLoss, NormalizedVariantUsesProbabilities) {
  std::mt19937_64 rng(2);
  const auto s = fake_result(rng, 1, MaskMode::full);
  const auto t = fake_result(rng, 1, MaskMode::full);
  KDConfig cfg;
  cfg.w_logit = 0;
  cfg.w_att = 1;
  const auto loss = kd_loss(s, t, cfg, BatchTargets{});
  EXPECT_NEAR(loss.att, mse(s.layers[0].probs, t.layers[0].probs).item(), 1e-15);
  EXPECT_EQ(loss.logit, 0.0);
  EXPECT_EQ(loss.rep, 0.0);
}

TEST(KdLoss, MappingErrors) {
  std::mt19937_64 rng(3);
  const auto s = fake_result(rng, 2, MaskMode::full);
  const auto t = fake_result(rng, 2, MaskMode::full);
  KDConfig cfg;
  cfg.w_rep = 1;
  const std::vector<std::size_t> short_map{0};
  try {
    (void)kd_loss(s, t, cfg, BatchTargets{}, short_map);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("student layer 1"), std::string::npos) << e.what();
  }
  const std::vector<std::size_t> bad{0, 5};
  EXPECT_THROW(kd_loss(s, t, cfg, BatchTargets{}, bad), std::invalid_argument);
  KDConfig none;
  none.w_logit = 0;
  EXPECT_THROW(none.validate(), std::invalid_argument);
}

TEST(KdLoss, FlatLayerMap) {
  LayerMapping m{{0, 1}, {0, 2, 4}};
  EXPECT_EQ(flat_layer_map(m, 6), (std::vector<std::size_t>{0, 1, 6, 8, 10}));
}

TEST(QatGradient, EncoderPruneThenQuant) {
  EXPECT_LE(props::qat_loss_gradient_error({Arch::encoder_only, CompositionOrder::prune_then_quant,
                                            AttVariant::normalized, true}, 1),
            1e-3);
}

TEST(QatGradient, DecoderQuantThenPrunePrenorm) {
  EXPECT_LE(props::qat_loss_gradient_error({Arch::decoder_only, CompositionOrder::quant_then_prune,
                                            AttVariant::prenorm, true}, 2),
            1e-3);
}

namespace {

struct Tiny {
  Transformer<float> teacher;
  TaskData data;
};

Tiny tiny_majority() {
  ModelConfig cfg;
  cfg.hidden = 16;
  cfg.heads = 2;
  cfg.vocab_size = 5;
  cfg.num_classes = 4;
  cfg.max_seq = 8;
  Tiny t{build_model<float>(cfg, 1),
         TaskData::classification(majority_classification(256, 7, 4, 1), majority_classification(64, 7, 4, 2))};
  return t;
}

}  // namespace

TEST(Training, SupervisedImprovesAndIsDeterministic) {
  const auto t = tiny_majority();
  TrainConfig cfg;
  cfg.steps = 60;
  cfg.batch_size = 16;
  cfg.lr = 3e-3;
  cfg.eval_every = 20;
  const auto a = train_supervised(t.teacher, t.data, cfg);
  const auto b = train_supervised(t.teacher, t.data, cfg);
  ASSERT_EQ(a.log.size(), 4u);  // steps 0, 20, 40, 60
  EXPECT_EQ(a.log, b.log);
  EXPECT_EQ(a.log.front().step, 0u);
  EXPECT_EQ(a.log.back().step, 60u);
  EXPECT_GT(a.best_metric, a.log.front().eval_metric);
  EXPECT_EQ(a.best_metric, a.log[best_row(a.log, true)].eval_metric);
  EXPECT_DOUBLE_EQ(evaluate(a.best, t.data, QuantStrategy::none()), a.best_metric);
}

TEST(Training, QatWithMasksKeepsStructure) {
  const auto t = tiny_majority();
  TrainConfig cfg;
  cfg.steps = 10;
  cfg.batch_size = 8;
  cfg.eval_every = 5;
  cfg.strategy = wa_strategy(4, 8);
  cfg.sparsity = SparsityConfig{};
  KDConfig kd;
  kd.w_att = 0.5;
  kd.w_rep = 0.5;
  const auto r = qat_train(t.teacher, t.teacher, t.data, cfg, kd);
  EXPECT_EQ(r.final_model.masks.size(), 8u);
  for (const auto& [name, m] : r.final_model.masks) {
    EXPECT_TRUE(m.satisfies_structure()) << name;
    EXPECT_DOUBLE_EQ(m.sparsity(), 0.5);
  }
  for (const auto& row : r.log) EXPECT_TRUE(std::isfinite(row.loss));
}

TEST(Training, NonFiniteLossNamesStep) {
  auto t = tiny_majority();
  auto teacher = t.teacher.clone();
  teacher.cls_head->weight.mutable_data()[0] = std::numeric_limits<float>::infinity();
  TrainConfig cfg;
  cfg.steps = 3;
  cfg.batch_size = 4;
  try {
    (void)qat_train(t.teacher, teacher, t.data, cfg, KDConfig{});
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos) << e.what();
  }
}

TEST(Training, BestRowAndLogFormat) {
  const std::vector<TrainLogRow> rows{{0, 1, 1, 0, 0, 0, 0.5}, {1, 1, 1, 0, 0, 0, 0.7}, {2, 1, 1, 0, 0, 0, 0.7},
                                      {3, 1, 1, 0, 0, 0, 0.2}};
  EXPECT_EQ(best_row(rows, true), 1u);
  EXPECT_EQ(best_row(rows, false), 3u);
  std::ostringstream os;
  write_train_log(os, rows);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, kTrainLogHeader);
  std::getline(is, line);
  EXPECT_EQ(line, "0,1,1,0,0,0,0.5");
}

TEST(Training, LanguageModelMetricIsPerplexity) {
  ModelConfig cfg;
  cfg.arch = Arch::decoder_only;
  cfg.encoder_layers = 0;
  cfg.decoder_layers = 1;
  cfg.hidden = 16;
  cfg.vocab_size = 6;
  cfg.max_seq = 9;
  const auto m = build_model<float>(cfg, 4);
  const auto chain = random_markov_chain(6, 2.0, 5);
  const auto data = TaskData::language_model(markov_lm(chain, 2000, 6), markov_lm(chain, 400, 7), 8);
  EXPECT_FALSE(data.higher_is_better());
  TrainConfig tc;
  tc.steps = 40;
  tc.batch_size = 8;
  tc.lr = 3e-3;
  tc.eval_every = 40;
  const auto r = train_supervised(m, data, tc);
  EXPECT_LT(r.best_metric, r.log.front().eval_metric);
  EXPECT_GE(r.best_metric, chain.optimal_perplexity() * 0.9);
}
