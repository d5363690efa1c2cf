#include <gtest/gtest.h>

#include <sstream>

#include "model_checks.hpp"
#include "range_oracle.hpp"
#include "q4fg/analysis.hpp"
#include "test_util.hpp"

using namespace q4fg;

TEST(ActivationRange, CraftedBatch) {
  // seq 2, one sequence per batch, two batches.
  const Tensor a({2, 3}, {0, 1, 5, -2, 2, 0});   // ranges 5, 4
  const Tensor b({2, 3}, {1, 1, 1, 3, -3, 0});   // ranges 0, 6
  const std::vector<Tensor> acts{a, b};
  const auto s = activation_range_stats(acts, 2);
  EXPECT_EQ(s.mean, (std::vector<double>{2.5, 5.0}));
  EXPECT_EQ(s.std, (std::vector<double>{2.5, 1.0}));
}

TEST(ActivationRange, MatchesBruteForceOnRandomBatches) {
  std::mt19937_64 rng(1);
  std::vector<Tensor> acts;
  for (int i = 0; i < 5; ++i) acts.push_back(testutil::random_tensor({3 * 4, 6}, rng));
  const auto got = activation_range_stats(acts, 4);
  const auto ref = props::range_brute_force(acts, 4);
  for (std::size_t p = 0; p < 4; ++p) {
    EXPECT_NEAR(got.mean[p], ref.mean[p], 1e-12);
    EXPECT_NEAR(got.std[p], ref.std[p], 1e-12);
  }
  EXPECT_THROW(activation_range_stats(acts, 5), DimensionError);
}

TEST(ActivationRange, ModelProbeMatchesBruteForce) {
  ModelConfig cfg;
  cfg.hidden = 16;
  cfg.vocab_size = 10;
  cfg.max_seq = 8;
  const auto m = build_model<float>(cfg, 1);
  std::vector<ModelInput> batches;
  std::vector<Tensor> captured;
  for (int i = 0; i < 3; ++i) {
    batches.push_back(props::random_input(cfg, 2, 6, 10 + i));
    ActivationProbe probe;
    probe.layer = 1;
    probe.part = LinearPart::mlp_out;
    ForwardOptions opt;
    opt.probe = &probe;
    (void)forward(m, batches.back(), opt);
    EXPECT_EQ(probe.captured.shape(), (Shape{12, 64}));
    captured.push_back(probe.captured);
  }
  const auto got = positional_activation_range(m, batches, 1, LinearPart::mlp_out);
  const auto ref = props::range_brute_force(captured, 6);
  for (std::size_t p = 0; p < 6; ++p) EXPECT_NEAR(got.mean[p], ref.mean[p], 1e-9);
  EXPECT_THROW(positional_activation_range(m, batches, 2, LinearPart::mlp_out), std::out_of_range);
}

TEST(PositionalPerplexity, GeometricMeanIdentity) {
  ModelConfig cfg;
  cfg.arch = Arch::decoder_only;
  cfg.encoder_layers = 0;
  cfg.decoder_layers = 2;
  cfg.hidden = 16;
  cfg.vocab_size = 9;
  cfg.max_seq = 16;
  const auto m = build_model<float>(cfg, 2);
  std::vector<std::int32_t> stream(161);
  std::mt19937_64 rng(3);
  for (auto& t : stream) t = static_cast<std::int32_t>(rng() % 9);
  const auto nll = window_nll(m, stream, QuantStrategy::none(), 10);
  const auto pos = positional_perplexity(nll);
  double log_sum = 0;
  for (double v : pos.mean) log_sum += std::log(v);
  const double geo = std::exp(log_sum / static_cast<double>(pos.positions()));
  EXPECT_NEAR(geo, perplexity(m, stream, QuantStrategy::none(), 10), 1e-6);
}

TEST(PositionalPerplexity, CraftedNll) {
  WindowNll w{2, 2, {0.0, std::log(4.0), std::log(9.0), std::log(16.0)}};
  const auto s = positional_perplexity(w);
  EXPECT_NEAR(s.mean[0], 3.0, 1e-12);  // exp(mean(0, log 9))
  EXPECT_NEAR(s.mean[1], 8.0, 1e-12);
  EXPECT_NEAR(s.std[0], 4.0, 1e-12);   // values 1 and 9
  EXPECT_NEAR(s.std[1], 6.0, 1e-12);   // values 4 and 16
}

TEST(Csv, PositionalRoundTripExact) {
  PositionalStats s{{1.0 / 3.0, 2.5e-17, 12345.678901234567}, {0.1, 0.0, 1e300}};
  std::stringstream ss;
  write_positional_csv(ss, s);
  EXPECT_EQ(read_positional_csv(ss), s);
  std::stringstream bad("pos,mean\n");
  EXPECT_THROW(read_positional_csv(bad), std::runtime_error);
}

TEST(QuantError, ReportOrderAndValues) {
  const Tensor x({2, 4}, {0.0f, 1.0f, 2.0f, 3.0f, -1.0f, 0.5f, 0.25f, 1.0f});
  const std::vector<QuantScheme> schemes{QuantScheme::passthrough_scheme(), QuantScheme::symmetric(4),
                                         QuantScheme::asymmetric(8, Granularity::per_channel)};
  const auto rows = quant_error_report(x, schemes);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].rms_error, 0.0);
  EXPECT_EQ(rows[0].range_utilization, 1.0);
  EXPECT_GT(rows[1].rms_error, 0.0);
  EXPECT_LE(rows[1].max_error, rows[1].max_scale / 2 + 1e-7);
  std::ostringstream os;
  write_quant_error_csv(os, rows);
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')), kQuantErrorCsvHeader);
}

TEST(Report, WriteFailureThrows) {
  EXPECT_THROW(emit_report(PositionalStats{}, "/nonexistent-dir/x.csv"), std::runtime_error);
}
