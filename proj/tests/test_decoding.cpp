#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "orderlab/data.hpp"
#include "orderlab/decoding.hpp"
#include "orderlab/model.hpp"
#include "orderlab/rng.hpp"

using namespace orderlab;
using orderlab::decode::DecodeConfig;
using orderlab::decode::Strategy;

namespace {

model::ModelConfig tiny_cfg() {
  model::ModelConfig cfg;
  cfg.vocab_size = 13;
  cfg.d_model = 16;
  cfg.n_heads = 4;
  cfg.n_layers = 1;
  cfg.d_ff = 32;
  cfg.max_seq_len = 32;
  return cfg;
}

}  // namespace

TEST(Filter, TopKOne) {
  const std::vector<float> logits = {0.1f, 2.0f, -1.0f, 0.5f};
  const auto probs = decode::filter_logits_topk_topp<float>(logits, 1, 0.5);
  EXPECT_DOUBLE_EQ(probs[1], 1.0);
  EXPECT_DOUBLE_EQ(probs[0] + probs[2] + probs[3], 0.0);
}

TEST(Filter, FullKAndPKeepsSoftmax) {
  const std::vector<float> logits = {0.3f, -0.7f, 1.1f, 0.0f};
  const auto probs = decode::filter_logits_topk_topp<float>(logits, 4, 1.0);
  double mx = 1.1, sum = 0.0;
  std::vector<double> want(4);
  for (int i = 0; i < 4; ++i) {
    want[i] = std::exp(static_cast<double>(logits[i]) - mx);
    sum += want[i];
  }
  for (int i = 0; i < 4; ++i) EXPECT_NEAR(probs[i], want[i] / sum, 1e-12);
}

TEST(Filter, HandEvaluatedCumulativeRule) {
  // logits ln[0.5, 0.3, 0.15, 0.05], k=3, p=0.8: cumulative 0.5, 0.8 >= p at
  // prefix length 2 -> keep {0,1}, renormalized over the top-3 softmax mass.
  const std::vector<double> logits = {std::log(0.5), std::log(0.3), std::log(0.15), std::log(0.05)};
  const auto probs = decode::filter_logits_topk_topp<double>(logits, 3, 0.8);
  EXPECT_NEAR(probs[0], 0.625, 1e-9);
  EXPECT_NEAR(probs[1], 0.375, 1e-9);
  EXPECT_DOUBLE_EQ(probs[2], 0.0);
  EXPECT_DOUBLE_EQ(probs[3], 0.0);
}

TEST(Filter, AlwaysAProbabilityVector) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> logits(17);
    for (auto& v : logits) v = static_cast<float>(-4.0 + 8.0 * rng.uniform01());
    const int k = 1 + rng.uniform_int(17);
    const double p = 0.05 + 0.95 * rng.uniform01();
    const auto probs = decode::filter_logits_topk_topp<float>(logits, k, p);
    double sum = 0.0;
    int support = 0;
    for (double q : probs) {
      EXPECT_GE(q, 0.0);
      sum += q;
      if (q > 0.0) ++support;
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
    EXPECT_GE(support, 1);
    EXPECT_LE(support, k);
  }
}

TEST(Filter, TieBreakTowardLowerId) {
  const std::vector<float> logits = {1.0f, 1.0f, 1.0f, 1.0f};
  const auto probs = decode::filter_logits_topk_topp<float>(logits, 2, 0.4);
  // top-2 keeps ids 0,1 (ties to lower id); prefix reaching 0.4 is {0}.
  EXPECT_DOUBLE_EQ(probs[0], 1.0);
  EXPECT_DOUBLE_EQ(probs[1], 0.0);
}

TEST(Decode, GreedyDeterministicAndSeededSampling) {
  const auto cfg = tiny_cfg();
  Rng init(3);
  auto params = model::init_params<float>(cfg, init);
  params.set_requires_grad(false);
  const std::vector<int> prompt = {data::kBos, 9, 4, data::kResponseStart};

  DecodeConfig greedy;
  greedy.strategy = Strategy::greedy;
  greedy.max_new_tokens = 8;
  Rng r1(1), r2(2);  // greedy must ignore the RNG entirely
  EXPECT_EQ(decode::decode_decoder_only(params, cfg, prompt, greedy, r1),
            decode::decode_decoder_only(params, cfg, prompt, greedy, r2));

  DecodeConfig sampled;
  sampled.strategy = Strategy::topk_topp;
  sampled.max_new_tokens = 8;
  Rng s1(7, 0), s2(7, 0);
  EXPECT_EQ(decode::decode_decoder_only(params, cfg, prompt, sampled, s1),
            decode::decode_decoder_only(params, cfg, prompt, sampled, s2));
}

TEST(Decode, KOneEqualsGreedy) {
  const auto cfg = tiny_cfg();
  Rng init(11);
  auto params = model::init_params<float>(cfg, init);
  params.set_requires_grad(false);
  DecodeConfig greedy;
  greedy.strategy = Strategy::greedy;
  greedy.max_new_tokens = 12;
  DecodeConfig k1;
  k1.strategy = Strategy::topk_topp;
  k1.k = 1;
  k1.max_new_tokens = 12;
  for (int trial = 0; trial < 5; ++trial) {
    const std::vector<int> prompt = {data::kBos, 2 + trial, data::kResponseStart};
    Rng rg(0), rs(trial);
    EXPECT_EQ(decode::decode_decoder_only(params, cfg, prompt, greedy, rg),
              decode::decode_decoder_only(params, cfg, prompt, k1, rs));
  }
}

TEST(Decode, OneDrawPerEmittedToken) {
  const auto cfg = tiny_cfg();
  Rng init(13);
  auto params = model::init_params<float>(cfg, init);
  params.set_requires_grad(false);
  DecodeConfig sampled;
  sampled.strategy = Strategy::topk_topp;
  sampled.max_new_tokens = 6;
  const std::vector<int> prompt = {data::kBos, 5, data::kResponseStart};
  Rng a(99, 0), b(99, 0);
  const auto out = decode::decode_decoder_only(params, cfg, prompt, sampled, a);
  // Replaying the same number of uniform draws leaves the clones in sync;
  // <eos> (if hit) also consumed exactly one draw.
  std::size_t draws = out.size();
  ad::Tape<float> tape;
  auto logits = model::forward_decoder_only(tape, params, cfg, prompt);
  (void)logits;
  // Count: decode stopped either at eos (one extra draw) or at max_new_tokens.
  if (out.size() < static_cast<std::size_t>(sampled.max_new_tokens)) ++draws;
  for (std::size_t i = 0; i < draws; ++i) b.uniform01();
  EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Decode, ConditioningOverflowIsLengthError) {
  const auto cfg = tiny_cfg();
  Rng init(17);
  auto params = model::init_params<float>(cfg, init);
  params.set_requires_grad(false);
  std::vector<int> prompt(static_cast<std::size_t>(cfg.max_seq_len) + 1, 1);
  DecodeConfig greedy;
  greedy.strategy = Strategy::greedy;
  Rng rng(0);
  EXPECT_THROW(decode::decode_decoder_only(params, cfg, prompt, greedy, rng), std::length_error);
}

TEST(Decode, EncDecPathDecodes) {
  auto cfg = tiny_cfg();
  cfg.arch = model::Arch::encoder_decoder;
  Rng init(19);
  auto params = model::init_params<float>(cfg, init);
  params.set_requires_grad(false);
  DecodeConfig greedy;
  greedy.strategy = Strategy::greedy;
  greedy.max_new_tokens = 5;
  Rng rng(0);
  const auto out = decode::decode_encoder_decoder(params, cfg, {3, 8, 2}, greedy, rng);
  EXPECT_LE(out.size(), 5u);
  for (int id : out) {
    EXPECT_GE(id, 0);
    EXPECT_LT(id, cfg.vocab_size);
    EXPECT_NE(id, data::kEos);
  }
}

TEST(Decode, SamplingFrequenciesMatchDistribution) {
  // k = V, p = 1: 20000 draws from a fixed 4-token distribution; chi-square
  // with 3 dof, 0.999 quantile = 16.266.
  const std::vector<double> logits = {std::log(0.4), std::log(0.3), std::log(0.2), std::log(0.1)};
  const auto probs = decode::filter_logits_topk_topp<double>(logits, 4, 1.0);
  Rng rng(123);
  std::vector<int> counts(4, 0);
  const int draws = 20000;
  for (int i = 0; i < draws; ++i) {
    const double u = rng.uniform01();
    double cum = 0.0;
    for (int j = 0; j < 4; ++j) {
      cum += probs[static_cast<std::size_t>(j)];
      if (u < cum) {
        counts[static_cast<std::size_t>(j)]++;
        break;
      }
    }
  }
  double chi2 = 0.0;
  const double want[4] = {0.4, 0.3, 0.2, 0.1};
  for (int j = 0; j < 4; ++j) {
    const double expected = want[j] * draws;
    chi2 += (counts[static_cast<std::size_t>(j)] - expected) * (counts[static_cast<std::size_t>(j)] - expected) /
            expected;
  }
  EXPECT_LT(chi2, 16.266);
}
