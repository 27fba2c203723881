#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "gradcheck.hpp"
#include "orderlab/rng.hpp"
#include "orderlab/tape.hpp"
#include "orderlab/tensor.hpp"

using orderlab::Rng;
using orderlab::ad::Tape;
using orderlab::ad::Tensor;
using DTensor = Tensor<double>;
using DTape = Tape<double>;

namespace {

DTensor random_tensor(std::vector<int> shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
  auto t = DTensor::zeros(std::move(shape));
  for (auto& v : t.values_mut()) v = lo + (hi - lo) * rng.uniform01();
  return t;
}

}  // namespace

TEST(Elementwise, AddIdentityAndShapes) {
  DTape tape;
  auto x = DTensor::from({2, 2}, {1, 2, 3, 4});
  auto z = DTensor::zeros({2, 2});
  auto y = tape.add(x, z);
  EXPECT_EQ(std::vector<double>(y.values().begin(), y.values().end()),
            std::vector<double>({1, 2, 3, 4}));
  auto bad = DTensor::zeros({3});
  EXPECT_THROW(tape.add(x, bad), std::invalid_argument);
}

TEST(Elementwise, BroadcastOverLeading) {
  DTape tape;
  auto x = DTensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = DTensor::from({3}, {10, 20, 30});
  auto y = tape.add(x, b);
  EXPECT_EQ(y.values()[0], 11);
  EXPECT_EQ(y.values()[5], 36);
  auto m = tape.mul(x, b);
  EXPECT_EQ(m.values()[4], 100);
}

TEST(Matmul, HandEvaluated) {
  DTape tape;
  auto a = DTensor::from({2, 2}, {1, 2, 3, 4});
  auto b = DTensor::from({2, 1}, {5, 6});
  auto c = tape.matmul(a, b);
  ASSERT_EQ(c.shape(), (std::vector<int>{2, 1}));
  EXPECT_DOUBLE_EQ(c.values()[0], 17);
  EXPECT_DOUBLE_EQ(c.values()[1], 39);
}

TEST(Matmul, IdentityAndErrors) {
  DTape tape;
  auto a = DTensor::from({2, 2}, {1, 2, 3, 4});
  auto eye = DTensor::from({2, 2}, {1, 0, 0, 1});
  auto c = tape.matmul(a, eye);
  EXPECT_EQ(std::vector<double>(c.values().begin(), c.values().end()),
            std::vector<double>({1, 2, 3, 4}));
  auto bad = DTensor::zeros({3, 2});
  EXPECT_THROW(tape.matmul(a, bad), std::invalid_argument);
}

TEST(Matmul, TransposeBMatchesExplicit) {
  Rng rng(7);
  DTape tape;
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({5, 4}, rng);
  auto c = tape.matmul(a, b, true);
  ASSERT_EQ(c.shape(), (std::vector<int>{3, 5}));
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 5; ++j) {
      double want = 0;
      for (int k = 0; k < 4; ++k) want += a.values()[i * 4 + k] * b.values()[j * 4 + k];
      EXPECT_NEAR(c.values()[i * 5 + j], want, 1e-12);
    }
  }
}

TEST(Softmax, KnownValues) {
  DTape tape;
  auto sym = tape.softmax(DTensor::from({2}, {0, 0}), 0);
  EXPECT_NEAR(sym.values()[0], 0.5, 1e-12);
  auto x = tape.softmax(DTensor::from({3}, {1, 2, 3}), 0);
  EXPECT_NEAR(x.values()[0], 0.0900, 1e-3);
  EXPECT_NEAR(x.values()[1], 0.2447, 1e-3);
  EXPECT_NEAR(x.values()[2], 0.6652, 1e-3);
  EXPECT_THROW(tape.softmax(x, 3), std::out_of_range);
}

TEST(Softmax, ShiftInvarianceAndRowSums) {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    DTape tape;
    auto x = random_tensor({4, 7}, rng, -5.0, 5.0);
    const double c = -3.0 + 6.0 * rng.uniform01();
    auto shifted = DTensor::from(x.shape(), {x.values().begin(), x.values().end()});
    for (auto& v : shifted.values_mut()) v += c;
    auto y1 = tape.softmax(x, 1);
    auto y2 = tape.softmax(shifted, 1);
    for (std::size_t i = 0; i < y1.numel(); ++i) {
      EXPECT_NEAR(y1.values()[i], y2.values()[i], 1e-9);
      EXPECT_GT(y1.values()[i], 0.0);
      EXPECT_LT(y1.values()[i], 1.0);
    }
    for (int r = 0; r < 4; ++r) {
      double sum = 0;
      for (int j = 0; j < 7; ++j) sum += y1.values()[r * 7 + j];
      EXPECT_NEAR(sum, 1.0, 1e-6);
    }
  }
}

TEST(LayerNorm, HandCases) {
  DTape tape;
  auto gain = DTensor::from({2}, {1, 1});
  auto bias = DTensor::from({2}, {0, 0});
  auto y = tape.layer_norm(DTensor::from({1, 2}, {1, -1}), gain, bias, 1e-5);
  EXPECT_NEAR(y.values()[0], 1.0, 1e-4);
  EXPECT_NEAR(y.values()[1], -1.0, 1e-4);

  auto bias2 = DTensor::from({2}, {0.5, -0.25});
  auto constant = tape.layer_norm(DTensor::from({1, 2}, {3, 3}), gain, bias2, 1e-5);
  EXPECT_NEAR(constant.values()[0], 0.5, 1e-9);
  EXPECT_NEAR(constant.values()[1], -0.25, 1e-9);

  auto gain2 = DTensor::from({2}, {2, 2});
  auto doubled = tape.layer_norm(DTensor::from({1, 2}, {1, -1}), gain2, bias, 1e-5);
  EXPECT_NEAR(doubled.values()[0], 2.0 * y.values()[0], 1e-12);
  EXPECT_NEAR(doubled.values()[1], 2.0 * y.values()[1], 1e-12);

  auto badgain = DTensor::from({3}, {1, 1, 1});
  EXPECT_THROW(tape.layer_norm(DTensor::from({1, 2}, {1, 2}), badgain, bias, 1e-5),
               std::invalid_argument);
}

TEST(Gelu, KnownValuesAndMonotone) {
  DTape tape;
  auto y = tape.gelu(DTensor::from({3}, {0.0, 10.0, 1.0}));
  EXPECT_DOUBLE_EQ(y.values()[0], 0.0);
  EXPECT_NEAR(y.values()[1], 10.0, 1e-4);
  EXPECT_NEAR(y.values()[2], 0.8412, 1e-3);

  // The tanh-approximation dips below zero left of x ~ -0.75; the monotone
  // region starts at the minimum.
  std::vector<double> grid;
  for (double v = -0.7; v <= 6.0; v += 0.05) grid.push_back(v);
  auto g = tape.gelu(DTensor::from({static_cast<int>(grid.size())}, std::vector<double>(grid)));
  for (std::size_t i = 1; i < grid.size(); ++i) {
    EXPECT_GE(g.values()[i], g.values()[i - 1] - 1e-12);
  }
}

TEST(CrossEntropy, KnownValues) {
  DTape tape;
  auto uniform = DTensor::zeros({1, 4});
  auto l1 = tape.cross_entropy_nll(uniform, {2}, {1});
  EXPECT_NEAR(l1.scalar(), std::log(4.0), 1e-9);

  auto peaked = DTensor::zeros({1, 4});
  peaked.values_mut()[1] = 100.0;
  auto l2 = tape.cross_entropy_nll(peaked, {1}, {1});
  EXPECT_NEAR(l2.scalar(), 0.0, 1e-9);

  auto l3 = tape.cross_entropy_nll(DTensor::from({1, 3}, {1, 2, 3}), {2}, {1});
  EXPECT_NEAR(l3.scalar(), 0.4076, 1e-3);

  EXPECT_THROW(tape.cross_entropy_nll(uniform, {2}, {0}), std::invalid_argument);
  EXPECT_THROW(tape.cross_entropy_nll(uniform, {7}, {1}), std::out_of_range);
}

TEST(KlDivergence, KnownValues) {
  Rng rng(3);
  DTape tape;
  auto x = random_tensor({2, 5}, rng);
  auto self_kl = tape.kl_divergence(x, x, 1);
  for (double v : self_kl.values()) EXPECT_LE(std::fabs(v), 1e-9);

  auto p = DTensor::from({1, 2}, {30.0, 0.0});
  auto q = DTensor::from({1, 2}, {0.0, 0.0});
  auto kl = tape.kl_divergence(p, q, 1);
  EXPECT_NEAR(kl.values()[0], std::log(2.0), 1e-3);

  // Asymmetry witness: near-one-hot vs uniform.
  auto kl_rev = tape.kl_divergence(q, p, 1);
  EXPECT_GT(std::fabs(kl.values()[0] - kl_rev.values()[0]), 1e-3);

  auto bad = DTensor::zeros({1, 3});
  EXPECT_THROW(tape.kl_divergence(p, bad, 1), std::invalid_argument);

  // Nonnegativity on random logit pairs.
  for (int trial = 0; trial < 20; ++trial) {
    DTape t2;
    auto a = random_tensor({3, 6}, rng, -4.0, 4.0);
    auto b = random_tensor({3, 6}, rng, -4.0, 4.0);
    for (double v : t2.kl_divergence(a, b, 1).values()) EXPECT_GE(v, 0.0);
  }
}

TEST(Backward, SumOfSquares) {
  DTape tape;
  auto x = DTensor::from({3}, {1.0, -2.0, 0.5}, true);
  auto loss = tape.sum_all(tape.mul(x, x));
  tape.backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -4.0);
  EXPECT_DOUBLE_EQ(x.grad()[2], 1.0);
}

TEST(Backward, SoftmaxCrossEntropyIdentity) {
  DTape tape;
  auto logits = DTensor::from({1, 4}, {0.3, -1.2, 2.0, 0.1}, true);
  auto loss = tape.cross_entropy_nll(logits, {2}, {1});
  tape.backward(loss);
  DTape t2;
  auto probs = t2.softmax(DTensor::from({1, 4}, {0.3, -1.2, 2.0, 0.1}), 1);
  for (int j = 0; j < 4; ++j) {
    const double want = probs.values()[j] - (j == 2 ? 1.0 : 0.0);
    EXPECT_NEAR(logits.grad()[j], want, 1e-12);
  }
}

TEST(Backward, NonScalarLossRejected) {
  DTape tape;
  auto x = DTensor::from({2}, {1.0, 2.0}, true);
  auto y = tape.mul(x, x);
  EXPECT_THROW(tape.backward(y), std::logic_error);
}

TEST(Backward, Determinism) {
  auto run = [] {
    Rng rng(99);
    DTape tape;
    auto x = random_tensor({4, 4}, rng);
    x.set_requires_grad(true);
    auto w = random_tensor({4, 4}, rng);
    w.set_requires_grad(true);
    auto loss = tape.sum_all(tape.gelu(tape.matmul(x, w)));
    tape.backward(loss);
    std::vector<double> out(x.grad().begin(), x.grad().end());
    out.insert(out.end(), w.grad().begin(), w.grad().end());
    out.push_back(loss.scalar());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Embedding, LookupAndErrors) {
  DTape tape;
  auto table = DTensor::from({3, 2}, {0, 1, 10, 11, 20, 21});
  auto out = tape.embedding_lookup(table, {2, 0});
  EXPECT_EQ(std::vector<double>(out.values().begin(), out.values().end()),
            std::vector<double>({20, 21, 0, 1}));
  EXPECT_THROW(tape.embedding_lookup(table, {3}), std::out_of_range);
}

// ---- finite-difference gradient checks: every op kind, plus composites ----

namespace {

struct NamedCase {
  const char* name;
  gradcheck::Builder build;
  std::vector<DTensor> inputs;
};

std::vector<NamedCase> gradcheck_cases() {
  Rng rng(1234);
  std::vector<NamedCase> cases;

  cases.push_back({"add_broadcast",
                   [](DTape& t, std::vector<DTensor>& in) {
                     return t.sum_all(t.gelu(t.add(in[0], in[1])));
                   },
                   {random_tensor({3, 4}, rng), random_tensor({4}, rng)}});
  cases.push_back({"sub_mul",
                   [](DTape& t, std::vector<DTensor>& in) {
                     return t.sum_all(t.mul(t.sub(in[0], in[1]), in[2]));
                   },
                   {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng), random_tensor({3}, rng)}});
  cases.push_back({"scale",
                   [](DTape& t, std::vector<DTensor>& in) {
                     return t.sum_all(t.scale(t.mul(in[0], in[0]), 0.37));
                   },
                   {random_tensor({5}, rng)}});
  cases.push_back({"matmul_2d",
                   [](DTape& t, std::vector<DTensor>& in) {
                     return t.sum_all(t.gelu(t.matmul(in[0], in[1])));
                   },
                   {random_tensor({3, 4}, rng, -1, 1), random_tensor({4, 2}, rng, -1, 1)}});
  cases.push_back({"matmul_2d_tb",
                   [](DTape& t, std::vector<DTensor>& in) {
                     return t.sum_all(t.matmul(in[0], in[1], true));
                   },
                   {random_tensor({3, 4}, rng, -1, 1), random_tensor({5, 4}, rng, -1, 1)}});
  cases.push_back({"matmul_3d_batched",
                   [](DTape& t, std::vector<DTensor>& in) {
                     return t.sum_all(t.matmul(in[0], in[1], true));
                   },
                   {random_tensor({2, 3, 4}, rng, -1, 1), random_tensor({2, 5, 4}, rng, -1, 1)}});
  cases.push_back({"embedding",
                   [](DTape& t, std::vector<DTensor>& in) {
                     return t.sum_all(t.gelu(t.embedding_lookup(in[0], {1, 0, 1, 3})));
                   },
                   {random_tensor({4, 3}, rng)}});
  cases.push_back({"reshape_transpose",
                   [](DTape& t, std::vector<DTensor>& in) {
                     auto r = t.reshape(in[0], {2, 3, 2});
                     return t.sum_all(t.mul(t.transpose_01(r), t.transpose_01(r)));
                   },
                   {random_tensor({6, 2}, rng)}});
  cases.push_back({"slice_rows",
                   [](DTape& t, std::vector<DTensor>& in) {
                     return t.sum_all(t.gelu(t.slice_rows(in[0], 1, 2)));
                   },
                   {random_tensor({4, 3}, rng)}});
  cases.push_back({"softmax_axis1",
                   [](DTape& t, std::vector<DTensor>& in) {
                     return t.sum_all(t.mul(t.softmax(in[0], 1), in[1]));
                   },
                   {random_tensor({3, 5}, rng), random_tensor({3, 5}, rng)}});
  cases.push_back({"softmax_axis0",
                   [](DTape& t, std::vector<DTensor>& in) {
                     return t.sum_all(t.mul(t.softmax(in[0], 0), in[1]));
                   },
                   {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)}});
  cases.push_back({"softmax_3d_axis2",
                   [](DTape& t, std::vector<DTensor>& in) {
                     return t.sum_all(t.mul(t.softmax(in[0], 2), in[1]));
                   },
                   {random_tensor({2, 3, 4}, rng), random_tensor({2, 3, 4}, rng)}});
  cases.push_back({"layer_norm",
                   [](DTape& t, std::vector<DTensor>& in) {
                     return t.sum_all(t.mul(t.layer_norm(in[0], in[1], in[2], 1e-5), in[3]));
                   },
                   {random_tensor({3, 6}, rng), random_tensor({6}, rng, 0.5, 1.5),
                    random_tensor({6}, rng), random_tensor({3, 6}, rng)}});
  cases.push_back({"gelu",
                   [](DTape& t, std::vector<DTensor>& in) { return t.sum_all(t.gelu(in[0])); },
                   {random_tensor({7}, rng, -3, 3)}});
  cases.push_back({"cross_entropy",
                   [](DTape& t, std::vector<DTensor>& in) {
                     return t.cross_entropy_nll(in[0], {1, 3, 0, 2}, {1, 0, 1, 1});
                   },
                   {random_tensor({4, 5}, rng)}});
  cases.push_back({"kl_divergence_both_sides",
                   [](DTape& t, std::vector<DTensor>& in) {
                     return t.masked_mean(t.kl_divergence(in[0], in[1], 1), {1, 1, 0});
                   },
                   {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)}});
  cases.push_back({"masked_mean",
                   [](DTape& t, std::vector<DTensor>& in) {
                     return t.masked_mean(t.gelu(in[0]), {0, 1, 1, 0, 1});
                   },
                   {random_tensor({5}, rng)}});
  // Composite graphs stacking several op kinds.
  cases.push_back({"composite_mlp3",
                   [](DTape& t, std::vector<DTensor>& in) {
                     auto h1 = t.gelu(t.add(t.matmul(in[0], in[1]), in[2]));
                     auto h2 = t.gelu(t.matmul(h1, in[3]));
                     auto h3 = t.layer_norm(h2, in[4], in[5], 1e-5);
                     return t.cross_entropy_nll(h3, {0, 2}, {1, 1});
                   },
                   {random_tensor({2, 3}, rng), random_tensor({3, 4}, rng, -1, 1),
                    random_tensor({4}, rng), random_tensor({4, 3}, rng, -1, 1),
                    random_tensor({3}, rng, 0.5, 1.5), random_tensor({3}, rng)}});
  cases.push_back({"composite_attention_like",
                   [](DTape& t, std::vector<DTensor>& in) {
                     auto q = t.matmul(in[0], in[1]);
                     auto k = t.matmul(in[0], in[2]);
                     auto v = t.matmul(in[0], in[3]);
                     auto scores = t.scale(t.matmul(q, k, true), 0.5);
                     auto ctx = t.matmul(t.softmax(scores, 1), v);
                     return t.sum_all(t.gelu(ctx));
                   },
                   {random_tensor({3, 4}, rng, -1, 1), random_tensor({4, 4}, rng, -1, 1),
                    random_tensor({4, 4}, rng, -1, 1), random_tensor({4, 4}, rng, -1, 1)}});
  cases.push_back({"composite_two_branch_kl",
                   [](DTape& t, std::vector<DTensor>& in) {
                     auto a = t.matmul(in[0], in[2]);
                     auto b = t.matmul(in[1], in[2]);
                     auto kl = t.kl_divergence(a, b, 1);
                     auto ce = t.cross_entropy_nll(a, {1, 0}, {1, 1});
                     return t.add(ce, t.scale(t.masked_mean(kl, {1, 1}), 0.7));
                   },
                   {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng),
                    random_tensor({3, 4}, rng, -1, 1)}});
  cases.push_back({"composite_embedding_pipeline",
                   [](DTape& t, std::vector<DTensor>& in) {
                     auto x = t.embedding_lookup(in[0], {0, 2, 1});
                     auto h = t.layer_norm(x, in[1], in[2], 1e-5);
                     auto logits = t.matmul(h, in[0], true);
                     return t.cross_entropy_nll(logits, {2, 1, 0}, {1, 1, 1});
                   },
                   {random_tensor({4, 5}, rng), random_tensor({5}, rng, 0.5, 1.5),
                    random_tensor({5}, rng)}});
  return cases;
}

}  // namespace

TEST(GradCheck, AllOpKindsAndComposites) {
  auto cases = gradcheck_cases();
  ASSERT_GE(cases.size(), 20u);
  for (auto& c : cases) {
    auto result = gradcheck::check(c.build, c.inputs);
    EXPECT_TRUE(result.ok) << c.name << ": worst at " << result.worst.where << " analytic "
                           << result.worst.analytic << " numeric " << result.worst.numeric
                           << " rel " << result.worst.rel_error;
  }
}
