#include <gtest/gtest.h>

#include <cmath>

#include "milkit/loss_metrics.hpp"
#include "milkit/mil_head.hpp"
#include "test_support.hpp"

namespace milkit {
namespace {

MilConfig config(Ordering o, Pooling p, std::size_t classes, std::size_t dim, double k = 0.25) {
  MilConfig c;
  c.ordering = o;
  c.pooling = p;
  c.k_fraction = k;
  c.classes = classes;
  c.dim = dim;
  return c;
}

// A head that passes the single feature through: per-patch logit = z.
HeadParams identity_head() { return HeadParams{Tensor::matrix({{1.0}}), Tensor::vector({0.0})}; }

Tensor column_bag(std::vector<double> values) {
  const std::size_t m = values.size();
  return Tensor({m, 1}, std::move(values));
}

TEST(ResolveK, GridPatchCounts) {
  EXPECT_EQ(resolve_k(0.125, 196), 25u);
  EXPECT_EQ(resolve_k(0.25, 196), 49u);
  EXPECT_EQ(resolve_k(0.5, 196), 98u);
  EXPECT_EQ(resolve_k(1.0, 37), 37u);
  EXPECT_EQ(resolve_k(0.01, 10), 1u);
  EXPECT_EQ(resolve_k(0.25, 49), 13u);
  EXPECT_EQ(resolve_k(0.3, 196, Pooling::Max), 1u);
  EXPECT_EQ(resolve_k(0.3, 196, Pooling::Average), 196u);
}

TEST(PredictLabel, Rules) {
  EXPECT_EQ(predict_label({0.5}, 1), 0u);
  EXPECT_EQ(predict_label({0.5000001}, 1), 1u);
  EXPECT_EQ(predict_label({0.3, 0.6, 0.1}, 3), 1u);
  EXPECT_EQ(predict_label({0.4, 0.4, 0.2}, 3), 0u);
  EXPECT_THROW(predict_label({0.4, 0.6}, 3), ValidationError);
}

TEST(Project, TrivialAndArithmetic) {
  Graph g;
  const HeadVars h = record_head(g, identity_head());
  EXPECT_EQ(g.value(project(g, g.leaf(Tensor::matrix({{3}})), h)).item(), 3.0);

  Graph g2;
  const HeadVars h2 = record_head(g2, HeadParams{Tensor::matrix({{1, -1}}), Tensor::vector({0.5})});
  EXPECT_EQ(g2.value(project(g2, g2.leaf(Tensor::matrix({{2, 1}})), h2)).item(), 1.5);
}

TEST(Project, MatchesMatmulOracle) {
  RandomStream rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.uniform_int(0, 9), d = 1 + rng.uniform_int(0, 7), c = 1 + rng.uniform_int(0, 3);
    const HeadParams head{uniform_tensor(rng, {c, d}, -1, 1), uniform_tensor(rng, {c}, -1, 1)};
    const Tensor z = uniform_tensor(rng, {m, d}, -2, 2);
    Graph g;
    const Tensor out = g.value(project(g, g.leaf(z), record_head(g, head)));
    const auto ref = testing::matmul_oracle(head.w, z, head.b);
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t k = 0; k < c; ++k) ASSERT_NEAR(out.at(j, k), ref[j][k], 1e-12);
  }
}

TEST(ForwardI1, BinaryAverageOfSymmetricLogits) {
  const auto p = predict(column_bag({2, -2}), identity_head(), config(Ordering::I1, Pooling::Average, 1, 1));
  EXPECT_NEAR(p.probs[0], 0.5, 1e-15);
}

TEST(ForwardI1, CounterexampleIsNegative) {
  const auto p = predict(column_bag({100, -1, -1, -1}), identity_head(), config(Ordering::I1, Pooling::Average, 1, 1));
  EXPECT_NEAR(p.probs[0], 0.45170606602749634, 1e-15);
  EXPECT_EQ(p.label, 0u);
}

TEST(ForwardI1, MultiClassMatchesBruteForce) {
  RandomStream rng(41);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 2 + rng.uniform_int(0, 8), d = 4;
    const auto cfg = config(Ordering::I1, Pooling::TopK, 3, d, rng.uniform(0.05, 1.0));
    const HeadParams head{uniform_tensor(rng, {3, d}, -1, 1), uniform_tensor(rng, {3}, -1, 1)};
    const Tensor z = uniform_tensor(rng, {m, d}, -2, 2);
    const auto pred = predict(z, head, cfg);

    const auto logits = testing::matmul_oracle(head.w, z, head.b);
    std::vector<std::vector<double>> probs;
    for (const auto& row : logits) probs.push_back(testing::softmax_oracle(row));
    const std::size_t k = resolve_k(cfg, m);
    for (std::size_t c = 0; c < 3; ++c) {
      std::vector<double> col;
      for (const auto& row : probs) col.push_back(row[c]);
      ASSERT_NEAR(pred.probs[c], testing::topk_mean_oracle(col, k), 1e-12);
    }
  }
}

TEST(ForwardI2, BinaryMaxMatchesI1) {
  const auto i2 = predict(column_bag({2, -2}), identity_head(), config(Ordering::I2, Pooling::Max, 1, 1));
  const auto i1 = predict(column_bag({2, -2}), identity_head(), config(Ordering::I1, Pooling::Max, 1, 1));
  EXPECT_NEAR(i2.probs[0], 0.8807970779778824, 1e-15);
  EXPECT_EQ(i2.probs[0], i1.probs[0]);
}

TEST(ForwardI2, CounterexampleIsPositive) {
  const auto p = predict(column_bag({100, -1, -1, -1}), identity_head(), config(Ordering::I2, Pooling::Average, 1, 1));
  EXPECT_NEAR(p.probs[0], 0.99999999997059922, 1e-15);
  EXPECT_EQ(p.label, 1u);
}

TEST(ForwardAll, SingleInstanceBagsAgree) {
  RandomStream rng(51);
  for (std::size_t classes : {1u, 2u, 4u}) {
    for (int trial = 0; trial < 10; ++trial) {
      const HeadParams head{uniform_tensor(rng, {classes, 5}, -1, 1), uniform_tensor(rng, {classes}, -1, 1)};
      const Tensor z = uniform_tensor(rng, {1, 5}, -2, 2);
      const auto a = predict(z, head, config(Ordering::I1, Pooling::TopK, classes, 5));
      const auto b = predict(z, head, config(Ordering::I2, Pooling::TopK, classes, 5));
      const auto e = predict(z, head, config(Ordering::E, Pooling::TopK, classes, 5));
      for (std::size_t c = 0; c < classes; ++c) {
        EXPECT_NEAR(a.probs[c], b.probs[c], 1e-12);
        EXPECT_NEAR(a.probs[c], e.probs[c], 1e-12);
      }
    }
  }
}

TEST(ForwardE, HandEvaluatedMaxPooling) {
  Graph g;
  const HeadVars head = record_head(g, HeadParams{Tensor::matrix({{1, 1}}), Tensor::vector({0})});
  const auto trace = forward_e(g, g.leaf(Tensor::matrix({{1, 0}, {0, 1}})), head, config(Ordering::E, Pooling::Max, 1, 2));
  EXPECT_EQ(g.value(trace.pooled).values(), (std::vector<double>{1, 1}));
  EXPECT_NEAR(g.value(trace.probs).item(), 0.8807970779778824, 1e-15);
  EXPECT_EQ(g.selection(trace.pooled), (std::vector<std::vector<std::size_t>>{{0}, {1}}));
}

TEST(ForwardE, AveragePoolingIsGlobalAveragePoolingThenHead) {
  RandomStream rng(61);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + rng.uniform_int(0, 15), d = 1 + rng.uniform_int(0, 7), c = 3;
    const HeadParams head{uniform_tensor(rng, {c, d}, -1, 1), uniform_tensor(rng, {c}, -1, 1)};
    const Tensor z = uniform_tensor(rng, {m, d}, -2, 2);
    const auto p = predict(z, head, config(Ordering::E, Pooling::Average, c, d));
    Tensor gap({1, d});
    for (std::size_t k = 0; k < d; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += z.at(j, k);
      gap[k] = acc / static_cast<double>(m);
    }
    const auto logits = testing::matmul_oracle(head.w, gap, head.b)[0];
    const auto ref = testing::softmax_oracle(logits);
    for (std::size_t k = 0; k < c; ++k) ASSERT_NEAR(p.probs[k], ref[k], 1e-12);
  }
}

TEST(Forward, WrongOrderingOrShapeIsRejected) {
  Graph g;
  const HeadVars head = record_head(g, identity_head());
  const Var z = g.leaf(column_bag({1, 2}));
  EXPECT_THROW(forward_i1(g, z, head, config(Ordering::I2, Pooling::Max, 1, 1)), ValidationError);
  EXPECT_THROW(forward_e(g, g.leaf(Tensor({2, 3})), head, config(Ordering::E, Pooling::Max, 1, 1)), ValidationError);
  EXPECT_THROW(forward_i2(g, z, head, config(Ordering::I2, Pooling::Max, 2, 1)), ValidationError);
}

struct Case {
  Ordering ordering;
  Pooling pooling;
};

const Case kAllCases[] = {{Ordering::I1, Pooling::Max}, {Ordering::I1, Pooling::TopK}, {Ordering::I1, Pooling::Average},
                          {Ordering::I2, Pooling::Max}, {Ordering::I2, Pooling::TopK}, {Ordering::I2, Pooling::Average},
                          {Ordering::E, Pooling::Max},  {Ordering::E, Pooling::TopK},  {Ordering::E, Pooling::Average}};

TEST(Properties, PermutationInvariance) {
  RandomStream rng(71);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = 1 + rng.uniform_int(0, 15), d = 1 + rng.uniform_int(0, 7);
    const std::size_t classes = rng.uniform_int(0, 1) ? 1 : 3;
    const HeadParams head{uniform_tensor(rng, {classes, d}, -1, 1), uniform_tensor(rng, {classes}, -1, 1)};
    const Tensor z = uniform_tensor(rng, {m, d}, -2, 2);
    const Tensor pz = testing::permute_rows(z, testing::random_permutation(m, rng));
    for (const auto& cs : kAllCases) {
      const auto cfg = config(cs.ordering, cs.pooling, classes, d);
      const auto a = predict(z, head, cfg);
      const auto b = predict(pz, head, cfg);
      for (std::size_t c = 0; c < classes; ++c) ASSERT_NEAR(a.probs[c], b.probs[c], 1e-12);
      ASSERT_EQ(a.label, b.label);
    }
  }
}

TEST(Properties, MulticlassI2AndEProbabilitiesSumToOne) {
  RandomStream rng(81);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = 1 + rng.uniform_int(0, 15), d = 1 + rng.uniform_int(0, 7), c = 2 + rng.uniform_int(0, 4);
    const HeadParams head{uniform_tensor(rng, {c, d}, -1, 1), uniform_tensor(rng, {c}, -1, 1)};
    const Tensor z = uniform_tensor(rng, {m, d}, -2, 2);
    for (auto o : {Ordering::I2, Ordering::E}) {
      const auto p = predict(z, head, config(o, Pooling::TopK, c, d));
      double total = 0.0;
      for (double v : p.probs) {
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
        total += v;
      }
      ASSERT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(Properties, PositiveScalingKeepsI2AndELabels) {
  RandomStream rng(91);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t m = 1 + rng.uniform_int(0, 15), d = 1 + rng.uniform_int(0, 7), c = 3;
    HeadParams head{uniform_tensor(rng, {c, d}, -1, 1), uniform_tensor(rng, {c}, -1, 1)};
    const Tensor z = uniform_tensor(rng, {m, d}, -2, 2);
    const double factor = rng.uniform(0.1, 10.0);
    HeadParams scaled = head;
    for (auto& v : scaled.w.data()) v *= factor;
    for (auto& v : scaled.b.data()) v *= factor;
    for (auto o : {Ordering::I2, Ordering::E}) {
      const auto cfg = config(o, Pooling::TopK, c, d);
      ASSERT_EQ(predict(z, head, cfg).label, predict(z, scaled, cfg).label);
    }
  }
}

TEST(Properties, BinaryMaxPoolingI1AndI2AlwaysAgree) {
  RandomStream rng(101);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t m = 1 + rng.uniform_int(0, 15), d = 1 + rng.uniform_int(0, 7);
    const HeadParams head{uniform_tensor(rng, {1, d}, -1, 1), uniform_tensor(rng, {1}, -1, 1)};
    const Tensor z = uniform_tensor(rng, {m, d}, -2, 2);
    ASSERT_EQ(predict(z, head, config(Ordering::I1, Pooling::Max, 1, d)).label,
              predict(z, head, config(Ordering::I2, Pooling::Max, 1, d)).label);
  }
}

TEST(Properties, EndToEndGradCheckThroughLoss) {
  RandomStream rng(111);
  for (const auto& cs : kAllCases) {
    for (std::size_t classes : {1u, 3u}) {
      const std::size_t m = 6, d = 4;
      const auto cfg = config(cs.ordering, cs.pooling, classes, d);
      const std::size_t label = classes == 1 ? 1 : 2;
      const ClassWeights w{classes == 1 ? std::vector<double>{0.7, 1.3} : std::vector<double>{0.5, 1.0, 2.0}};
      const ScalarFn f = [&](Graph& g, std::span<const Var> p) {
        const auto trace = forward(g, p[0], HeadVars{p[1], p[2]}, cfg);
        return weighted_ce(g, trace.probs, label, w);
      };
      const double err = grad_check(f, {uniform_tensor(rng, {m, d}, -1, 1), uniform_tensor(rng, {classes, d}, -1, 1),
                                        uniform_tensor(rng, {classes}, -1, 1)});
      EXPECT_LE(err, 1e-6) << to_string(cs.ordering) << "/" << to_string(cs.pooling) << " C=" << classes;
    }
  }
}

}  // namespace
}  // namespace milkit
