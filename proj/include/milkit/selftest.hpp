#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "milkit/autodiff.hpp"
#include "milkit/loss_metrics.hpp"
#include "milkit/mil_head.hpp"
#include "milkit/rng.hpp"
#include "milkit/textio.hpp"

namespace milkit {

struct PropertyResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

namespace selftest_detail {

constexpr Ordering kOrderings[] = {Ordering::I1, Ordering::I2, Ordering::E};
constexpr Pooling kPoolings[] = {Pooling::Max, Pooling::TopK, Pooling::Average};

inline MilConfig random_config(RandomStream& rng, Ordering o, Pooling p, std::size_t classes, std::size_t dim) {
  MilConfig c;
  c.ordering = o;
  c.pooling = p;
  c.k_fraction = rng.uniform(0.05, 1.0);
  c.classes = classes;
  c.dim = dim;
  return c;
}

inline HeadParams random_head(RandomStream& rng, const MilConfig& c, double scale = 1.0) {
  return HeadParams{uniform_tensor(rng, {c.classes, c.dim}, -scale, scale), uniform_tensor(rng, {c.classes}, -scale, scale)};
}

inline std::vector<std::size_t> permutation(std::size_t n, RandomStream& rng) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  shuffle(p, rng);
  return p;
}

inline Tensor permute_rows(const Tensor& t, const std::vector<std::size_t>& perm) {
  Tensor out(t.shape());
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) out.at(r, c) = t.at(perm[r], c);
  return out;
}

}  // namespace selftest_detail

/// Loss of one bag through the head, as a function of (Z, W, b).
inline ScalarFn head_loss_fn(const MilConfig& config, std::size_t label) {
  return [config, label](Graph& g, std::span<const Var> v) {
    const HeadTrace t = forward(g, v[0], HeadVars{v[1], v[2]}, config);
    return weighted_ce(g, t.probs, label, uniform_weights(config.label_count()));
  };
}

inline PropertyResult check_gradients(std::uint64_t seed, std::size_t cases) {
  using namespace selftest_detail;
  RandomStream rng(seed);
  double worst = 0.0;
  for (std::size_t i = 0; i < cases; ++i) {
    const Ordering o = kOrderings[i % 3];
    const Pooling p = kPoolings[(i / 3) % 3];
    const std::size_t classes = (i / 9) % 2 ? 3 : 1;
    const auto m = static_cast<std::size_t>(rng.uniform_int(1, 16));
    const auto d = static_cast<std::size_t>(rng.uniform_int(1, 8));
    const MilConfig c = random_config(rng, o, p, classes, d);
    const HeadParams h = random_head(rng, c);
    const Tensor z = uniform_tensor(rng, {m, d}, -1, 1);
    const auto label = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(c.label_count()) - 1));
    worst = std::max(worst, grad_check(head_loss_fn(c, label), {z, h.w, h.b}));
  }
  return {"gradient_check", worst <= 1e-6,
          std::to_string(cases) + " configurations, max relative error " + format_double(worst)};
}

inline PropertyResult check_pooling_identities(std::uint64_t seed) {
  RandomStream rng(seed);
  double mean_err = 0.0;
  bool max_exact = true;
  for (int trial = 0; trial < 50; ++trial) {
    const auto m = static_cast<std::size_t>(rng.uniform_int(1, 20));
    const auto d = static_cast<std::size_t>(rng.uniform_int(1, 6));
    const Tensor x = uniform_tensor(rng, {m, d}, -5, 5);
    Graph g;
    const Var a = g.leaf(x);
    const Tensor top1 = g.value(topk_mean_columns(g, a, 1));
    const Tensor all = g.value(topk_mean_columns(g, a, m));
    for (std::size_t c = 0; c < d; ++c) {
      double mx = x.at(0, c);
      long double total = 0.0L;
      for (std::size_t r = 0; r < m; ++r) {
        mx = std::max(mx, x.at(r, c));
        total += x.at(r, c);
      }
      max_exact = max_exact && top1[c] == mx;
      mean_err = std::max(mean_err, std::abs(all[c] - static_cast<double>(total / m)));
    }
  }
  const bool counts = resolve_k(0.125, 196) == 25 && resolve_k(0.25, 196) == 49 && resolve_k(0.5, 196) == 98;
  return {"pooling_identities", max_exact && mean_err <= 1e-12 && counts,
          std::string("k=1 max ") + (max_exact ? "exact" : "inexact") + ", k=M mean error " + format_double(mean_err) +
              ", 196-patch counts " + (counts ? "25/49/98" : "wrong")};
}

inline PropertyResult check_permutation_invariance(std::uint64_t seed, std::size_t bags) {
  using namespace selftest_detail;
  RandomStream rng(seed);
  double worst = 0.0;
  bool labels_agree = true;
  for (std::size_t i = 0; i < bags; ++i) {
    const MilConfig c = random_config(rng, kOrderings[i % 3], kPoolings[(i / 3) % 3], i % 2 ? 3 : 1, 4);
    const HeadParams h = random_head(rng, c);
    const auto m = static_cast<std::size_t>(rng.uniform_int(2, 16));
    const Tensor z = uniform_tensor(rng, {m, c.dim}, -2, 2);
    const Prediction a = predict(z, h, c);
    const Prediction b = predict(permute_rows(z, permutation(m, rng)), h, c);
    for (std::size_t k = 0; k < a.probs.size(); ++k) worst = std::max(worst, std::abs(a.probs[k] - b.probs[k]));
    labels_agree = labels_agree && a.label == b.label;
  }
  return {"permutation_invariance", worst <= 1e-12 && labels_agree,
          std::to_string(bags) + " bags, max probability change " + format_double(worst)};
}

inline PropertyResult check_gap_equivalence(std::uint64_t seed, std::size_t cases) {
  using namespace selftest_detail;
  RandomStream rng(seed);
  double worst = 0.0;
  for (std::size_t i = 0; i < cases; ++i) {
    const std::size_t classes = i % 2 ? 3 : 1;
    const MilConfig c = random_config(rng, Ordering::E, Pooling::Average, classes, 5);
    const HeadParams h = random_head(rng, c);
    const auto m = static_cast<std::size_t>(rng.uniform_int(1, 16));
    const Tensor z = uniform_tensor(rng, {m, c.dim}, -2, 2);
    std::vector<double> gap(c.dim, 0.0);
    for (std::size_t d = 0; d < c.dim; ++d) {
      for (std::size_t j = 0; j < m; ++j) gap[d] += z.at(j, d);
      gap[d] /= static_cast<double>(m);
    }
    std::vector<double> logits(classes);
    for (std::size_t k = 0; k < classes; ++k) {
      logits[k] = h.b[k];
      for (std::size_t d = 0; d < c.dim; ++d) logits[k] += h.w.at(k, d) * gap[d];
    }
    std::vector<double> ref(classes);
    if (classes == 1) {
      ref[0] = 1.0 / (1.0 + std::exp(-logits[0]));
    } else {
      const double top = *std::max_element(logits.begin(), logits.end());
      double total = 0.0;
      for (std::size_t k = 0; k < classes; ++k) total += ref[k] = std::exp(logits[k] - top);
      for (auto& v : ref) v /= total;
    }
    const Prediction p = predict(z, h, c);
    for (std::size_t k = 0; k < classes; ++k) worst = std::max(worst, std::abs(p.probs[k] - ref[k]));
  }
  return {"embedding_average_equals_gap", worst <= 1e-12,
          std::to_string(cases) + " cases, max deviation " + format_double(worst)};
}

inline PropertyResult check_binary_max_agreement(std::uint64_t seed, std::size_t draws) {
  using namespace selftest_detail;
  RandomStream rng(seed);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < draws; ++i) {
    MilConfig c = random_config(rng, Ordering::I1, Pooling::Max, 1, 4);
    const HeadParams h = random_head(rng, c, 2.0);
    const auto m = static_cast<std::size_t>(rng.uniform_int(1, 16));
    const Tensor z = uniform_tensor(rng, {m, c.dim}, -2, 2);
    const std::size_t i1 = predict(z, h, c).label;
    c.ordering = Ordering::I2;
    agree += i1 == predict(z, h, c).label;
  }
  return {"binary_max_i1_i2_agreement", agree == draws,
          std::to_string(agree) + "/" + std::to_string(draws) + " labels agree"};
}

/// Per-patch logits [100, -1, -1, -1] under average pooling: pooling logits
/// gives a positive bag, pooling probabilities a negative one.
inline PropertyResult check_average_counterexample() {
  MilConfig c;
  c.pooling = Pooling::Average;
  c.classes = 1;
  c.dim = 1;
  const HeadParams h{Tensor({1, 1}, 1.0), Tensor({1}, 0.0)};
  const Tensor z({4, 1}, std::vector<double>{100.0, -1.0, -1.0, -1.0});
  c.ordering = Ordering::I1;
  const Prediction i1 = predict(z, h, c);
  c.ordering = Ordering::I2;
  const Prediction i2 = predict(z, h, c);
  return {"binary_average_counterexample", i1.label == 0 && i2.label == 1,
          "I1 p=" + format_double(i1.probs[0]) + " label " + std::to_string(i1.label) + ", I2 p=" +
              format_double(i2.probs[0]) + " label " + std::to_string(i2.label)};
}

inline std::vector<PropertyResult> run_selftest(std::uint64_t seed = 0) {
  return {check_gradients(seed, 36),
          check_pooling_identities(seed + 1),
          check_permutation_invariance(seed + 2, 180),
          check_gap_equivalence(seed + 3, 50),
          check_binary_max_agreement(seed + 4, 500),
          check_average_counterexample()};
}

}  // namespace milkit
