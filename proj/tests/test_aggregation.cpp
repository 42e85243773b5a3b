#include <cmath>

#include "doctest.h"
#include "mpsn/aggregation.hpp"
#include "mpsn/errors.hpp"
#include "test_util.hpp"

using namespace mpsn;
using mpsn::testing::random_tensor;

namespace {

FeatureMap fm(Tensor t, std::size_t stride = 16) { return FeatureMap{std::move(t), stride}; }

FeatureMap scalar(double v) { return fm(Tensor({1, 1, 1}, std::vector<double>{v})); }

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("sfa") {
  std::mt19937_64 rng(41);
  const FeatureMap a = fm(random_tensor({8, 4, 4}, rng), 4);
  CHECK(sfa(a, fm(Tensor({8, 4, 4}), 4)).values == a.values);
  const FeatureMap x = fm(Tensor({1, 1, 2}, std::vector<double>{1, 2}), 4);
  const FeatureMap y = fm(Tensor({1, 1, 2}, std::vector<double>{3, 4}), 4);
  CHECK(sfa(x, y).values == Tensor({1, 1, 2}, std::vector<double>{4, 6}));
  const FeatureMap b = fm(random_tensor({8, 4, 4}, rng), 4);
  const FeatureMap s = sfa(a, b);
  for (std::size_t i = 0; i < a.values.size(); ++i) CHECK(s.values[i] == a.values[i] + b.values[i]);
  CHECK_THROWS_AS(sfa(a, fm(Tensor({8, 4, 5}), 4)), DimensionError);
  CHECK_THROWS(sfa(a, fm(b.values, 16)));
}

TEST_CASE("dfa forward") {
  const AggregationParams mask_only{1.0, 0.0};
  std::mt19937_64 rng(42);
  const FeatureMap hbn = fm(random_tensor({8, 4, 4}, rng));
  CHECK(dfa(hbn, fm(Tensor({8, 4, 4})), mask_only).values ==
        fm([&] {
          Tensor t = hbn.values;
          for (double& v : t.values()) v *= 0.5;
          return t;
        }()).values);
  CHECK(dfa(scalar(2.0), scalar(0.0), AggregationParams{1.0, 1.0}).values[0] == 1.0);

  const FeatureMap hbdn = fm(random_tensor({8, 4, 4}, rng));
  const AggregationParams p{0.7, 0.3};
  const FeatureMap out = dfa(hbn, hbdn, p);
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    const double expect = 0.7 * hbn.values[i] * sig(hbdn.values[i]) + 0.3 * hbdn.values[i];
    CHECK(out.values[i] == doctest::Approx(expect).epsilon(1e-15));
    CHECK(std::abs(out.values[i]) <= 0.7 * std::abs(hbn.values[i]) + 0.3 * std::abs(hbdn.values[i]));
  }
  CHECK_THROWS_AS(dfa(hbn, fm(Tensor({8, 4, 3})), p), DimensionError);
}

TEST_CASE("two_frames degenerate form") {
  std::mt19937_64 rng(43);
  const FeatureMap a = fm(random_tensor({4, 3, 3}, rng));
  const FeatureMap b = fm(random_tensor({4, 3, 3}, rng));
  CHECK(dfa_two_frames_degenerate(fm(Tensor({4, 3, 3})), b).values == b.values);
  CHECK(dfa_two_frames_degenerate(scalar(1.0), scalar(2.0)).values[0] == 3.0);
  // Constant-one mask with alpha = beta = 1 is exactly the degenerate sum.
  const FeatureMap masked =
      dfa_with_mask(a, b, AggregationParams{1.0, 1.0}, [](double) { return 1.0; });
  CHECK(masked.values == dfa_two_frames_degenerate(a, b).values);
  CHECK_THROWS_AS(dfa_two_frames_degenerate(a, fm(Tensor({4, 3, 4}))), DimensionError);
}

TEST_CASE("dfa analytic gradients") {
  const FeatureMap one = scalar(1.0);
  CHECK(dfa_grad_hbdn(one, scalar(2.0), scalar(0.0), {1.0, 0.0}).values[0] == 0.5);
  CHECK(dfa_grad_hbdn(one, scalar(2.0), scalar(3.7), {0.0, 1.0}).values[0] == 1.0);
  CHECK(dfa_grad_hbn(one, scalar(0.0), {1.0, 1.0}).values[0] == 0.5);
  CHECK(dfa_grad_hbn(one, scalar(0.4), {0.0, 1.0}).values[0] == 0.0);

  // Central differences of sum(upstream * dfa) on random maps.
  std::mt19937_64 rng(44);
  const double h = 1e-5;
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const AggregationParams p{std::uniform_real_distribution<double>(-2, 2)(rng),
                              std::uniform_real_distribution<double>(-2, 2)(rng)};
    FeatureMap hbn = fm(random_tensor({2, 3, 4}, rng, -3, 3));
    FeatureMap hbdn = fm(random_tensor({2, 3, 4}, rng, -3, 3));
    const FeatureMap up = fm(random_tensor({2, 3, 4}, rng));
    const FeatureMap g_bdn = dfa_grad_hbdn(up, hbn, hbdn, p);
    const FeatureMap g_bn = dfa_grad_hbn(up, hbdn, p);
    auto loss = [&] {
      const FeatureMap o = dfa(hbn, hbdn, p);
      double s = 0.0;
      for (std::size_t i = 0; i < o.values.size(); ++i) s += o.values[i] * up.values[i];
      return s;
    };
    for (std::size_t i = 0; i < hbn.values.size(); ++i) {
      for (auto [map, grad] : {std::pair{&hbn, &g_bn}, std::pair{&hbdn, &g_bdn}}) {
        const double x0 = map->values[i];
        map->values[i] = x0 + h;
        const double lp = loss();
        map->values[i] = x0 - h;
        const double lm = loss();
        map->values[i] = x0;
        const double num = (lp - lm) / (2 * h);
        const double err = std::abs(grad->values[i] - num);
        worst = std::max(worst, std::abs(num) > 1e-2 ? err / std::abs(num) : err);
      }
    }
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("graph dfa matches the analytic form") {
  std::mt19937_64 rng(45);
  const Tensor hbn = random_tensor({2, 3, 4}, rng);
  const Tensor hbdn = random_tensor({2, 3, 4}, rng);
  const Tensor up = random_tensor({2, 3, 4}, rng);
  const AggregationParams p{0.7, 0.3};
  Graph g(true);
  const Var a = g.input(hbn), b = g.input(hbdn);
  const Var out = dfa(g, a, b, p);
  CHECK(mpsn::testing::max_abs_diff(g.value(out), dfa(fm(hbn), fm(hbdn), p).values) < 1e-15);
  g.backward(mpsn::testing::dot(g, out, up));
  CHECK(mpsn::testing::max_abs_diff(g.grad(b), dfa_grad_hbdn(fm(up), fm(hbn), fm(hbdn), p).values) <
        1e-14);
  CHECK(mpsn::testing::max_abs_diff(g.grad(a), dfa_grad_hbn(fm(up), fm(hbdn), p).values) < 1e-14);
}

TEST_CASE("monotone masking") {
  std::mt19937_64 rng(46);
  const FeatureMap hbn = fm(random_tensor({2, 3, 3}, rng, 0.0, 2.0));
  FeatureMap hbdn = fm(random_tensor({2, 3, 3}, rng));
  const AggregationParams p{0.8, 0.4};
  const FeatureMap before = dfa(hbn, hbdn, p);
  for (double& v : hbdn.values.values()) v += 0.3;
  const FeatureMap after = dfa(hbn, hbdn, p);
  for (std::size_t i = 0; i < before.values.size(); ++i) CHECK(after.values[i] >= before.values[i]);
}
