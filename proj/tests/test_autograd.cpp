#include "doctest.h"
#include "mpsn/autograd.hpp"
#include "mpsn/errors.hpp"
#include "mpsn/layers.hpp"
#include "test_util.hpp"

using namespace mpsn;
using mpsn::testing::dot;
using mpsn::testing::gradient_error;
using mpsn::testing::random_tensor;

namespace {

constexpr double kTol = 1e-6;

}  // namespace

TEST_CASE("element-wise op gradients") {
  std::mt19937_64 rng(11);
  const Tensor a = random_tensor({2, 3, 4}, rng);
  const Tensor b = random_tensor({2, 3, 4}, rng);
  const Tensor probe = random_tensor({2, 3, 4}, rng);

  SUBCASE("add") {
    CHECK(gradient_error({a, b}, [&](Graph& g, const std::vector<Var>& v) {
            return dot(g, ops::add(g, v[0], v[1]), probe);
          }) < kTol);
  }
  SUBCASE("sub") {
    CHECK(gradient_error({a, b}, [&](Graph& g, const std::vector<Var>& v) {
            return dot(g, ops::sub(g, v[0], v[1]), probe);
          }) < kTol);
  }
  SUBCASE("mul") {
    CHECK(gradient_error({a, b}, [&](Graph& g, const std::vector<Var>& v) {
            return dot(g, ops::mul(g, v[0], v[1]), probe);
          }) < kTol);
  }
  SUBCASE("scale") {
    CHECK(gradient_error({a}, [&](Graph& g, const std::vector<Var>& v) {
            return dot(g, ops::scale(g, v[0], -2.5), probe);
          }) < kTol);
  }
  SUBCASE("sigmoid") {
    CHECK(gradient_error({a}, [&](Graph& g, const std::vector<Var>& v) {
            return dot(g, ops::sigmoid(g, v[0]), probe);
          }) < kTol);
  }
  SUBCASE("relu, relu6 and abs away from their kinks") {
    Tensor x = a;
    for (double& e : x.values()) e = e * 8.0 + (e > 0 ? 0.1 : -0.1);  // spans the relu6 cap
    CHECK(gradient_error({x}, [&](Graph& g, const std::vector<Var>& v) {
            return dot(g, ops::relu(g, v[0]), probe);
          }) < kTol);
    CHECK(gradient_error({x}, [&](Graph& g, const std::vector<Var>& v) {
            return dot(g, ops::relu6(g, v[0]), probe);
          }) < kTol);
    CHECK(gradient_error({x}, [&](Graph& g, const std::vector<Var>& v) {
            return dot(g, ops::abs(g, v[0]), probe);
          }) < kTol);
  }
}

TEST_CASE("abs has zero subgradient at the kink") {
  Graph g(true);
  const Var x = g.input(Tensor({3}, std::vector<double>{-1.0, 0.0, 2.0}));
  g.backward(dot(g, ops::abs(g, x), Tensor({3}, 1.0)));
  CHECK(g.grad(x)[0] == -1.0);
  CHECK(g.grad(x)[1] == 0.0);
  CHECK(g.grad(x)[2] == 1.0);
}

TEST_CASE("conv2d gradients") {
  std::mt19937_64 rng(12);
  SUBCASE("dense, strided, with bias") {
    const Tensor x = random_tensor({3, 7, 6}, rng);
    const Tensor w = random_tensor({4, 3, 3, 3}, rng);
    const Tensor b = random_tensor({4}, rng);
    const Tensor probe = random_tensor({4, 4, 3}, rng);
    CHECK(gradient_error({x, w, b}, [&](Graph& g, const std::vector<Var>& v) {
            return dot(g, ops::conv2d(g, v[0], v[1], v[2], {2, 1, 1}), probe);
          }) < kTol);
  }
  SUBCASE("depthwise") {
    const Tensor x = random_tensor({4, 6, 6}, rng);
    const Tensor w = random_tensor({4, 1, 3, 3}, rng);
    const Tensor probe = random_tensor({4, 6, 6}, rng);
    CHECK(gradient_error({x, w}, [&](Graph& g, const std::vector<Var>& v) {
            return dot(g, ops::conv2d(g, v[0], v[1], {1, 1, 4}), probe);
          }) < kTol);
  }
}

TEST_CASE("max_pool and padding gradients") {
  std::mt19937_64 rng(13);
  const Tensor x = random_tensor({2, 6, 5}, rng);
  SUBCASE("max_pool") {
    const Tensor probe = random_tensor({2, 4, 3}, rng);
    CHECK(gradient_error({x}, [&](Graph& g, const std::vector<Var>& v) {
            return dot(g, ops::max_pool(g, v[0], 2, 2, 1), probe);
          }) < kTol);
  }
  SUBCASE("pad_bottom_right") {
    const Tensor probe = random_tensor({2, 16, 16}, rng);
    CHECK(gradient_error({x}, [&](Graph& g, const std::vector<Var>& v) {
            return dot(g, ops::pad_bottom_right(g, v[0], 16, 16), probe);
          }) < kTol);
    Graph g;
    const Tensor& padded = g.value(ops::pad_bottom_right(g, g.constant(x), 16, 16));
    CHECK(padded.at(1, 5, 4) == x.at(1, 5, 4));
    CHECK(padded.at(1, 6, 4) == 0.0);
    CHECK(padded.at(0, 0, 15) == 0.0);
  }
}

TEST_CASE("normalization gradients and statistics") {
  std::mt19937_64 rng(14);
  const Tensor x = random_tensor({3, 4, 5}, rng);
  const Tensor gamma = random_tensor({3}, rng, 0.5, 1.5);
  const Tensor beta = random_tensor({3}, rng);
  const Tensor probe = random_tensor({3, 4, 5}, rng);
  for (auto kind : {ops::NormKind::batch, ops::NormKind::instance}) {
    ops::NormState state;
    state.kind = kind;
    state.running_mean = Tensor({3}, 0.0);
    state.running_var = Tensor({3}, 1.0);
    CHECK(gradient_error(
              {x, gamma, beta},
              [&](Graph& g, const std::vector<Var>& v) {
                return dot(g, ops::normalize(g, v[0], v[1], v[2], state), probe);
              },
              1e-5) < 1e-5);
  }

  // Training output has zero mean and unit (biased) variance per channel.
  ops::NormState state;
  state.running_mean = Tensor({3}, 0.0);
  state.running_var = Tensor({3}, 1.0);
  Graph g(true);
  const Tensor& y = g.value(
      ops::normalize(g, g.constant(x), g.constant(Tensor({3}, 1.0)), g.constant(Tensor({3})), state));
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < 20; ++i) mean += y[c * 20 + i] / 20.0;
    for (std::size_t i = 0; i < 20; ++i) var += (y[c * 20 + i] - mean) * (y[c * 20 + i] - mean) / 20.0;
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }
  CHECK(state.running_mean[0] != 0.0);  // running estimates moved
}

TEST_CASE("backward needs a scalar root and accumulates parameter grads") {
  Parameter p;
  p.value = Tensor({2}, std::vector<double>{1.0, 2.0});
  Graph g(true);
  const Var v = g.parameter(p);
  CHECK_THROWS_AS(g.backward(v), ContractError);
  g.backward(dot(g, ops::scale(g, v, 3.0), Tensor({2}, 1.0)));
  CHECK(p.grad[0] == 3.0);
  Graph g2(true);
  g2.backward(dot(g2, g2.parameter(p), Tensor({2}, 1.0)));
  CHECK(p.grad[1] == 4.0);
  p.zero_grad();
  CHECK(p.grad[0] == 0.0);

  // parameter_grads=false treats parameters as constants.
  Graph frozen(false, false);
  frozen.backward(dot(frozen, frozen.parameter(p), Tensor({2}, 1.0)));
  CHECK(p.grad[0] == 0.0);
}

TEST_CASE("layers") {
  Rng rng(3);
  SUBCASE("conv init is He-normal") {
    Conv2d conv("c", 64, 64, 3, 1, 1, rng);
    std::vector<Parameter*> ps;
    conv.collect_parameters(ps);
    REQUIRE(ps.size() == 2);
    double sq = 0.0;
    for (double w : ps[0]->value.values()) sq += w * w;
    const double var = sq / static_cast<double>(ps[0]->value.size());
    CHECK(var == doctest::Approx(2.0 / (64 * 9)).epsilon(0.05));
  }
  SUBCASE("residual blocks keep shapes and strides") {
    BasicBlock block("b", 8, 16, 2, ops::NormKind::batch, rng);
    InvertedResidual ir("r", 8, 8, 1, 6, ops::NormKind::batch, rng);
    Graph g;
    const Var x = g.constant(Tensor({8, 8, 8}, 0.1));
    CHECK(g.value(block.forward(g, x)).shape() == Shape{16, 4, 4});
    CHECK(g.value(ir.forward(g, x)).shape() == Shape{8, 8, 8});
    CHECK(block.stride() == 2);
  }
}
