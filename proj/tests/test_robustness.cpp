#include <cmath>

#include "doctest.h"
#include "mpsn/errors.hpp"
#include "mpsn/robustness.hpp"
#include "mpsn/synthetic.hpp"
#include "test_util.hpp"

using namespace mpsn;
using mpsn::testing::random_tensor;

namespace {

CamHeatmap heat(std::vector<double> v, std::size_t h, std::size_t w) {
  return CamHeatmap{Tensor({h, w}, std::move(v)), "test"};
}

/// Direct transcription of the NI definition with a single flat loop per cell.
double ni_oracle(const std::vector<CamHeatmap>& clean, const std::vector<CamHeatmap>& adv) {
  const std::size_t cells = clean[0].values.size();
  double total = 0.0;
  for (std::size_t i = 0; i < cells; ++i) {
    std::vector<double> all;
    double mc = 0, ma = 0;
    for (const auto& c : clean) {
      mc += c.values[i] / double(clean.size());
      all.push_back(c.values[i]);
    }
    for (const auto& a : adv) {
      ma += a.values[i] / double(adv.size());
      all.push_back(a.values[i]);
    }
    double mean = 0;
    for (double v : all) mean += v / double(all.size());
    double var = 0;
    for (double v : all) var += (v - mean) * (v - mean) / double(all.size());
    if (std::sqrt(var) <= 1e-12) continue;
    total += (ma - mc) * (ma - mc) / var;
  }
  return std::sqrt(total);
}

bool in_intervals(const std::vector<Interval>& iv, double e) {
  for (const auto& i : iv) {
    if (e >= i.lo && e <= i.hi) return true;
  }
  return false;
}

std::vector<FrameSample> synth_samples(std::size_t n) {
  SynthConfig cfg;
  cfg.n_sequences = 2;
  cfg.frames_per_seq = 6;
  cfg.height = 64;
  cfg.width = 64;
  cfg.min_size = 14;
  cfg.max_size = 18;
  auto s = make_samples(synth_sequences(cfg, Split::train));
  s.resize(std::min(n, s.size()));
  return s;
}

}  // namespace

TEST_CASE("cam heatmap") {
  std::mt19937_64 rng(71);
  const Tensor one = random_tensor({1, 3, 2}, rng);
  const CamHeatmap h1 = cam_heatmap(FeatureMap{one, 16}, "x");
  CHECK(h1.source_layer == "x");
  CHECK(h1.values.shape() == Shape{3, 2});
  double lo = 1e9, hi = -1e9;
  for (double v : one.values()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  for (std::size_t i = 0; i < 6; ++i) CHECK(h1.values[i] == doctest::Approx((one[i] - lo) / (hi - lo)));

  const CamHeatmap flat = cam_heatmap(FeatureMap{Tensor({5, 2, 2}, 3.0), 16});
  for (double v : flat.values.values()) CHECK(v == 0.5);

  const Tensor t = random_tensor({4, 2, 2}, rng);
  std::vector<double> mean(4, 0.0);
  for (std::size_t c = 0; c < 4; ++c) {
    for (std::size_t i = 0; i < 4; ++i) mean[i] += t[c * 4 + i] / 4.0;
  }
  const double mn = *std::min_element(mean.begin(), mean.end());
  const double mx = *std::max_element(mean.begin(), mean.end());
  const CamHeatmap h = cam_heatmap(FeatureMap{t, 16});
  for (std::size_t i = 0; i < 4; ++i) CHECK(h.values[i] == doctest::Approx((mean[i] - mn) / (mx - mn)));
}

TEST_CASE("ni") {
  CHECK(ni({heat({0.0}, 1, 1)}, {heat({1.0}, 1, 1)}) == doctest::Approx(2.0).epsilon(1e-15));
  std::mt19937_64 rng(72);
  std::vector<CamHeatmap> a, b;
  for (int i = 0; i < 6; ++i) {
    a.push_back(CamHeatmap{random_tensor({3, 4}, rng, 0, 1), ""});
    b.push_back(CamHeatmap{random_tensor({3, 4}, rng, 0, 1), ""});
  }
  CHECK(ni(a, a) == 0.0);
  CHECK(std::abs(ni(a, b) - ni_oracle(a, b)) < 1e-12);
  CHECK(std::abs(ni(a, b) - ni(b, a)) < 1e-12);

  // Same permutation of cells in every heatmap leaves NI unchanged.
  auto permute = [](std::vector<CamHeatmap> s) {
    for (auto& c : s) std::reverse(c.values.values().begin(), c.values.values().end());
    return s;
  };
  CHECK(std::abs(ni(permute(a), permute(b)) - ni(a, b)) < 1e-12);

  // A cell that is constant across both sets contributes nothing.
  auto with_const = [](std::vector<CamHeatmap> s) {
    for (auto& c : s) c.values[0] = 0.25;
    return s;
  };
  CHECK(std::isfinite(ni(with_const(a), with_const(b))));

  CHECK_THROWS_AS(ni({}, {}), ContractError);
  CHECK_THROWS_AS(ni(a, {b[0]}), ContractError);
  CHECK_THROWS_AS(ni({heat({0.0}, 1, 1)}, {heat({0.0, 1.0}, 1, 2)}), ContractError);
}

TEST_CASE("epsilon threshold") {
  CHECK(epsilon_threshold(1, 0, 2, 0) == std::vector<Interval>{{0.0, 1.0}});
  CHECK(epsilon_threshold(2, -1, 1, 0) == std::vector<Interval>{{1.0, 1.0}});
  CHECK(epsilon_threshold(3, 0, 1, 0).empty());

  std::mt19937_64 rng(73);
  std::uniform_real_distribution<double> c(-2.0, 2.0);
  for (int trial = 0; trial < 300; ++trial) {
    const double j = c(rng), k = c(rng), l = c(rng), m = c(rng);
    const auto iv = epsilon_threshold(j, k, l, m);
    CHECK(iv.size() <= 2);
    for (int i = 0; i <= 10000; ++i) {
      const double e = i / 10000.0;
      const double gap = std::abs(l + e * m) - std::abs(j + e * k);
      if (std::abs(gap) < 1e-9) continue;  // boundary points
      if ((gap >= 0) != in_intervals(iv, e)) {
        FAIL("grid mismatch at eps " << e << " for " << j << " " << k << " " << l << " " << m);
      }
    }
  }
}

TEST_CASE("quadratic fit") {
  const std::vector<double> eps{0.0, 0.02, 0.05, 0.1, 0.2};
  std::vector<double> y;
  for (double e : eps) y.push_back(1.5 * e - 4.0 * e * e);
  const auto [a, b] = fit_quadratic(eps, y);
  CHECK(a == doctest::Approx(1.5).epsilon(1e-10));
  CHECK(b == doctest::Approx(-4.0).epsilon(1e-10));
  const auto [a1, b1] = fit_quadratic({0.0, 0.1}, {0.0, 0.3});
  CHECK(a1 == doctest::Approx(3.0));
  CHECK(b1 == 0.0);
  CHECK_THROWS(fit_quadratic({0.1}, {}));
}

TEST_CASE("fgsm") {
  ModelBundle m = build_backbone(make_split_spec(Arch::tiny), InitPolicy{4, false});
  const HeadLossConfig loss;
  const auto samples = synth_samples(6);
  const FrameSample& s = samples[0];

  const FgsmResult zero = fgsm_perturb(m, s, loss, 0.0, false);
  CHECK(zero.adversarial.current.pixels == s.current.pixels);
  CHECK(zero.adversarial.previous.pixels == s.previous.pixels);

  const double eps = 0.03;
  const FgsmResult r = fgsm_perturb(m, s, loss, eps, false);
  CHECK_FALSE(r.zero_gradient);
  std::size_t nonzero = 0;
  for (std::size_t i = 0; i < s.current.pixels.size(); ++i) {
    const double d = std::abs(r.adversarial.current.pixels[i] - s.current.pixels[i]);
    if (r.grad_current[i] != 0.0) {
      ++nonzero;
      CHECK(std::abs(d - eps) < 1e-15);
    } else {
      CHECK(d == 0.0);
    }
  }
  CHECK(nonzero > 0);
  CHECK(diff_bound_check(s, r.adversarial, eps, r.grad_current, r.grad_previous).ok);

  const FgsmResult clamped = fgsm_perturb(m, s, loss, 0.5, true);
  for (double v : clamped.adversarial.current.pixels.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  // Single-frame models ignore the previous frame entirely.
  ModelBundle sf = build_backbone(make_split_spec(Arch::tiny), InitPolicy{4, false},
                                  Variant::single_frame);
  const FgsmResult rs = fgsm_perturb(sf, s, loss, eps, false);
  for (double v : rs.grad_previous.values()) CHECK(v == 0.0);
  CHECK(rs.adversarial.previous.pixels == s.previous.pixels);

  CHECK_THROWS_AS(fgsm_perturb(m, s, loss, 1.5), ConfigError);
}

TEST_CASE("diff bound scalar cases") {
  const double eps = 0.1;
  auto make = [](double cur, double prev) {
    return FrameSample{Frame{Tensor({1, 1, 1}, std::vector<double>{cur}), 1},
                       Frame{Tensor({1, 1, 1}, std::vector<double>{prev}), 0}, {}, "s"};
  };
  const Tensor pos({1, 1, 1}, std::vector<double>{1.0});
  const Tensor neg({1, 1, 1}, std::vector<double>{-1.0});
  // Equal signs: t = 0, the difference image must not change.
  const FrameSample s = make(0.6, 0.3);
  CHECK(diff_bound_check(s, make(0.7, 0.4), eps, pos, pos).ok);
  CHECK_FALSE(diff_bound_check(s, make(0.7, 0.3), eps, pos, pos).ok);
  // Opposite signs: t = 2, a change of 2 eps is attained when the sign of the difference holds.
  const BoundCheck opp = diff_bound_check(s, make(0.7, 0.2), eps, pos, neg);
  CHECK(opp.ok);
  CHECK(opp.max_violation == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("attack ascends the loss") {
  ModelBundle m = build_backbone(make_split_spec(Arch::tiny), InitPolicy{6, false});
  const HeadLossConfig loss;
  const auto samples = synth_samples(10);
  int ascents = 0, trials = 0;
  for (const FrameSample& s : samples) {
    const double before = sample_loss_value(m, s, loss);
    for (double eps : {0.002, 0.005}) {
      const FgsmResult r = fgsm_perturb(m, s, loss, eps, true);
      ascents += sample_loss_value(m, r.adversarial, loss) >= before;
      ++trials;
    }
  }
  CHECK(ascents >= trials * 9 / 10);
}

TEST_CASE("sweep report") {
  ModelBundle a = build_backbone(make_split_spec(Arch::tiny), InitPolicy{7, false});
  ModelBundle b = build_backbone(make_split_spec(Arch::tiny), InitPolicy{8, false},
                                 Variant::single_frame);
  const auto samples = synth_samples(3);
  AttackConfig cfg;
  cfg.epsilons = {0.0, 0.05};
  const RobustnessReport r = robustness_sweep(SweepModel{&a}, SweepModel{&b}, samples, cfg,
                                              HeadLossConfig{}, DetectConfig{0.3, 0.05, 1000});
  REQUIRE(r.rows.size() == 2);
  CHECK(r.rows[0].eps == 0.0);
  CHECK(r.rows[0].ni_mpsn == 0.0);
  CHECK(r.rows[0].ni_base == 0.0);
  std::vector<FrameDetections> clean;
  for (const auto& s : samples) {
    clean.push_back({s.source_id, s.current.index, detect(a, s, DetectConfig{0.3, 0.05, 1000}), s.boxes});
  }
  CHECK(r.rows[0].ap50_mpsn == ap50(clean).value());

  const RobustnessReport back = report_from_json(report_to_json(r));
  REQUIRE(back.rows.size() == 2);
  CHECK(back.rows[1].ni_mpsn == r.rows[1].ni_mpsn);
  CHECK(back.rows[1].ap50_base == r.rows[1].ap50_base);
  CHECK(back.threshold.j == r.threshold.j);
  CHECK(back.threshold.intervals == r.threshold.intervals);
  CHECK(sweep_csv(r).rfind("eps,ap50_mpsn,ap50_base,ni_mpsn,ni_base\n", 0) == 0);

  AttackConfig bad;
  bad.epsilons = {0.1, 0.0};
  CHECK_THROWS_AS(validate(bad), ConfigError);
}
