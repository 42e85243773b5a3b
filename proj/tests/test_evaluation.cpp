#include <algorithm>
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "json.hpp"
#include "mpsn/errors.hpp"
#include "mpsn/evaluation.hpp"
#include "test_util.hpp"

using namespace mpsn;

namespace {

Box rand_box(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> pos(0.0, 20.0), size(6.0, 16.0);
  const double x = pos(rng), y = pos(rng);
  return Box{x, y, x + size(rng), y + size(rng)};
}

/// Brute force: every prefix of the ranked list is scored by rescanning all
/// gts, and AP sums recall steps times the best precision at or beyond them.
double ap_oracle(const std::vector<DetectionSet>& dets, const std::vector<std::vector<Box>>& gts) {
  struct Item {
    double score;
    std::size_t frame, box;
  };
  std::vector<Item> items;
  for (std::size_t f = 0; f < dets.size(); ++f) {
    for (std::size_t i = 0; i < dets[f].size(); ++i) items.push_back({dets[f].scores[i], f, i});
  }
  std::stable_sort(items.begin(), items.end(),
                   [](const Item& a, const Item& b) { return a.score > b.score; });
  std::size_t total = 0;
  for (const auto& g : gts) total += g.size();
  std::vector<double> prec, rec;
  for (std::size_t k = 1; k <= items.size(); ++k) {
    std::vector<std::vector<bool>> used(gts.size());
    for (std::size_t f = 0; f < gts.size(); ++f) used[f].assign(gts[f].size(), false);
    std::size_t tp = 0;
    for (std::size_t r = 0; r < k; ++r) {
      const auto& it = items[r];
      double best = 0.5;
      long pick = -1;
      for (std::size_t j = 0; j < gts[it.frame].size(); ++j) {
        const double o = iou(dets[it.frame].boxes[it.box], gts[it.frame][j]);
        if (!used[it.frame][j] && o >= best) {
          if (pick < 0 || o > best) pick = static_cast<long>(j);
          best = o;
        }
      }
      if (pick >= 0) {
        used[it.frame][static_cast<std::size_t>(pick)] = true;
        ++tp;
      }
    }
    prec.push_back(double(tp) / double(k));
    rec.push_back(double(tp) / double(total));
  }
  double ap = 0.0, last = 0.0;
  for (std::size_t k = 0; k < rec.size(); ++k) {
    if (rec[k] <= last) continue;
    double p = 0.0;
    for (std::size_t q = k; q < rec.size(); ++q) p = std::max(p, prec[q]);
    ap += (rec[k] - last) * p;
    last = rec[k];
  }
  return ap;
}

}  // namespace

TEST_CASE("ap50 hand cases") {
  const Box gt{0, 0, 10, 10};
  const Box hit{0, 0, 10, 6.5};  // IoU 0.65
  CHECK(ap50({DetectionSet{{hit}, {0.01}}}, {{gt}}).value() == 1.0);
  CHECK(ap50({DetectionSet{{Box{50, 50, 60, 60}, hit}, {0.9, 0.8}}}, {{gt}}).value() == 0.5);
  CHECK_FALSE(ap50({DetectionSet{{hit}, {0.9}}}, {{}}).has_value());
  CHECK(ap50({DetectionSet{}}, {{gt}}).value() == 0.0);
  // Each gt is matched at most once.
  CHECK(ap50({DetectionSet{{gt, gt}, {0.9, 0.8}}}, {{gt}}).value() == 1.0);
  CHECK_THROWS(ap50({DetectionSet{}, DetectionSet{}}, {{gt}}));
}

TEST_CASE("ap50 equals the brute-force matcher") {
  std::mt19937_64 rng(61);
  std::uniform_int_distribution<int> count(0, 5);
  std::uniform_real_distribution<double> score(0.0, 1.0);
  int checked = 0;
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<DetectionSet> dets(2);
    std::vector<std::vector<Box>> gts(2);
    for (std::size_t f = 0; f < 2; ++f) {
      const int nd = count(rng), ng = count(rng);
      for (int i = 0; i < ng; ++i) gts[f].push_back(rand_box(rng));
      for (int i = 0; i < nd; ++i) {
        dets[f].boxes.push_back(i < ng && score(rng) < 0.6 ? gts[f][i] : rand_box(rng));
        dets[f].scores.push_back(trial % 5 == 0 ? 0.5 : score(rng));
      }
    }
    const auto ap = ap50(dets, gts);
    if (gts[0].empty() && gts[1].empty()) {
      CHECK_FALSE(ap.has_value());
      continue;
    }
    REQUIRE(ap.has_value());
    CHECK(*ap == doctest::Approx(ap_oracle(dets, gts)).epsilon(1e-12));
    ++checked;

    for (auto& d : dets) {
      for (double& s : d.scores) s *= 3.7;
    }
    CHECK(*ap50(dets, gts) == doctest::Approx(*ap).epsilon(1e-12));
  }
  CHECK(checked > 400);
}

TEST_CASE("counting") {
  DetectionSet d{{Box{}, Box{}, Box{}}, {0.9, 0.5, 0.2}};
  CHECK(count_heads(DetectionSet{}) == 0);
  CHECK(count_heads(d) == 2);
  CHECK(count_heads(d, 0.1) == 3);
  std::size_t prev = 99;
  for (double t = 0.0; t <= 1.0; t += 0.05) {
    CHECK(count_heads(d, t) <= prev);
    prev = count_heads(d, t);
  }

  const CountingReport r = counting_metrics({4, 2}, {5, 2});
  CHECK(std::abs(r.nmae - (1.0 / 9.0) / 2.0) < 1e-12);
  CHECK(std::abs(r.nmae - 0.05556) < 1e-5);
  CHECK(r.score == 0.5);
  CHECK(r.avg_head_count == 3.0);
  const CountingReport exact = counting_metrics({3, 0, 1}, {3, 0, 1});
  CHECK(exact.nmae == 0.0);
  CHECK(exact.score == 1.0);
  CHECK(counting_metrics({0}, {3}).nmae == 1.0);
  CHECK_THROWS_AS(counting_metrics({1, 2}, {1}), ContractError);
  CHECK_THROWS_AS(counting_metrics({}, {}), ContractError);

  std::mt19937_64 rng(62);
  std::uniform_int_distribution<std::size_t> n(0, 6);
  for (int i = 0; i < 200; ++i) {
    std::vector<std::size_t> a(5), b(5);
    for (std::size_t k = 0; k < 5; ++k) {
      a[k] = n(rng);
      b[k] = i % 4 == 0 ? a[k] : n(rng);
    }
    const CountingReport c = counting_metrics(a, b);
    CHECK(c.nmae >= 0.0);
    CHECK(c.nmae <= 1.0);
    CHECK(c.score >= 0.0);
    CHECK(c.score <= 1.0);
    CHECK((c.score == 1.0) == (c.nmae == 0.0));
    CHECK((c.score == 1.0) == (a == b));
  }
}

TEST_CASE("detection dump and report") {
  namespace fs = std::filesystem;
  const fs::path path = fs::temp_directory_path() / "mpsn_test_dets.jsonl";
  std::vector<FrameDetections> frames{
      {"cam0", 1, DetectionSet{{Box{0, 0, 10, 10}}, {0.875}}, {Box{0, 0, 10, 10}}},
      {"cam0", 2, DetectionSet{}, {Box{1, 2, 3, 4}}},
  };
  write_detections(path.string(), frames, true);
  const auto back = read_detections(path.string());
  REQUIRE(back.size() == 2);
  CHECK(back[0].source_id == "cam0");
  CHECK(back[1].frame_index == 2);
  CHECK(back[0].dets.scores == frames[0].dets.scores);
  CHECK(back[0].dets.boxes == frames[0].dets.boxes);
  CHECK(back[1].gt == frames[1].gt);

  const EvalReport r = evaluate(back, 0.5);
  CHECK(r.ap50.value() == 0.5);
  CHECK(r.counting.per_frame[1] == std::pair<std::size_t, std::size_t>{1, 0});
  const auto j = nlohmann::json::parse(report_json(r));
  for (const char* key : {"ap50", "nmae", "score", "avg_head_count", "per_frame"}) CHECK(j.contains(key));

  const EvalReport perfect = evaluate({frames[0]}, 0.5);
  CHECK(perfect.ap50.value() == 1.0);
  CHECK(perfect.counting.nmae == 0.0);
  fs::remove(path);
}
