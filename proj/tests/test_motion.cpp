#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "mpsn/errors.hpp"
#include "mpsn/motion.hpp"
#include "test_util.hpp"

using namespace mpsn;
using mpsn::testing::random_frame;

namespace fs = std::filesystem;

TEST_CASE("frame_difference") {
  std::mt19937_64 rng(21);
  SUBCASE("identical frames give zero motion") {
    const Frame f = random_frame(32, 32, rng, 1);
    const MotionImage m = frame_difference(f, f);
    for (double v : m.pixels.values()) CHECK(v == 0.0);
    CHECK(m.kind == MotionKind::diffabs);
  }
  SUBCASE("scalar case") {
    const Frame a{Tensor({1, 1, 1}, std::vector<double>{0.5}), 1};
    const Frame b{Tensor({1, 1, 1}, std::vector<double>{0.2}), 0};
    CHECK(frame_difference(a, b).pixels[0] == doctest::Approx(0.3).epsilon(1e-15));
  }
  SUBCASE("per-pixel loop oracle, symmetry and offset invariance") {
    const Frame a = random_frame(4, 4, rng, 1);
    const Frame b = random_frame(4, 4, rng, 0);
    const MotionImage m = frame_difference(a, b);
    CHECK(m.pixels.shape() == a.pixels.shape());
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t y = 0; y < 4; ++y) {
        for (std::size_t x = 0; x < 4; ++x) {
          const double d = a.pixels.at(c, y, x) - b.pixels.at(c, y, x);
          CHECK(m.pixels.at(c, y, x) == (d < 0 ? -d : d));
        }
      }
    }
    CHECK(frame_difference(b, a).pixels == m.pixels);

    Frame a2 = a, b2 = b;
    for (double& v : a2.pixels.values()) v = v * 0.5 + 0.25;
    for (double& v : b2.pixels.values()) v = v * 0.5 + 0.25;
    Frame a3 = a2, b3 = b2;
    for (double& v : a3.pixels.values()) v += 0.125;
    for (double& v : b3.pixels.values()) v += 0.125;
    CHECK(mpsn::testing::max_abs_diff(frame_difference(a2, b2).pixels,
                                      frame_difference(a3, b3).pixels) < 1e-15);
  }
  SUBCASE("shape mismatch names both shapes") {
    const Frame a = random_frame(32, 32, rng, 1);
    const Frame b = random_frame(32, 40, rng, 0);
    try {
      frame_difference(a, b);
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      const std::string what = e.what();
      CHECK(what.find(a.pixels.shape_string()) != std::string::npos);
      CHECK(what.find(b.pixels.shape_string()) != std::string::npos);
    }
  }
}

TEST_CASE("sample_pairs") {
  std::mt19937_64 rng(22);
  AnnotatedSequence seq{"cam0", {}};
  for (std::size_t i = 0; i < 5; ++i) {
    seq.frames.push_back({random_frame(32, 32, rng, i), {Box{0, 0, double(i + 1), 1}}});
  }
  const auto s1 = sample_pairs(seq, 1);
  REQUIRE(s1.size() == 4);
  CHECK(s1[0].current.index == 1);
  CHECK(s1[0].previous.index == 0);
  CHECK(s1[0].boxes[0].x2 == 2.0);  // boxes of the current frame
  CHECK(s1[0].source_id == "cam0");
  const auto s2 = sample_pairs(seq, 2);
  REQUIRE(s2.size() == 3);
  CHECK(s2[0].current.index == 2);
  CHECK(s2[2].current.index == 4);
  CHECK(s2[2].previous.index == 2);
  AnnotatedSequence single{"cam1", {seq.frames[0]}};
  CHECK(sample_pairs(single, 1).empty());
  CHECK(sample_pairs(AnnotatedSequence{}, 1).empty());
}

TEST_CASE("flow encoding") {
  const FlowEncoding enc{16.0};
  SUBCASE("zero flow encodes to zero magnitude and centred components") {
    const MotionImage m = encode_flow(FlowField(4, 5), enc);
    CHECK(m.kind == MotionKind::flow);
    CHECK(m.pixels.shape() == Shape{3, 4, 5});
    for (std::size_t y = 0; y < 4; ++y) {
      for (std::size_t x = 0; x < 5; ++x) {
        CHECK(m.pixels.at(0, y, x) == 0.0);
        CHECK(m.pixels.at(1, y, x) == 0.5);
        CHECK(m.pixels.at(2, y, x) == 0.5);
      }
    }
  }
  SUBCASE("constant flow matches the per-pixel formula") {
    FlowField f(3, 3);
    for (std::size_t y = 0; y < 3; ++y) {
      for (std::size_t x = 0; x < 3; ++x) f.set(y, x, 1.0f, 0.0f);
    }
    const MotionImage m = encode_flow(f, enc);
    for (std::size_t i = 0; i < 9; ++i) {
      CHECK(m.pixels[i] == 1.0 / 16.0);
      CHECK(m.pixels[9 + i] == (1.0 / 16.0 + 1.0) / 2.0);
      CHECK(m.pixels[18 + i] == 0.5);
    }
  }
  SUBCASE("large displacements saturate") {
    FlowField f(1, 1);
    f.set(0, 0, -40.0f, 30.0f);
    const MotionImage m = encode_flow(f, enc);
    CHECK(m.pixels[0] == 1.0);
    CHECK(m.pixels[1] == 0.0);
    CHECK(m.pixels[2] == 1.0);
  }
}

TEST_CASE("precomputed flow files and provider") {
  const fs::path root = fs::temp_directory_path() / "mpsn_test_flow";
  fs::remove_all(root);
  std::mt19937_64 rng(23);
  FlowField f(32, 33);
  std::uniform_real_distribution<float> d(-5.0f, 5.0f);
  for (float& v : f.uv) v = d(rng);
  write_flow_file(flow_file_path(root, "seq", 3), f);
  const FlowField back = read_flow_file(flow_file_path(root, "seq", 3));
  CHECK(back.height == 32);
  CHECK(back.width == 33);
  CHECK(back.uv == f.uv);

  PrecomputedFlowProvider provider(root);
  const Frame cur{Tensor::chw(3, 32, 33, 0.5), 3};
  const Frame prev{Tensor::chw(3, 32, 33, 0.5), 2};
  CHECK(flow_motion(cur, prev, "seq", provider).pixels == encode_flow(f).pixels);
  CHECK_THROWS_AS(flow_motion(Frame{cur.pixels, 4}, prev, "seq", provider), LookupError);
  CHECK(flow_file_path(root, "seq", 3).filename() == "000003.flo");

  std::ofstream(root / "bad.flo") << "NOTAFLOW";
  CHECK_THROWS_AS(read_flow_file(root / "bad.flo"), IoError);
  fs::remove_all(root);
}

TEST_CASE("frame validation") {
  CHECK_THROWS(validate_frame(Frame{Tensor::chw(3, 16, 64, 0.5), 0}));
  CHECK_THROWS(validate_frame(Frame{Tensor::chw(3, 32, 32, 1.5), 0}));
  CHECK_NOTHROW(validate_frame(Frame{Tensor::chw(3, 32, 32, 1.0), 0}));
}
