#include "doctest.h"
#include "mpsn/errors.hpp"
#include "mpsn/model.hpp"
#include "test_util.hpp"

using namespace mpsn;
using mpsn::testing::random_tensor;

namespace {

ModelBundle tiny_bundle(std::uint64_t seed = 0, Variant v = Variant::diffabs) {
  return build_backbone(make_split_spec(Arch::tiny), InitPolicy{seed, false}, v);
}

bool any_differs(const std::vector<Parameter*>& a, const std::vector<Parameter*>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]->value != b[i]->value) return true;
  }
  return false;
}

}  // namespace

TEST_CASE("split specs") {
  const auto vgg = make_split_spec(Arch::vgg16);
  CHECK(vgg.shallow_stages == std::vector<std::string>{"conv1", "conv2"});
  CHECK(vgg.deep_stages == std::vector<std::string>{"conv3", "conv4", "conv5"});
  for (Arch a : {Arch::vgg16, Arch::mobilenetv2, Arch::resnet18, Arch::tiny}) {
    const auto s = make_split_spec(a);
    CHECK(s.shallow_stride == 4);
    CHECK(s.deep_stride_total == 16);
    CHECK_NOTHROW(validate(s));
  }
  CHECK(parse_arch("vgg16-like") == Arch::vgg16);
  CHECK(parse_arch("resnet18") == Arch::resnet18);
  CHECK_THROWS_AS(parse_arch("alexnet"), ConfigError);

  auto bad = make_split_spec(Arch::tiny);
  bad.deep_stages.push_back("conv1");
  CHECK_THROWS_AS(validate(bad), ConfigError);
}

TEST_CASE("pseudo siamese pairs share structure, not weights") {
  ModelBundle m = tiny_bundle(5);
  CHECK(m.fn.parameter_shapes() == m.fdn.parameter_shapes());
  CHECK(m.bn.parameter_shapes() == m.bdn.parameter_shapes());
  CHECK(any_differs(m.fn_params(), m.fdn_params()));
  CHECK(any_differs(m.bn_params(), m.bdn_params()));

  ModelBundle copied =
      build_backbone(make_split_spec(Arch::tiny), InitPolicy{5, true}, Variant::diffabs);
  CHECK_FALSE(any_differs(copied.fn_params(), copied.fdn_params()));

  ModelBundle single = tiny_bundle(5, Variant::single_frame);
  CHECK(single.fdn.empty());
  CHECK(single.bdn.empty());
  CHECK_THROWS_AS(forward_shallow(single, Stream::motion, Tensor::chw(3, 32, 32)), ContractError);
}

TEST_CASE("stride contract on every architecture") {
  std::mt19937_64 rng(31);
  const Tensor image = random_tensor({3, 64, 64}, rng, 0.0, 1.0);
  for (Arch a : {Arch::vgg16, Arch::mobilenetv2, Arch::resnet18, Arch::tiny}) {
    CAPTURE(to_string(a));
    ModelBundle m = build_backbone(make_split_spec(a, 0.25), InitPolicy{1, false});
    for (Stream s : {Stream::frame, Stream::motion}) {
      const FeatureMap shallow = forward_shallow(m, s, image);
      CHECK(shallow.stride == 4);
      CHECK(shallow.values.height() == 16);
      CHECK(shallow.values.width() == 16);
      const FeatureMap deep = forward_deep(m, s, shallow);
      CHECK(deep.stride == 16);
      CHECK(deep.values.height() == 4);
      CHECK(deep.values.width() == 4);
    }
  }
}

TEST_CASE("padding to multiples of 16") {
  CHECK(padded_extent(32) == 32);
  CHECK(padded_extent(33) == 48);
  CHECK(padded_extent(50) == 64);
  ModelBundle m = tiny_bundle();
  std::mt19937_64 rng(32);
  const Tensor image = random_tensor({3, 50, 70}, rng, 0.0, 1.0);
  const FeatureMap shallow = forward_shallow(m, Stream::frame, image);
  CHECK(shallow.values.height() == 16);  // 64 / 4
  CHECK(shallow.values.width() == 20);   // 80 / 4
  const FeatureMap deep = forward_deep(m, Stream::frame, shallow);
  CHECK(deep.values.height() == 4);  // ceil(50 / 16)
  CHECK(deep.values.width() == 5);   // ceil(70 / 16)
}

TEST_CASE("forward errors and determinism") {
  ModelBundle m = tiny_bundle();
  CHECK_THROWS_AS(forward_shallow(m, Stream::frame, Tensor::chw(3, 31, 64)), SizeError);
  CHECK_THROWS_AS(forward_deep(m, Stream::frame, FeatureMap{Tensor::chw(32, 8, 8), 16}),
                  ContractError);
  std::mt19937_64 rng(33);
  const Tensor image = random_tensor({3, 64, 48}, rng, 0.0, 1.0);
  CHECK(forward_shallow(m, Stream::frame, image).values ==
        forward_shallow(m, Stream::frame, image).values);
  CHECK(parse_variant("diffabs") == Variant::diffabs);
  CHECK_THROWS_AS(parse_variant("optical"), ConfigError);
}

TEST_CASE("deep output ends in normalization") {
  // With fresh running statistics (mean 0, var 1) and gamma 1, beta 0 the deep
  // output is an affine image of the last conv, so negative values survive.
  ModelBundle m = tiny_bundle(2);
  std::mt19937_64 rng(34);
  const FeatureMap deep =
      forward_deep(m, Stream::frame, forward_shallow(m, Stream::frame,
                                                      random_tensor({3, 64, 64}, rng, 0.0, 1.0)));
  bool negative = false;
  for (double v : deep.values.values()) negative |= v < 0.0;
  CHECK(negative);
}
