#include "mpsn/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "mpsn/errors.hpp"

namespace mpsn {

namespace {

std::size_t scaled(std::size_t channels, double width) {
  return std::max<std::size_t>(4, static_cast<std::size_t>(std::lround(channels * width)));
}

// conv -> norm [-> relu]
void conv_norm(Sequential& stage, const std::string& name, std::size_t in, std::size_t out,
               std::size_t kernel, std::size_t stride, ops::NormKind norm, Rng& rng,
               bool activate = true) {
  stage.emplace<Conv2d>(name + ".conv", in, out, kernel, stride, kernel / 2, rng, 1, false);
  stage.emplace<Norm>(name + ".norm", out, norm);
  if (activate) stage.emplace<Activation>();
}

struct MobileNetRow {
  std::size_t expansion, channels, repeats, stride;
};

// Rows of the MobileNetV2 table; bottleneck blocks are numbered 1..13 across them.
constexpr MobileNetRow kMobileNetRows[] = {
    {1, 16, 1, 1}, {6, 24, 2, 2}, {6, 32, 3, 2}, {6, 64, 4, 2}, {6, 96, 3, 1}};

struct MobileNetBlock {
  std::size_t in, out, stride, expansion;
};

std::vector<MobileNetBlock> mobilenet_blocks(double width) {
  std::vector<MobileNetBlock> blocks;
  std::size_t in = scaled(32, width);
  for (const auto& row : kMobileNetRows) {
    const std::size_t out = scaled(row.channels, width);
    for (std::size_t r = 0; r < row.repeats; ++r) {
      blocks.push_back({in, out, r == 0 ? row.stride : 1, row.expansion});
      in = out;
    }
  }
  return blocks;
}

}  // namespace

std::string to_string(Arch arch) {
  switch (arch) {
    case Arch::vgg16: return "vgg16";
    case Arch::mobilenetv2: return "mobilenetv2";
    case Arch::resnet18: return "resnet18";
    case Arch::tiny: return "tiny";
  }
  return "unknown";
}

Arch parse_arch(const std::string& name) {
  std::string key = name;
  if (key.size() > 5 && key.ends_with("-like")) key.resize(key.size() - 5);
  if (key == "vgg16") return Arch::vgg16;
  if (key == "mobilenetv2") return Arch::mobilenetv2;
  if (key == "resnet18") return Arch::resnet18;
  if (key == "tiny") return Arch::tiny;
  throw ConfigError("unknown arch '" + name + "' (expected vgg16, mobilenetv2, resnet18, tiny)");
}

BackboneSplitSpec make_split_spec(Arch arch, double width, ops::NormKind norm) {
  BackboneSplitSpec s;
  s.arch = arch;
  s.width = width;
  s.norm = norm;
  switch (arch) {
    case Arch::vgg16:
      s.shallow_stages = {"conv1", "conv2"};
      s.deep_stages = {"conv3", "conv4", "conv5"};
      break;
    case Arch::mobilenetv2:
      s.shallow_stages = {"conv1", "bottleneck1", "bottleneck2", "bottleneck3"};
      for (int i = 4; i <= 13; ++i) s.deep_stages.push_back("bottleneck" + std::to_string(i));
      break;
    case Arch::resnet18:
      s.shallow_stages = {"conv1", "conv2_x"};
      s.deep_stages = {"conv3_x", "conv4_x"};
      break;
    case Arch::tiny:
      s.shallow_stages = {"conv1", "conv2"};
      s.deep_stages = {"conv3", "conv4"};
      break;
  }
  return s;
}

void validate(const BackboneSplitSpec& spec) {
  if (spec.shallow_stride != 4 || spec.deep_stride_total != 16) {
    throw ConfigError("backbone strides must be 4 (shallow) and 16 (deep total)");
  }
  if (spec.shallow_stages.empty() || spec.deep_stages.empty()) {
    throw ConfigError("backbone split has an empty stage list");
  }
  std::set<std::string> seen(spec.shallow_stages.begin(), spec.shallow_stages.end());
  for (const auto& s : spec.deep_stages) {
    if (!seen.insert(s).second) throw ConfigError("stage '" + s + "' appears in both splits");
  }
  if (!(spec.width > 0.0)) throw ConfigError("backbone width must be positive");
}

Sequential& SubNetwork::add_stage(const std::string& stage_name) {
  stages_.push_back(std::make_unique<Sequential>(stage_name));
  return *stages_.back();
}

Var SubNetwork::forward(Graph& g, Var x) {
  for (auto& stage : stages_) x = stage->forward(g, x);
  return x;
}

std::size_t SubNetwork::stride() const {
  std::size_t s = 1;
  for (const auto& stage : stages_) s *= stage->stride();
  return s;
}

std::vector<std::string> SubNetwork::stage_names() const {
  std::vector<std::string> names;
  for (const auto& stage : stages_) names.push_back(stage->name());
  return names;
}

std::vector<Parameter*> SubNetwork::parameters() {
  std::vector<Parameter*> out;
  for (auto& stage : stages_) stage->collect_parameters(out);
  return out;
}

std::vector<BufferRef> SubNetwork::buffers() {
  std::vector<BufferRef> out;
  for (auto& stage : stages_) stage->collect_buffers(out);
  return out;
}

std::vector<Shape> SubNetwork::parameter_shapes() {
  std::vector<Shape> shapes;
  for (Parameter* p : parameters()) shapes.push_back(p->value.shape());
  return shapes;
}

SubNetwork build_shallow(const BackboneSplitSpec& spec, const std::string& name, Rng& rng) {
  validate(spec);
  SubNetwork net(name);
  const auto prefix = [&](const std::string& stage) { return name + "." + stage; };
  const double w = spec.width;
  switch (spec.arch) {
    case Arch::tiny: {
      const std::size_t c1 = std::min<std::size_t>(64, scaled(16, w));
      const std::size_t c2 = std::min<std::size_t>(64, scaled(32, w));
      conv_norm(net.add_stage("conv1"), prefix("conv1"), 3, c1, 3, 2, spec.norm, rng);
      conv_norm(net.add_stage("conv2"), prefix("conv2"), c1, c2, 3, 2, spec.norm, rng);
      net.set_out_channels(c2);
      break;
    }
    case Arch::vgg16: {
      const std::size_t c1 = scaled(64, w), c2 = scaled(128, w);
      Sequential& s1 = net.add_stage("conv1");
      conv_norm(s1, prefix("conv1_1"), 3, c1, 3, 1, spec.norm, rng);
      conv_norm(s1, prefix("conv1_2"), c1, c1, 3, 1, spec.norm, rng);
      s1.emplace<MaxPool>(2, 2);
      Sequential& s2 = net.add_stage("conv2");
      conv_norm(s2, prefix("conv2_1"), c1, c2, 3, 1, spec.norm, rng);
      conv_norm(s2, prefix("conv2_2"), c2, c2, 3, 1, spec.norm, rng);
      s2.emplace<MaxPool>(2, 2);
      net.set_out_channels(c2);
      break;
    }
    case Arch::mobilenetv2: {
      Sequential& s1 = net.add_stage("conv1");
      s1.emplace<Conv2d>(prefix("conv1.conv"), 3, scaled(32, w), 3, 2, 1, rng, 1, false);
      s1.emplace<Norm>(prefix("conv1.norm"), scaled(32, w), spec.norm);
      s1.emplace<Activation>(Activation::Kind::relu6);
      const auto blocks = mobilenet_blocks(w);
      for (std::size_t i = 0; i < 3; ++i) {
        const std::string stage = "bottleneck" + std::to_string(i + 1);
        const auto& b = blocks[i];
        net.add_stage(stage).emplace<InvertedResidual>(prefix(stage), b.in, b.out, b.stride,
                                                       b.expansion, spec.norm, rng);
      }
      net.set_out_channels(blocks[2].out);
      break;
    }
    case Arch::resnet18: {
      const std::size_t c = scaled(64, w);
      Sequential& s1 = net.add_stage("conv1");
      conv_norm(s1, prefix("conv1"), 3, c, 7, 2, spec.norm, rng);
      Sequential& s2 = net.add_stage("conv2_x");
      s2.emplace<MaxPool>(3, 2, 1);
      s2.emplace<BasicBlock>(prefix("conv2_x.0"), c, c, 1, spec.norm, rng);
      s2.emplace<BasicBlock>(prefix("conv2_x.1"), c, c, 1, spec.norm, rng);
      net.set_out_channels(c);
      break;
    }
  }
  return net;
}

SubNetwork build_deep(const BackboneSplitSpec& spec, const std::string& name,
                      std::size_t in_channels, Rng& rng) {
  validate(spec);
  SubNetwork net(name);
  const auto prefix = [&](const std::string& stage) { return name + "." + stage; };
  const double w = spec.width;
  // Every deep network ends in a normalization layer with no activation after it.
  switch (spec.arch) {
    case Arch::tiny: {
      const std::size_t c3 = std::min<std::size_t>(64, scaled(64, w));
      const std::size_t c4 = std::min<std::size_t>(64, scaled(64, w));
      conv_norm(net.add_stage("conv3"), prefix("conv3"), in_channels, c3, 3, 2, spec.norm, rng);
      conv_norm(net.add_stage("conv4"), prefix("conv4"), c3, c4, 3, 2, spec.norm, rng, false);
      net.set_out_channels(c4);
      break;
    }
    case Arch::vgg16: {
      const std::size_t c3 = scaled(256, w), c4 = scaled(512, w);
      Sequential& s3 = net.add_stage("conv3");
      conv_norm(s3, prefix("conv3_1"), in_channels, c3, 3, 1, spec.norm, rng);
      conv_norm(s3, prefix("conv3_2"), c3, c3, 3, 1, spec.norm, rng);
      conv_norm(s3, prefix("conv3_3"), c3, c3, 3, 1, spec.norm, rng);
      s3.emplace<MaxPool>(2, 2);
      Sequential& s4 = net.add_stage("conv4");
      conv_norm(s4, prefix("conv4_1"), c3, c4, 3, 1, spec.norm, rng);
      conv_norm(s4, prefix("conv4_2"), c4, c4, 3, 1, spec.norm, rng);
      conv_norm(s4, prefix("conv4_3"), c4, c4, 3, 1, spec.norm, rng);
      s4.emplace<MaxPool>(2, 2);
      Sequential& s5 = net.add_stage("conv5");
      conv_norm(s5, prefix("conv5_1"), c4, c4, 3, 1, spec.norm, rng);
      conv_norm(s5, prefix("conv5_2"), c4, c4, 3, 1, spec.norm, rng);
      conv_norm(s5, prefix("conv5_3"), c4, c4, 3, 1, spec.norm, rng, false);
      net.set_out_channels(c4);
      break;
    }
    case Arch::mobilenetv2: {
      const auto blocks = mobilenet_blocks(w);
      if (blocks[2].out != in_channels) {
        throw ConfigError("mobilenetv2 deep part expects " + std::to_string(blocks[2].out) +
                          " input channels");
      }
      // The projection of an inverted residual is already linear + norm.
      for (std::size_t i = 3; i < blocks.size(); ++i) {
        const std::string stage = "bottleneck" + std::to_string(i + 1);
        const auto& b = blocks[i];
        net.add_stage(stage).emplace<InvertedResidual>(prefix(stage), b.in, b.out, b.stride,
                                                       b.expansion, spec.norm, rng);
      }
      net.set_out_channels(blocks.back().out);
      break;
    }
    case Arch::resnet18: {
      const std::size_t c3 = scaled(128, w), c4 = scaled(256, w);
      Sequential& s3 = net.add_stage("conv3_x");
      s3.emplace<BasicBlock>(prefix("conv3_x.0"), in_channels, c3, 2, spec.norm, rng);
      s3.emplace<BasicBlock>(prefix("conv3_x.1"), c3, c3, 1, spec.norm, rng);
      Sequential& s4 = net.add_stage("conv4_x");
      s4.emplace<BasicBlock>(prefix("conv4_x.0"), c3, c4, 2, spec.norm, rng);
      s4.emplace<BasicBlock>(prefix("conv4_x.1"), c4, c4, 1, spec.norm, rng, false);
      s4.emplace<Norm>(prefix("conv4_x.out_norm"), c4, spec.norm);
      net.set_out_channels(c4);
      break;
    }
  }
  return net;
}

}  // namespace mpsn
