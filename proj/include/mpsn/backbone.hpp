#pragma once

// Backbone architectures split into a shallow part (stride 4) and a deep
// part (total stride 16). The pseudo siamese model instantiates each part
// twice with identical structure and independently drawn weights.

#include <memory>
#include <string>
#include <vector>

#include "mpsn/layers.hpp"

namespace mpsn {

enum class Arch { vgg16, mobilenetv2, resnet18, tiny };

std::string to_string(Arch arch);
/// Accepts "vgg16", "vgg16-like", "mobilenetv2", "resnet18", "tiny" and the
/// "-like" spellings. Throws ConfigError otherwise.
Arch parse_arch(const std::string& name);

struct BackboneSplitSpec {
  Arch arch = Arch::tiny;
  std::vector<std::string> shallow_stages;
  std::vector<std::string> deep_stages;
  std::size_t shallow_stride = 4;
  std::size_t deep_stride_total = 16;
  /// Scales every channel count; 1.0 gives the published widths.
  double width = 1.0;
  ops::NormKind norm = ops::NormKind::batch;
};

/// Stage split for `arch`:
///   vgg16:       conv1 conv2            | conv3 conv4 conv5
///   mobilenetv2: conv1 bottleneck1-3    | bottleneck4-13
///   resnet18:    conv1 conv2_x          | conv3_x conv4_x
///   tiny:        conv1 conv2            | conv3 conv4
BackboneSplitSpec make_split_spec(Arch arch, double width = 1.0,
                                  ops::NormKind norm = ops::NormKind::batch);

/// Throws ConfigError when strides are not 4/16 or stage lists overlap.
void validate(const BackboneSplitSpec& spec);

/// Ordered list of named stages.
class SubNetwork {
 public:
  SubNetwork() = default;
  explicit SubNetwork(std::string name) : name_(std::move(name)) {}

  Sequential& add_stage(const std::string& stage_name);

  Var forward(Graph& g, Var x);
  bool empty() const { return stages_.empty(); }
  std::size_t stride() const;
  std::size_t out_channels() const { return out_channels_; }
  void set_out_channels(std::size_t c) { out_channels_ = c; }

  const std::string& name() const { return name_; }
  std::vector<std::string> stage_names() const;
  std::vector<Parameter*> parameters();
  std::vector<BufferRef> buffers();
  /// Parameter shapes in declaration order (names excluded).
  std::vector<Shape> parameter_shapes();

 private:
  std::string name_;
  std::vector<std::unique_ptr<Sequential>> stages_;
  std::size_t out_channels_ = 0;
};

/// Parameter names are prefixed with `name` (e.g. "fn.conv1.0.weight").
SubNetwork build_shallow(const BackboneSplitSpec& spec, const std::string& name, Rng& rng);
SubNetwork build_deep(const BackboneSplitSpec& spec, const std::string& name,
                      std::size_t in_channels, Rng& rng);

}  // namespace mpsn
