#pragma once

// The full MPSN model: four backbone sub-networks plus the detection head,
// and the forward pipeline shared by training, inference and attacks.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mpsn/aggregation.hpp"
#include "mpsn/backbone.hpp"
#include "mpsn/detection.hpp"
#include "mpsn/feature_map.hpp"
#include "mpsn/motion.hpp"

namespace mpsn {

/// single_frame: I_f through FN/BN only.
/// two_frames:   I_f and I_{f-1}; deep fusion degenerates to h_bn + h_bdn.
/// diffabs:      I_f and |I_f - I_{f-1}|.
/// flow:         I_f and the encoded optical flow.
enum class Variant { single_frame, two_frames, diffabs, flow };

std::string to_string(Variant v);
/// Throws ConfigError on an unknown name.
Variant parse_variant(const std::string& name);

enum class Stream { frame, motion };

struct InitPolicy {
  std::uint64_t seed = 0;
  /// Start FDN/BDN from a copy of FN/BN instead of independent draws.
  bool motion_from_frame = false;
};

struct ModelBundle {
  BackboneSplitSpec arch;
  Variant variant = Variant::diffabs;
  AggregationParams agg;
  FlowEncoding flow_encoding;
  std::size_t head_hidden = 0;
  SubNetwork fn, fdn, bn, bdn;
  DetectionHead head;

  bool two_stream() const { return variant != Variant::single_frame; }

  std::vector<Parameter*> fn_params() { return fn.parameters(); }
  std::vector<Parameter*> fdn_params() { return fdn.parameters(); }
  std::vector<Parameter*> bn_params() { return bn.parameters(); }
  std::vector<Parameter*> bdn_params() { return bdn.parameters(); }
  std::vector<Parameter*> head_params() { return head.parameters(); }
  /// Every trainable tensor, sub-networks first, then the head.
  std::vector<Parameter*> parameters();
  std::vector<BufferRef> buffers();
};

/// `head_hidden = 0` uses the deep output width.
ModelBundle build_backbone(const BackboneSplitSpec& spec, const InitPolicy& init,
                           Variant variant = Variant::diffabs, AggregationParams agg = {},
                           std::size_t head_hidden = 0);

/// Smallest multiple of 16 not below `n`.
std::size_t padded_extent(std::size_t n);

/// Zero-pads an image to multiples of 16 on the bottom/right and runs FN
/// (frame) or FDN (motion). Throws SizeError below 32x32.
FeatureMap forward_shallow(ModelBundle& bundle, Stream stream, const Tensor& image);
/// Runs BN (frame) or BDN (motion). Throws ContractError unless feat.stride == 4.
FeatureMap forward_deep(ModelBundle& bundle, Stream stream, const FeatureMap& feat);

/// Graph nodes of one forward pass. Unused streams hold no node.
struct ForwardVars {
  Var motion;  // input of the motion stream
  Var h_fn, h_fdn, h_sfa, h_bn, h_bdn, h_agg;
  Var apc;
  DetectionHead::Outputs head;
  std::size_t image_h = 0, image_w = 0;  // before padding
};

/// Runs the whole network on graph leaves `current` and `previous` (CHW, unpadded).
/// The flow variant reads its motion image from `flow_motion`.
ForwardVars forward_pipeline(Graph& g, ModelBundle& bundle, Var current, Var previous,
                             const Tensor* flow_motion = nullptr);

/// Motion image handed to the flow variant, or nullopt for the other variants.
std::optional<Tensor> flow_input(const ModelBundle& bundle, const FrameSample& sample,
                                 FlowProvider* provider);

struct SampleLoss {
  Var current, previous, loss;
  ForwardVars forward;
};

/// Builds the training loss of one sample. With `input_grads` the frames are
/// gradient-tracking leaves, so backward() also yields d(loss)/d(frames).
SampleLoss sample_loss(Graph& g, ModelBundle& bundle, const FrameSample& sample,
                       const HeadLossConfig& cfg, FlowProvider* provider = nullptr,
                       bool input_grads = false);

AnchorSet anchors_for(const ForwardVars& fw, const Graph& g);

/// Full inference: motion image, both streams, SFA, DFA, APC, RPN, decode, NMS.
DetectionSet detect(ModelBundle& bundle, const FrameSample& sample, const DetectConfig& cfg,
                    FlowProvider* provider = nullptr);

}  // namespace mpsn
