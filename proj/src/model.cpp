#include "mpsn/model.hpp"

#include "mpsn/errors.hpp"

namespace mpsn {

namespace {

void copy_values(SubNetwork& from, SubNetwork& to) {
  auto src = from.parameters();
  auto dst = to.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
}

void check_image(const Tensor& image) {
  if (image.rank() != 3) throw DimensionError("image must be CHW, got " + image.shape_string());
  if (image.height() < kMinFrameSide || image.width() < kMinFrameSide) {
    throw SizeError("image " + image.shape_string() + " smaller than 32x32");
  }
}

Var padded(Graph& g, Var x) {
  const Tensor& v = g.value(x);
  return ops::pad_bottom_right(g, x, padded_extent(v.height()), padded_extent(v.width()));
}

}  // namespace

std::string to_string(Variant v) {
  switch (v) {
    case Variant::single_frame: return "single_frame";
    case Variant::two_frames: return "two_frames";
    case Variant::diffabs: return "diffabs";
    case Variant::flow: return "flow";
  }
  return "unknown";
}

Variant parse_variant(const std::string& name) {
  if (name == "single_frame") return Variant::single_frame;
  if (name == "two_frames") return Variant::two_frames;
  if (name == "diffabs") return Variant::diffabs;
  if (name == "flow") return Variant::flow;
  throw ConfigError("unknown variant '" + name +
                    "' (expected single_frame, two_frames, diffabs, flow)");
}

std::vector<Parameter*> ModelBundle::parameters() {
  std::vector<Parameter*> out;
  for (SubNetwork* net : {&fn, &fdn, &bn, &bdn}) {
    auto p = net->parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  auto h = head.parameters();
  out.insert(out.end(), h.begin(), h.end());
  return out;
}

std::vector<BufferRef> ModelBundle::buffers() {
  std::vector<BufferRef> out;
  for (SubNetwork* net : {&fn, &fdn, &bn, &bdn}) {
    auto b = net->buffers();
    out.insert(out.end(), b.begin(), b.end());
  }
  return out;
}

ModelBundle build_backbone(const BackboneSplitSpec& spec, const InitPolicy& init, Variant variant,
                           AggregationParams agg, std::size_t head_hidden) {
  validate(spec);
  if (!std::isfinite(agg.alpha) || !std::isfinite(agg.beta)) {
    throw ConfigError("aggregation alpha and beta must be finite");
  }
  Rng rng(init.seed);
  ModelBundle m;
  m.arch = spec;
  m.variant = variant;
  m.agg = agg;
  m.fn = build_shallow(spec, "fn", rng);
  m.bn = build_deep(spec, "bn", m.fn.out_channels(), rng);
  if (m.two_stream()) {
    m.fdn = build_shallow(spec, "fdn", rng);
    m.bdn = build_deep(spec, "bdn", m.fdn.out_channels(), rng);
    if (init.motion_from_frame) {
      copy_values(m.fn, m.fdn);
      copy_values(m.bn, m.bdn);
    }
  }
  const std::size_t channels = m.bn.out_channels();
  m.head_hidden = head_hidden ? head_hidden : channels;
  m.head = DetectionHead(channels, m.head_hidden, rng);
  return m;
}

std::size_t padded_extent(std::size_t n) { return (n + kAnchorStride - 1) / kAnchorStride * kAnchorStride; }

FeatureMap forward_shallow(ModelBundle& bundle, Stream stream, const Tensor& image) {
  check_image(image);
  SubNetwork& net = stream == Stream::frame ? bundle.fn : bundle.fdn;
  if (net.empty()) throw ContractError("model has no motion stream");
  Graph g(false, false);
  const Var out = net.forward(g, padded(g, g.constant(image)));
  return FeatureMap{g.value(out), net.stride()};
}

FeatureMap forward_deep(ModelBundle& bundle, Stream stream, const FeatureMap& feat) {
  if (feat.stride != 4) {
    throw ContractError("forward_deep expects a stride-4 map, got stride " +
                        std::to_string(feat.stride));
  }
  SubNetwork& net = stream == Stream::frame ? bundle.bn : bundle.bdn;
  if (net.empty()) throw ContractError("model has no motion stream");
  Graph g(false, false);
  const Var out = net.forward(g, g.constant(feat.values));
  return FeatureMap{g.value(out), feat.stride * net.stride()};
}

ForwardVars forward_pipeline(Graph& g, ModelBundle& m, Var current, Var previous,
                             const Tensor* flow_motion) {
  const Tensor& cur = g.value(current);
  check_image(cur);
  ForwardVars fw;
  fw.image_h = cur.height();
  fw.image_w = cur.width();

  fw.h_fn = m.fn.forward(g, padded(g, current));
  if (!m.two_stream()) {
    fw.h_sfa = fw.h_fn;
    fw.h_bn = m.bn.forward(g, fw.h_fn);
    fw.h_agg = fw.h_bn;
  } else {
    require_same_shape(cur, g.value(previous), "forward_pipeline");
    switch (m.variant) {
      case Variant::two_frames: fw.motion = previous; break;
      case Variant::diffabs: fw.motion = frame_difference(g, current, previous); break;
      case Variant::flow:
        if (!flow_motion) throw ContractError("flow variant needs a flow motion image");
        require_same_shape(cur, *flow_motion, "flow motion image");
        fw.motion = g.constant(*flow_motion);
        break;
      case Variant::single_frame: break;
    }
    fw.h_fdn = m.fdn.forward(g, padded(g, fw.motion));
    fw.h_sfa = sfa(g, fw.h_fn, fw.h_fdn);
    fw.h_bn = m.bn.forward(g, fw.h_sfa);
    fw.h_bdn = m.bdn.forward(g, fw.h_fdn);
    fw.h_agg = m.variant == Variant::two_frames ? dfa_two_frames_degenerate(g, fw.h_bn, fw.h_bdn)
                                                : dfa(g, fw.h_bn, fw.h_bdn, m.agg);
  }
  fw.apc = m.head.apc_forward(g, fw.h_agg);
  fw.head = m.head.rpn_forward(g, fw.apc);
  return fw;
}

std::optional<Tensor> flow_input(const ModelBundle& bundle, const FrameSample& sample,
                                 FlowProvider* provider) {
  if (bundle.variant != Variant::flow) return std::nullopt;
  if (!provider) throw ConfigError("flow variant requires a flow provider (set MPSN_CACHE_DIR)");
  return flow_motion(sample.current, sample.previous, sample.source_id, *provider,
                     bundle.flow_encoding)
      .pixels;
}

AnchorSet anchors_for(const ForwardVars& fw, const Graph& g) {
  const Tensor& logits = g.value(fw.head.logits);
  return generate_anchors(logits.height(), logits.width());
}

SampleLoss sample_loss(Graph& g, ModelBundle& bundle, const FrameSample& sample,
                       const HeadLossConfig& cfg, FlowProvider* provider, bool input_grads) {
  const auto flow = flow_input(bundle, sample, provider);
  SampleLoss out;
  out.current = input_grads ? g.input(sample.current.pixels) : g.constant(sample.current.pixels);
  out.previous = input_grads ? g.input(sample.previous.pixels) : g.constant(sample.previous.pixels);
  out.forward = forward_pipeline(g, bundle, out.current, out.previous, flow ? &*flow : nullptr);
  const AnchorSet anchors = anchors_for(out.forward, g);
  const TargetAssignment targets = assign_targets(anchors, sample.boxes, cfg);
  out.loss = detection_loss(g, out.forward.head.logits, out.forward.head.deltas, targets, cfg);
  return out;
}

DetectionSet detect(ModelBundle& bundle, const FrameSample& sample, const DetectConfig& cfg,
                    FlowProvider* provider) {
  const auto flow = flow_input(bundle, sample, provider);
  Graph g(false, false);
  const Var cur = g.constant(sample.current.pixels);
  const Var prev = g.constant(sample.previous.pixels);
  const ForwardVars fw = forward_pipeline(g, bundle, cur, prev, flow ? &*flow : nullptr);
  const RpnOutput out = flatten_head_outputs(g.value(fw.head.logits), g.value(fw.head.deltas));
  return postprocess(out, anchors_for(fw, g), static_cast<double>(fw.image_w),
                     static_cast<double>(fw.image_h), cfg);
}

}  // namespace mpsn
