#pragma once

// Single-stage head: additive penultimate conv, per-anchor classification and
// box regression, focal/smooth-L1 losses, decoding and greedy NMS.

#include <array>
#include <memory>
#include <span>
#include <vector>

#include "mpsn/autograd.hpp"
#include "mpsn/feature_map.hpp"
#include "mpsn/geometry.hpp"
#include "mpsn/layers.hpp"

namespace mpsn {

inline constexpr std::size_t kAnchorStride = 16;
inline constexpr std::array<double, 3> kAnchorSizes{16.0, 32.0, 64.0};

/// One anchor per (cell, size); index = (row * grid_w + col) * sizes + size_idx.
struct AnchorSet {
  std::vector<Box> anchors;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t stride = kAnchorStride;
  std::vector<double> sizes;

  std::size_t size() const { return anchors.size(); }
  std::size_t index(std::size_t row, std::size_t col, std::size_t size_idx) const {
    return (row * grid_w + col) * sizes.size() + size_idx;
  }
  const Box& at(std::size_t row, std::size_t col, std::size_t size_idx) const {
    return anchors[index(row, col, size_idx)];
  }
};

AnchorSet generate_anchors(std::size_t grid_h, std::size_t grid_w,
                           std::size_t stride = kAnchorStride,
                           std::span<const double> sizes = kAnchorSizes);

struct DetectionSet {
  std::vector<Box> boxes;
  std::vector<double> scores;

  std::size_t size() const { return boxes.size(); }
};

struct HeadLossConfig {
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  double cls_weight = 1.0;
  double reg_weight = 1.0;
  double pos_iou = 0.7;
  double neg_iou = 0.3;
};

/// Throws ConfigError when alpha or the IoU thresholds are out of range.
void validate(const HeadLossConfig& cfg);

struct DetectConfig {
  double iou_thresh = 0.3;
  double score_thresh = 0.5;
  std::size_t pre_nms_top_k = 1000;
};

using BoxDelta = std::array<double, 4>;  // tx, ty, tw, th

/// Bound on tw, th before exponentiation.
inline constexpr double kMaxLogScale = 4.135166556742356;  // log(1000 / 16)

struct DecodeResult {
  std::vector<Box> boxes;
  std::vector<std::size_t> anchor_index;
  std::size_t rejected = 0;
};

/// Center/size offsets relative to each anchor, clipped to [0, width] x [0, height].
/// Non-finite deltas and boxes that collapse after clipping are dropped and counted.
DecodeResult decode_boxes(const AnchorSet& anchors, std::span<const BoxDelta> deltas,
                          double image_width, double image_height);
BoxDelta encode_box(const Box& anchor, const Box& target);
Box decode_box(const Box& anchor, const BoxDelta& delta);

/// Greedy suppression in descending score order (ties: lower index first).
/// Boxes scoring below `score_thresh` are discarded first.
DetectionSet nms(const DetectionSet& dets, double iou_thresh = 0.3, double score_thresh = 0.5);

inline constexpr int kLabelIgnore = -1;

struct TargetAssignment {
  std::vector<int> labels;  // 1, 0 or kLabelIgnore
  std::vector<BoxDelta> targets;
  std::size_t positives() const;
};

TargetAssignment assign_targets(const AnchorSet& anchors, std::span<const Box> gt,
                                const HeadLossConfig& cfg);

struct FocalLossResult {
  double value = 0.0;
  /// Set when every anchor was ignored; value is then 0.
  bool empty = false;
};

/// Mean over non-ignored anchors of -alpha_t (1 - p_t)^gamma log p_t.
FocalLossResult focal_loss(std::span<const double> logits, std::span<const int> labels,
                           const HeadLossConfig& cfg);
/// d(sum of per-anchor focal terms)/d(logit) for one anchor.
double focal_term_grad(double logit, int label, const HeadLossConfig& cfg);

double smooth_l1(double x);
/// Mean over label-1 anchors of the summed smooth-L1 over the 4 coordinates.
double regression_loss(std::span<const BoxDelta> deltas, std::span<const BoxDelta> targets,
                       std::span<const int> labels);

/// Learnable head parameters.
class DetectionHead {
 public:
  DetectionHead() = default;
  DetectionHead(std::size_t channels, std::size_t hidden, Rng& rng,
                std::size_t anchors_per_cell = kAnchorSizes.size());

  /// x + relu(conv3x3(x)), channel preserving.
  Var apc_forward(Graph& g, Var h_agg);

  struct Outputs {
    Var hidden;  // last spatial conv layer, input to the CAM heatmap
    Var logits;  // anchors_per_cell x H' x W'
    Var deltas;  // 4 * anchors_per_cell x H' x W'
  };
  Outputs rpn_forward(Graph& g, Var feat);

  std::vector<Parameter*> parameters();
  Conv2d& apc() { return *apc_; }
  Conv2d& rpn_conv() { return *rpn_conv_; }
  Conv2d& cls() { return *cls_; }
  Conv2d& reg() { return *reg_; }
  std::size_t channels() const { return channels_; }
  std::size_t hidden() const { return hidden_; }

 private:
  std::unique_ptr<Conv2d> apc_, rpn_conv_, cls_, reg_;
  std::size_t channels_ = 0;
  std::size_t hidden_ = 0;
};

FeatureMap apc_forward(const FeatureMap& h_agg, DetectionHead& head);

struct RpnOutput {
  std::vector<double> logits;
  std::vector<BoxDelta> deltas;
};

RpnOutput rpn_forward(const FeatureMap& feat, DetectionHead& head);

/// Flattens head tensors into per-anchor lists in AnchorSet order.
RpnOutput flatten_head_outputs(const Tensor& logits, const Tensor& deltas);

/// sigmoid -> top-k -> decode -> NMS.
DetectionSet postprocess(const RpnOutput& out, const AnchorSet& anchors, double image_width,
                         double image_height, const DetectConfig& cfg);

/// Scalar training loss cls_weight * focal + reg_weight * smooth-L1 recorded on
/// the graph, with gradients into the logit and delta maps.
Var detection_loss(Graph& g, Var logits, Var deltas, const TargetAssignment& targets,
                   const HeadLossConfig& cfg);

}  // namespace mpsn
