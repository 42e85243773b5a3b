#include "mpsn/detection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mpsn/errors.hpp"

namespace mpsn {

namespace {

double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::fabs(z))); }
double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct FocalTerm {
  double value;
  double grad;
};

FocalTerm focal_term(double logit, int label, const HeadLossConfig& cfg) {
  const double sign = label == 1 ? 1.0 : -1.0;
  const double alpha_t = label == 1 ? cfg.focal_alpha : 1.0 - cfg.focal_alpha;
  const double z = sign * logit;
  const double p_t = stable_sigmoid(z);
  const double one_minus = stable_sigmoid(-z);
  const double log_p_t = -softplus(-z);
  const double modulator = std::pow(one_minus, cfg.focal_gamma);
  const double value = -alpha_t * modulator * log_p_t;
  const double grad = sign * alpha_t * modulator * (cfg.focal_gamma * p_t * log_p_t - one_minus);
  return {value, grad};
}

double smooth_l1_grad(double x) { return std::clamp(x, -1.0, 1.0); }

}  // namespace

AnchorSet generate_anchors(std::size_t grid_h, std::size_t grid_w, std::size_t stride,
                           std::span<const double> sizes) {
  if (grid_h == 0 || grid_w == 0) throw ContractError("generate_anchors: empty grid");
  AnchorSet set;
  set.grid_h = grid_h;
  set.grid_w = grid_w;
  set.stride = stride;
  set.sizes.assign(sizes.begin(), sizes.end());
  set.anchors.reserve(grid_h * grid_w * sizes.size());
  for (std::size_t row = 0; row < grid_h; ++row) {
    for (std::size_t col = 0; col < grid_w; ++col) {
      const double cx = (static_cast<double>(col) + 0.5) * static_cast<double>(stride);
      const double cy = (static_cast<double>(row) + 0.5) * static_cast<double>(stride);
      for (double s : sizes) {
        set.anchors.push_back(Box{cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2});
      }
    }
  }
  return set;
}

void validate(const HeadLossConfig& cfg) {
  if (!(cfg.focal_alpha >= 0.0 && cfg.focal_alpha <= 1.0)) {
    throw ConfigError("focal_alpha must lie in [0,1]");
  }
  if (!(cfg.neg_iou >= 0.0 && cfg.neg_iou <= cfg.pos_iou && cfg.pos_iou <= 1.0)) {
    throw ConfigError("require 0 <= neg_iou <= pos_iou <= 1");
  }
  if (!(cfg.focal_gamma >= 0.0)) throw ConfigError("focal_gamma must be non-negative");
}

Box decode_box(const Box& anchor, const BoxDelta& d) {
  const double aw = anchor.width(), ah = anchor.height();
  const double cx = anchor.center_x() + aw * d[0];
  const double cy = anchor.center_y() + ah * d[1];
  const double w = aw * std::exp(std::min(d[2], kMaxLogScale));
  const double h = ah * std::exp(std::min(d[3], kMaxLogScale));
  return Box{cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

BoxDelta encode_box(const Box& anchor, const Box& target) {
  const double aw = anchor.width(), ah = anchor.height();
  return BoxDelta{(target.center_x() - anchor.center_x()) / aw,
                  (target.center_y() - anchor.center_y()) / ah, std::log(target.width() / aw),
                  std::log(target.height() / ah)};
}

DecodeResult decode_boxes(const AnchorSet& anchors, std::span<const BoxDelta> deltas,
                          double image_width, double image_height) {
  if (deltas.size() != anchors.size()) {
    throw DimensionError("decode_boxes: " + std::to_string(deltas.size()) + " deltas for " +
                         std::to_string(anchors.size()) + " anchors");
  }
  DecodeResult out;
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    const BoxDelta& d = deltas[i];
    if (!std::all_of(d.begin(), d.end(), [](double v) { return std::isfinite(v); })) {
      ++out.rejected;
      continue;
    }
    Box b = decode_box(anchors.anchors[i], d);
    b.x1 = std::clamp(b.x1, 0.0, image_width);
    b.x2 = std::clamp(b.x2, 0.0, image_width);
    b.y1 = std::clamp(b.y1, 0.0, image_height);
    b.y2 = std::clamp(b.y2, 0.0, image_height);
    if (!b.valid()) {
      ++out.rejected;
      continue;
    }
    out.boxes.push_back(b);
    out.anchor_index.push_back(i);
  }
  return out;
}

DetectionSet nms(const DetectionSet& dets, double iou_thresh, double score_thresh) {
  if (dets.boxes.size() != dets.scores.size()) {
    throw DimensionError("nms: boxes and scores differ in length");
  }
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (dets.scores[i] >= score_thresh) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets.scores[a] > dets.scores[b]; });
  DetectionSet out;
  for (std::size_t i : order) {
    const bool suppressed = std::any_of(out.boxes.begin(), out.boxes.end(), [&](const Box& k) {
      return iou(k, dets.boxes[i]) > iou_thresh;
    });
    if (suppressed) continue;
    out.boxes.push_back(dets.boxes[i]);
    out.scores.push_back(dets.scores[i]);
  }
  return out;
}

std::size_t TargetAssignment::positives() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
}

TargetAssignment assign_targets(const AnchorSet& anchors, std::span<const Box> gt,
                                const HeadLossConfig& cfg) {
  const std::size_t n = anchors.size();
  TargetAssignment out{std::vector<int>(n, 0), std::vector<BoxDelta>(n, BoxDelta{})};
  if (gt.empty()) return out;

  std::vector<double> best_iou(n, 0.0);
  std::vector<std::size_t> best_gt(n, 0);
  std::vector<double> gt_best(gt.size(), 0.0);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t k = 0; k < gt.size(); ++k) {
      const double v = iou(anchors.anchors[a], gt[k]);
      if (v > best_iou[a]) {
        best_iou[a] = v;
        best_gt[a] = k;
      }
      gt_best[k] = std::max(gt_best[k], v);
    }
  }
  for (std::size_t a = 0; a < n; ++a) {
    if (best_iou[a] >= cfg.pos_iou) {
      out.labels[a] = 1;
    } else if (best_iou[a] < cfg.neg_iou) {
      out.labels[a] = 0;
    } else {
      out.labels[a] = kLabelIgnore;
    }
  }
  // Every gt keeps its best anchor(s), whatever their IoU.
  for (std::size_t k = 0; k < gt.size(); ++k) {
    if (gt_best[k] <= 0.0) continue;
    for (std::size_t a = 0; a < n; ++a) {
      if (iou(anchors.anchors[a], gt[k]) == gt_best[k]) {
        out.labels[a] = 1;
        best_gt[a] = k;
      }
    }
  }
  for (std::size_t a = 0; a < n; ++a) {
    if (out.labels[a] == 1) out.targets[a] = encode_box(anchors.anchors[a], gt[best_gt[a]]);
  }
  return out;
}

FocalLossResult focal_loss(std::span<const double> logits, std::span<const int> labels,
                           const HeadLossConfig& cfg) {
  if (logits.size() != labels.size()) throw DimensionError("focal_loss: length mismatch");
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (labels[i] == kLabelIgnore) continue;
    sum += focal_term(logits[i], labels[i], cfg).value;
    ++count;
  }
  if (count == 0) return {0.0, true};
  return {sum / static_cast<double>(count), false};
}

double focal_term_grad(double logit, int label, const HeadLossConfig& cfg) {
  return focal_term(logit, label, cfg).grad;
}

double smooth_l1(double x) {
  const double a = std::fabs(x);
  return a < 1.0 ? 0.5 * x * x : a - 0.5;
}

double regression_loss(std::span<const BoxDelta> deltas, std::span<const BoxDelta> targets,
                       std::span<const int> labels) {
  if (deltas.size() != targets.size() || deltas.size() != labels.size()) {
    throw DimensionError("regression_loss: length mismatch");
  }
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t k = 0; k < 4; ++k) sum += smooth_l1(deltas[i][k] - targets[i][k]);
    ++count;
  }
  return count ? sum / static_cast<double>(count) : 0.0;
}

DetectionHead::DetectionHead(std::size_t channels, std::size_t hidden, Rng& rng,
                             std::size_t anchors_per_cell)
    : channels_(channels), hidden_(hidden) {
  apc_ = std::make_unique<Conv2d>("head.apc", channels, channels, 3, 1, 1, rng);
  rpn_conv_ = std::make_unique<Conv2d>("head.rpn_conv", channels, hidden, 3, 1, 1, rng);
  cls_ = std::make_unique<Conv2d>("head.cls", hidden, anchors_per_cell, 1, 1, 0, rng);
  reg_ = std::make_unique<Conv2d>("head.reg", hidden, 4 * anchors_per_cell, 1, 1, 0, rng);
  std::normal_distribution<double> small(0.0, 0.01);
  for (double& w : cls_->weight().value.values()) w = small(rng);
  for (double& w : reg_->weight().value.values()) w = small(rng);
  // Foreground prior of 0.01 keeps the initial focal loss from being swamped by negatives.
  cls_->bias().value.fill(-std::log((1.0 - 0.01) / 0.01));
}

Var DetectionHead::apc_forward(Graph& g, Var h_agg) {
  return ops::add(g, h_agg, ops::relu(g, apc_->forward(g, h_agg)));
}

DetectionHead::Outputs DetectionHead::rpn_forward(Graph& g, Var feat) {
  const Var hidden = ops::relu(g, rpn_conv_->forward(g, feat));
  return Outputs{hidden, cls_->forward(g, hidden), reg_->forward(g, hidden)};
}

std::vector<Parameter*> DetectionHead::parameters() {
  std::vector<Parameter*> out;
  for (Conv2d* c : {apc_.get(), rpn_conv_.get(), cls_.get(), reg_.get()}) {
    if (c) c->collect_parameters(out);
  }
  return out;
}

FeatureMap apc_forward(const FeatureMap& h_agg, DetectionHead& head) {
  if (h_agg.stride != kAnchorStride) throw ContractError("apc_forward: expects a stride-16 map");
  Graph g(false, false);
  const Var out = head.apc_forward(g, g.constant(h_agg.values));
  return FeatureMap{g.value(out), h_agg.stride};
}

RpnOutput flatten_head_outputs(const Tensor& logits, const Tensor& deltas) {
  const std::size_t a = logits.channels(), h = logits.height(), w = logits.width();
  if (deltas.channels() != 4 * a || deltas.height() != h || deltas.width() != w) {
    throw DimensionError("head outputs disagree: " + logits.shape_string() + " vs " +
                         deltas.shape_string());
  }
  RpnOutput out;
  out.logits.resize(a * h * w);
  out.deltas.resize(a * h * w);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      for (std::size_t s = 0; s < a; ++s) {
        const std::size_t idx = (r * w + c) * a + s;
        out.logits[idx] = logits.at(s, r, c);
        for (std::size_t k = 0; k < 4; ++k) out.deltas[idx][k] = deltas.at(s * 4 + k, r, c);
      }
    }
  }
  return out;
}

RpnOutput rpn_forward(const FeatureMap& feat, DetectionHead& head) {
  if (feat.stride != kAnchorStride) throw ContractError("rpn_forward: expects a stride-16 map");
  Graph g(false, false);
  const auto outs = head.rpn_forward(g, g.constant(feat.values));
  return flatten_head_outputs(g.value(outs.logits), g.value(outs.deltas));
}

DetectionSet postprocess(const RpnOutput& out, const AnchorSet& anchors, double image_width,
                         double image_height, const DetectConfig& cfg) {
  const std::size_t n = out.logits.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return out.logits[a] > out.logits[b]; });
  if (order.size() > cfg.pre_nms_top_k) order.resize(cfg.pre_nms_top_k);

  DetectionSet candidates;
  for (std::size_t i : order) {
    const double score = stable_sigmoid(out.logits[i]);
    if (score < cfg.score_thresh) break;
    const BoxDelta& d = out.deltas[i];
    if (!std::all_of(d.begin(), d.end(), [](double v) { return std::isfinite(v); })) continue;
    Box b = decode_box(anchors.anchors[i], d);
    b.x1 = std::clamp(b.x1, 0.0, image_width);
    b.x2 = std::clamp(b.x2, 0.0, image_width);
    b.y1 = std::clamp(b.y1, 0.0, image_height);
    b.y2 = std::clamp(b.y2, 0.0, image_height);
    if (!b.valid()) continue;
    candidates.boxes.push_back(b);
    candidates.scores.push_back(score);
  }
  return nms(candidates, cfg.iou_thresh, cfg.score_thresh);
}

Var detection_loss(Graph& g, Var logits, Var deltas, const TargetAssignment& targets,
                   const HeadLossConfig& cfg) {
  const Tensor& lt = g.value(logits);
  const Tensor& dt = g.value(deltas);
  const RpnOutput flat = flatten_head_outputs(lt, dt);
  const std::size_t n = flat.logits.size();
  if (targets.labels.size() != n) {
    throw DimensionError("detection_loss: " + std::to_string(targets.labels.size()) +
                         " labels for " + std::to_string(n) + " anchors");
  }
  const FocalLossResult cls = focal_loss(flat.logits, targets.labels, cfg);
  const double reg = regression_loss(flat.deltas, targets.targets, targets.labels);
  const double total = cfg.cls_weight * cls.value + cfg.reg_weight * reg;

  const std::size_t counted = static_cast<std::size_t>(
      std::count_if(targets.labels.begin(), targets.labels.end(),
                    [](int l) { return l != kLabelIgnore; }));
  const std::size_t positives = targets.positives();
  const std::size_t a = lt.channels(), h = lt.height(), w = lt.width();

  return g.record(Tensor({1}, total), {logits, deltas},
                  [=, labels = targets.labels, reg_targets = targets.targets](Graph& gr, Var self) {
    const double up = gr.grad(self)[0];
    const double cls_scale = counted ? up * cfg.cls_weight / static_cast<double>(counted) : 0.0;
    const double reg_scale = positives ? up * cfg.reg_weight / static_cast<double>(positives) : 0.0;
    const bool need_l = gr.requires_grad(logits);
    const bool need_d = gr.requires_grad(deltas);
    Tensor* gl = need_l ? &gr.grad_buffer(logits) : nullptr;
    Tensor* gd = need_d ? &gr.grad_buffer(deltas) : nullptr;
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        for (std::size_t s = 0; s < a; ++s) {
          const std::size_t idx = (r * w + c) * a + s;
          const int label = labels[idx];
          if (gl && label != kLabelIgnore) {
            gl->at(s, r, c) += cls_scale * focal_term_grad(flat.logits[idx], label, cfg);
          }
          if (gd && label == 1) {
            for (std::size_t k = 0; k < 4; ++k) {
              gd->at(s * 4 + k, r, c) +=
                  reg_scale * smooth_l1_grad(flat.deltas[idx][k] - reg_targets[idx][k]);
            }
          }
        }
      }
    }
  });
}

}  // namespace mpsn
