#pragma once

// FGSM attacks, channel-mean activation heatmaps, the NI distance between
// clean and adversarial heatmap sets, the frame-difference perturbation
// bound and the small-epsilon threshold analysis.

#include <optional>
#include <string>
#include <vector>

#include "mpsn/evaluation.hpp"
#include "mpsn/model.hpp"

namespace mpsn {

struct AttackConfig {
  std::vector<double> epsilons{0.0, 0.02, 0.05, 0.1, 0.2};
  bool clamp = true;
};

/// Throws ConfigError unless epsilons are ascending and within [0,1].
void validate(const AttackConfig& cfg);

struct FgsmResult {
  FrameSample adversarial;
  Tensor grad_current;   // d(loss)/d(I_f)
  Tensor grad_previous;  // d(loss)/d(I_{f-1}), zero for single-frame models
  bool zero_gradient = false;
};

/// I^a = I + eps * sign(dL/dI) for both frames of the sample, using the
/// gradients of one backward pass; optionally clamped to [0,1].
FgsmResult fgsm_perturb(ModelBundle& bundle, const FrameSample& sample, const HeadLossConfig& loss,
                        double eps, bool clamp = true, FlowProvider* flow = nullptr);

/// Detection loss of one sample in inference mode.
double sample_loss_value(ModelBundle& bundle, const FrameSample& sample,
                         const HeadLossConfig& loss, FlowProvider* flow = nullptr);

struct CamHeatmap {
  Tensor values;  // H' x W' in [0,1]
  std::string source_layer;
};

/// Channel mean, then min-max normalization; a constant map becomes all 0.5.
CamHeatmap cam_heatmap(const FeatureMap& feat, std::string source_layer = {});

inline constexpr const char* kCamLayer = "head.rpn_conv";

/// Heatmap of the detection head's last spatial convolution.
CamHeatmap model_cam(ModelBundle& bundle, const FrameSample& sample, FlowProvider* flow = nullptr);

/// || (mean(adv) - mean(clean)) / std(adv u clean) ||_2 over heatmap cells,
/// with population std; cells of zero std contribute 0. Throws ContractError
/// on empty or unequal sets or mismatched heatmap shapes.
double ni(const std::vector<CamHeatmap>& clean, const std::vector<CamHeatmap>& adv);

struct BoundCheck {
  bool ok = true;
  double max_violation = 0.0;  // max over pixels of |dI_df| - eps * t, <= 0 when ok
};

inline constexpr double kBoundSlack = 1e-12;

/// Checks |I_df^a - I_df| <= eps * t element-wise, t = |sign(g_f) - sign(g_{f-1})|,
/// allowing kBoundSlack for rounding.
BoundCheck diff_bound_check(const FrameSample& sample, const FrameSample& adv, double eps,
                            const Tensor& grad_current, const Tensor& grad_previous);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool operator==(const Interval&) const = default;
};

/// Closed sub-intervals of [0,1] (at most two) where |j + eps k| <= |l + eps m|.
std::vector<Interval> epsilon_threshold(double j, double k, double l, double m);

/// Least-squares fit of y = a * eps + b * eps^2 (no intercept). Returns (a, b).
std::pair<double, double> fit_quadratic(const std::vector<double>& eps, const std::vector<double>& y);

struct SweepRow {
  double eps = 0.0;
  double ap50_mpsn = 0.0;
  double ap50_base = 0.0;
  double ni_mpsn = 0.0;
  double ni_base = 0.0;
};

struct ThresholdAnalysis {
  double j = 0.0, k = 0.0, l = 0.0, m = 0.0;
  std::vector<Interval> intervals;
};

struct RobustnessReport {
  std::vector<SweepRow> rows;
  ThresholdAnalysis threshold;
};

struct SweepModel {
  ModelBundle* bundle = nullptr;
  FlowProvider* flow = nullptr;
};

/// For each epsilon, attacks every sample against each model's own loss and
/// records AP50 of the attacked set and NI between clean and attacked heatmaps.
/// Coefficients (j, k) and (l, m) come from fit_quadratic of each NI curve.
RobustnessReport robustness_sweep(SweepModel mpsn, SweepModel baseline,
                                  const std::vector<FrameSample>& samples, const AttackConfig& cfg,
                                  const HeadLossConfig& loss, const DetectConfig& detect_cfg);

/// Columns eps, ap50_mpsn, ap50_base, ni_mpsn, ni_base.
std::string sweep_csv(const RobustnessReport& report);
std::string report_to_json(const RobustnessReport& report);
RobustnessReport report_from_json(const std::string& text);

}  // namespace mpsn
