#pragma once

// SGD training of MPSN and its ablations with a step learning-rate schedule
// and best-on-validation model selection.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mpsn/config.hpp"
#include "mpsn/evaluation.hpp"
#include "mpsn/model.hpp"

namespace mpsn {

struct LrStep {
  std::size_t epoch = 0;
  double lr = 0.0;
};

std::vector<LrStep> default_lr_schedule();  // 1e-2, then /10 at epochs 15, 35, 42

struct TrainConfig {
  Variant variant = Variant::diffabs;
  Arch arch = Arch::tiny;
  double width = 1.0;
  ops::NormKind norm = ops::NormKind::batch;
  std::size_t head_hidden = 0;
  std::size_t epochs = 50;
  std::vector<LrStep> lr_schedule = default_lr_schedule();
  std::size_t batch_size = 1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  HeadLossConfig loss;
  AggregationParams agg;
  std::uint64_t seed = 0;
  bool motion_from_frame = false;
  std::string pretrained_frame_stream;  // checkpoint path, empty for none
  bool hflip = false;
  std::size_t temporal_stride = 1;
  double flow_max_displacement = 16.0;
  /// Detection thresholds used to score validation AP.
  DetectConfig eval_detect{0.3, 0.05, 1000};
};

/// Throws ConfigError on a non-increasing schedule, a schedule not starting
/// at epoch 0, zero epochs or batch size, or invalid loss thresholds.
void validate(const TrainConfig& cfg);

/// Rate of the last schedule step whose epoch is <= `epoch`.
double lr_at(const std::vector<LrStep>& schedule, std::size_t epoch);

/// "0:1e-2, 15:1e-3" -> steps. Throws ConfigError when malformed.
std::vector<LrStep> parse_lr_schedule(const std::string& text);

/// Overrides fields named by `values`. Unknown keys raise ConfigError listing the valid ones.
void apply_config(TrainConfig& cfg, const ConfigMap& values);
std::vector<std::string> train_config_keys();
/// Every field as key/value text, suitable for the run manifest.
ConfigMap describe(const TrainConfig& cfg);

ModelBundle build_model(const TrainConfig& cfg);

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_ap50 = 0.0;  // NaN when the validation set has no gt
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  std::size_t best_epoch = 0;
  double best_val_ap50 = 0.0;
  ModelBundle model;  // parameters of the best epoch
};

struct TrainIo {
  /// Directory for metrics.csv and best.ckpt; empty keeps everything in memory.
  std::filesystem::path out_dir;
  FlowProvider* flow = nullptr;
  std::function<void(const EpochMetrics&)> on_epoch;
};

/// Trains from scratch. Samples are visited in a seeded shuffle each epoch.
/// Throws NumericError when the loss turns non-finite, after saving
/// `nan_snapshot.ckpt` to the output directory when one is set.
TrainResult train(const TrainConfig& cfg, const std::vector<FrameSample>& train_set,
                  const std::vector<FrameSample>& val_set, const TrainIo& io = {});

/// One SGD-with-momentum update of every parameter, then clears gradients.
void sgd_step(const std::vector<Parameter*>& params, double lr, double momentum,
              double weight_decay);

/// Runs detection over samples and pairs each result with its ground truth.
std::vector<FrameDetections> detect_all(ModelBundle& bundle, const std::vector<FrameSample>& samples,
                                        const DetectConfig& cfg, FlowProvider* flow = nullptr);

/// Mirrors both frames and the boxes left to right.
FrameSample hflip(const FrameSample& sample);

std::string metrics_csv(const std::vector<EpochMetrics>& history);

}  // namespace mpsn
