#pragma once

// AP50 detection scoring and occupancy-counting metrics.

#include <optional>
#include <string>
#include <vector>

#include "mpsn/detection.hpp"
#include "mpsn/geometry.hpp"

namespace mpsn {

inline constexpr double kApIou = 0.5;

/// All-point interpolated average precision at IoU 0.5 over aligned frames.
/// Detections are ranked by score across all frames (ties keep input order);
/// each one claims the unmatched gt of highest IoU in its frame. Returns
/// nullopt when there are no gt boxes at all.
std::optional<double> ap50(const std::vector<DetectionSet>& dets,
                           const std::vector<std::vector<Box>>& gts);

/// Number of detections scoring at least `score_thresh`.
std::size_t count_heads(const DetectionSet& dets, double score_thresh = 0.5);

struct CountingReport {
  double nmae = 0.0;
  double score = 0.0;
  double avg_head_count = 0.0;  // mean ground-truth count per frame
  std::vector<std::pair<std::size_t, std::size_t>> per_frame;  // (truth, predicted)
};

/// NMAE = mean |n - m| / (n + m) with 0/0 frames counted as 0;
/// SCORE = fraction of frames with n == m. Throws ContractError on a length
/// mismatch or empty input.
CountingReport counting_metrics(const std::vector<std::size_t>& truth,
                                const std::vector<std::size_t>& pred);

struct FrameDetections {
  std::string source_id;
  std::size_t frame_index = 0;
  DetectionSet dets;
  std::vector<Box> gt;
};

/// Detection dump: one JSON object per line with source_id, frame_index,
/// boxes and scores ("gt_boxes" is added when `with_gt`).
void write_detections(const std::string& path, const std::vector<FrameDetections>& frames,
                      bool with_gt = false);
std::vector<FrameDetections> read_detections(const std::string& path);

/// ap50 over FrameDetections, each carrying its own gt.
std::optional<double> ap50(const std::vector<FrameDetections>& frames);

struct EvalReport {
  std::optional<double> ap50;
  CountingReport counting;
  std::vector<FrameDetections> frames;
};

/// `count_thresh` selects detections that count as heads; AP uses every
/// detection in `frames`.
EvalReport evaluate(std::vector<FrameDetections> frames, double count_thresh = 0.5);

/// JSON with ap50 (null when undefined), nmae, score, avg_head_count and per-frame detail.
std::string report_json(const EvalReport& report);

}  // namespace mpsn
