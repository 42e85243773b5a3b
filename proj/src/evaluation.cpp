#include "mpsn/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "mpsn/atomic_file.hpp"
#include "mpsn/errors.hpp"

namespace mpsn {

using nlohmann::json;

std::optional<double> ap50(const std::vector<DetectionSet>& dets,
                           const std::vector<std::vector<Box>>& gts) {
  if (dets.size() != gts.size()) {
    throw ContractError("ap50: " + std::to_string(dets.size()) + " detection frames for " +
                        std::to_string(gts.size()) + " ground-truth frames");
  }
  std::size_t total_gt = 0;
  for (const auto& g : gts) total_gt += g.size();
  if (total_gt == 0) return std::nullopt;

  struct Entry {
    double score;
    std::size_t frame, det;
  };
  std::vector<Entry> ranked;
  for (std::size_t f = 0; f < dets.size(); ++f) {
    if (dets[f].boxes.size() != dets[f].scores.size()) {
      throw DimensionError("ap50: boxes and scores differ in length");
    }
    for (std::size_t d = 0; d < dets[f].size(); ++d) ranked.push_back({dets[f].scores[d], f, d});
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const Entry& a, const Entry& b) { return a.score > b.score; });

  std::vector<std::vector<bool>> taken(gts.size());
  for (std::size_t f = 0; f < gts.size(); ++f) taken[f].assign(gts[f].size(), false);

  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    const Entry& e = ranked[i];
    const Box& box = dets[e.frame].boxes[e.det];
    double best = kApIou;
    std::optional<std::size_t> match;
    for (std::size_t k = 0; k < gts[e.frame].size(); ++k) {
      if (taken[e.frame][k]) continue;
      const double v = iou(box, gts[e.frame][k]);
      if (v >= best && (!match || v > best)) {
        best = v;
        match = k;
      }
    }
    if (match) {
      taken[e.frame][*match] = true;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }

  // Precision envelope, then area under the step curve.
  for (std::size_t i = precision.size(); i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

std::size_t count_heads(const DetectionSet& dets, double score_thresh) {
  return static_cast<std::size_t>(std::count_if(dets.scores.begin(), dets.scores.end(),
                                                [&](double s) { return s >= score_thresh; }));
}

CountingReport counting_metrics(const std::vector<std::size_t>& truth,
                                const std::vector<std::size_t>& pred) {
  if (truth.size() != pred.size()) {
    throw ContractError("counting_metrics: " + std::to_string(truth.size()) + " truths vs " +
                        std::to_string(pred.size()) + " predictions");
  }
  if (truth.empty()) throw ContractError("counting_metrics: no frames");
  CountingReport r;
  double err = 0.0, hits = 0.0, heads = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double n = static_cast<double>(truth[i]), m = static_cast<double>(pred[i]);
    if (n + m > 0.0) err += std::fabs(n - m) / (n + m);
    if (truth[i] == pred[i]) hits += 1.0;
    heads += n;
    r.per_frame.emplace_back(truth[i], pred[i]);
  }
  const double count = static_cast<double>(truth.size());
  r.nmae = err / count;
  r.score = hits / count;
  r.avg_head_count = heads / count;
  return r;
}

namespace {

json boxes_json(const std::vector<Box>& boxes) {
  json out = json::array();
  for (const Box& b : boxes) out.push_back({b.x1, b.y1, b.x2, b.y2});
  return out;
}

std::vector<Box> boxes_from(const json& j) {
  std::vector<Box> out;
  for (const auto& b : j) {
    if (b.size() != 4) throw ParseError("box needs 4 coordinates", 0);
    out.push_back(Box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()});
  }
  return out;
}

}  // namespace

void write_detections(const std::string& path, const std::vector<FrameDetections>& frames,
                      bool with_gt) {
  std::string text;
  for (const auto& f : frames) {
    json j = {{"source_id", f.source_id},
              {"frame_index", f.frame_index},
              {"boxes", boxes_json(f.dets.boxes)},
              {"scores", f.dets.scores}};
    if (with_gt) j["gt_boxes"] = boxes_json(f.gt);
    text += j.dump() + "\n";
  }
  write_file_atomic(path, text);
}

std::vector<FrameDetections> read_detections(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path);
  std::vector<FrameDetections> out;
  std::string line;
  for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      FrameDetections f;
      f.source_id = j.at("source_id").get<std::string>();
      f.frame_index = j.at("frame_index").get<std::size_t>();
      f.dets.boxes = boxes_from(j.at("boxes"));
      f.dets.scores = j.at("scores").get<std::vector<double>>();
      if (f.dets.scores.size() != f.dets.boxes.size()) {
        throw ParseError("boxes and scores differ in length", line_no);
      }
      if (j.contains("gt_boxes")) f.gt = boxes_from(j.at("gt_boxes"));
      out.push_back(std::move(f));
    } catch (const json::exception& e) {
      throw ParseError(path + " line " + std::to_string(line_no) + ": " + e.what(), line_no);
    }
  }
  return out;
}

std::optional<double> ap50(const std::vector<FrameDetections>& frames) {
  std::vector<DetectionSet> dets;
  std::vector<std::vector<Box>> gts;
  for (const auto& f : frames) {
    dets.push_back(f.dets);
    gts.push_back(f.gt);
  }
  return ap50(dets, gts);
}

EvalReport evaluate(std::vector<FrameDetections> frames, double count_thresh) {
  EvalReport r;
  std::vector<DetectionSet> dets;
  std::vector<std::vector<Box>> gts;
  std::vector<std::size_t> truth, pred;
  for (const auto& f : frames) {
    dets.push_back(f.dets);
    gts.push_back(f.gt);
    truth.push_back(f.gt.size());
    pred.push_back(count_heads(f.dets, count_thresh));
  }
  r.ap50 = ap50(dets, gts);
  if (!frames.empty()) r.counting = counting_metrics(truth, pred);
  r.frames = std::move(frames);
  return r;
}

std::string report_json(const EvalReport& report) {
  json j;
  j["ap50"] = report.ap50 ? json(*report.ap50) : json(nullptr);
  j["nmae"] = report.counting.nmae;
  j["score"] = report.counting.score;
  j["avg_head_count"] = report.counting.avg_head_count;
  json frames = json::array();
  for (std::size_t i = 0; i < report.frames.size(); ++i) {
    const auto& f = report.frames[i];
    json row = {{"source_id", f.source_id}, {"frame_index", f.frame_index}};
    if (i < report.counting.per_frame.size()) {
      row["truth"] = report.counting.per_frame[i].first;
      row["predicted"] = report.counting.per_frame[i].second;
    }
    row["detections"] = f.dets.size();
    frames.push_back(row);
  }
  j["per_frame"] = frames;
  return j.dump(2);
}

}  // namespace mpsn
