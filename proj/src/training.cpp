#include "mpsn/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "mpsn/atomic_file.hpp"
#include "mpsn/checkpoint.hpp"
#include "mpsn/errors.hpp"
#include "json.hpp"

namespace mpsn {

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not a number");
  }
}

std::size_t to_size(const std::string& key, const std::string& v) {
  const double d = to_double(key, v);
  if (d < 0 || d != std::floor(d)) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not a non-negative integer");
  }
  return static_cast<std::size_t>(d);
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': '" + v + "' is not a boolean");
}

ops::NormKind to_norm(const std::string& v) {
  if (v == "batch") return ops::NormKind::batch;
  if (v == "instance") return ops::NormKind::instance;
  throw ConfigError("norm must be batch or instance, got '" + v + "'");
}

using Snapshot = std::vector<Tensor>;

Snapshot snapshot(ModelBundle& m) {
  Snapshot s;
  for (Parameter* p : m.parameters()) s.push_back(p->value);
  for (auto& [name, t] : m.buffers()) s.push_back(*t);
  return s;
}

void restore(ModelBundle& m, const Snapshot& s) {
  std::size_t i = 0;
  for (Parameter* p : m.parameters()) p->value = s[i++];
  for (auto& [name, t] : m.buffers()) *t = s[i++];
}

}  // namespace

std::vector<LrStep> default_lr_schedule() {
  return {{0, 1e-2}, {15, 1e-3}, {35, 1e-4}, {42, 1e-5}};
}

void validate(const TrainConfig& cfg) {
  if (cfg.lr_schedule.empty() || cfg.lr_schedule.front().epoch != 0) {
    throw ConfigError("lr_schedule must start at epoch 0");
  }
  for (std::size_t i = 1; i < cfg.lr_schedule.size(); ++i) {
    if (cfg.lr_schedule[i].epoch <= cfg.lr_schedule[i - 1].epoch) {
      throw ConfigError("lr_schedule epochs must be strictly increasing");
    }
  }
  for (const auto& s : cfg.lr_schedule) {
    if (!(s.lr >= 0.0) || !std::isfinite(s.lr)) throw ConfigError("learning rates must be finite and >= 0");
  }
  if (cfg.epochs == 0) throw ConfigError("epochs must be >= 1");
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (cfg.temporal_stride == 0) throw ConfigError("temporal_stride must be >= 1");
  if (!(cfg.width > 0.0)) throw ConfigError("width must be positive");
  validate(cfg.loss);
}

double lr_at(const std::vector<LrStep>& schedule, std::size_t epoch) {
  double lr = schedule.empty() ? 0.0 : schedule.front().lr;
  for (const auto& s : schedule) {
    if (s.epoch <= epoch) lr = s.lr;
  }
  return lr;
}

std::vector<LrStep> parse_lr_schedule(const std::string& text) {
  std::vector<LrStep> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) {
      throw ConfigError("lr_schedule entry '" + item + "' is not epoch:lr");
    }
    auto trim = [](std::string s) {
      s.erase(0, s.find_first_not_of(" \t"));
      s.erase(s.find_last_not_of(" \t") + 1);
      return s;
    };
    out.push_back({to_size("lr_schedule", trim(item.substr(0, colon))),
                   to_double("lr_schedule", trim(item.substr(colon + 1)))});
  }
  if (out.empty()) throw ConfigError("lr_schedule is empty");
  return out;
}

std::vector<std::string> train_config_keys() {
  return {"variant",     "arch",          "width",         "norm",        "head_hidden",
          "epochs",      "lr_schedule",   "batch_size",    "momentum",    "weight_decay",
          "focal_gamma", "focal_alpha",   "cls_weight",    "reg_weight",  "pos_iou",
          "neg_iou",     "alpha",         "beta",          "seed",        "motion_init",
          "pretrained",  "hflip",         "temporal_stride", "flow_max_displacement",
          "eval_score_thresh", "nms_iou"};
}

void apply_config(TrainConfig& c, const ConfigMap& values) {
  for (const auto& [k, v] : values) {
    if (k == "variant") c.variant = parse_variant(v);
    else if (k == "arch") c.arch = parse_arch(v);
    else if (k == "width") c.width = to_double(k, v);
    else if (k == "norm") c.norm = to_norm(v);
    else if (k == "head_hidden") c.head_hidden = to_size(k, v);
    else if (k == "epochs") c.epochs = to_size(k, v);
    else if (k == "lr_schedule") c.lr_schedule = parse_lr_schedule(v);
    else if (k == "batch_size") c.batch_size = to_size(k, v);
    else if (k == "momentum") c.momentum = to_double(k, v);
    else if (k == "weight_decay") c.weight_decay = to_double(k, v);
    else if (k == "focal_gamma") c.loss.focal_gamma = to_double(k, v);
    else if (k == "focal_alpha") c.loss.focal_alpha = to_double(k, v);
    else if (k == "cls_weight") c.loss.cls_weight = to_double(k, v);
    else if (k == "reg_weight") c.loss.reg_weight = to_double(k, v);
    else if (k == "pos_iou") c.loss.pos_iou = to_double(k, v);
    else if (k == "neg_iou") c.loss.neg_iou = to_double(k, v);
    else if (k == "alpha") c.agg.alpha = to_double(k, v);
    else if (k == "beta") c.agg.beta = to_double(k, v);
    else if (k == "seed") c.seed = static_cast<std::uint64_t>(to_size(k, v));
    else if (k == "motion_init") {
      if (v != "random" && v != "frame") throw ConfigError("motion_init must be random or frame");
      c.motion_from_frame = v == "frame";
    } else if (k == "pretrained") c.pretrained_frame_stream = v;
    else if (k == "hflip") c.hflip = to_bool(k, v);
    else if (k == "temporal_stride") c.temporal_stride = to_size(k, v);
    else if (k == "flow_max_displacement") c.flow_max_displacement = to_double(k, v);
    else if (k == "eval_score_thresh") c.eval_detect.score_thresh = to_double(k, v);
    else if (k == "nms_iou") c.eval_detect.iou_thresh = to_double(k, v);
    else {
      std::string valid;
      for (const auto& key : train_config_keys()) valid += (valid.empty() ? "" : ", ") + key;
      throw ConfigError("unknown config key '" + k + "'; valid keys: " + valid);
    }
  }
}

ConfigMap describe(const TrainConfig& c) {
  std::string schedule;
  for (const auto& s : c.lr_schedule) {
    schedule += (schedule.empty() ? "" : ", ") + std::to_string(s.epoch) + ":" + fmt(s.lr);
  }
  return {{"variant", to_string(c.variant)},
          {"arch", to_string(c.arch)},
          {"width", fmt(c.width)},
          {"norm", c.norm == ops::NormKind::batch ? "batch" : "instance"},
          {"head_hidden", std::to_string(c.head_hidden)},
          {"epochs", std::to_string(c.epochs)},
          {"lr_schedule", schedule},
          {"batch_size", std::to_string(c.batch_size)},
          {"momentum", fmt(c.momentum)},
          {"weight_decay", fmt(c.weight_decay)},
          {"focal_gamma", fmt(c.loss.focal_gamma)},
          {"focal_alpha", fmt(c.loss.focal_alpha)},
          {"cls_weight", fmt(c.loss.cls_weight)},
          {"reg_weight", fmt(c.loss.reg_weight)},
          {"pos_iou", fmt(c.loss.pos_iou)},
          {"neg_iou", fmt(c.loss.neg_iou)},
          {"alpha", fmt(c.agg.alpha)},
          {"beta", fmt(c.agg.beta)},
          {"seed", std::to_string(c.seed)},
          {"motion_init", c.motion_from_frame ? "frame" : "random"},
          {"pretrained", c.pretrained_frame_stream},
          {"hflip", c.hflip ? "true" : "false"},
          {"temporal_stride", std::to_string(c.temporal_stride)},
          {"flow_max_displacement", fmt(c.flow_max_displacement)},
          {"eval_score_thresh", fmt(c.eval_detect.score_thresh)},
          {"nms_iou", fmt(c.eval_detect.iou_thresh)}};
}

ModelBundle build_model(const TrainConfig& cfg) {
  ModelBundle m = build_backbone(make_split_spec(cfg.arch, cfg.width, cfg.norm),
                                 InitPolicy{cfg.seed, cfg.motion_from_frame}, cfg.variant, cfg.agg,
                                 cfg.head_hidden);
  m.flow_encoding.max_displacement = cfg.flow_max_displacement;
  if (!cfg.pretrained_frame_stream.empty()) load_frame_stream(cfg.pretrained_frame_stream, m);
  return m;
}

void sgd_step(const std::vector<Parameter*>& params, double lr, double momentum,
              double weight_decay) {
  for (Parameter* p : params) {
    if (p->grad.empty()) continue;
    if (p->velocity.empty()) p->velocity = Tensor(p->value.shape());
    double* w = p->value.data();
    double* v = p->velocity.data();
    const double* g = p->grad.data();
    const std::size_t n = p->value.size();
    for (std::size_t i = 0; i < n; ++i) {
      v[i] = momentum * v[i] + g[i] + weight_decay * w[i];
      w[i] -= lr * v[i];
    }
    p->zero_grad();
  }
}

FrameSample hflip(const FrameSample& s) {
  FrameSample out = s;
  for (Frame* f : {&out.current, &out.previous}) {
    Tensor& t = f->pixels;
    const std::size_t w = t.width();
    for (std::size_t c = 0; c < t.channels(); ++c) {
      for (std::size_t y = 0; y < t.height(); ++y) {
        for (std::size_t x = 0; x < w / 2; ++x) std::swap(t.at(c, y, x), t.at(c, y, w - 1 - x));
      }
    }
  }
  const double w = static_cast<double>(s.current.pixels.width());
  for (Box& b : out.boxes) b = Box{w - b.x2, b.y1, w - b.x1, b.y2};
  return out;
}

std::vector<FrameDetections> detect_all(ModelBundle& bundle, const std::vector<FrameSample>& samples,
                                        const DetectConfig& cfg, FlowProvider* flow) {
  std::vector<FrameDetections> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    out.push_back(FrameDetections{s.source_id, s.current.index, detect(bundle, s, cfg, flow), s.boxes});
  }
  return out;
}

std::string metrics_csv(const std::vector<EpochMetrics>& history) {
  std::string out = "epoch,lr,train_loss,val_ap50\n";
  for (const auto& m : history) {
    out += std::to_string(m.epoch) + "," + fmt(m.lr) + "," + fmt(m.train_loss) + "," +
           fmt(m.val_ap50) + "\n";
  }
  return out;
}

TrainResult train(const TrainConfig& cfg, const std::vector<FrameSample>& train_set,
                  const std::vector<FrameSample>& val_set, const TrainIo& io) {
  validate(cfg);
  if (train_set.empty()) throw ContractError("training set is empty");
  TrainResult result;
  result.model = build_model(cfg);
  ModelBundle& model = result.model;
  const auto params = model.parameters();
  const bool flip = cfg.hflip && cfg.variant != Variant::flow;

  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::bernoulli_distribution coin(0.5);

  Snapshot best;
  bool have_best = false;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(cfg.lr_schedule, epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double weight = 1.0 / static_cast<double>(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const FrameSample& raw = train_set[order[i]];
        const FrameSample sample = flip && coin(rng) ? hflip(raw) : raw;
        Graph g(true, true);
        const SampleLoss sl = sample_loss(g, model, sample, cfg.loss, io.flow);
        const double value = g.value(sl.loss)[0];
        if (!std::isfinite(value)) {
          std::string where;
          if (!io.out_dir.empty()) {
            save_checkpoint(io.out_dir / "nan_snapshot.ckpt", model);
            where = "; snapshot at " + (io.out_dir / "nan_snapshot.ckpt").string();
          }
          throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " on " +
                             sample.source_id + " frame " + std::to_string(sample.current.index) +
                             where);
        }
        loss_sum += value;
        g.backward(ops::scale(g, sl.loss, weight));
      }
      sgd_step(params, lr, cfg.momentum, cfg.weight_decay);
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.lr = lr;
    m.train_loss = loss_sum / static_cast<double>(train_set.size());
    const auto ap = ap50(detect_all(model, val_set, cfg.eval_detect, io.flow));
    m.val_ap50 = ap ? *ap : std::nan("");
    result.history.push_back(m);

    // Without a usable validation score the latest epoch wins.
    const bool better = !have_best || !ap || *ap > result.best_val_ap50;
    if (better) {
      best = snapshot(model);
      have_best = true;
      result.best_epoch = epoch;
      result.best_val_ap50 = ap ? *ap : std::nan("");
      if (!io.out_dir.empty()) {
        nlohmann::json meta{{"epoch", epoch}, {"config", describe(cfg)}};
        meta["val_ap50"] = ap ? nlohmann::json(*ap) : nlohmann::json(nullptr);
        save_checkpoint(io.out_dir / "best.ckpt", model, meta.dump());
      }
    }
    if (!io.out_dir.empty()) write_file_atomic(io.out_dir / "metrics.csv", metrics_csv(result.history));
    if (io.on_epoch) io.on_epoch(m);
  }
  restore(model, best);
  return result;
}

}  // namespace mpsn
