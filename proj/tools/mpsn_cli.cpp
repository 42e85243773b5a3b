// mpsn: dataset generation, training, evaluation, FGSM sweeps and heatmaps.

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mpsn/atomic_file.hpp"
#include "mpsn/checkpoint.hpp"
#include "mpsn/dataset.hpp"
#include "mpsn/errors.hpp"
#include "mpsn/evaluation.hpp"
#include "mpsn/image_io.hpp"
#include "mpsn/robustness.hpp"
#include "mpsn/synthetic.hpp"
#include "mpsn/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mpsn;

namespace {

constexpr const char* kVersion = "0.1.0";

enum Exit { kOk = 0, kUsage = 2, kData = 3, kNumeric = 4 };

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

struct Manifest {
  json doc;
  Manifest(const std::string& command, std::uint64_t seed) {
    doc["command"] = command;
    doc["seed"] = seed;
    doc["tool_version"] = kVersion;
    doc["started_at"] = utc_now();
    doc["config"] = json::object();
    doc["outputs"] = json::array();
  }
  void output(const fs::path& p) { doc["outputs"].push_back(p.string()); }
  void write(const fs::path& dir) {
    doc["finished_at"] = utc_now();
    write_file_atomic(dir / "manifest.json", doc.dump(2) + "\n");
  }
};

struct Common {
  int workers = 1;
  std::string flow_dir;
};

std::unique_ptr<FlowProvider> flow_provider(const Common& c) {
  if (!c.flow_dir.empty()) return std::make_unique<PrecomputedFlowProvider>(c.flow_dir);
  if (std::getenv("MPSN_CACHE_DIR")) {
    return std::make_unique<PrecomputedFlowProvider>(PrecomputedFlowProvider::from_environment());
  }
  return nullptr;
}

FlowProvider* flow_for(const ModelBundle& m, std::unique_ptr<FlowProvider>& holder,
                       const Common& c) {
  if (m.variant != Variant::flow) return nullptr;
  if (!holder) holder = flow_provider(c);
  if (!holder) throw ConfigError("flow variant needs --flow-dir or MPSN_CACHE_DIR");
  return holder.get();
}

ModelBundle open_checkpoint(const std::string& path) {
  if (!fs::exists(path)) throw IoError("checkpoint not found: " + path);
  return load_checkpoint(path);
}

/// Training config stored with a checkpoint; defaults when absent.
TrainConfig checkpoint_config(const std::string& path) {
  TrainConfig cfg;
  const json meta = json::parse(checkpoint_meta(path));
  if (meta.contains("config")) {
    ConfigMap values;
    for (const auto& [k, v] : meta["config"].items()) values[k] = v.get<std::string>();
    apply_config(cfg, values);
  }
  return cfg;
}

std::vector<FrameSample> load_samples(const std::string& root, const std::string& format,
                                      const std::string& split, std::size_t stride = 1) {
  const auto seqs = load_split(root, parse_format(format), parse_split(split));
  auto samples = make_samples(seqs, stride);
  if (samples.empty()) throw IoError("no frame pairs in " + root + " (" + split + ")");
  return samples;
}

std::string frame_name(const FrameSample& s) {
  char idx[16];
  std::snprintf(idx, sizeof idx, "%06zu", s.current.index);
  return s.source_id + "_" + idx + ".png";
}

std::string eps_name(double eps) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "eps_%.4f", eps);
  return buf;
}

// --- synth -----------------------------------------------------------------

struct SynthArgs {
  std::string out;
  SynthConfig cfg;
  bool no_flow = false;
};

void run_synth(const SynthArgs& a) {
  SynthConfig cfg = a.cfg;
  cfg.write_flow = !a.no_flow;
  validate(cfg);
  const fs::path root = a.out;
  Manifest man("synth", cfg.seed);
  man.doc["config"] = {{"n_sequences", cfg.n_sequences},
                       {"n_test_sequences", cfg.n_test_sequences},
                       {"frames_per_seq", cfg.frames_per_seq},
                       {"n_heads", cfg.n_heads},
                       {"n_distractors", cfg.n_distractors},
                       {"height", cfg.height},
                       {"width", cfg.width},
                       {"write_flow", cfg.write_flow}};
  synth_generate(cfg, root);
  man.output(root / "train.jsonl");
  man.output(root / "test.jsonl");
  if (cfg.write_flow) man.output(root / "flow");
  man.write(root);
  std::printf("wrote %zu train and %zu test sequences to %s\n", cfg.n_sequences,
              cfg.n_test_sequences, root.c_str());
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  std::string data, format = "jsonl", out, config;
  std::vector<std::string> set;
  std::optional<std::string> variant, arch, lr_schedule;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
};

void run_train(const TrainArgs& a, const Common& c) {
  ConfigMap values;
  if (!a.config.empty()) values = load_config(a.config);
  for (const auto& kv : a.set) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    values[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  if (a.variant) values["variant"] = *a.variant;
  if (a.arch) values["arch"] = *a.arch;
  if (a.lr_schedule) values["lr_schedule"] = *a.lr_schedule;
  if (a.epochs) values["epochs"] = std::to_string(*a.epochs);
  if (a.seed) values["seed"] = std::to_string(*a.seed);
  TrainConfig cfg;
  apply_config(cfg, values);
  validate(cfg);

  const auto train_seqs = load_split(a.data, parse_format(a.format), Split::train);
  const auto val_seqs = load_split(a.data, parse_format(a.format), Split::val);
  const auto train_set = make_samples(train_seqs, cfg.temporal_stride);
  const auto val_set = make_samples(val_seqs, cfg.temporal_stride);
  if (train_set.empty()) throw IoError("no training frame pairs under " + a.data);

  const fs::path out = a.out;
  fs::create_directories(out);
  std::unique_ptr<FlowProvider> flow;
  TrainIo io;
  io.out_dir = out;
  if (cfg.variant == Variant::flow) {
    flow = flow_provider(c);
    if (!flow) throw ConfigError("flow variant needs --flow-dir or MPSN_CACHE_DIR");
    io.flow = flow.get();
  }
  io.on_epoch = [](const EpochMetrics& m) {
    std::printf("epoch %3zu  lr %-8g loss %.5f  val_ap50 %.4f\n", m.epoch, m.lr, m.train_loss,
                m.val_ap50);
    std::fflush(stdout);
  };

  Manifest man("train", cfg.seed);
  for (const auto& [k, v] : describe(cfg)) man.doc["config"][k] = v;
  man.doc["data"] = a.data;
  const TrainResult r = train(cfg, train_set, val_set, io);
  man.doc["checkpoint"] = (out / "best.ckpt").string();
  man.doc["best_epoch"] = r.best_epoch;
  man.output(out / "best.ckpt");
  man.output(out / "metrics.csv");
  man.write(out);
  std::printf("best epoch %zu, val_ap50 %.4f\n", r.best_epoch, r.best_val_ap50);
}

// --- eval ------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, detections, data, format = "jsonl", split = "test", out;
  double count_thresh = 0.5;
  double score_thresh = 0.05;
  double nms_iou = 0.3;
};

void run_eval(const EvalArgs& a, const Common& c) {
  if (a.checkpoint.empty() == a.detections.empty()) {
    throw ConfigError("eval needs exactly one of --checkpoint or --detections");
  }
  const fs::path out = a.out;
  fs::create_directories(out);
  Manifest man("eval", 0);
  man.doc["config"] = {{"count_thresh", a.count_thresh},
                       {"score_thresh", a.score_thresh},
                       {"nms_iou", a.nms_iou}};
  std::vector<FrameDetections> frames;
  if (!a.detections.empty()) {
    frames = read_detections(a.detections);
    man.doc["detections"] = a.detections;
  } else {
    if (a.data.empty()) throw ConfigError("--checkpoint needs --data");
    ModelBundle model = open_checkpoint(a.checkpoint);
    std::unique_ptr<FlowProvider> holder;
    FlowProvider* flow = flow_for(model, holder, c);
    const auto samples = load_samples(a.data, a.format, a.split);
    frames = detect_all(model, samples, DetectConfig{a.nms_iou, a.score_thresh, 1000}, flow);
    write_detections(out / "detections.jsonl", frames, true);
    man.doc["checkpoint"] = a.checkpoint;
    man.output(out / "detections.jsonl");
  }
  const EvalReport report = evaluate(std::move(frames), a.count_thresh);
  write_file_atomic(out / "report.json", report_json(report));
  man.output(out / "report.json");
  man.write(out);
  std::printf("ap50 %s  nmae %.5f  score %.5f\n",
              report.ap50 ? std::to_string(*report.ap50).c_str() : "n/a", report.counting.nmae,
              report.counting.score);
}

// --- attack ----------------------------------------------------------------

struct AttackArgs {
  std::string checkpoint, baseline, data, format = "jsonl", split = "test", out;
  std::vector<double> eps{0.0, 0.02, 0.05, 0.1, 0.2};
  bool no_clamp = false;
  bool no_heatmaps = false;
};

void run_attack(const AttackArgs& a, const Common& c) {
  AttackConfig acfg;
  acfg.epsilons = a.eps;
  std::sort(acfg.epsilons.begin(), acfg.epsilons.end());
  acfg.epsilons.erase(std::unique(acfg.epsilons.begin(), acfg.epsilons.end()),
                      acfg.epsilons.end());
  acfg.clamp = !a.no_clamp;
  validate(acfg);

  ModelBundle model = open_checkpoint(a.checkpoint);
  ModelBundle base = open_checkpoint(a.baseline);
  const TrainConfig tcfg = checkpoint_config(a.checkpoint);
  std::unique_ptr<FlowProvider> holder;
  FlowProvider* flow_m = flow_for(model, holder, c);
  FlowProvider* flow_b = flow_for(base, holder, c);
  const auto samples = load_samples(a.data, a.format, a.split);

  const fs::path out = a.out;
  fs::create_directories(out);
  Manifest man("attack", 0);
  man.doc["config"] = {{"epsilons", acfg.epsilons}, {"clamp", acfg.clamp}};
  man.doc["checkpoint"] = a.checkpoint;
  man.doc["baseline"] = a.baseline;

  const RobustnessReport report = robustness_sweep(SweepModel{&model, flow_m},
                                                   SweepModel{&base, flow_b}, samples, acfg,
                                                   tcfg.loss, tcfg.eval_detect);
  write_file_atomic(out / "robustness.csv", sweep_csv(report));
  write_file_atomic(out / "robustness.json", report_to_json(report));
  man.output(out / "robustness.csv");
  man.output(out / "robustness.json");

  if (!a.no_heatmaps) {
    for (double eps : acfg.epsilons) {
      const fs::path dir = out / "heatmaps" / eps_name(eps);
      fs::create_directories(dir);
      for (const FrameSample& s : samples) {
        const FrameSample adv =
            eps == 0.0 ? s
                       : fgsm_perturb(model, s, tcfg.loss, eps, acfg.clamp, flow_m).adversarial;
        save_gray(dir / frame_name(s), model_cam(model, adv, flow_m).values);
      }
      man.output(dir);
    }
  }
  man.write(out);
  std::fputs(sweep_csv(report).c_str(), stdout);
}

// --- cam -------------------------------------------------------------------

struct CamArgs {
  std::string checkpoint, data, format = "jsonl", split = "test", out;
};

void run_cam(const CamArgs& a, const Common& c) {
  ModelBundle model = open_checkpoint(a.checkpoint);
  std::unique_ptr<FlowProvider> holder;
  FlowProvider* flow = flow_for(model, holder, c);
  const auto samples = load_samples(a.data, a.format, a.split);
  const fs::path out = a.out;
  fs::create_directories(out);
  Manifest man("cam", 0);
  man.doc["checkpoint"] = a.checkpoint;
  man.doc["config"] = {{"source_layer", kCamLayer}};
  for (const FrameSample& s : samples) {
    save_gray(out / frame_name(s), model_cam(model, s, flow).values);
  }
  man.output(out);
  man.write(out);
  std::printf("wrote %zu heatmaps to %s\n", samples.size(), out.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Motion-guided pseudo siamese head detection"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  Common common;
  app.add_option("--workers", common.workers, "OpenMP threads")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_option("--flow-dir", common.flow_dir, "precomputed flow root (else MPSN_CACHE_DIR)");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "generate the synthetic moving-square dataset");
  synth->add_option("--out", sa.out, "output root")->required();
  synth->add_option("--seed", sa.cfg.seed)->capture_default_str();
  synth->add_option("--sequences", sa.cfg.n_sequences)->capture_default_str();
  synth->add_option("--test-sequences", sa.cfg.n_test_sequences)->capture_default_str();
  synth->add_option("--frames", sa.cfg.frames_per_seq)->capture_default_str();
  synth->add_option("--heads", sa.cfg.n_heads)->capture_default_str();
  synth->add_option("--distractors", sa.cfg.n_distractors)->capture_default_str();
  synth->add_option("--height", sa.cfg.height)->capture_default_str();
  synth->add_option("--width", sa.cfg.width)->capture_default_str();
  synth->add_flag("--no-flow", sa.no_flow, "skip writing .flo files");

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "train a model; writes best.ckpt and metrics.csv");
  trn->add_option("--data", ta.data, "dataset root")->required();
  trn->add_option("--format", ta.format, "jsonl or idl")->capture_default_str();
  trn->add_option("--out", ta.out, "run directory")->required();
  trn->add_option("--config", ta.config, "key = value config file");
  trn->add_option("--set", ta.set, "override a config key (key=value), repeatable");
  trn->add_option("--variant", ta.variant, "single_frame, two_frames, diffabs or flow");
  trn->add_option("--arch", ta.arch, "tiny, vgg16, mobilenetv2 or resnet18");
  trn->add_option("--epochs", ta.epochs);
  trn->add_option("--lr-schedule", ta.lr_schedule, "e.g. \"0:1e-2, 15:1e-3\"");
  trn->add_option("--seed", ta.seed);

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "AP50 and counting metrics");
  ev->add_option("--checkpoint", ea.checkpoint);
  ev->add_option("--detections", ea.detections, "detection dump with gt_boxes");
  ev->add_option("--data", ea.data);
  ev->add_option("--format", ea.format)->capture_default_str();
  ev->add_option("--split", ea.split)->capture_default_str();
  ev->add_option("--out", ea.out)->required();
  ev->add_option("--count-thresh", ea.count_thresh)->capture_default_str();
  ev->add_option("--score-thresh", ea.score_thresh)->capture_default_str();
  ev->add_option("--nms-iou", ea.nms_iou)->capture_default_str();

  AttackArgs aa;
  auto* atk = app.add_subcommand("attack", "FGSM sweep against two models");
  atk->add_option("--checkpoint", aa.checkpoint, "motion-guided model")->required();
  atk->add_option("--baseline", aa.baseline, "comparison model")->required();
  atk->add_option("--data", aa.data)->required();
  atk->add_option("--format", aa.format)->capture_default_str();
  atk->add_option("--split", aa.split)->capture_default_str();
  atk->add_option("--out", aa.out)->required();
  atk->add_option("--eps", aa.eps, "epsilons, any order")->delimiter(',')->capture_default_str();
  atk->add_flag("--no-clamp", aa.no_clamp, "do not clamp attacked pixels to [0,1]");
  atk->add_flag("--no-heatmaps", aa.no_heatmaps);

  CamArgs ca;
  auto* cam = app.add_subcommand("cam", "one activation heatmap per frame");
  cam->add_option("--checkpoint", ca.checkpoint)->required();
  cam->add_option("--data", ca.data)->required();
  cam->add_option("--format", ca.format)->capture_default_str();
  cam->add_option("--split", ca.split)->capture_default_str();
  cam->add_option("--out", ca.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  omp_set_num_threads(common.workers);
  try {
    if (*synth) run_synth(sa);
    if (*trn) run_train(ta, common);
    if (*ev) run_eval(ea, common);
    if (*atk) run_attack(aa, common);
    if (*cam) run_cam(ca, common);
  } catch (const ConfigError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const Error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const json::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  }
  return kOk;
}
