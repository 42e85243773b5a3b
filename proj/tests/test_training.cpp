#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "mpsn/checkpoint.hpp"
#include "mpsn/config.hpp"
#include "mpsn/dataset.hpp"
#include "mpsn/errors.hpp"
#include "mpsn/synthetic.hpp"
#include "mpsn/training.hpp"

using namespace mpsn;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mpsn_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SynthConfig small_synth() {
  SynthConfig cfg;
  cfg.seed = 3;
  cfg.n_sequences = 2;
  cfg.n_test_sequences = 1;
  cfg.frames_per_seq = 4;
  cfg.height = 64;
  cfg.width = 64;
  cfg.min_size = 14;
  cfg.max_size = 18;
  return cfg;
}

TrainConfig small_train() {
  TrainConfig cfg;
  cfg.width = 0.5;
  cfg.epochs = 1;
  cfg.lr_schedule = {{0, 1e-3}};
  cfg.seed = 9;
  return cfg;
}

bool inside_any(const std::vector<Box>& boxes, double x, double y) {
  for (const Box& b : boxes) {
    if (x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2) return true;
  }
  return false;
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  const auto s = default_lr_schedule();
  CHECK(lr_at(s, 0) == 1e-2);
  CHECK(lr_at(s, 14) == 1e-2);
  CHECK(lr_at(s, 15) == 1e-3);
  CHECK(lr_at(s, 34) == 1e-3);
  CHECK(lr_at(s, 35) == 1e-4);
  CHECK(lr_at(s, 42) == 1e-5);
  CHECK(lr_at(s, 49) == 1e-5);

  const auto p = parse_lr_schedule(" 0:3e-3, 6:3e-4 ,9:3e-5");
  REQUIRE(p.size() == 3);
  CHECK(p[1].epoch == 6);
  CHECK(p[2].lr == 3e-5);
  CHECK_THROWS_AS(parse_lr_schedule("0=1e-2"), ConfigError);
  CHECK_THROWS_AS(parse_lr_schedule(""), ConfigError);

  TrainConfig cfg;
  cfg.lr_schedule = {{1, 1e-2}};
  CHECK_THROWS_AS(validate(cfg), ConfigError);
  cfg.lr_schedule = {{0, 1e-2}, {5, 1e-3}, {5, 1e-4}};
  CHECK_THROWS_AS(validate(cfg), ConfigError);
}

TEST_CASE("config text and overrides") {
  const ConfigMap m = parse_config("# header\nvariant = flow\n\nlr_schedule = \"0:1e-2, 3:1e-3\"\n");
  CHECK(m.at("variant") == "flow");
  CHECK(m.at("lr_schedule") == "0:1e-2, 3:1e-3");
  try {
    parse_config("a = 1\nb\n");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find('2') != std::string::npos);
  }
  CHECK_THROWS_AS(parse_config("a = 1\na = 2\n"), ParseError);

  TrainConfig cfg;
  apply_config(cfg, m);
  CHECK(cfg.variant == Variant::flow);
  CHECK(lr_at(cfg.lr_schedule, 3) == 1e-3);
  // Later maps win, which is how the CLI layers file, --set and flags.
  apply_config(cfg, {{"variant", "single_frame"}});
  CHECK(cfg.variant == Variant::single_frame);
  try {
    apply_config(cfg, {{"lerning_rate", "1"}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("lr_schedule") != std::string::npos);
  }
  CHECK_THROWS_AS(apply_config(cfg, {{"width", "wide"}}), ConfigError);

  // describe() output fed back through apply_config reproduces itself.
  TrainConfig tuned = small_train();
  tuned.loss.cls_weight = 50;
  tuned.hflip = true;
  TrainConfig copy;
  apply_config(copy, describe(tuned));
  CHECK(describe(copy) == describe(tuned));
  CHECK(describe(tuned).size() == train_config_keys().size());
}

TEST_CASE("idl annotations") {
  const fs::path dir = scratch_dir("idl");
  write_text(dir / "train.idl",
             "\"cam1/a.png\": (10, 20, 30, 40), (50, 60, 40, 70);\n"
             "\"cam1/b.png\";\n"
             "\"cam2/a.png\": (1.5, 2, 3, 4).\n");
  const auto recs = load_idl(dir / "train.idl");
  REQUIRE(recs.size() == 3);
  CHECK(recs[0].source_id == "cam1");
  CHECK(recs[0].frame_index == 0);
  CHECK(recs[1].frame_index == 1);
  CHECK(recs[1].boxes.empty());
  CHECK(recs[2].source_id == "cam2");
  CHECK(recs[2].frame_index == 0);
  CHECK(recs[0].boxes[1] == Box{40, 60, 50, 70});
  CHECK(recs[2].boxes[0].x1 == 1.5);

  write_text(dir / "bad.idl", "\"a/x.png\": (1, 2, 3, 4);\n\"a/y.png\": (1, 2, 3);\n");
  try {
    load_idl(dir / "bad.idl");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("2") != std::string::npos);
  }
  CHECK_THROWS_AS(load_idl(dir / "missing.idl"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("jsonl annotations and splits") {
  const fs::path dir = scratch_dir("jsonl");
  const std::vector<AnnotationRecord> recs{
      {"s/000000.png", "s", 0, {Box{1, 2, 3, 4}}},
      {"s/000001.png", "s", 1, {}},
  };
  write_jsonl(dir / "x.jsonl", recs);
  CHECK(load_jsonl(dir / "x.jsonl") == recs);
  write_text(dir / "empty.jsonl", "");
  CHECK(load_jsonl(dir / "empty.jsonl").empty());
  write_text(dir / "broken.jsonl", "{\"source_id\": 3}\n");
  CHECK_THROWS_AS(load_jsonl(dir / "broken.jsonl"), ParseError);

  std::vector<AnnotatedSequence> seqs;
  for (int i = 0; i < 10; ++i) seqs.push_back({"s" + std::to_string(i), {}});
  const TrainValSplit s = split_train_val(seqs, 0.1);
  CHECK(s.train.size() == 9);
  CHECK(s.val.size() == 1);
  CHECK(s.val[0].source_id == "s9");
  CHECK(split_train_val({seqs[0], seqs[1]}, 0.1).val.size() == 1);
  CHECK(split_train_val({seqs[0]}, 0.1).val.empty());
  CHECK(parse_split("test") == Split::test);
  CHECK_THROWS_AS(parse_split("dev"), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("synthetic data") {
  const SynthConfig cfg = small_synth();
  const auto a = synth_sequences(cfg, Split::train);
  const auto b = synth_sequences(cfg, Split::train);
  REQUIRE(a.size() == 2);
  CHECK(a[0].frames.size() == 4);
  CHECK(a[0].frames[2].frame.pixels == b[0].frames[2].frame.pixels);
  CHECK(a[0].frames[0].boxes.size() == 2);
  CHECK(synth_sequences(cfg, Split::test).size() == 1);
  CHECK(synth_sequences(cfg, Split::test)[0].frames[0].frame.pixels != a[0].frames[0].frame.pixels);

  SynthConfig one = cfg;
  one.n_heads = 1;
  one.n_distractors = 0;
  for (const auto& f : synth_sequences(one, Split::train)[0].frames) CHECK(f.boxes.size() == 1);

  // Background and distractors never move, so every changed pixel lies in a
  // head box of the current or the previous frame.
  for (const auto& seq : a) {
    for (std::size_t f = 1; f < seq.frames.size(); ++f) {
      const Tensor& cur = seq.frames[f].frame.pixels;
      const Tensor& prev = seq.frames[f - 1].frame.pixels;
      std::size_t moved = 0;
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t y = 0; y < cur.height(); ++y) {
          for (std::size_t x = 0; x < cur.width(); ++x) {
            if (cur.at(c, y, x) == prev.at(c, y, x)) continue;
            ++moved;
            const double px = x + 0.5, py = y + 0.5;
            if (!inside_any(seq.frames[f].boxes, px, py) &&
                !inside_any(seq.frames[f - 1].boxes, px, py)) {
              FAIL("pixel " << x << "," << y << " changed outside head boxes");
            }
          }
        }
      }
      CHECK(moved > 0);
    }
  }

  SynthConfig bad = cfg;
  bad.max_size = 80;
  CHECK_THROWS_AS(validate(bad), ConfigError);
}

TEST_CASE("synthetic files") {
  const fs::path d1 = scratch_dir("synth1"), d2 = scratch_dir("synth2");
  const SynthConfig cfg = small_synth();
  synth_generate(cfg, d1);
  synth_generate(cfg, d2);
  CHECK(read_text(d1 / "train.jsonl") == read_text(d2 / "train.jsonl"));
  CHECK(load_jsonl(d1 / "train.jsonl").size() == 8);
  CHECK(load_jsonl(d1 / "test.jsonl").size() == 4);
  std::size_t pngs = 0, flows = 0;
  for (const auto& e : fs::recursive_directory_iterator(d1)) {
    pngs += e.path().extension() == ".png";
    flows += e.path().extension() == ".flo";
  }
  CHECK(pngs == 12);
  CHECK(flows == 12);
  const auto first = load_jsonl(d1 / "train.jsonl")[0];
  CHECK(read_text(d1 / first.image) == read_text(d2 / first.image));

  // Loading from disk yields the in-memory pixels exactly.
  const auto loaded = load_split(d1, DatasetFormat::jsonl, Split::train);
  const auto memory = synth_sequences(cfg, Split::train);
  const auto val = load_split(d1, DatasetFormat::jsonl, Split::val);
  REQUIRE(loaded.size() + val.size() == memory.size());
  CHECK(loaded[0].frames[1].frame.pixels == memory[0].frames[1].frame.pixels);
  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST_CASE("training smoke run and checkpoints") {
  const fs::path dir = scratch_dir("train");
  const auto samples = make_samples(synth_sequences(small_synth(), Split::train));
  const std::vector<FrameSample> train_set(samples.begin(), samples.begin() + 4);
  const std::vector<FrameSample> val_set(samples.begin() + 4, samples.end());
  const TrainConfig cfg = small_train();

  TrainResult r = train(cfg, train_set, val_set, TrainIo{dir, nullptr, {}});
  REQUIRE(r.history.size() == 1);
  CHECK(std::isfinite(r.history[0].train_loss));
  CHECK(r.history[0].lr == 1e-3);
  CHECK(read_text(dir / "metrics.csv").rfind("epoch,lr,train_loss,val_ap50\n", 0) == 0);
  const auto meta = nlohmann::json::parse(checkpoint_meta(dir / "best.ckpt"));
  CHECK(meta.at("epoch") == 0);
  CHECK(meta.at("config").at("width") == describe(cfg).at("width"));

  // Same seed, same first-epoch loss.
  CHECK(train(cfg, train_set, val_set).history[0].train_loss == r.history[0].train_loss);

  ModelBundle loaded = load_checkpoint(dir / "best.ckpt");
  const DetectConfig dc{0.3, 0.0, 50};
  const DetectionSet d1 = detect(r.model, val_set[0], dc);
  const DetectionSet d2 = detect(loaded, val_set[0], dc);
  CHECK(d1.scores == d2.scores);
  CHECK(d1.boxes == d2.boxes);

  const std::string bytes = read_text(dir / "best.ckpt");
  write_text(dir / "truncated.ckpt", bytes.substr(0, bytes.size() - 100));
  CHECK_THROWS_AS(load_checkpoint(dir / "truncated.ckpt"), IoError);
  write_text(dir / "tag.ckpt", "mpsn-ckpt-v0" + bytes.substr(12));
  CHECK_THROWS_AS(load_checkpoint(dir / "tag.ckpt"), IoError);
  CHECK_THROWS_AS(load_checkpoint(dir / "nothing.ckpt"), IoError);

  // A runaway learning rate ends in a non-finite loss and a snapshot.
  TrainConfig wild = cfg;
  wild.epochs = 3;
  wild.lr_schedule = {{0, 1e12}};
  const fs::path wild_dir = dir / "wild";
  fs::create_directories(wild_dir);
  CHECK_THROWS_AS(train(wild, train_set, val_set, TrainIo{wild_dir, nullptr, {}}), NumericError);
  CHECK(fs::exists(wild_dir / "nan_snapshot.ckpt"));
  fs::remove_all(dir);
}

TEST_CASE("horizontal flip") {
  const auto samples = make_samples(synth_sequences(small_synth(), Split::train));
  const FrameSample& s = samples[0];
  const FrameSample f = hflip(s);
  const std::size_t w = s.current.pixels.width();
  CHECK(f.current.pixels.at(1, 5, 0) == s.current.pixels.at(1, 5, w - 1));
  CHECK(f.boxes[0].x1 == doctest::Approx(double(w) - s.boxes[0].x2));
  const FrameSample back = hflip(f);
  CHECK(back.current.pixels == s.current.pixels);
  CHECK(back.boxes == s.boxes);
}
