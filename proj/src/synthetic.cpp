#include "mpsn/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "mpsn/errors.hpp"
#include "mpsn/image_io.hpp"

namespace mpsn {

namespace {

struct Sprite {
  std::size_t size = 0;
  Tensor texture;  // 3 x size x size
};

struct Mover {
  Sprite sprite;
  double x = 0, y = 0;
  double angle = 0, speed = 0;
};

struct Simulation {
  std::vector<Tensor> frames;
  std::vector<std::vector<Box>> heads;                    // per frame
  std::vector<std::vector<std::array<int, 2>>> shifts;    // per frame, per head
};

Sprite make_sprite(std::mt19937_64& rng, const SynthConfig& cfg) {
  std::uniform_int_distribution<std::size_t> size_dist(cfg.min_size, cfg.max_size);
  std::uniform_real_distribution<double> color(0.05, 0.95);
  std::uniform_real_distribution<double> jitter(-0.12, 0.12);
  Sprite s;
  s.size = size_dist(rng);
  s.texture = Tensor::chw(3, s.size, s.size);
  const double base[3] = {color(rng), color(rng), color(rng)};
  const std::size_t cells = (s.size + 3) / 4;
  std::vector<double> blocks(cells * cells);
  for (double& b : blocks) b = jitter(rng);
  for (std::size_t y = 0; y < s.size; ++y) {
    for (std::size_t x = 0; x < s.size; ++x) {
      const bool border = x < 2 || y < 2 || x + 2 >= s.size || y + 2 >= s.size;
      for (std::size_t c = 0; c < 3; ++c) {
        double v = base[c] + blocks[(y / 4) * cells + x / 4];
        if (border) v *= 0.6;
        s.texture.at(c, y, x) = quantize8(v);
      }
    }
  }
  return s;
}

Tensor make_background(std::mt19937_64& rng, const SynthConfig& cfg) {
  std::uniform_real_distribution<double> base(0.35, 0.65);
  std::uniform_real_distribution<double> freq(0.02, 0.12);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::uniform_real_distribution<double> grain(-0.03, 0.03);
  Tensor bg = Tensor::chw(3, cfg.height, cfg.width);
  for (std::size_t c = 0; c < 3; ++c) {
    const double b = base(rng);
    const double fx1 = freq(rng), fy1 = freq(rng), p1 = phase(rng);
    const double fx2 = freq(rng), fy2 = freq(rng), p2 = phase(rng);
    for (std::size_t y = 0; y < cfg.height; ++y) {
      for (std::size_t x = 0; x < cfg.width; ++x) {
        const double v = b + 0.08 * std::sin(fx1 * x + fy1 * y + p1) +
                         0.08 * std::sin(fx2 * x - fy2 * y + p2) + grain(rng);
        bg.at(c, y, x) = quantize8(v);
      }
    }
  }
  return bg;
}

void paste(Tensor& frame, const Sprite& s, int x0, int y0) {
  for (std::size_t y = 0; y < s.size; ++y) {
    for (std::size_t x = 0; x < s.size; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        frame.at(c, y0 + y, x0 + x) = s.texture.at(c, y, x);
      }
    }
  }
}

std::mt19937_64 sequence_rng(const SynthConfig& cfg, Split split, std::size_t sequence) {
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                    static_cast<std::uint32_t>(split), static_cast<std::uint32_t>(sequence)};
  return std::mt19937_64(seq);
}

std::string source_id(Split split, std::size_t sequence) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s_seq%02zu", to_string(split).c_str(), sequence);
  return buf;
}

Simulation simulate(const SynthConfig& cfg, Split split, std::size_t sequence) {
  auto rng = sequence_rng(cfg, split, sequence);
  const Tensor background = make_background(rng, cfg);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> speed(cfg.min_step, cfg.max_step);
  std::normal_distribution<double> turn(0.0, 0.3);

  auto place = [&](const Sprite& s) {
    return std::array<double, 2>{unit(rng) * static_cast<double>(cfg.width - s.size),
                                 unit(rng) * static_cast<double>(cfg.height - s.size)};
  };

  std::vector<std::pair<Sprite, std::array<int, 2>>> distractors;
  for (std::size_t i = 0; i < cfg.n_distractors; ++i) {
    Sprite s = make_sprite(rng, cfg);
    const auto p = place(s);
    distractors.push_back({std::move(s), {static_cast<int>(p[0]), static_cast<int>(p[1])}});
  }
  std::vector<Mover> heads;
  for (std::size_t i = 0; i < cfg.n_heads; ++i) {
    Mover m;
    m.sprite = make_sprite(rng, cfg);
    const auto p = place(m.sprite);
    m.x = p[0];
    m.y = p[1];
    m.angle = unit(rng) * 2.0 * std::numbers::pi;
    m.speed = speed(rng);
    heads.push_back(std::move(m));
  }

  Simulation sim;
  std::vector<std::array<int, 2>> previous;
  for (std::size_t f = 0; f < cfg.frames_per_seq; ++f) {
    if (f > 0) {
      for (Mover& m : heads) {
        m.angle += turn(rng);
        double nx = m.x + m.speed * std::cos(m.angle);
        double ny = m.y + m.speed * std::sin(m.angle);
        const double max_x = static_cast<double>(cfg.width - m.sprite.size);
        const double max_y = static_cast<double>(cfg.height - m.sprite.size);
        if (nx < 0.0 || nx > max_x) {
          m.angle = std::numbers::pi - m.angle;
          nx = std::clamp(m.x + m.speed * std::cos(m.angle), 0.0, max_x);
        }
        if (ny < 0.0 || ny > max_y) {
          m.angle = -m.angle;
          ny = std::clamp(m.y + m.speed * std::sin(m.angle), 0.0, max_y);
        }
        m.x = nx;
        m.y = ny;
      }
    }
    Tensor frame = background;
    for (const auto& [s, p] : distractors) paste(frame, s, p[0], p[1]);
    std::vector<Box> boxes;
    std::vector<std::array<int, 2>> positions, shifts;
    for (std::size_t i = 0; i < heads.size(); ++i) {
      const Mover& m = heads[i];
      const int x = static_cast<int>(std::lround(m.x)), y = static_cast<int>(std::lround(m.y));
      paste(frame, m.sprite, x, y);
      const double s = static_cast<double>(m.sprite.size);
      boxes.push_back(Box{double(x), double(y), x + s, y + s});
      positions.push_back({x, y});
      shifts.push_back(f == 0 ? std::array<int, 2>{0, 0}
                              : std::array<int, 2>{x - previous[i][0], y - previous[i][1]});
    }
    previous = positions;
    sim.frames.push_back(std::move(frame));
    sim.heads.push_back(std::move(boxes));
    sim.shifts.push_back(std::move(shifts));
  }
  return sim;
}

std::size_t sequence_count(const SynthConfig& cfg, Split split) {
  return split == Split::test ? cfg.n_test_sequences : cfg.n_sequences;
}

}  // namespace

void validate(const SynthConfig& cfg) {
  if (cfg.min_size == 0 || cfg.min_size > cfg.max_size) {
    throw ConfigError("synthetic object sizes need 0 < min_size <= max_size");
  }
  if (cfg.height < kMinFrameSide || cfg.width < kMinFrameSide) {
    throw ConfigError("synthetic frames must be at least 32x32");
  }
  if (cfg.max_size >= cfg.height || cfg.max_size >= cfg.width) {
    throw ConfigError("synthetic objects must be smaller than the frame");
  }
  if (!(cfg.min_step >= 0.0 && cfg.min_step <= cfg.max_step)) {
    throw ConfigError("synthetic steps need 0 <= min_step <= max_step");
  }
}

std::vector<AnnotatedSequence> synth_sequences(const SynthConfig& cfg, Split split) {
  validate(cfg);
  std::vector<AnnotatedSequence> out;
  for (std::size_t s = 0; s < sequence_count(cfg, split); ++s) {
    Simulation sim = simulate(cfg, split, s);
    AnnotatedSequence seq{source_id(split, s), {}};
    for (std::size_t f = 0; f < sim.frames.size(); ++f) {
      seq.frames.push_back(AnnotatedFrame{Frame{std::move(sim.frames[f]), f}, sim.heads[f]});
    }
    out.push_back(std::move(seq));
  }
  return out;
}

std::vector<FlowField> synth_flow(const SynthConfig& cfg, Split split, std::size_t sequence) {
  validate(cfg);
  const Simulation sim = simulate(cfg, split, sequence);
  std::vector<FlowField> out;
  const auto h = static_cast<std::uint32_t>(cfg.height), w = static_cast<std::uint32_t>(cfg.width);
  for (std::size_t f = 0; f < sim.frames.size(); ++f) {
    FlowField flow(h, w);
    // Later heads are drawn on top, so they own overlapping pixels.
    for (std::size_t i = 0; i < sim.heads[f].size(); ++i) {
      const Box& b = sim.heads[f][i];
      const auto [dx, dy] = sim.shifts[f][i];
      for (auto y = static_cast<std::size_t>(b.y1); y < static_cast<std::size_t>(b.y2); ++y) {
        for (auto x = static_cast<std::size_t>(b.x1); x < static_cast<std::size_t>(b.x2); ++x) {
          flow.set(y, x, static_cast<float>(dx), static_cast<float>(dy));
        }
      }
    }
    out.push_back(std::move(flow));
  }
  return out;
}

DatasetSpec synth_generate(const SynthConfig& cfg, const std::filesystem::path& root) {
  validate(cfg);
  for (Split split : {Split::train, Split::test}) {
    std::vector<AnnotationRecord> records;
    const auto sequences = synth_sequences(cfg, split);
    for (std::size_t s = 0; s < sequences.size(); ++s) {
      const auto& seq = sequences[s];
      for (const auto& f : seq.frames) {
        char name[32];
        std::snprintf(name, sizeof(name), "%06zu.png", f.frame.index);
        const std::string rel = to_string(split) + "/" + seq.source_id + "/" + name;
        save_image(root / rel, f.frame.pixels);
        records.push_back(AnnotationRecord{rel, seq.source_id, f.frame.index, f.boxes});
      }
      if (cfg.write_flow) {
        const auto flows = synth_flow(cfg, split, s);
        for (std::size_t f = 0; f < flows.size(); ++f) {
          write_flow_file(flow_file_path(root / "flow", seq.source_id, f), flows[f]);
        }
      }
    }
    write_jsonl(root / (to_string(split) + ".jsonl"), records);
  }
  return DatasetSpec{DatasetFormat::jsonl, root, Split::train};
}

}  // namespace mpsn
