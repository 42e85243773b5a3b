#pragma once

// Seeded stand-in dataset: textured squares on a static textured background.
// "Heads" follow a random walk; distractors share the heads' appearance
// distribution but never move, so only motion separates the two.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "mpsn/dataset.hpp"
#include "mpsn/motion.hpp"

namespace mpsn {

struct SynthConfig {
  std::uint64_t seed = 0;
  std::size_t n_sequences = 8;
  std::size_t n_test_sequences = 2;
  std::size_t frames_per_seq = 20;
  std::size_t n_heads = 2;
  std::size_t n_distractors = 4;
  std::size_t height = 128;
  std::size_t width = 128;
  std::size_t min_size = 24;
  std::size_t max_size = 32;
  double min_step = 3.0;  // pixels per frame
  double max_step = 6.0;
  bool write_flow = true;
};

/// Throws ConfigError on inconsistent settings (e.g. objects larger than the frame).
void validate(const SynthConfig& cfg);

/// In-memory sequences of one split. Pixels are already quantized to 8 bits,
/// so they equal what synth_generate writes to disk. Boxes are the heads.
std::vector<AnnotatedSequence> synth_sequences(const SynthConfig& cfg, Split split);

/// Exact displacement of every pixel between frame f-1 and f of a sequence
/// (zero for frame 0 and for static pixels).
std::vector<FlowField> synth_flow(const SynthConfig& cfg, Split split, std::size_t sequence);

/// Writes `<root>/train.jsonl`, `<root>/test.jsonl`, PNG frames under
/// `<root>/<split>/<source_id>/`, and, when enabled, flow files under
/// `<root>/flow/`. Returns the train split spec.
DatasetSpec synth_generate(const SynthConfig& cfg, const std::filesystem::path& root);

}  // namespace mpsn
