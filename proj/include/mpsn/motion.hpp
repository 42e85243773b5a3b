#pragma once

// Motion estimation: absolute frame difference and optical-flow encoding.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mpsn/autograd.hpp"
#include "mpsn/geometry.hpp"
#include "mpsn/tensor.hpp"

namespace mpsn {

inline constexpr std::size_t kMinFrameSide = 32;

/// One video frame: CHW pixels in [0,1].
struct Frame {
  Tensor pixels;
  std::size_t index = 0;
};

enum class MotionKind { diffabs, flow };

struct MotionImage {
  Tensor pixels;
  MotionKind kind = MotionKind::diffabs;
};

/// Consecutive frame pair with the ground truth of the current frame.
struct FrameSample {
  Frame current;
  Frame previous;
  std::vector<Box> boxes;
  std::string source_id;
};

struct AnnotatedFrame {
  Frame frame;
  std::vector<Box> boxes;
};

struct AnnotatedSequence {
  std::string source_id;
  std::vector<AnnotatedFrame> frames;
};

/// |current - previous| element-wise. Throws DimensionError on shape mismatch.
MotionImage frame_difference(const Frame& current, const Frame& previous);

/// Differentiable form used when gradients must reach both frames.
Var frame_difference(Graph& g, Var current, Var previous);

/// Dense 2-vector displacement field, (u, v) interleaved per pixel.
struct FlowField {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::vector<float> uv;

  FlowField() = default;
  FlowField(std::uint32_t h, std::uint32_t w) : height(h), width(w), uv(2ull * h * w, 0.0f) {}

  float u(std::size_t y, std::size_t x) const { return uv[2 * (y * width + x)]; }
  float v(std::size_t y, std::size_t x) const { return uv[2 * (y * width + x) + 1]; }
  void set(std::size_t y, std::size_t x, float u_val, float v_val) {
    uv[2 * (y * width + x)] = u_val;
    uv[2 * (y * width + x) + 1] = v_val;
  }
};

struct FlowEncoding {
  double max_displacement = 16.0;
};

/// Encodes flow into 3 channels: (min(|f| / maxdisp, 1), (u / maxdisp + 1) / 2,
/// (v / maxdisp + 1) / 2), the last two clamped to [0,1].
MotionImage encode_flow(const FlowField& flow, const FlowEncoding& enc = {});

/// Precomputed flow file: "MPSNFLO1", H, W (u32 LE), then H*W*2 f32 LE.
void write_flow_file(const std::filesystem::path& path, const FlowField& flow);
FlowField read_flow_file(const std::filesystem::path& path);

/// <root>/<source_id>/<index, 6 digits>.flo
std::filesystem::path flow_file_path(const std::filesystem::path& root,
                                     const std::string& source_id, std::size_t index);

class FlowProvider {
 public:
  virtual ~FlowProvider() = default;
  virtual FlowField estimate(const Frame& current, const Frame& previous,
                             const std::string& source_id) = 0;
};

/// Looks up flow files written offline by an external estimator.
class PrecomputedFlowProvider : public FlowProvider {
 public:
  explicit PrecomputedFlowProvider(std::filesystem::path root) : root_(std::move(root)) {}
  /// Root taken from MPSN_CACHE_DIR; throws LookupError when unset.
  static PrecomputedFlowProvider from_environment();

  FlowField estimate(const Frame& current, const Frame& previous,
                     const std::string& source_id) override;

  const std::filesystem::path& root() const { return root_; }

 private:
  std::filesystem::path root_;
};

MotionImage flow_motion(const Frame& current, const Frame& previous, const std::string& source_id,
                        FlowProvider& provider, const FlowEncoding& enc = {});

/// Pairs each frame with the one `stride` positions earlier. Frames without a
/// predecessor are skipped, so the result has max(0, N - stride) samples.
std::vector<FrameSample> sample_pairs(const AnnotatedSequence& sequence, std::size_t stride = 1);

/// Throws when pixels fall outside [0,1] or the frame is smaller than 32x32.
void validate_frame(const Frame& frame);

}  // namespace mpsn
