#include "mpsn/motion.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>

#include "mpsn/errors.hpp"

namespace mpsn {

namespace {

constexpr char kFlowMagic[8] = {'M', 'P', 'S', 'N', 'F', 'L', 'O', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> b{static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                              static_cast<char>((v >> 16) & 0xff),
                              static_cast<char>((v >> 24) & 0xff)};
  out.write(b.data(), 4);
}

std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void validate_frame(const Frame& frame) {
  const Tensor& p = frame.pixels;
  if (p.rank() != 3) throw DimensionError("frame must be CHW, got " + p.shape_string());
  if (p.height() < kMinFrameSide || p.width() < kMinFrameSide) {
    throw SizeError("frame " + p.shape_string() + " smaller than 32x32");
  }
  for (double v : p.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw ContractError("frame pixel outside [0,1]");
  }
}

MotionImage frame_difference(const Frame& current, const Frame& previous) {
  require_same_shape(current.pixels, previous.pixels, "frame_difference");
  MotionImage out{Tensor(current.pixels.shape()), MotionKind::diffabs};
  const double* a = current.pixels.data();
  const double* b = previous.pixels.data();
  double* d = out.pixels.data();
  const long n = static_cast<long>(current.pixels.size());
#pragma omp parallel for schedule(static)
  for (long i = 0; i < n; ++i) d[i] = std::fabs(a[i] - b[i]);
  return out;
}

Var frame_difference(Graph& g, Var current, Var previous) {
  return ops::abs(g, ops::sub(g, current, previous));
}

MotionImage encode_flow(const FlowField& flow, const FlowEncoding& enc) {
  const std::size_t h = flow.height, w = flow.width;
  MotionImage out{Tensor::chw(3, h, w), MotionKind::flow};
  const double md = enc.max_displacement;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double u = flow.u(y, x), v = flow.v(y, x);
      out.pixels.at(0, y, x) = std::min(std::hypot(u, v) / md, 1.0);
      out.pixels.at(1, y, x) = std::clamp((u / md + 1.0) / 2.0, 0.0, 1.0);
      out.pixels.at(2, y, x) = std::clamp((v / md + 1.0) / 2.0, 0.0, 1.0);
    }
  }
  return out;
}

void write_flow_file(const std::filesystem::path& path, const FlowField& flow) {
  if (flow.uv.size() != 2ull * flow.height * flow.width) {
    throw DimensionError("flow field data does not match its header");
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write flow file " + path.string());
  out.write(kFlowMagic, sizeof(kFlowMagic));
  put_u32(out, flow.height);
  put_u32(out, flow.width);
  for (float f : flow.uv) put_u32(out, std::bit_cast<std::uint32_t>(f));
  if (!out) throw IoError("short write on flow file " + path.string());
}

FlowField read_flow_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LookupError("no precomputed flow at " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kFlowMagic, sizeof(magic)) != 0) {
    throw IoError("bad flow file magic in " + path.string());
  }
  const std::uint32_t h = get_u32(in);
  const std::uint32_t w = get_u32(in);
  FlowField flow(h, w);
  for (float& f : flow.uv) f = std::bit_cast<float>(get_u32(in));
  if (!in) throw IoError("truncated flow file " + path.string());
  return flow;
}

std::filesystem::path flow_file_path(const std::filesystem::path& root,
                                     const std::string& source_id, std::size_t index) {
  char name[32];
  std::snprintf(name, sizeof(name), "%06zu.flo", index);
  return root / source_id / name;
}

PrecomputedFlowProvider PrecomputedFlowProvider::from_environment() {
  const char* dir = std::getenv("MPSN_CACHE_DIR");
  if (!dir || !*dir) throw LookupError("MPSN_CACHE_DIR is not set");
  return PrecomputedFlowProvider(dir);
}

FlowField PrecomputedFlowProvider::estimate(const Frame& current, const Frame&,
                                            const std::string& source_id) {
  return read_flow_file(flow_file_path(root_, source_id, current.index));
}

MotionImage flow_motion(const Frame& current, const Frame& previous, const std::string& source_id,
                        FlowProvider& provider, const FlowEncoding& enc) {
  require_same_shape(current.pixels, previous.pixels, "flow_motion");
  const FlowField flow = provider.estimate(current, previous, source_id);
  if (flow.height != current.pixels.height() || flow.width != current.pixels.width()) {
    throw DimensionError("flow field " + std::to_string(flow.height) + "x" +
                         std::to_string(flow.width) + " does not match frame " +
                         current.pixels.shape_string());
  }
  MotionImage out = encode_flow(flow, enc);
  if (out.pixels.channels() != current.pixels.channels()) {
    throw DimensionError("flow encoding has 3 channels, frame " + current.pixels.shape_string());
  }
  return out;
}

std::vector<FrameSample> sample_pairs(const AnnotatedSequence& sequence, std::size_t stride) {
  if (stride == 0) throw ContractError("sample_pairs: stride must be >= 1");
  const auto& frames = sequence.frames;
  for (std::size_t i = 1; i < frames.size(); ++i) {
    if (frames[i].frame.index <= frames[i - 1].frame.index) {
      throw ContractError("sample_pairs: sequence " + sequence.source_id + " not sorted by index");
    }
  }
  std::vector<FrameSample> out;
  for (std::size_t i = stride; i < frames.size(); ++i) {
    out.push_back(FrameSample{frames[i].frame, frames[i - stride].frame, frames[i].boxes,
                              sequence.source_id});
  }
  return out;
}

}  // namespace mpsn
