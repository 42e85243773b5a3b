#include "mpsn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <map>

#include <json.hpp>

#include "mpsn/atomic_file.hpp"
#include "mpsn/errors.hpp"

namespace mpsn {

namespace {

using nlohmann::json;

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

std::vector<NamedTensor> all_tensors(ModelBundle& m) {
  std::vector<NamedTensor> out;
  for (Parameter* p : m.parameters()) out.push_back({p->name, &p->value});
  for (auto& [name, t] : m.buffers()) out.push_back({name, t});
  return out;
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  return v;
}

struct Parsed {
  json header;
  std::size_t data_offset = 0;
  std::string bytes;
};

Parsed parse(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint not found: " + path.string());
  Parsed p;
  p.bytes = read_file(path);
  const std::string tag = std::string(kCheckpointTag) + "\n";
  if (p.bytes.compare(0, tag.size(), tag) != 0) {
    throw IoError(path.string() + " is not an mpsn-ckpt-v1 checkpoint");
  }
  if (p.bytes.size() < tag.size() + 8) throw IoError("truncated checkpoint " + path.string());
  const std::uint64_t len = get_u64(p.bytes, tag.size());
  const std::size_t start = tag.size() + 8;
  if (p.bytes.size() < start + len) throw IoError("truncated checkpoint " + path.string());
  try {
    p.header = json::parse(p.bytes.substr(start, len));
  } catch (const json::exception& e) {
    throw IoError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  p.data_offset = start + len;
  return p;
}

void read_tensors(const Parsed& p, const std::filesystem::path& path,
                  std::vector<NamedTensor> targets, bool require_all) {
  std::size_t offset = p.data_offset;
  std::map<std::string, Tensor*> by_name;
  for (auto& t : targets) by_name[t.name] = t.tensor;
  std::size_t filled = 0;
  for (const auto& entry : p.header.at("tensors")) {
    const std::string name = entry.at("name");
    const Shape shape = entry.at("shape").get<Shape>();
    const std::size_t n = shape_size(shape);
    if (p.bytes.size() < offset + 8 * n) throw IoError("truncated checkpoint " + path.string());
    auto it = by_name.find(name);
    if (it != by_name.end()) {
      Tensor& t = *it->second;
      if (t.shape() != shape) {
        throw IoError("checkpoint tensor " + name + " has shape " + shape_string(shape) +
                      ", model expects " + t.shape_string());
      }
      for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t bits = 0;
        std::memcpy(&bits, p.bytes.data() + offset + 8 * i, 8);
        t[i] = std::bit_cast<double>(bits);
      }
      ++filled;
    }
    offset += 8 * n;
  }
  if (require_all && filled != targets.size()) {
    throw IoError("checkpoint " + path.string() + " is missing model tensors");
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, ModelBundle& m, const std::string& meta) {
  json header;
  header["arch"] = to_string(m.arch.arch);
  header["width"] = m.arch.width;
  header["norm"] = m.arch.norm == ops::NormKind::batch ? "batch" : "instance";
  header["variant"] = to_string(m.variant);
  header["alpha"] = m.agg.alpha;
  header["beta"] = m.agg.beta;
  header["head_hidden"] = m.head_hidden;
  header["flow_max_displacement"] = m.flow_encoding.max_displacement;
  header["meta"] = json::parse(meta);
  json tensors = json::array();
  const auto all = all_tensors(m);
  for (const auto& t : all) tensors.push_back({{"name", t.name}, {"shape", t.tensor->shape()}});
  header["tensors"] = tensors;

  const std::string head = header.dump();
  std::string bytes = std::string(kCheckpointTag) + "\n";
  put_u64(bytes, head.size());
  bytes += head;
  for (const auto& t : all) {
    for (double v : t.tensor->values()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      put_u64(bytes, bits);
    }
  }
  write_file_atomic(path, bytes);
}

ModelBundle load_checkpoint(const std::filesystem::path& path) {
  const Parsed p = parse(path);
  const json& h = p.header;
  BackboneSplitSpec spec;
  AggregationParams agg;
  Variant variant;
  std::size_t head_hidden;
  try {
    spec = make_split_spec(parse_arch(h.at("arch")), h.at("width").get<double>(),
                           h.at("norm") == "batch" ? ops::NormKind::batch : ops::NormKind::instance);
    variant = parse_variant(h.at("variant"));
    agg = {h.at("alpha").get<double>(), h.at("beta").get<double>()};
    head_hidden = h.at("head_hidden").get<std::size_t>();
  } catch (const json::exception& e) {
    throw IoError("checkpoint header of " + path.string() + " incomplete: " + e.what());
  }
  ModelBundle m = build_backbone(spec, InitPolicy{}, variant, agg, head_hidden);
  m.flow_encoding.max_displacement = h.value("flow_max_displacement", 16.0);
  read_tensors(p, path, all_tensors(m), true);
  return m;
}

std::string checkpoint_meta(const std::filesystem::path& path) {
  return parse(path).header.value("meta", json::object()).dump();
}

void load_frame_stream(const std::filesystem::path& path, ModelBundle& bundle) {
  const Parsed p = parse(path);
  std::vector<NamedTensor> targets;
  for (SubNetwork* net : {&bundle.fn, &bundle.bn}) {
    for (Parameter* q : net->parameters()) targets.push_back({q->name, &q->value});
    for (auto& [name, t] : net->buffers()) targets.push_back({name, t});
  }
  read_tensors(p, path, targets, true);
}

}  // namespace mpsn
