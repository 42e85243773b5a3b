#include "mpsn/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "mpsn/atomic_file.hpp"
#include "mpsn/errors.hpp"
#include "mpsn/image_io.hpp"

namespace mpsn {

namespace {

using nlohmann::json;

class LineCursor {
 public:
  LineCursor(const std::string& s, std::size_t line) : s_(s), line_(line) {}

  void skip_ws() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }
  bool done() {
    skip_ws();
    return pos_ >= s_.size();
  }
  char peek() {
    skip_ws();
    return pos_ < s_.size() ? s_[pos_] : '\0';
  }
  void expect(char c) {
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }
  std::string quoted() {
    expect('"');
    const std::size_t end = s_.find('"', pos_);
    if (end == std::string::npos) fail("unterminated image path");
    std::string out = s_.substr(pos_, end - pos_);
    pos_ = end + 1;
    return out;
  }
  double number() {
    skip_ws();
    const char* begin = s_.c_str() + pos_;
    char* end = nullptr;
    const double v = std::strtod(begin, &end);
    if (end == begin) fail("expected a number");
    pos_ += static_cast<std::size_t>(end - begin);
    return v;
  }
  [[noreturn]] void fail(const std::string& what) {
    throw ParseError("idl line " + std::to_string(line_) + ": " + what, line_);
  }

 private:
  const std::string& s_;
  std::size_t line_;
  std::size_t pos_ = 0;
};

std::string parent_of(const std::string& image) {
  const auto slash = image.find_last_of('/');
  return slash == std::string::npos ? std::string(".") : image.substr(0, slash);
}

}  // namespace

std::vector<AnnotationRecord> load_idl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<AnnotationRecord> out;
  std::map<std::string, std::size_t> next_index;
  std::string line;
  for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
    LineCursor cur(line, line_no);
    if (cur.done()) continue;
    AnnotationRecord rec;
    rec.image = cur.quoted();
    rec.source_id = parent_of(rec.image);
    rec.frame_index = next_index[rec.source_id]++;
    if (cur.peek() == ':') {
      cur.expect(':');
      while (cur.peek() == '(') {
        cur.expect('(');
        Box b;
        b.x1 = cur.number();
        cur.expect(',');
        b.y1 = cur.number();
        cur.expect(',');
        b.x2 = cur.number();
        cur.expect(',');
        b.y2 = cur.number();
        cur.expect(')');
        if (b.x1 > b.x2) std::swap(b.x1, b.x2);
        if (b.y1 > b.y2) std::swap(b.y1, b.y2);
        rec.boxes.push_back(b);
        if (cur.peek() == ',') cur.expect(',');
      }
    }
    const char end = cur.peek();
    if (end == ';' || end == '.') cur.expect(end);
    if (!cur.done()) cur.fail("trailing characters");
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<AnnotationRecord> load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<AnnotationRecord> out;
  std::string line;
  for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) {
      continue;
    }
    try {
      const json j = json::parse(line);
      AnnotationRecord rec;
      rec.source_id = j.at("source_id").get<std::string>();
      rec.frame_index = j.at("frame_index").get<std::size_t>();
      rec.image = j.value("image", std::string{});
      for (const auto& b : j.at("gt_boxes")) {
        if (b.size() != 4) throw ParseError("box needs 4 coordinates", line_no);
        rec.boxes.push_back(Box{b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                                b[3].get<double>()});
      }
      out.push_back(std::move(rec));
    } catch (const json::exception& e) {
      throw ParseError("jsonl line " + std::to_string(line_no) + ": " + e.what(), line_no);
    }
  }
  return out;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<AnnotationRecord>& records) {
  std::string text;
  for (const auto& r : records) {
    json boxes = json::array();
    for (const Box& b : r.boxes) boxes.push_back({b.x1, b.y1, b.x2, b.y2});
    const json j = {{"source_id", r.source_id},
                    {"frame_index", r.frame_index},
                    {"image", r.image},
                    {"gt_boxes", boxes}};
    text += j.dump() + "\n";
  }
  write_file_atomic(path, text);
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "unknown";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw ConfigError("unknown split '" + name + "' (expected train, val, test)");
}

DatasetFormat parse_format(const std::string& name) {
  if (name == "idl") return DatasetFormat::idl;
  if (name == "jsonl") return DatasetFormat::jsonl;
  if (name == "synthetic") return DatasetFormat::synthetic;
  throw ConfigError("unknown dataset format '" + name + "' (expected idl, jsonl, synthetic)");
}

std::filesystem::path DatasetSpec::annotation_path() const {
  return root / (to_string(split) + (format == DatasetFormat::idl ? ".idl" : ".jsonl"));
}

std::vector<AnnotatedSequence> load_sequences(const DatasetSpec& spec) {
  const auto path = spec.annotation_path();
  if (!std::filesystem::exists(path)) throw IoError("annotation file not found: " + path.string());
  auto records = spec.format == DatasetFormat::idl ? load_idl(path) : load_jsonl(path);
  std::stable_sort(records.begin(), records.end(), [](const auto& a, const auto& b) {
    return std::tie(a.source_id, a.frame_index) < std::tie(b.source_id, b.frame_index);
  });
  std::vector<AnnotatedSequence> out;
  for (const auto& r : records) {
    if (out.empty() || out.back().source_id != r.source_id) {
      out.push_back(AnnotatedSequence{r.source_id, {}});
    }
    LoadedImage img = load_image(spec.root / r.image);
    AnnotatedFrame f{Frame{std::move(img.pixels), r.frame_index}, r.boxes};
    for (Box& b : f.boxes) {
      b.x1 *= img.scale;
      b.y1 *= img.scale;
      b.x2 *= img.scale;
      b.y2 *= img.scale;
    }
    out.back().frames.push_back(std::move(f));
  }
  return out;
}

TrainValSplit split_train_val(std::vector<AnnotatedSequence> sequences, double fraction) {
  TrainValSplit out;
  const std::size_t n = sequences.size();
  std::size_t n_val = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n)));
  if (n >= 2) n_val = std::clamp<std::size_t>(n_val, 1, n - 1);
  else n_val = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (i + n_val < n ? out.train : out.val).push_back(std::move(sequences[i]));
  }
  return out;
}

std::vector<AnnotatedSequence> load_split(const std::filesystem::path& root, DatasetFormat format,
                                          Split split) {
  const DatasetSpec val{format, root, Split::val};
  if (split == Split::test || std::filesystem::exists(val.annotation_path())) {
    return load_sequences(DatasetSpec{format, root, split});
  }
  auto parts = split_train_val(load_sequences(DatasetSpec{format, root, Split::train}));
  return split == Split::train ? std::move(parts.train) : std::move(parts.val);
}

std::vector<FrameSample> make_samples(const std::vector<AnnotatedSequence>& sequences,
                                      std::size_t stride) {
  std::vector<FrameSample> out;
  for (const auto& s : sequences) {
    auto pairs = sample_pairs(s, stride);
    out.insert(out.end(), std::make_move_iterator(pairs.begin()),
               std::make_move_iterator(pairs.end()));
  }
  return out;
}

}  // namespace mpsn
