#pragma once

// Annotation formats (IDL and JSON lines), dataset splits and loading of
// annotated frame sequences.

#include <filesystem>
#include <string>
#include <vector>

#include "mpsn/geometry.hpp"
#include "mpsn/motion.hpp"

namespace mpsn {

/// One annotated frame as stored on disk. Image paths are relative to the dataset root.
struct AnnotationRecord {
  std::string image;
  std::string source_id;
  std::size_t frame_index = 0;
  std::vector<Box> boxes;

  bool operator==(const AnnotationRecord&) const = default;
};

/// Lines of the form  "dir/frame.png": (x1, y1, x2, y2), (...);
/// The source id is the image's directory and frames are indexed in file order
/// per source. Throws ParseError with the 1-based line number on malformed input.
std::vector<AnnotationRecord> load_idl(const std::filesystem::path& path);

/// One JSON object per line: {source_id, frame_index, image, gt_boxes}.
std::vector<AnnotationRecord> load_jsonl(const std::filesystem::path& path);
void write_jsonl(const std::filesystem::path& path, const std::vector<AnnotationRecord>& records);

enum class DatasetFormat { idl, jsonl, synthetic };
enum class Split { train, val, test };

std::string to_string(Split s);
Split parse_split(const std::string& name);
DatasetFormat parse_format(const std::string& name);

/// `root/<split>.jsonl` or `root/<split>.idl`. Synthetic datasets are written
/// as jsonl, so they load the same way.
struct DatasetSpec {
  DatasetFormat format = DatasetFormat::jsonl;
  std::filesystem::path root;
  Split split = Split::train;

  std::filesystem::path annotation_path() const;
};

/// Reads annotations and images, grouped into sequences sorted by
/// (source_id, frame_index). Images are downsized to a 640 px longest side
/// with boxes scaled to match.
std::vector<AnnotatedSequence> load_sequences(const DatasetSpec& spec);

/// Splits sequences for validation when no val file exists: the last
/// ceil(fraction * n) sequences (at least one when n >= 2) become val.
struct TrainValSplit {
  std::vector<AnnotatedSequence> train;
  std::vector<AnnotatedSequence> val;
};
TrainValSplit split_train_val(std::vector<AnnotatedSequence> sequences, double fraction = 0.1);

/// Loads the requested split; a missing val file is carved from train.
std::vector<AnnotatedSequence> load_split(const std::filesystem::path& root, DatasetFormat format,
                                          Split split);

/// Consecutive-frame samples of every sequence, in sequence order.
std::vector<FrameSample> make_samples(const std::vector<AnnotatedSequence>& sequences,
                                      std::size_t stride = 1);

}  // namespace mpsn
