#pragma once

// Binary checkpoint: the tag line "mpsn-ckpt-v1", a u64 LE header length, a
// JSON header (architecture, variant, aggregation, tensor names and shapes),
// then every tensor's values as f64 LE in header order.

#include <filesystem>
#include <string>

#include "mpsn/model.hpp"

namespace mpsn {

inline constexpr const char* kCheckpointTag = "mpsn-ckpt-v1";

/// `meta` is a JSON object stored verbatim in the header (may be "{}").
/// The file is written to a temporary sibling and renamed into place.
void save_checkpoint(const std::filesystem::path& path, ModelBundle& bundle,
                     const std::string& meta = "{}");

/// Rebuilds the model described by the header and fills in its tensors.
/// Throws IoError on a bad tag, truncation or a tensor that does not match.
ModelBundle load_checkpoint(const std::filesystem::path& path);

/// The meta object saved with the checkpoint, serialized as JSON.
std::string checkpoint_meta(const std::filesystem::path& path);

/// Copies FN and BN weights (and normalization statistics) from a checkpoint
/// built with the same architecture; the motion stream is left untouched.
void load_frame_stream(const std::filesystem::path& path, ModelBundle& bundle);

}  // namespace mpsn
