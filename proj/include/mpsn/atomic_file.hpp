#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace mpsn {

/// Writes `bytes` to a temporary sibling of `path` and renames it over `path`,
/// so readers never observe a partial file. Creates parent directories.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

std::string read_file(const std::filesystem::path& path);

}  // namespace mpsn
