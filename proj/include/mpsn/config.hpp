#pragma once

// Flat key/value configuration text:
//
//   # comment
//   variant = diffabs
//   lr_schedule = "0:1e-2, 15:1e-3"
//
// Keys are unique; values may be double-quoted.

#include <filesystem>
#include <map>
#include <string>

namespace mpsn {

using ConfigMap = std::map<std::string, std::string>;

/// Throws ParseError (with the 1-based line) on a line without '=' or a repeated key.
ConfigMap parse_config(const std::string& text);
ConfigMap load_config(const std::filesystem::path& path);

}  // namespace mpsn
