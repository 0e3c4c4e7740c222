#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

namespace lenskit {

using json = nlohmann::json;

// Writes to a sibling temporary file, fsyncs it, then renames over `path`,
// so readers observe either the old or the new content.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);
void write_json_atomic(const std::filesystem::path& path, const json& value);

std::string read_file(const std::filesystem::path& path);
json read_json(const std::filesystem::path& path);

}  // namespace lenskit
