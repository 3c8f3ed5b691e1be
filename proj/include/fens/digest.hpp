#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace fens {

// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

// Atomically replaces `path` with `bytes` (write to a sibling temp file, then rename).
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace fens
