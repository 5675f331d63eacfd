#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

namespace anomalign {

/// Lowercase hex SHA-256 of a byte buffer.
std::string sha256_hex(std::span<const std::uint8_t> bytes);

std::string sha256_hex(const std::string& text);

std::string sha256_file_hex(const std::filesystem::path& path);

} // namespace anomalign
