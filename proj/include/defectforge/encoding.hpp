#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace defectforge {

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);
// Throws NotFound when the file is missing.
std::string sha256_file(const std::filesystem::path& path);

std::string base64_encode(std::span<const std::uint8_t> bytes);
// Throws MalformedResponse on invalid input.
std::vector<std::uint8_t> base64_decode(std::string_view text);

}  // namespace defectforge
