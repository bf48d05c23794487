#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fewdet {

std::string sha256_hex(const std::uint8_t* data, std::size_t len);
std::string sha256_hex(const std::string& s);
std::string sha256_file(const std::string& path);

}  // namespace fewdet
