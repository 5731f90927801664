#pragma once

#include <string>

namespace haco {

// SHA-256 of a byte string, lowercase hex digest.
std::string sha256_hex(const std::string& data);

// Digest of a file's bytes; throws haco::Error when the file cannot be read.
std::string sha256_file_hex(const std::string& path);

}  // namespace haco
