#pragma once

#include <string>
#include <vector>

namespace haco {

// Minimal RFC 4180 CSV support: quoted fields, embedded commas/quotes/newlines,
// and both \n and \r\n row endings. Rows may have differing lengths; the caller
// decides what to do with ragged input.
namespace csv {

// Parses an entire document. The final row is dropped if it is a single empty
// field (trailing newline).
std::vector<std::vector<std::string>> parse(const std::string& text);

// Quotes a field only when needed.
std::string escape_field(const std::string& field);

std::string join_row(const std::vector<std::string>& fields);

}  // namespace csv

// Shortest decimal form that round-trips the exact double (via to_chars).
std::string format_double(double v);

}  // namespace haco
