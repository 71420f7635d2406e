#pragma once

#include <charconv>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace uvtm::csv {

std::vector<std::string_view> split(std::string_view line, char sep);

/// Parse helpers return false on malformed input instead of throwing.
bool parse(std::string_view s, double& out);
bool parse(std::string_view s, std::int64_t& out);
bool parse(std::string_view s, std::int32_t& out);

/// Shortest decimal text that round-trips to the same double.
std::string format(double v);

std::string_view trim(std::string_view s);

}  // namespace uvtm::csv
