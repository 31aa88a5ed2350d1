#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace reportpilot::text {

bool is_space(char c) noexcept;
std::string_view trim(std::string_view s) noexcept;
std::string to_lower(std::string_view s);
std::vector<std::string> split_ws(std::string_view s);
std::string join(const std::vector<std::string>& parts, std::string_view sep);
bool starts_with_ci(std::string_view s, std::string_view prefix) noexcept;

// Fixed-point rendering with `decimals` digits after rounding half away from
// zero. Negative zero renders as zero.
std::string format_fixed(double value, int decimals);

// Appends `addition` to `base`, inserting one space when neither side
// already provides whitespace at the join. Leading whitespace of `addition`
// is dropped when `base` is empty.
std::string append_with_space(std::string_view base, std::string_view addition);

}  // namespace reportpilot::text
