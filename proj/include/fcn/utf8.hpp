#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace fcn::utf8 {

inline constexpr char32_t kReplacement = 0xFFFD;

/// Decodes UTF-8 into code points. Each byte of an ill-formed sequence
/// (overlong forms, surrogates, values above U+10FFFF, truncation) decodes
/// to U+FFFD, so decoding never fails.
std::vector<char32_t> decode(std::string_view text);

/// Appends the UTF-8 form of `cp` to `out`; invalid code points become U+FFFD.
void append(std::string& out, char32_t cp);

std::string encode(const std::vector<char32_t>& code_points);

}  // namespace fcn::utf8
