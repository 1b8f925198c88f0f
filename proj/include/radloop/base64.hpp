#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace radloop::base64 {

std::string encode(std::span<const std::uint8_t> bytes);

/// Strict RFC 4648 decoding: padded, no whitespace, canonical trailing bits.
/// Throws InvalidInput on anything else.
std::vector<std::uint8_t> decode(std::string_view text);

}  // namespace radloop::base64
