#pragma once

#include <array>
#include <cstddef>
#include <string_view>

namespace tma {

/// Reserved vocabulary indices. PAD doubles as the empty-caption token.
inline constexpr std::size_t kPad = 0;
inline constexpr std::size_t kBos = 1;
inline constexpr std::size_t kEos = 2;
inline constexpr std::size_t kUnk = 3;
inline constexpr std::size_t kReservedTokens = 4;

inline constexpr std::array<std::string_view, kReservedTokens> kReservedNames{
    "<pad>", "<bos>", "<eos>", "<unk>"};

}  // namespace tma
