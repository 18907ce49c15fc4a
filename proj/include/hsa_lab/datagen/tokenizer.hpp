#pragma once

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by 8 specials.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace hsa_lab::data {

using Token = std::int32_t;
using Tokens = std::vector<Token>;

inline constexpr Token kPad = 256;
inline constexpr Token kBos = 257;
inline constexpr Token kEos = 258;
inline constexpr Token kSep = 259;     // self-copy separator
inline constexpr Token kQuery = 260;   // start of a probe question
inline constexpr Token kAnswer = 261;  // start of the answer span
inline constexpr Token kDoc = 262;     // document boundary when packing
inline constexpr Token kUnk = 263;
inline constexpr std::size_t kVocabSize = 264;

inline bool is_byte(Token t) { return t >= 0 && t < 256; }

inline Tokens encode(std::string_view text) {
  Tokens out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<Token>(c));
  return out;
}

inline void append(Tokens& dst, std::string_view text) {
  for (unsigned char c : text) dst.push_back(static_cast<Token>(c));
}

/// Bytes only; specials render as <name>.
inline std::string decode(const Tokens& toks, std::size_t begin = 0, std::size_t end = SIZE_MAX) {
  static const char* names[] = {"<pad>", "<bos>", "<eos>", "<sep>", "<query>", "<answer>", "<doc>", "<unk>"};
  std::string s;
  end = std::min(end, toks.size());
  for (std::size_t i = begin; i < end; ++i) {
    const Token t = toks[i];
    if (is_byte(t)) {
      s.push_back(static_cast<char>(t));
    } else if (t >= 256 && t < static_cast<Token>(kVocabSize)) {
      s += names[t - 256];
    } else {
      s += "<?>";
    }
  }
  return s;
}

/// Raw bytes of a token range; any special token yields "".
inline std::string bytes_of(const Tokens& toks, std::size_t begin, std::size_t end) {
  std::string s;
  for (std::size_t i = begin; i < end; ++i) {
    if (!is_byte(toks[i])) return {};
    s.push_back(static_cast<char>(toks[i]));
  }
  return s;
}

}  // namespace hsa_lab::data
