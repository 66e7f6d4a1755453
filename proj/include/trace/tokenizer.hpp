#pragma once

#include <cctype>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <unicode/normalizer2.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>
#include <unicode/utf8.h>

#include "trace/common.hpp"

namespace trace {

struct TokenizerConfig {
  bool lowercase = true;
  bool strip_urls = true;
};

namespace detail {

inline bool is_ascii(std::string_view s) {
  for (unsigned char c : s) {
    if (c >= 0x80) return false;
  }
  return true;
}

inline bool starts_with_ci(std::string_view s, std::string_view prefix) {
  if (s.size() < prefix.size()) return false;
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    if (std::tolower(static_cast<unsigned char>(s[i])) != prefix[i]) return false;
  }
  return true;
}

// A whitespace-delimited chunk is a URL when it starts with a scheme or "www.".
inline bool is_url_chunk(std::string_view chunk) {
  return starts_with_ci(chunk, "http://") || starts_with_ci(chunk, "https://") ||
         starts_with_ci(chunk, "www.");
}

inline bool is_token_codepoint(UChar32 c) {
  return u_isalnum(c) || (U_GET_GC_MASK(c) & U_GC_M_MASK) != 0;
}

inline const icu::Normalizer2& nfkc() {
  UErrorCode status = U_ZERO_ERROR;
  const icu::Normalizer2* n = icu::Normalizer2::getNFKCInstance(status);
  if (U_FAILURE(status) || n == nullptr) throw Error("ICU NFKC normalizer unavailable");
  return *n;
}

inline std::string to_utf8(const icu::UnicodeString& s) {
  std::string out;
  s.toUTF8String(out);
  return out;
}

inline icu::UnicodeString normalize_nfkc(const icu::UnicodeString& s) {
  UErrorCode status = U_ZERO_ERROR;
  icu::UnicodeString out = nfkc().normalize(s, status);
  if (U_FAILURE(status)) throw Error("NFKC normalization failed");
  return out;
}

// Tokens of one whitespace-free chunk (URL filtering happens before this).
inline void tokenize_chunk(std::string_view chunk, const TokenizerConfig& cfg,
                           std::vector<std::string>& out) {
  if (is_ascii(chunk)) {
    std::string current;
    for (unsigned char c : chunk) {
      if (std::isalnum(c)) {
        current.push_back(cfg.lowercase ? static_cast<char>(std::tolower(c)) : static_cast<char>(c));
      } else if (!current.empty()) {
        out.push_back(std::move(current));
        current.clear();
      }
    }
    if (!current.empty()) out.push_back(std::move(current));
    return;
  }

  const icu::UnicodeString normalized = normalize_nfkc(
      icu::UnicodeString::fromUTF8(icu::StringPiece(chunk.data(), static_cast<int32_t>(chunk.size()))));
  icu::UnicodeString current;
  auto flush = [&] {
    if (current.isEmpty()) return;
    // lowercasing can denormalize in rare cases; renormalize the token
    out.push_back(to_utf8(cfg.lowercase ? normalize_nfkc(current) : current));
    current.remove();
  };
  for (int32_t i = 0; i < normalized.length();) {
    const UChar32 c = normalized.char32At(i);
    i += U16_LENGTH(c);
    if (is_token_codepoint(c)) {
      current.append(cfg.lowercase ? u_tolower(c) : c);
    } else {
      flush();
    }
  }
  flush();
}

// Byte ranges of whitespace-delimited chunks in `text`. Invalid UTF-8 bytes are
// treated as separators.
struct ChunkRange {
  std::size_t begin;
  std::size_t end;
};

inline std::vector<ChunkRange> whitespace_chunks(std::string_view text) {
  std::vector<ChunkRange> chunks;
  const auto* s = reinterpret_cast<const uint8_t*>(text.data());
  const auto length = static_cast<int32_t>(text.size());
  int32_t i = 0;
  int32_t start = -1;
  while (i < length) {
    const int32_t at = i;
    UChar32 c;
    U8_NEXT(s, i, length, c);
    const bool separator = c < 0 || u_isUWhiteSpace(c);
    if (separator) {
      if (start >= 0) chunks.push_back({static_cast<std::size_t>(start), static_cast<std::size_t>(at)});
      start = -1;
    } else if (start < 0) {
      start = at;
    }
  }
  if (start >= 0) chunks.push_back({static_cast<std::size_t>(start), text.size()});
  return chunks;
}

}  // namespace detail

/// Splits text into lowercase, NFKC-normalized alphanumeric tokens.
///
/// Whitespace-delimited chunks that look like URLs are dropped entirely; every
/// other character that is not a letter, digit or combining mark separates
/// tokens. The result is deterministic and idempotent under
/// `tokenize(join_tokens(tokenize(x)))`.
inline std::vector<std::string> tokenize(std::string_view text, const TokenizerConfig& cfg = {}) {
  std::vector<std::string> tokens;
  for (const auto& chunk : detail::whitespace_chunks(text)) {
    const std::string_view piece = text.substr(chunk.begin, chunk.end - chunk.begin);
    if (cfg.strip_urls && detail::is_url_chunk(piece)) continue;
    detail::tokenize_chunk(piece, cfg, tokens);
  }
  return tokens;
}

inline std::string join_tokens(std::span<const std::string> tokens, std::string_view sep = " ") {
  std::string out;
  std::size_t total = 0;
  for (const auto& t : tokens) total += t.size() + sep.size();
  out.reserve(total);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) out.append(sep);
    out.append(tokens[i]);
  }
  return out;
}

/// A cuttable piece of text: cuts may only be placed at `begin`.
struct TextUnit {
  std::size_t begin;
  std::size_t n_tokens;
};

/// Decomposes `text` into units whose token counts sum to `tokenize(text).size()`.
///
/// Units start at whitespace chunks and right before ASCII punctuation inside a
/// chunk; normalization never crosses those positions, so tokenizing the
/// units separately agrees with tokenizing the whole text.
inline std::vector<TextUnit> text_units(std::string_view text, const TokenizerConfig& cfg = {}) {
  std::vector<TextUnit> units;
  std::vector<std::string> scratch;
  for (const auto& chunk : detail::whitespace_chunks(text)) {
    const std::string_view piece = text.substr(chunk.begin, chunk.end - chunk.begin);
    if (cfg.strip_urls && detail::is_url_chunk(piece)) {
      units.push_back({chunk.begin, 0});
      continue;
    }
    std::size_t start = 0;
    auto emit = [&](std::size_t end) {
      scratch.clear();
      detail::tokenize_chunk(piece.substr(start, end - start), cfg, scratch);
      units.push_back({chunk.begin + start, scratch.size()});
      start = end;
    };
    for (std::size_t i = 1; i < piece.size(); ++i) {
      const auto c = static_cast<unsigned char>(piece[i]);
      if (c < 0x80 && !std::isalnum(c)) emit(i);
    }
    emit(piece.size());
  }
  return units;
}

}  // namespace trace
