#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace udr {

namespace detail {

// Decodes one UTF-8 code point starting at `pos`, advancing `pos`. Invalid
// sequences decode as a single byte so that tokenization never fails.
inline char32_t decode_utf8(std::string_view s, std::size_t& pos) {
    auto byte = [&](std::size_t i) { return static_cast<unsigned char>(s[i]); };
    unsigned char c = byte(pos);
    std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 1;
    if (pos + len > s.size()) len = 1;
    char32_t cp = len == 1 ? c : len == 2 ? (c & 0x1F) : len == 3 ? (c & 0x0F) : (c & 0x07);
    for (std::size_t i = 1; i < len; ++i) {
        if ((byte(pos + i) & 0xC0) != 0x80) {
            cp = c;
            len = 1;
            break;
        }
        cp = (cp << 6) | (byte(pos + i) & 0x3F);
    }
    pos += len;
    return cp;
}

inline bool is_unicode_space(char32_t cp) {
    return (cp >= 0x09 && cp <= 0x0D) || cp == 0x20 || cp == 0x85 || cp == 0xA0 || cp == 0x1680 ||
           (cp >= 0x2000 && cp <= 0x200A) || cp == 0x2028 || cp == 0x2029 || cp == 0x202F ||
           cp == 0x205F || cp == 0x3000;
}

inline bool is_ascii_punct(char c) {
    return (c >= 0x21 && c <= 0x2F) || (c >= 0x3A && c <= 0x40) || (c >= 0x5B && c <= 0x60) ||
           (c >= 0x7B && c <= 0x7E);
}

}  // namespace detail

/// The toolkit's single tokenizer, shared by BM25, the bi-encoder vocabulary,
/// the n-gram scorer and every token budget.
///
/// Splits on Unicode whitespace, lowercases ASCII letters and strips ASCII
/// punctuation from both ends of each token. Tokens that become empty are
/// dropped, so "It was great." yields {"it", "was", "great"}.
inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    auto flush = [&] {
        std::size_t b = 0, e = current.size();
        while (b < e && detail::is_ascii_punct(current[b])) ++b;
        while (e > b && detail::is_ascii_punct(current[e - 1])) --e;
        if (e > b) tokens.emplace_back(current.substr(b, e - b));
        current.clear();
    };
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t start = pos;
        char32_t cp = detail::decode_utf8(text, pos);
        if (detail::is_unicode_space(cp)) {
            flush();
            continue;
        }
        for (std::size_t i = start; i < pos; ++i) {
            char c = text[i];
            current.push_back(c >= 'A' && c <= 'Z' ? static_cast<char>(c - 'A' + 'a') : c);
        }
    }
    flush();
    return tokens;
}

/// Number of toolkit tokens in `text`; the unit of every context budget.
inline std::size_t token_count(std::string_view text) { return tokenize(text).size(); }

/// Collapses whitespace runs to one space and trims both ends.
inline std::string normalize_whitespace(std::string_view text) {
    std::string out;
    std::size_t pos = 0;
    bool pending_space = false;
    while (pos < text.size()) {
        std::size_t start = pos;
        char32_t cp = detail::decode_utf8(text, pos);
        if (detail::is_unicode_space(cp)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out.push_back(' ');
        pending_space = false;
        out.append(text.substr(start, pos - start));
    }
    return out;
}

/// 64-bit FNV-1a, used for scorer and checkpoint fingerprints.
class Fnv1a {
  public:
    Fnv1a& update(const void* data, std::size_t n) {
        auto p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            state_ ^= p[i];
            state_ *= 0x100000001b3ULL;
        }
        return *this;
    }
    Fnv1a& update(std::string_view s) {
        std::uint64_t n = s.size();
        update(&n, sizeof n);
        return update(s.data(), s.size());
    }
    std::uint64_t digest() const { return state_; }

  private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string hex64(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) out[static_cast<std::size_t>(i)] = digits[v & 0xF];
    return out;
}

}  // namespace udr
