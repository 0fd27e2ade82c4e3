#pragma once

#include <bit>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "archive and fixture formats are little-endian");

namespace epd {

// Error taxonomy used across the library. Everything derives from epd::error
// so callers can catch broadly; tests assert the specific type.
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct shape_error : error {  // dimension / extent mismatches
    using error::error;
};
struct config_error : error {  // invalid or inconsistent configuration
    using error::error;
};
struct data_error : error {  // bad input data (NaN saliency, label OOV, ...)
    using error::error;
};
struct contract_error : error {  // API precondition violated
    using error::error;
};
struct io_error : error {  // archive / file load problems
    using error::error;
};
struct format_error : error {  // inconsistent serialized metadata
    using error::error;
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <class A, class... Rest>
void format_into(std::ostringstream& os, A&& a, Rest&&... rest) {
    os << a;
    format_into(os, std::forward<Rest>(rest)...);
}
}  // namespace detail

template <class... Args>
std::string strcat(Args&&... args) {
    std::ostringstream os;
    detail::format_into(os, std::forward<Args>(args)...);
    return os.str();
}

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// FNV-1a, used for content checksums and config hashes.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
    return fnv1a(s.data(), s.size(), h);
}

inline std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[i] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

}  // namespace epd
