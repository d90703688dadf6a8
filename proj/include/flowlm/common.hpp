#pragma once

// Shared plumbing: error type, deterministic RNG, hashing, base64, threading.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace flowlm {

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

// ---------------------------------------------------------------------------
// errors
// ---------------------------------------------------------------------------

// Machine-parsable categories; the CLI prints "<category>: <message>".
enum class ErrorKind {
    config,
    io,
    shape,
    capacity,
    numeric,
    tokenization,
    invalid_scene,
    missing_prerequisite,
    checkpoint,
    state,
    usage,
};

inline const char* error_kind_name(ErrorKind k) {
    switch (k) {
        case ErrorKind::config: return "config";
        case ErrorKind::io: return "io";
        case ErrorKind::shape: return "shape";
        case ErrorKind::capacity: return "capacity";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::tokenization: return "tokenization";
        case ErrorKind::invalid_scene: return "invalid-scene";
        case ErrorKind::missing_prerequisite: return "missing-prerequisite";
        case ErrorKind::checkpoint: return "checkpoint";
        case ErrorKind::state: return "state";
        case ErrorKind::usage: return "usage";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg)
        : std::runtime_error(msg), kind_(kind) {}
    ErrorKind kind() const { return kind_; }
    std::string line() const {
        return std::string(error_kind_name(kind_)) + ": " + what();
    }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
    throw Error(kind, msg);
}

inline void require(bool ok, ErrorKind kind, const std::string& msg) {
    if (!ok) fail(kind, msg);
}

// ---------------------------------------------------------------------------
// hashing
// ---------------------------------------------------------------------------

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a64_str(const std::string& s, uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a64(s.data(), s.size(), h);
}

inline std::string hex_u64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[i] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

// ---------------------------------------------------------------------------
// deterministic RNG (xoshiro256**, splitmix64 seeding, explicit Box-Muller)
// ---------------------------------------------------------------------------
// std::mt19937 would be portable, but the std distributions are not; all
// draws here are spelled out so results are identical on every platform.

inline uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
        has_spare_ = false;
        spare_ = 0.0;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl_(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl_(s_[3], 45);
        return result;
    }

    // uniform in [0, 1), 53-bit resolution
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // unbiased integer in [0, n)
    uint64_t below(uint64_t n) {
        if (n == 0) return 0;
        const uint64_t lim = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = next_u64();
        while (v >= lim) v = next_u64();
        return v % n;
    }

    // standard normal via Box-Muller with cached spare
    double gauss() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double two_pi = 6.283185307179586476925286766559;
        double u1 = 1.0 - uniform();  // (0, 1], avoids log(0)
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(two_pi * u2);
        has_spare_ = true;
        return r * std::cos(two_pi * u2);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    static uint64_t rotl_(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t s_[4]{};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// Stable sub-stream derivation: one root seed, many independent streams.
inline uint64_t derive_seed(uint64_t root, const std::string& tag, uint64_t index = 0) {
    uint64_t h = fnv1a64_str(tag);
    h = fnv1a64(&root, sizeof root, h);
    h = fnv1a64(&index, sizeof index, h);
    uint64_t sm = h;
    return splitmix64(sm);
}

// ---------------------------------------------------------------------------
// base64 (standard alphabet, padded)
// ---------------------------------------------------------------------------

inline std::string base64_encode(const void* data, size_t n) {
    static const char* tbl = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    const auto* p = static_cast<const unsigned char*>(data);
    std::string out;
    out.reserve((n + 2) / 3 * 4);
    size_t i = 0;
    for (; i + 3 <= n; i += 3) {
        uint32_t v = uint32_t(p[i]) << 16 | uint32_t(p[i + 1]) << 8 | p[i + 2];
        out.push_back(tbl[(v >> 18) & 63]);
        out.push_back(tbl[(v >> 12) & 63]);
        out.push_back(tbl[(v >> 6) & 63]);
        out.push_back(tbl[v & 63]);
    }
    if (i < n) {
        uint32_t v = uint32_t(p[i]) << 16;
        bool two = i + 1 < n;
        if (two) v |= uint32_t(p[i + 1]) << 8;
        out.push_back(tbl[(v >> 18) & 63]);
        out.push_back(tbl[(v >> 12) & 63]);
        out.push_back(two ? tbl[(v >> 6) & 63] : '=');
        out.push_back('=');
    }
    return out;
}

inline std::vector<unsigned char> base64_decode(const std::string& s) {
    auto val = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    std::vector<unsigned char> out;
    out.reserve(s.size() / 4 * 3);
    uint32_t buf = 0;
    int bits = 0;
    for (char c : s) {
        if (c == '=' || c == '\n' || c == '\r') continue;
        int v = val(c);
        require(v >= 0, ErrorKind::io, "invalid base64 character");
        buf = (buf << 6) | uint32_t(v);
        bits += 6;
        if (bits >= 8) {
            bits -= 8;
            out.push_back((unsigned char)((buf >> bits) & 0xff));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// threading: run n_chunks jobs on up to n_threads workers.
// Chunk boundaries (not the worker count) define any accumulation order, so
// results do not depend on how the OS schedules the workers.
// ---------------------------------------------------------------------------

template <class Fn>
void run_chunks(int n_chunks, int n_threads, Fn&& fn) {
    if (n_chunks <= 0) return;
    if (n_threads <= 1 || n_chunks == 1) {
        for (int c = 0; c < n_chunks; ++c) fn(c);
        return;
    }
    int workers = std::min(n_threads, n_chunks);
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (int c = w; c < n_chunks; c += workers) fn(c);
        });
    }
    for (auto& t : pool) t.join();
}

// Per-thread count of codec.encode invocations; generation sessions must
// leave it untouched (the single-pass decoding contract).
inline thread_local long g_encode_calls = 0;

inline bool all_finite(const float* p, size_t n) {
    for (size_t i = 0; i < n; ++i)
        if (!std::isfinite(p[i])) return false;
    return true;
}
inline bool all_finite(const double* p, size_t n) {
    for (size_t i = 0; i < n; ++i)
        if (!std::isfinite(p[i])) return false;
    return true;
}

}  // namespace flowlm
