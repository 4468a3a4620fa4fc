#ifndef PANCSEG_CORE_HPP
#define PANCSEG_CORE_HPP

/// \file core.hpp
/// Shared plumbing: error types, deterministic random streams, seed
/// derivation, and little-endian binary serialization helpers.

#include <algorithm>
#include <atomic>
#include <bit>
#include <exception>
#include <cstdint>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <type_traits>
#include <vector>

namespace pancseg {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input data, files that do not match their headers, or
/// artifacts that do not fit together. The CLI maps this to exit code 2.
class DataError : public Error {
public:
    using Error::Error;
};

/// Invalid arguments or configuration. The CLI maps this to exit code 1.
class UsageError : public Error {
public:
    using Error::Error;
};

inline void require(bool condition, const std::string& message) {
    if (!condition) {
        throw UsageError(message);
    }
}

// ---------------------------------------------------------------------------
// Random streams

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Mixes any number of integers into a seed. Used to give each unit of
/// work (tree, superpixel, deformation, sample) its own stream so results
/// do not depend on evaluation order.
template <class... Ts>
std::uint64_t derive_seed(std::uint64_t seed, Ts... parts) {
    std::uint64_t h = splitmix64(seed);
    ((h = splitmix64(h ^ splitmix64(static_cast<std::uint64_t>(static_cast<std::int64_t>(parts))))), ...);
    return h;
}

/// Uniform double in [0, 1) built from the top 53 bits. Unlike
/// std::uniform_real_distribution this is identical across standard
/// library implementations.
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) {
    return lo + (hi - lo) * uniform01(rng);
}

/// Uniform integer in [0, n).
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
    if (n == 0) {
        throw UsageError("uniform_index: empty range");
    }
    // Rejection sampling keeps the draw unbiased.
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t r;
    do {
        r = rng();
    } while (r >= limit);
    return static_cast<std::size_t>(r % n);
}

/// 64-bit FNV-1a, used for config and spec fingerprints.
inline std::uint64_t fnv1a(std::string_view text, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Runs f(i) for i in [0, n) on up to `threads` workers. Each index must
/// write only its own outputs. The exception of the lowest failing index is
/// rethrown, so errors do not depend on scheduling either.
template <class F>
void parallel_for(std::size_t n, unsigned threads, F&& f) {
    if (threads <= 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) {
            f(i);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> pool;
    const auto workers = static_cast<unsigned>(std::min<std::size_t>(threads, n));
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    f(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) {
        t.join();
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

// ---------------------------------------------------------------------------
// Little-endian binary I/O

namespace binary {

template <class T>
void write(std::ostream& out, T value) {
    static_assert(std::is_arithmetic_v<T>);
    using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
              std::conditional_t<sizeof(T) == 2, std::uint16_t,
              std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
    U bits = std::bit_cast<U>(value);
    unsigned char bytes[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
    }
    out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <class T>
T read(std::istream& in) {
    static_assert(std::is_arithmetic_v<T>);
    using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
              std::conditional_t<sizeof(T) == 2, std::uint16_t,
              std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
    unsigned char bytes[sizeof(T)];
    in.read(reinterpret_cast<char*>(bytes), sizeof(T));
    if (!in) {
        throw DataError("unexpected end of binary stream");
    }
    U bits = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        bits |= static_cast<U>(static_cast<U>(bytes[i]) << (8 * i));
    }
    return std::bit_cast<T>(bits);
}

template <class T>
void write_array(std::ostream& out, const std::vector<T>& values) {
    if constexpr (std::endian::native == std::endian::little) {
        out.write(reinterpret_cast<const char*>(values.data()),
                  static_cast<std::streamsize>(values.size() * sizeof(T)));
    } else {
        for (const T& v : values) {
            write(out, v);
        }
    }
}

template <class T>
std::vector<T> read_array(std::istream& in, std::size_t count) {
    std::vector<T> values(count);
    if constexpr (std::endian::native == std::endian::little) {
        in.read(reinterpret_cast<char*>(values.data()),
                static_cast<std::streamsize>(count * sizeof(T)));
        if (!in) {
            throw DataError("unexpected end of binary stream");
        }
    } else {
        for (T& v : values) {
            v = read<T>(in);
        }
    }
    return values;
}

inline void write_magic(std::ostream& out, std::string_view magic) {
    out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline void expect_magic(std::istream& in, std::string_view magic) {
    std::string got(magic.size(), '\0');
    in.read(got.data(), static_cast<std::streamsize>(got.size()));
    if (!in || got != magic) {
        throw DataError("bad magic bytes: expected '" + std::string(magic) + "'");
    }
}

}  // namespace binary

}  // namespace pancseg

#endif  // PANCSEG_CORE_HPP
