// Copyright (c) 2026 The dyffuse authors
// SPDX-License-Identifier: Apache-2.0
//
// Error types, seeded random streams and little-endian binary helpers shared by
// every module.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace dyffuse {

inline constexpr const char* kVersion = "0.3.1";

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes; the message names the operation and the shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A NaN/Inf appeared, or a simulation blew up.
class NumericError : public Error {
public:
    using Error::Error;
};

/// An argument outside the documented domain of an operation.
class DomainError : public Error {
public:
    using Error::Error;
};

/// Malformed or unreadable file.
class FormatError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Hashing

inline constexpr std::uint64_t fnv1a(std::string_view bytes,
                                     std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seed of the named substream `name[index]` under `root`. Every random
/// decision in the library is drawn from one of these, so any stage can be
/// replayed in isolation from the root seed alone.
inline constexpr std::uint64_t derive_seed(std::uint64_t root, std::string_view name,
                                           std::uint64_t index = 0) {
    return splitmix64(splitmix64(root ^ fnv1a(name)) + index);
}

// ---------------------------------------------------------------------------
// Random stream

class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

    static Rng substream(std::uint64_t root, std::string_view name, std::uint64_t index = 0) {
        return Rng(derive_seed(root, name, index));
    }

    std::uint64_t seed() const { return seed_; }

    /// Uniform on [0, 1).
    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }

    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(engine_);
    }

    /// Uniform integer on the closed range [lo, hi].
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
    }

    double normal() { return normal_(engine_); }

    std::mt19937_64& engine() { return engine_; }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

// ---------------------------------------------------------------------------
// Little-endian binary IO

namespace io {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

template <class T>
void put(std::ostream& out, T value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T get(std::istream& in) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw FormatError("unexpected end of file");
    return value;
}

inline void put_string(std::ostream& out, std::string_view s) {
    put<std::uint64_t>(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& in, std::uint64_t max_len = 1u << 20) {
    auto n = get<std::uint64_t>(in);
    if (n > max_len) throw FormatError("string length " + std::to_string(n) + " too large");
    std::string s(n, '\0');
    in.read(s.data(), static_cast<std::streamsize>(n));
    if (!in) throw FormatError("unexpected end of file in string");
    return s;
}

inline void expect_magic(std::istream& in, std::string_view magic) {
    std::string got(magic.size(), '\0');
    in.read(got.data(), static_cast<std::streamsize>(got.size()));
    if (!in || got != magic) throw FormatError("bad magic: expected " + std::string(magic));
}

}  // namespace io

}  // namespace dyffuse
