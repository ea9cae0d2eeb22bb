#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace voxdiff {

// All numerics run in double precision. Tolerances throughout the test
// suite assume f64; storage formats may narrow to f32/u8 (see dataset.hpp).
using Scalar = double;
using Shape = std::vector<int64_t>;

// ---------------------------------------------------------------------------
// Errors

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error("contract error: " + msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& msg)
        : std::runtime_error("checkpoint error: " + msg) {}
};

inline std::string format_shape(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << "]";
    return os.str();
}

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) n *= e;
    return n;
}

// ---------------------------------------------------------------------------
// Deterministic RNG
//
// mt19937_64 with explicit uniform/normal transforms so sequences are
// bit-stable across standard libraries (std::normal_distribution is not).

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(splitmix64(seed)) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 random mantissa bits.
    Scalar uniform() { return static_cast<Scalar>(gen_() >> 11) * 0x1.0p-53; }

    Scalar uniform(Scalar lo, Scalar hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; the spare value is cached so draws come in a fixed sequence.
    Scalar normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        Scalar u1 = 1.0 - uniform();  // (0, 1]
        Scalar u2 = uniform();
        Scalar r = std::sqrt(-2.0 * std::log(u1));
        Scalar theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // Uniform integer in [lo, hi], inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        return lo + static_cast<int64_t>(gen_() % span);
    }

    // Derive an independent stream, e.g. per episode or per trial.
    static uint64_t derive(uint64_t master, uint64_t index) {
        return splitmix64(master ^ splitmix64(index + 0x51ed2701));
    }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    Scalar spare_ = 0.0;
};

// Draw k distinct integers from [0, n) in deterministic order (partial
// Fisher-Yates over an index vector).
inline std::vector<int64_t> sample_without_replacement(int64_t n, int64_t k, Rng& rng) {
    if (k > n) throw ContractError("sample_without_replacement: k > n");
    std::vector<int64_t> idx(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    for (int64_t i = 0; i < k; ++i) {
        int64_t j = rng.uniform_int(i, n - 1);
        std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    idx.resize(static_cast<size_t>(k));
    return idx;
}

// FNV-1a, used for config hashes in checkpoints and reports.
inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

}  // namespace voxdiff
