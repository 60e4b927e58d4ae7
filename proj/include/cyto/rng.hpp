#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace cyto {

// FNV-1a, used for stream derivation and content fingerprints.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a64(s.data(), s.size(), h);
}

// Deterministic seedable random stream (splitmix64 core, Box-Muller normals).
// Self-contained so that sequences are stable across standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive integer range.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return lo + int64_t(next_u64() % uint64_t(hi - lo + 1));
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        // u1 in (0, 1] so log() is finite.
        double u1 = (double(next_u64() >> 11) + 1.0) * 0x1.0p-53;
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Independent stream derived from (this stream's seed, tag, index).
    Rng fork(std::string_view tag, uint64_t index = 0) const {
        uint64_t h = fnv1a64(&state_, sizeof(state_));
        h = fnv1a64(tag, h);
        h = fnv1a64(&index, sizeof(index), h);
        return Rng(h);
    }

    uint64_t seed_state() const { return state_; }

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// Stream derivation from a master seed without constructing an intermediate Rng.
inline Rng derive_rng(uint64_t master_seed, std::string_view tag, uint64_t index = 0) {
    return Rng(master_seed).fork(tag, index);
}

}  // namespace cyto
