#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "stepwise/error.hpp"

namespace stepwise {

// Counter-based splittable pseudo-random stream (SplitMix64 core).
//
// Substreams are derived by hashing (seed, index) rather than by drawing from
// the parent, so the draw order of one worker never shifts another worker's
// stream. All sampling helpers are hand-rolled on top of raw 64-bit output to
// keep results identical across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(mix(seed ^ kStreamSalt)) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        return mix(state_);
    }

    // Uniform double in [0, 1) with 53 random bits.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double next_uniform(double lo, double hi) {
        return lo + (hi - lo) * next_double();
    }

    // Uniform integer in [0, n). n must be positive.
    int next_int(int n) {
        if (n <= 0) throw PreconditionError("Rng::next_int requires n > 0");
        return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
    }

    // Draws an index from an (approximately normalized) probability vector.
    // Falls back to the last strictly positive entry if rounding leaves the
    // cumulative sum short of the draw.
    int sample_categorical(std::span<const double> probs) {
        if (probs.empty()) throw PreconditionError("sample_categorical: empty distribution");
        const double u = next_double();
        double cum = 0.0;
        int last_positive = -1;
        for (std::size_t i = 0; i < probs.size(); ++i) {
            if (probs[i] > 0.0) last_positive = static_cast<int>(i);
            cum += probs[i];
            if (u < cum) return static_cast<int>(i);
        }
        if (last_positive < 0) throw PreconditionError("sample_categorical: all-zero distribution");
        return last_positive;
    }

    // Independent child stream addressed by an integer index.
    Rng substream(std::uint64_t index) const {
        return Rng(mix(state_ ^ mix(index + 0xD1B54A32D192ED03ULL)));
    }

    // Child stream addressed by a string label (stage names, instance ids).
    Rng substream(std::string_view label) const {
        std::uint64_t h = 0xCBF29CE484222325ULL;  // FNV-1a
        for (unsigned char c : label) {
            h ^= c;
            h *= 0x100000001B3ULL;
        }
        return substream(h);
    }

private:
    static constexpr std::uint64_t kStreamSalt = 0x6A09E667F3BCC909ULL;

    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::uint64_t state_;
};

// FNV-1a over raw bytes; used for config and vocabulary fingerprints.
inline std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xCBF29CE484222325ULL) {
    std::uint64_t h = seed;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

}  // namespace stepwise
