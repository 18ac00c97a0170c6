#pragma once

#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <random>

namespace mvamp {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_key(std::uint64_t key, std::uint64_t index) {
    return splitmix64(key ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

// Stable key for a real parameter such as delta.
inline std::uint64_t real_key(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof bits);
    return bits;
}

// Value-type random stream. Children are derived from the key only, so
// split(i) does not depend on how much of the parent has been consumed.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed, std::initializer_list<std::uint64_t> path = {})
        : key_(splitmix64(seed)) {
        for (auto p : path) key_ = mix_key(key_, p);
        eng_.seed(key_);
    }

    RngStream split(std::uint64_t index) const { return RngStream(from_key, mix_key(key_, index)); }

    std::uint64_t key() const { return key_; }
    std::mt19937_64& engine() { return eng_; }

    double normal() { return normal_(eng_); }
    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(eng_); }
    bool coin() { return (eng_() >> 63) != 0; }

private:
    struct FromKey {};
    static constexpr FromKey from_key{};
    RngStream(FromKey, std::uint64_t key) : key_(key) { eng_.seed(key_); }

    std::uint64_t key_;
    std::mt19937_64 eng_;
    std::normal_distribution<double> normal_;
};

}  // namespace mvamp
