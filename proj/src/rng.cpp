#include "qdiff/rng.hpp"

namespace qdiff {

namespace {
std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}
}  // namespace

Rng stream(std::uint64_t seed, std::string_view name) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : name) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    const std::uint64_t a = splitmix64(seed ^ h);
    const std::uint64_t b = splitmix64(a + h);
    std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                      static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
    return Rng(seq);
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) { return stream(seed, name)(); }

Tensor randn(Rng& rng, std::vector<std::size_t> shape, double stddev) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.raw()) v = dist(rng);
    return t;
}

Tensor uniform(Rng& rng, std::vector<std::size_t> shape, double lo, double hi) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& v : t.raw()) v = dist(rng);
    return t;
}

}  // namespace qdiff
