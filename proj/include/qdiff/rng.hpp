#pragma once

#include "qdiff/tensor.hpp"

#include <cstdint>
#include <random>
#include <string_view>

namespace qdiff {

using Rng = std::mt19937_64;

/// Independent generator for a named sub-stream of the run seed, e.g.
/// stream(seed, "calib/probe/3"). Same (seed, name) always yields the same
/// sequence regardless of what other streams were drawn.
Rng stream(std::uint64_t seed, std::string_view name);

/// Child seed for a named sub-stream, for APIs that take a seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view name);

Tensor randn(Rng& rng, std::vector<std::size_t> shape, double stddev = 1.0);
Tensor uniform(Rng& rng, std::vector<std::size_t> shape, double lo, double hi);

}  // namespace qdiff
