#pragma once

#include <cstddef>
#include <vector>

#include "priveri/numerics/prng.hpp"

namespace priveri::numerics {

/// k distinct values from {1, ..., n}, sorted ascending, uniform over all
/// C(n, k) subsets (partial Fisher–Yates). Throws ArgumentError unless 1 <= k <= n.
std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Prng& rng);

}  // namespace priveri::numerics
