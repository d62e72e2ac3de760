#include "priveri/numerics/sampling.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "priveri/error.hpp"

namespace priveri::numerics {

std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k, Prng& rng) {
  if (k < 1 || k > n) {
    throw ArgumentError("sample_without_replacement: need 1 <= k <= n, got n=" +
                        std::to_string(n) + " k=" + std::to_string(k));
  }
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{1});
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.uniform_below(n - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace priveri::numerics
