#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace fecs {

// Deterministic summation: plain index order up to kPairwiseCutoff elements,
// pairwise halving above. The result depends only on the values and their
// order, never on thread count, which is what makes the parallel kernels
// bitwise reproducible.
inline constexpr std::size_t kPairwiseCutoff = 4096;

inline double deterministic_sum(std::span<const double> v) {
  if (v.size() <= kPairwiseCutoff) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t half = v.size() / 2;
  return deterministic_sum(v.subspan(0, half)) +
         deterministic_sum(v.subspan(half));
}

inline double deterministic_mean(std::span<const double> v) {
  return deterministic_sum(v) / static_cast<double>(v.size());
}

// Fixed block size for parallel gradient accumulation. Blocks are summed
// serially in index order after the parallel fill, so the partition (and the
// final bits) never depends on the number of workers.
inline constexpr std::size_t kGradBlock = 256;

inline std::size_t block_count(std::size_t n) {
  return (n + kGradBlock - 1) / kGradBlock;
}

// Reduce per-block buffers (blocks-major layout: buf[b * dim + j]) into out.
inline void reduce_blocks(const std::vector<double>& block_buf,
                          std::size_t n_blocks, std::size_t dim, double* out) {
  for (std::size_t j = 0; j < dim; ++j) out[j] = 0.0;
  for (std::size_t b = 0; b < n_blocks; ++b) {
    const double* src = block_buf.data() + b * dim;
    for (std::size_t j = 0; j < dim; ++j) out[j] += src[j];
  }
}

}  // namespace fecs
