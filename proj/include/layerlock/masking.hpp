#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <utility>
#include <vector>

#include "layerlock/rng.hpp"
#include "layerlock/rope.hpp"

namespace layerlock {

enum class MaskMode { random_iid, multiblock };

struct MultiblockParams {
  std::size_t num_blocks = 8;
  std::pair<double, double> block_area_range{0.3, 0.3};
  std::pair<double, double> aspect_ratio_range{0.75, 1.50};
};

struct MaskSpec {
  MaskMode mode = MaskMode::random_iid;
  double mask_ratio = 0.95;
  MultiblockParams multiblock;

  void validate() const {
    if (!(mask_ratio >= 0.0 && mask_ratio < 1.0)) {
      throw ContractError("mask_ratio must lie in [0, 1)");
    }
  }
};

/// Number of tokens kept visible: max(1, round((1 - ratio) * n)).
inline std::size_t kept_count(std::size_t n_tokens, double ratio) {
  const auto k = static_cast<std::size_t>(
      std::llround((1.0 - ratio) * static_cast<double>(n_tokens)));
  return std::clamp<std::size_t>(k, 1, n_tokens);
}

/// Independent per-patch masking. Returns the kept token indices, ascending.
inline std::vector<std::size_t> random_mask(std::size_t n_tokens, double ratio, Rng& rng) {
  if (n_tokens == 0) throw ContractError("random_mask needs at least one token");
  if (!(ratio >= 0.0 && ratio < 1.0)) throw ContractError("mask ratio must lie in [0, 1)");
  auto keep = rng.sample_without_replacement(n_tokens, kept_count(n_tokens, ratio));
  std::sort(keep.begin(), keep.end());
  return keep;
}

/// Count used for latent-loss patch subselection: ceil(fraction * n).
inline std::size_t subsample_count(std::size_t n_tokens, double fraction) {
  // Subtracting a few ulps absorbs products like 0.05 * 1568 landing just above
  // an integer.
  const double raw = fraction * static_cast<double>(n_tokens);
  const auto c = static_cast<std::size_t>(std::ceil(raw - 1e-9 * std::max(1.0, raw)));
  return std::clamp<std::size_t>(c, 1, n_tokens);
}

inline std::vector<std::size_t> subsample_latent_patches(std::size_t n_tokens, double fraction,
                                                         Rng& rng) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw ContractError("latent loss patch fraction must lie in (0, 1]");
  }
  if (fraction == 1.0) {
    std::vector<std::size_t> all(n_tokens);
    for (std::size_t i = 0; i < n_tokens; ++i) all[i] = i;
    return all;
  }
  auto idx = rng.sample_without_replacement(n_tokens, subsample_count(n_tokens, fraction));
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// One sampled spatial rectangle [top, top+height) x [left, left+width).
struct SpatialBlock {
  std::size_t top = 0, left = 0, height = 0, width = 0;
};

struct MultiblockMask {
  GridShape grid;
  std::vector<SpatialBlock> blocks;
  std::vector<bool> masked;  // one flag per grid token, row-major (t, h, w)

  std::size_t masked_count() const {
    return static_cast<std::size_t>(std::count(masked.begin(), masked.end(), true));
  }
  std::vector<std::size_t> masked_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < masked.size(); ++i)
      if (masked[i]) out.push_back(i);
    return out;
  }
  std::vector<std::size_t> context_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < masked.size(); ++i)
      if (!masked[i]) out.push_back(i);
    return out;
  }
};

inline SpatialBlock sample_spatial_block(const GridShape& grid, const MultiblockParams& p,
                                         Rng& rng) {
  const double area_cells = rng.uniform(p.block_area_range.first, p.block_area_range.second) *
                            static_cast<double>(grid.h * grid.w);
  const double aspect = rng.uniform(p.aspect_ratio_range.first, p.aspect_ratio_range.second);
  auto height = static_cast<std::size_t>(std::llround(std::sqrt(area_cells * aspect)));
  auto width = static_cast<std::size_t>(std::llround(std::sqrt(area_cells / aspect)));
  // Oversized blocks clamp to the grid.
  height = std::clamp<std::size_t>(height, 1, grid.h);
  width = std::clamp<std::size_t>(width, 1, grid.w);
  SpatialBlock b;
  b.height = height;
  b.width = width;
  b.top = rng.below(grid.h - height + 1);
  b.left = rng.below(grid.w - width + 1);
  return b;
}

/// Union of spatial rectangles, each extended over every time step.
inline MultiblockMask multiblock_mask(const GridShape& grid, const MultiblockParams& p, Rng& rng) {
  if (grid.h < 2 || grid.w < 2) throw ContractError("multiblock masking needs a spatial grid >= 2x2");
  MultiblockMask m;
  m.grid = grid;
  m.masked.assign(grid.count(), false);
  for (std::size_t b = 0; b < p.num_blocks; ++b) {
    const auto blk = sample_spatial_block(grid, p, rng);
    m.blocks.push_back(blk);
    for (std::size_t t = 0; t < grid.t; ++t)
      for (std::size_t y = blk.top; y < blk.top + blk.height; ++y)
        for (std::size_t x = blk.left; x < blk.left + blk.width; ++x)
          m.masked[grid.index({t, y, x})] = true;
  }
  return m;
}

}  // namespace layerlock
