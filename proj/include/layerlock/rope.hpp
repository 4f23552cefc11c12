#pragma once

// Three-axis rotary positional embedding.
//
// Feature layout is [time | height | width | unrotated], each rotated part made
// of consecutive (even, odd) pairs. Pair p of a part with D_a features at
// axis position n is rotated by n * max_wavelength^(-2p / D_a).

#include <array>
#include <cmath>
#include <cstddef>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "layerlock/tensor.hpp"

namespace layerlock {

enum class RopeSite {
  post_first_norm,  // rotate the normalised block input (feeds Q, K and V)
  attention_qk,     // rotate queries and keys only
  none,             // no rotation; position enters as an additive fixed code
};

struct GridPos {
  std::size_t t = 0, h = 0, w = 0;
  friend bool operator==(const GridPos&, const GridPos&) = default;
};

struct GridShape {
  std::size_t t = 1, h = 1, w = 1;
  std::size_t count() const { return t * h * w; }
  bool contains(const GridPos& p) const { return p.t < t && p.h < h && p.w < w; }
  /// Row-major (t, h, w) flattening.
  std::size_t index(const GridPos& p) const { return (p.t * h + p.h) * w + p.w; }
  GridPos position(std::size_t idx) const {
    return {idx / (h * w), (idx / w) % h, idx % w};
  }
  friend bool operator==(const GridShape&, const GridShape&) = default;
};

struct RopeConfig {
  std::size_t d_model = 0;
  std::array<double, 3> fractions{0.10, 0.25, 0.25};
  double max_wavelength = 10000.0;
  RopeSite site = RopeSite::post_first_norm;

  /// Rotated part sizes: 2 * round(fraction * D / 2) each.
  std::array<std::size_t, 3> part_sizes() const {
    std::array<std::size_t, 3> out{};
    for (std::size_t a = 0; a < 3; ++a) {
      if (fractions[a] < 0.0) throw ContractError("rope fraction must be nonnegative");
      out[a] = 2 * static_cast<std::size_t>(
                       std::llround(fractions[a] * static_cast<double>(d_model) / 2.0));
    }
    return out;
  }

  std::size_t unrotated() const {
    const auto p = part_sizes();
    const auto used = p[0] + p[1] + p[2];
    if (used > d_model) {
      throw ContractError("rope parts use " + std::to_string(used) +
                          " features but d_model is " + std::to_string(d_model));
    }
    return d_model - used;
  }

  void validate() const {
    if (fractions[0] + fractions[1] + fractions[2] > 1.0 + 1e-12) {
      throw ContractError("rope fractions sum above 1");
    }
    if (max_wavelength <= 0.0) throw ContractError("rope max_wavelength must be positive");
    (void)unrotated();
  }
};

/// Cosine/sine tables for every axis position. Immutable once built.
class RotationTable {
 public:
  RotationTable() = default;

  RotationTable(const RopeConfig& cfg, GridShape grid) : cfg_(cfg), grid_(grid) {
    cfg.validate();
    if (grid.t == 0 || grid.h == 0 || grid.w == 0) {
      throw ContractError("rotation table grid dims must be >= 1");
    }
    parts_ = cfg.part_sizes();
    const std::array<std::size_t, 3> extent{grid.t, grid.h, grid.w};
    std::size_t offset = 0;
    for (std::size_t a = 0; a < 3; ++a) {
      offsets_[a] = offset;
      offset += parts_[a];
      const std::size_t pairs = parts_[a] / 2;
      cos_[a].assign(extent[a] * pairs, 1.0);
      sin_[a].assign(extent[a] * pairs, 0.0);
      for (std::size_t n = 0; n < extent[a]; ++n) {
        for (std::size_t p = 0; p < pairs; ++p) {
          const double freq = std::pow(cfg.max_wavelength,
                                       -2.0 * static_cast<double>(p) /
                                           static_cast<double>(parts_[a]));
          const double angle = static_cast<double>(n) * freq;
          cos_[a][n * pairs + p] = std::cos(angle);
          sin_[a][n * pairs + p] = std::sin(angle);
        }
      }
    }
  }

  const RopeConfig& config() const { return cfg_; }
  const GridShape& grid() const { return grid_; }
  std::size_t d_model() const { return cfg_.d_model; }
  const std::array<std::size_t, 3>& part_sizes() const { return parts_; }
  std::size_t part_offset(std::size_t axis) const { return offsets_[axis]; }

  double cos_at(std::size_t axis, std::size_t pos, std::size_t pair) const {
    return cos_[axis][pos * (parts_[axis] / 2) + pair];
  }
  double sin_at(std::size_t axis, std::size_t pos, std::size_t pair) const {
    return sin_[axis][pos * (parts_[axis] / 2) + pair];
  }

  /// Rotates one D-length row in place; `inverse` applies the transpose.
  void rotate_row(double* row, const GridPos& pos, bool inverse) const {
    const std::array<std::size_t, 3> coord{pos.t, pos.h, pos.w};
    for (std::size_t a = 0; a < 3; ++a) {
      const std::size_t pairs = parts_[a] / 2;
      const double* c = cos_[a].data() + coord[a] * pairs;
      const double* s = sin_[a].data() + coord[a] * pairs;
      double* x = row + offsets_[a];
      for (std::size_t p = 0; p < pairs; ++p) {
        if (s[p] == 0.0 && c[p] == 1.0) continue;
        const double sn = inverse ? -s[p] : s[p];
        const double x0 = x[2 * p], x1 = x[2 * p + 1];
        x[2 * p] = x0 * c[p] - x1 * sn;
        x[2 * p + 1] = x0 * sn + x1 * c[p];
      }
    }
  }

 private:
  RopeConfig cfg_;
  GridShape grid_;
  std::array<std::size_t, 3> parts_{};
  std::array<std::size_t, 3> offsets_{};
  std::array<std::vector<double>, 3> cos_, sin_;
};

inline RotationTable build_rotation_table(const RopeConfig& cfg, GridShape grid) {
  return RotationTable(cfg, grid);
}

/// Rotates each row of x (N x D) according to its grid position.
inline Tensor apply_rope(const Tensor& x, std::shared_ptr<const RotationTable> table_ptr,
                         std::span<const GridPos> positions) {
  const RotationTable& table = *table_ptr;
  const auto n = x.rows(), d = x.cols();
  if (positions.size() != n) {
    throw DimensionError("apply_rope: " + std::to_string(positions.size()) +
                         " positions for " + std::to_string(n) + " rows");
  }
  if (d != table.d_model()) throw DimensionError("apply_rope: feature width mismatch");
  for (const auto& p : positions) {
    if (!table.grid().contains(p)) throw std::out_of_range("apply_rope: position outside grid");
  }
  std::vector<double> out(x.values());
  for (std::size_t i = 0; i < n; ++i) table.rotate_row(out.data() + i * d, positions[i], false);
  std::vector<GridPos> pos(positions.begin(), positions.end());
  return detail::make_result(
      x.shape(), std::move(out), {x},
      [table_ptr, d, pos = std::move(pos)](detail::Node& self) {
        std::vector<double> g(self.grad);
        for (std::size_t i = 0; i < pos.size(); ++i) table_ptr->rotate_row(g.data() + i * d, pos[i], true);
        auto& pg = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
      },
      "apply_rope");
}

inline Tensor apply_rope(const Tensor& x, const RotationTable& table,
                         std::span<const GridPos> positions) {
  return apply_rope(x, std::make_shared<const RotationTable>(table), positions);
}

}  // namespace layerlock
