#pragma once

// Synthetic video clips standing in for real footage.
//
// moving_shapes: 1-3 antialiased discs/squares on a dark background, all
//   translating with one constant per-clip velocity on a wrap-around canvas.
//   The label is the velocity's octant (8 classes); a zero-velocity clip gets
//   the extra label kStaticLabel.
// gradient_field: discs drifting over a smooth time-varying colour field. The
//   dense target is the distance from each pixel to the nearest disc edge, in
//   units of the frame width; pixels inside a disc have target 0.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "layerlock/rng.hpp"

namespace layerlock {

struct VideoDims {
  std::size_t t = 16, h = 224, w = 224;
  std::size_t pixels() const { return t * h * w; }
  friend bool operator==(const VideoDims&, const VideoDims&) = default;
};

enum class SynthKind { moving_shapes, gradient_field };

inline constexpr int kMotionClasses = 8;
inline constexpr int kStaticLabel = 8;

struct VideoClip {
  VideoDims dims;
  std::vector<double> frames;                      // T x H x W x 3, in [0, 1]
  std::optional<int> label;                        // motion octant
  std::optional<std::vector<double>> dense_target; // T x H x W
  std::string generator;
  std::uint64_t seed = 0;

  double pixel(std::size_t t, std::size_t y, std::size_t x, std::size_t c) const {
    return frames[((t * dims.h + y) * dims.w + x) * 3 + c];
  }

  void validate() const {
    if (frames.size() != dims.pixels() * 3) throw std::invalid_argument("clip frame size mismatch");
    for (double v : frames) {
      if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("clip pixel outside [0, 1]");
    }
    if (label && (*label < 0 || *label > kStaticLabel)) {
      throw std::invalid_argument("clip label out of range");
    }
    if (dense_target && dense_target->size() != dims.pixels()) {
      throw std::invalid_argument("dense target size mismatch");
    }
  }
};

struct SynthOptions {
  /// Forces a motion class (0..7) instead of drawing one from the seed.
  std::optional<int> motion_class;
  /// Zero-velocity clip; frames are constant over time.
  bool force_static = false;
};

/// Octant of a velocity vector: class c covers angles within pi/8 of c*pi/4.
inline int motion_octant(double vx, double vy) {
  constexpr double quarter_pi = 0.78539816339744830962;
  const long q = std::lround(std::atan2(vy, vx) / quarter_pi);
  return static_cast<int>(((q % 8) + 8) % 8);
}

struct MotionGroundTruth {
  double vx = 0.0, vy = 0.0;
};

namespace detail {

inline double wrap_delta(double d, double period) {
  d = std::fmod(d, period);
  if (d > period / 2) d -= period;
  if (d < -period / 2) d += period;
  return d;
}

struct Shape2D {
  bool square = false;
  double cx = 0, cy = 0, radius = 2;
  std::array<double, 3> color{};
};

// Antialiased coverage of a pixel centre by a shape on a torus.
inline double coverage(const Shape2D& s, double px, double py, double w, double h) {
  const double dx = wrap_delta(px - s.cx, w);
  const double dy = wrap_delta(py - s.cy, h);
  const double dist = s.square ? std::max(std::abs(dx), std::abs(dy))
                               : std::sqrt(dx * dx + dy * dy);
  return std::clamp(s.radius + 0.5 - dist, 0.0, 1.0);
}

}  // namespace detail

/// Velocity the generator uses for (seed, options); exposed so tests can check
/// labels against the ground truth.
inline MotionGroundTruth motion_ground_truth(std::uint64_t seed, const SynthOptions& opt = {}) {
  Rng rng(derive_seed(seed, {0x6d6f74696f6eULL}));
  const int cls = opt.motion_class ? *opt.motion_class : static_cast<int>(rng.below(kMotionClasses));
  constexpr double quarter_pi = 0.78539816339744830962;
  // Stay well inside the octant so labels are unambiguous.
  const double angle = cls * quarter_pi + rng.uniform(-0.3, 0.3);
  const double speed = rng.uniform(1.0, 2.0);
  if (opt.force_static) return {0.0, 0.0};
  return {speed * std::cos(angle), speed * std::sin(angle)};
}

inline VideoClip synth_video(SynthKind kind, std::uint64_t seed, VideoDims dims,
                             const SynthOptions& opt = {}) {
  if (dims.t == 0 || dims.h == 0 || dims.w == 0) throw std::invalid_argument("empty clip dims");
  VideoClip clip;
  clip.dims = dims;
  clip.seed = seed;
  clip.frames.assign(dims.pixels() * 3, 0.0);
  Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(kind), 0x7368617065ULL}));
  const double W = static_cast<double>(dims.w), H = static_cast<double>(dims.h);
  const double scale = std::min(W, H);

  const auto gt = motion_ground_truth(seed, opt);
  const std::size_t n_shapes = 1 + rng.below(3);
  std::vector<detail::Shape2D> shapes(n_shapes);
  for (auto& s : shapes) {
    s.square = kind == SynthKind::moving_shapes && rng.below(2) == 1;
    s.cx = rng.uniform(0.0, W);
    s.cy = rng.uniform(0.0, H);
    s.radius = rng.uniform(0.12, 0.22) * scale;
    for (auto& c : s.color) c = rng.uniform(0.4, 1.0);
  }

  if (kind == SynthKind::moving_shapes) {
    clip.generator = "moving_shapes";
    const double bg = rng.uniform(0.0, 0.15);
    for (std::size_t t = 0; t < dims.t; ++t) {
      for (std::size_t y = 0; y < dims.h; ++y) {
        for (std::size_t x = 0; x < dims.w; ++x) {
          std::array<double, 3> px{bg, bg, bg};
          for (const auto& s0 : shapes) {
            auto s = s0;
            s.cx += gt.vx * static_cast<double>(t);
            s.cy += gt.vy * static_cast<double>(t);
            const double a = detail::coverage(s, x + 0.5, y + 0.5, W, H);
            for (int c = 0; c < 3; ++c) px[c] = (1.0 - a) * px[c] + a * s.color[c];
          }
          for (int c = 0; c < 3; ++c)
            clip.frames[((t * dims.h + y) * dims.w + x) * 3 + c] = std::clamp(px[c], 0.0, 1.0);
        }
      }
    }
    clip.label = opt.force_static ? kStaticLabel : motion_octant(gt.vx, gt.vy);
    return clip;
  }

  clip.generator = "gradient_field";
  std::vector<double> dense(dims.pixels(), 0.0);
  const double fx = rng.uniform(0.5, 1.5), fy = rng.uniform(0.5, 1.5);
  const double ft = rng.uniform(0.05, 0.15);
  std::array<double, 3> phase{};
  for (auto& p : phase) p = rng.uniform(0.0, 6.283185307179586);
  for (std::size_t t = 0; t < dims.t; ++t) {
    for (std::size_t y = 0; y < dims.h; ++y) {
      for (std::size_t x = 0; x < dims.w; ++x) {
        const double u = (x + 0.5) / W, v = (y + 0.5) / H;
        std::array<double, 3> px{};
        for (int c = 0; c < 3; ++c)
          px[c] = 0.35 + 0.15 * std::sin(6.283185307179586 * (fx * u + fy * v + ft * t) + phase[c]);
        double nearest = std::numeric_limits<double>::infinity();
        for (const auto& s0 : shapes) {
          auto s = s0;
          s.cx += gt.vx * static_cast<double>(t);
          s.cy += gt.vy * static_cast<double>(t);
          const double a = detail::coverage(s, x + 0.5, y + 0.5, W, H);
          for (int c = 0; c < 3; ++c) px[c] = (1.0 - a) * px[c] + a * s.color[c];
          const double dx = detail::wrap_delta(x + 0.5 - s.cx, W);
          const double dy = detail::wrap_delta(y + 0.5 - s.cy, H);
          nearest = std::min(nearest, std::max(0.0, std::sqrt(dx * dx + dy * dy) - s.radius));
        }
        dense[(t * dims.h + y) * dims.w + x] = nearest / W;
        for (int c = 0; c < 3; ++c)
          clip.frames[((t * dims.h + y) * dims.w + x) * 3 + c] = std::clamp(px[c], 0.0, 1.0);
      }
    }
  }
  clip.dense_target = std::move(dense);
  clip.label = opt.force_static ? kStaticLabel : motion_octant(gt.vx, gt.vy);
  return clip;
}

/// Clip seed for item `index` of the training batch at `step`.
inline std::uint64_t batch_clip_seed(std::uint64_t seed, std::size_t step, std::size_t index) {
  return derive_seed(seed, Stream::data, {step, index});
}

}  // namespace layerlock
