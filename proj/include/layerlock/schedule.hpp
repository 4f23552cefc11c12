#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "layerlock/tensor.hpp"
#include "layerlock/vit.hpp"

namespace layerlock {

/// Step -> frozen-prefix length. Nothing is frozen before `start`; from then on
/// each `interval` steps freezes `jump` more layers, up to `max_frozen`.
struct FreezeSchedule {
  bool enabled = true;
  std::size_t start = 0;
  std::size_t interval = 1;
  std::size_t jump = 1;
  std::size_t max_frozen = 0;
  /// Target layer per freeze event; empty means "predict the last frozen layer".
  std::vector<std::size_t> target_layers;

  /// Number of freeze events that have fired by `step`.
  std::size_t events_at(std::size_t step) const {
    if (!enabled || step < start || max_frozen == 0) return 0;
    const std::size_t fired = 1 + (step - start) / interval;
    const std::size_t needed = (max_frozen + jump - 1) / jump;
    return std::min(fired, needed);
  }

  std::size_t frozen_at(std::size_t step) const {
    const auto e = events_at(step);
    if (e == 0) return 0;
    // jump * events, computed without overflow for huge step counts.
    const std::size_t needed = (max_frozen + jump - 1) / jump;
    return e >= needed ? max_frozen : std::min(max_frozen, jump * e);
  }

  /// Prediction target in force at `step` when targets switch with freezing.
  TargetKind target_at(std::size_t step) const {
    const auto e = events_at(step);
    if (e == 0) return {0};
    if (!target_layers.empty()) return {target_layers[std::min(e, target_layers.size()) - 1]};
    return {frozen_at(step)};
  }

  /// Steps at which frozen_at increases, within [0, steps).
  std::vector<std::size_t> event_steps(std::size_t steps) const {
    std::vector<std::size_t> out;
    if (!enabled || max_frozen == 0) return out;
    const std::size_t needed = (max_frozen + jump - 1) / jump;
    for (std::size_t e = 0; e < needed; ++e) {
      const std::size_t s = start + e * interval;
      if (s >= steps) break;
      out.push_back(s);
    }
    return out;
  }

  void validate(std::size_t encoder_depth) const {
    if (!enabled) return;
    if (interval == 0) throw ContractError("schedule.interval must be >= 1");
    if (jump == 0) throw ContractError("schedule.jump must be >= 1");
    if (max_frozen > encoder_depth) {
      throw ContractError("schedule.max_frozen (" + std::to_string(max_frozen) +
                          ") exceeds the encoder depth (" + std::to_string(encoder_depth) + ")");
    }
    const std::size_t needed = max_frozen == 0 ? 0 : (max_frozen + jump - 1) / jump;
    for (std::size_t e = 0; e < target_layers.size() && e < needed; ++e) {
      const std::size_t frozen = std::min(max_frozen, jump * (e + 1));
      if (target_layers[e] == 0 || target_layers[e] > frozen) {
        throw ContractError("schedule.target_layers[" + std::to_string(e) +
                            "] must lie in [1, frozen prefix " + std::to_string(frozen) + "]");
      }
    }
  }
};

/// Frozen-prefix length at `step`; 0 means nothing is frozen.
inline std::size_t freeze_layer_schedule(std::size_t step, const FreezeSchedule& sched) {
  return sched.frozen_at(step);
}

/// A schedule that freezes `layers` once at step `at` and never again.
inline FreezeSchedule single_freeze(std::size_t layers, std::size_t at) {
  FreezeSchedule s;
  s.start = at;
  s.interval = std::numeric_limits<std::size_t>::max() / 2;
  s.jump = std::max<std::size_t>(layers, 1);
  s.max_frozen = layers;
  return s;
}

}  // namespace layerlock
