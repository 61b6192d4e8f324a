#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kinesim/scene.hpp"

namespace kinesim {

/// Desk-scale scenario generator. Every track is rolled with ctra_step on
/// codebook bin centers (actions quantized before integration), so the logged
/// motion is reachable by a discrete action sequence by construction; those
/// ground-truth tokens are embedded in the tracks.
///
/// Archetypes:
///   straight-follow    lane keeping at constant speed, optional parallel agent
///   curve-follow       constant-curvature arc whose curvature matches a
///                      yaw-rate bin center exactly
///   intersection-turn  brake to a turn speed, arc through the turn, cruise out
///   car-following      time-headway follower behind a constant-speed leader
///   conflict           car-following toward a stopped leader; with
///                      conflict_tight the initial speed/gap combination is
///                      harsh enough that only early braking avoids contact
struct SyntheticConfig {
  int straight_count = 0;
  int curve_count = 0;
  int intersection_count = 0;
  int car_follow_count = 0;
  int conflict_count = 0;

  int history_len = 2;
  int future_len = 16;
  double dt = 0.5;

  double speed_min = 3.0;
  double speed_max = 9.0;
  double parallel_prob = 0.5;   // extra lane-keeping agent on straight scenes
  double late_style_frac = 0.0; // fraction of followers using the late-braking style
  bool conflict_tight = false;  // harsh conflict initial conditions (logs stay safe)

  void validate() const;  // throws std::invalid_argument on bad values
};

/// Parses a flat key=value config file. Unknown keys are an error naming the
/// key.
SyntheticConfig parse_synthetic_config_text(const std::string& text);
SyntheticConfig load_synthetic_config(const std::string& path);

/// Deterministic per seed: scene i depends only on (seed, i) and the config.
std::vector<Scenario> generate_synthetic(const SyntheticConfig& config, uint64_t seed);

}  // namespace kinesim
