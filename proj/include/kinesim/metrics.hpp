#pragma once

#include <span>
#include <string>
#include <vector>

#include "kinesim/action_codec.hpp"
#include "kinesim/rollout.hpp"
#include "kinesim/scene.hpp"

namespace kinesim {

/// True iff the two oriented rectangles intersect (separating-axis test over
/// the four edge normals). Touching edges count as a collision.
bool obb_collision(const AgentState& state_a, const AgentMeta& meta_a,
                   const AgentState& state_b, const AgentMeta& meta_b);

struct KinStats {
  double mean_speed{0.0};      // m/s
  double mean_abs_accel{0.0};  // m/s^2
  double mean_abs_jerk{0.0};   // m/s^3
  double max_abs_jerk{0.0};    // m/s^3
};

/// Stats from a state sequence; accelerations by finite difference of v.
/// Needs at least 3 states for jerk.
KinStats kinematic_stats(std::span<const AgentState> states, double dt);

/// Stats from an action sequence (accelerations straight from the codebook,
/// cleaner than double-differencing positions). v0 is the speed entering the
/// first action; needs at least 2 actions for jerk.
KinStats kinematic_stats(double v0, std::span<const ActionToken> tokens, double dt);

struct CollisionRates {
  // Fraction of (scenario, ego) cases with any ego-vs-other collision within
  // the horizon, per mille.
  double at_3s{0.0};
  double at_5s{0.0};
  double at_8s{0.0};
};

/// Rates over the controlled egos of each simulated scenario. Horizons are
/// measured in simulated seconds from the current step.
CollisionRates collision_rate(std::span<const SimulatedScenario> sims);

/// First future step (1-based) at which `agent_id` overlaps any other valid
/// agent, or -1 if collision-free over the whole future.
int first_collision_step(const Scenario& world, int agent_id);

/// Minimum over rollouts of the mean 2D displacement from the ground-truth
/// track over the first `horizon_steps` future steps (valid steps only).
double min_ade(std::span<const SimulatedScenario> rollouts, const Track& ground_truth,
               int horizon_steps, int agent_id);

struct MetricsReport {
  double mean_speed{0.0};
  double mean_abs_accel{0.0};
  double mean_abs_jerk{0.0};
  double max_abs_jerk{0.0};
  CollisionRates rates;
  double min_ade_m{-1.0};  // negative = not evaluated
  int ego_count{0};

  std::string to_text() const;  // aligned-column table
  std::string to_record() const;  // one-line machine-readable JSON
};

/// Aggregates kinematic statistics and collision rates over the controlled
/// egos of the simulations.
MetricsReport evaluate_simulations(std::span<const SimulatedScenario> sims);

}  // namespace kinesim
