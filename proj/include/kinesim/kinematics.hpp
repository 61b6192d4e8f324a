#pragma once

#include <span>
#include <vector>

namespace kinesim {

/// Kinematic state of one agent: planar pose plus signed longitudinal speed.
/// theta is kept in (-pi, pi] by every operation that writes it. Speed is
/// signed and unclamped; logged agents are allowed to reverse.
struct AgentState {
  double x{0.0};      // position east, m
  double y{0.0};      // position north, m
  double theta{0.0};  // heading, rad, in (-pi, pi]
  double v{0.0};      // longitudinal speed, m/s

  bool operator==(const AgentState&) const = default;
};

/// Continuous control action: longitudinal acceleration and yaw rate.
struct ControlAction {
  double a{0.0};  // m/s^2
  double w{0.0};  // rad/s

  bool operator==(const ControlAction&) const = default;
};

/// Branch threshold between the turning and straight-line position formulas.
/// Below this the series expansion is used; both branches agree to well under
/// 1e-7 m at the boundary.
inline constexpr double kOmegaEps = 1e-4;

/// Wraps an angle to (-pi, pi]. Throws std::invalid_argument on non-finite
/// input.
double wrap_angle(double theta);

/// Advances a state by one timestep under constant turn rate and acceleration
/// (the closed-form constant-control transition). dt must be positive and all
/// inputs finite.
AgentState ctra_step(const AgentState& s, const ControlAction& u, double dt);

/// Chains ctra_step over an action sequence. result[i] is the state after
/// actions[0..i]; the returned sequence has the same length as `actions`,
/// which must be non-empty.
std::vector<AgentState> ctra_rollout(const AgentState& s0,
                                     std::span<const ControlAction> actions,
                                     double dt);

}  // namespace kinesim
