#include "kinesim/kinematics.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace kinesim {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kTwoPi = 2.0 * std::numbers::pi;

void check_finite(const AgentState& s, const ControlAction& u, double dt) {
  if (!std::isfinite(s.x) || !std::isfinite(s.y) || !std::isfinite(s.theta) ||
      !std::isfinite(s.v)) {
    throw std::invalid_argument("ctra_step: non-finite state");
  }
  if (!std::isfinite(u.a) || !std::isfinite(u.w)) {
    throw std::invalid_argument("ctra_step: non-finite action");
  }
  if (!(dt > 0.0) || !std::isfinite(dt)) {
    throw std::invalid_argument("ctra_step: dt must be positive and finite");
  }
}

}  // namespace

double wrap_angle(double theta) {
  if (!std::isfinite(theta)) {
    throw std::invalid_argument("wrap_angle: non-finite input");
  }
  double r = std::remainder(theta, kTwoPi);
  if (r <= -kPi) r = kPi;  // upper half-open convention: (-pi, pi]
  return r;
}

AgentState ctra_step(const AgentState& s, const ControlAction& u, double dt) {
  check_finite(s, u, dt);

  const double v1 = s.v + u.a * dt;
  const double w = u.w;

  // Displacement along the initial heading (C) and perpendicular to it (S):
  //   C = integral of v(t) cos(w t) dt,  S = integral of v(t) sin(w t) dt.
  double c_disp, s_disp;
  if (std::abs(w) < kOmegaEps) {
    // Series in w. Truncation error is O(w^4 and w^5) terms, far below the
    // 1e-7 m branch-agreement requirement at |w| = kOmegaEps.
    const double t2 = dt * dt;
    const double t3 = t2 * dt;
    const double t4 = t3 * dt;
    const double t5 = t4 * dt;
    c_disp = s.v * dt + 0.5 * u.a * t2 -
             0.5 * w * w * (s.v * t3 / 3.0 + u.a * t4 / 4.0);
    s_disp = w * (s.v * t2 / 2.0 + u.a * t3 / 3.0) -
             w * w * w * (s.v * t4 / 4.0 + u.a * t5 / 5.0) / 6.0;
  } else {
    const double wt = w * dt;
    const double sin_wt = std::sin(wt);
    const double cos_wt = std::cos(wt);
    const double half = std::sin(0.5 * wt);
    const double one_minus_cos = 2.0 * half * half;  // 1 - cos(wt), no cancellation
    c_disp = v1 * sin_wt / w - u.a * one_minus_cos / (w * w);
    s_disp = (s.v - v1 * cos_wt) / w + u.a * sin_wt / (w * w);
  }

  const double ct = std::cos(s.theta);
  const double st = std::sin(s.theta);
  AgentState out;
  out.x = s.x + ct * c_disp - st * s_disp;
  out.y = s.y + st * c_disp + ct * s_disp;
  out.theta = wrap_angle(s.theta + w * dt);
  out.v = v1;
  return out;
}

std::vector<AgentState> ctra_rollout(const AgentState& s0,
                                     std::span<const ControlAction> actions,
                                     double dt) {
  if (actions.empty()) {
    throw std::invalid_argument("ctra_rollout: empty action sequence");
  }
  std::vector<AgentState> out;
  out.reserve(actions.size());
  AgentState cur = s0;
  for (const ControlAction& u : actions) {
    cur = ctra_step(cur, u, dt);
    out.push_back(cur);
  }
  return out;
}

}  // namespace kinesim
