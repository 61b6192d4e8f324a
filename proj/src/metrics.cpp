#include "kinesim/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace kinesim {

namespace {

struct Box {
  double cx, cy, c, s, hl, hw;  // center, heading cos/sin, half extents
};

Box make_box(const AgentState& st, const AgentMeta& meta) {
  return Box{st.x, st.y, std::cos(st.theta), std::sin(st.theta), 0.5 * meta.length,
             0.5 * meta.width};
}

// Projection radius of a box onto a unit axis, and of the center offset.
bool separated_on_axis(const Box& a, const Box& b, double ax, double ay) {
  const double dist = std::abs((b.cx - a.cx) * ax + (b.cy - a.cy) * ay);
  const double ra = a.hl * std::abs(a.c * ax + a.s * ay) + a.hw * std::abs(-a.s * ax + a.c * ay);
  const double rb = b.hl * std::abs(b.c * ax + b.s * ay) + b.hw * std::abs(-b.s * ax + b.c * ay);
  return dist > ra + rb;  // strict: touching projections are not separated
}

int horizon_steps(double seconds, double dt, int max_steps) {
  return std::min(max_steps, static_cast<int>(std::round(seconds / dt)));
}

}  // namespace

bool obb_collision(const AgentState& state_a, const AgentMeta& meta_a,
                   const AgentState& state_b, const AgentMeta& meta_b) {
  const Box a = make_box(state_a, meta_a);
  const Box b = make_box(state_b, meta_b);
  // Four candidate separating axes: the edge normals of both rectangles.
  if (separated_on_axis(a, b, a.c, a.s)) return false;
  if (separated_on_axis(a, b, -a.s, a.c)) return false;
  if (separated_on_axis(a, b, b.c, b.s)) return false;
  if (separated_on_axis(a, b, -b.s, b.c)) return false;
  return true;
}

KinStats kinematic_stats(std::span<const AgentState> states, double dt) {
  if (states.size() < 3) {
    throw std::invalid_argument("kinematic_stats: need at least 3 states");
  }
  KinStats out;
  for (const AgentState& s : states) out.mean_speed += s.v;
  out.mean_speed /= static_cast<double>(states.size());

  std::vector<double> accel(states.size() - 1);
  for (size_t i = 0; i + 1 < states.size(); ++i) {
    accel[i] = (states[i + 1].v - states[i].v) / dt;
    out.mean_abs_accel += std::abs(accel[i]);
  }
  out.mean_abs_accel /= static_cast<double>(accel.size());

  for (size_t i = 0; i + 1 < accel.size(); ++i) {
    const double jerk = std::abs((accel[i + 1] - accel[i]) / dt);
    out.mean_abs_jerk += jerk;
    out.max_abs_jerk = std::max(out.max_abs_jerk, jerk);
  }
  out.mean_abs_jerk /= static_cast<double>(accel.size() - 1);
  return out;
}

KinStats kinematic_stats(double v0, std::span<const ActionToken> tokens, double dt) {
  if (tokens.size() < 2) {
    throw std::invalid_argument("kinematic_stats: need at least 2 actions");
  }
  KinStats out;
  double v = v0;
  double speed_sum = v;  // include the entry speed, matching the state overload
  std::vector<double> accel(tokens.size());
  for (size_t i = 0; i < tokens.size(); ++i) {
    accel[i] = dequantize(tokens[i]).a;
    out.mean_abs_accel += std::abs(accel[i]);
    v += accel[i] * dt;
    speed_sum += v;
  }
  out.mean_speed = speed_sum / static_cast<double>(tokens.size() + 1);
  out.mean_abs_accel /= static_cast<double>(tokens.size());
  for (size_t i = 0; i + 1 < accel.size(); ++i) {
    const double jerk = std::abs((accel[i + 1] - accel[i]) / dt);
    out.mean_abs_jerk += jerk;
    out.max_abs_jerk = std::max(out.max_abs_jerk, jerk);
  }
  out.mean_abs_jerk /= static_cast<double>(accel.size() - 1);
  return out;
}

int first_collision_step(const Scenario& world, int agent_id) {
  const Track* ego = world.find_track(agent_id);
  if (ego == nullptr) throw std::invalid_argument("first_collision_step: unknown agent id");
  const int cur = world.current_index();
  for (int t = cur + 1; t < world.step_count(); ++t) {
    if (!ego->valid[t]) continue;
    for (const Track& other : world.tracks) {
      if (other.meta.id == agent_id || !other.valid[t]) continue;
      if (obb_collision(ego->states[t], ego->meta, other.states[t], other.meta)) {
        return t - cur;
      }
    }
  }
  return -1;
}

CollisionRates collision_rate(std::span<const SimulatedScenario> sims) {
  int cases = 0;
  int hit3 = 0, hit5 = 0, hit8 = 0;
  for (const SimulatedScenario& sim : sims) {
    const double dt = sim.world.dt;
    for (int ego : sim.controlled_ids) {
      ++cases;
      const int first = first_collision_step(sim.world, ego);
      if (first < 0) continue;
      if (first <= horizon_steps(3.0, dt, sim.horizon)) ++hit3;
      if (first <= horizon_steps(5.0, dt, sim.horizon)) ++hit5;
      if (first <= horizon_steps(8.0, dt, sim.horizon)) ++hit8;
    }
  }
  CollisionRates rates;
  if (cases > 0) {
    rates.at_3s = 1000.0 * hit3 / cases;
    rates.at_5s = 1000.0 * hit5 / cases;
    rates.at_8s = 1000.0 * hit8 / cases;
  }
  return rates;
}

double min_ade(std::span<const SimulatedScenario> rollouts, const Track& ground_truth,
               int horizon_steps_, int agent_id) {
  if (rollouts.empty()) throw std::invalid_argument("min_ade: need at least one rollout");
  double best = std::numeric_limits<double>::infinity();
  for (const SimulatedScenario& sim : rollouts) {
    const Track* t = sim.world.find_track(agent_id);
    if (t == nullptr) throw std::invalid_argument("min_ade: unknown agent id");
    const int cur = sim.world.current_index();
    double sum = 0.0;
    int n = 0;
    for (int s = 1; s <= horizon_steps_; ++s) {
      const int idx = cur + s;
      if (idx >= static_cast<int>(ground_truth.states.size()) || !ground_truth.valid[idx]) {
        continue;
      }
      const double dx = t->states[idx].x - ground_truth.states[idx].x;
      const double dy = t->states[idx].y - ground_truth.states[idx].y;
      sum += std::hypot(dx, dy);
      ++n;
    }
    if (n > 0) best = std::min(best, sum / n);
  }
  return std::isfinite(best) ? best : 0.0;
}

MetricsReport evaluate_simulations(std::span<const SimulatedScenario> sims) {
  MetricsReport report;
  report.rates = collision_rate(sims);
  double speed = 0.0, acc = 0.0, jerk = 0.0, jerk_max = 0.0;
  int egos = 0;
  for (const SimulatedScenario& sim : sims) {
    const int cur = sim.world.current_index();
    for (int ego : sim.controlled_ids) {
      const auto it = sim.tokens.find(ego);
      if (it == sim.tokens.end() || it->second.size() < 2) continue;
      const Track* track = sim.world.find_track(ego);
      const KinStats st =
          kinematic_stats(track->states[cur].v, it->second, sim.world.dt);
      speed += st.mean_speed;
      acc += st.mean_abs_accel;
      jerk += st.mean_abs_jerk;
      jerk_max = std::max(jerk_max, st.max_abs_jerk);
      ++egos;
    }
  }
  if (egos > 0) {
    report.mean_speed = speed / egos;
    report.mean_abs_accel = acc / egos;
    report.mean_abs_jerk = jerk / egos;
    report.max_abs_jerk = jerk_max;
  }
  report.ego_count = egos;
  return report;
}

std::string MetricsReport::to_text() const {
  std::ostringstream out;
  out << "metric                 value\n";
  auto row = [&out](const char* name, double v) {
    out << name;
    const int pad = 22 - static_cast<int>(std::string(name).size());
    for (int i = 0; i < pad; ++i) out << ' ';
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%10.4f", v);
    out << buf << "\n";
  };
  row("speed (m/s)", mean_speed);
  row("acc (m/s^2)", mean_abs_accel);
  row("jerk (m/s^3)", mean_abs_jerk);
  row("jerk_max (m/s^3)", max_abs_jerk);
  row("collision 3s (permil)", rates.at_3s);
  row("collision 5s (permil)", rates.at_5s);
  row("collision 8s (permil)", rates.at_8s);
  if (min_ade_m >= 0.0) row("minADE (m)", min_ade_m);
  row("egos", ego_count);
  return out.str();
}

std::string MetricsReport::to_record() const {
  nlohmann::json j;
  j["speed"] = mean_speed;
  j["acc"] = mean_abs_accel;
  j["jerk"] = mean_abs_jerk;
  j["jerk_max"] = max_abs_jerk;
  j["collision_3s_permil"] = rates.at_3s;
  j["collision_5s_permil"] = rates.at_5s;
  j["collision_8s_permil"] = rates.at_8s;
  if (min_ade_m >= 0.0) j["min_ade"] = min_ade_m;
  j["egos"] = ego_count;
  return j.dump();
}

}  // namespace kinesim
