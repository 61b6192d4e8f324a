#include "kinesim/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "kinesim/action_codec.hpp"
#include "kinesim/rng.hpp"

namespace kinesim {

namespace {

constexpr double kPi = std::numbers::pi;
// With dt = 0.5 this gain saturates a designed braking ramp until its final
// step and lands exactly on the target speed, so ramp tokens stay crisp.
constexpr double kSpeedGain = 2.0;

double accel_center(int offset) { return dequantize(ActionToken{31 + offset, 31}).a; }
double yaw_center(int offset) { return dequantize(ActionToken{31, 31 + offset}).w; }

// ---------------------------------------------------------------------------
// lane geometry
// ---------------------------------------------------------------------------

struct Lane {
  std::vector<Point2> pts;
  std::vector<double> cum;  // cumulative arclength per point

  void finish() {
    cum.resize(pts.size());
    cum[0] = 0.0;
    for (size_t i = 1; i < pts.size(); ++i) {
      cum[i] = cum[i - 1] + std::hypot(pts[i].x - pts[i - 1].x, pts[i].y - pts[i - 1].y);
    }
  }

  double length() const { return cum.back(); }

  Point2 at(double s) const {
    if (s <= 0.0) return pts.front();
    if (s >= cum.back()) return pts.back();
    size_t i = 1;
    while (cum[i] < s) ++i;
    const double f = (s - cum[i - 1]) / (cum[i] - cum[i - 1]);
    return Point2{pts[i - 1].x + f * (pts[i].x - pts[i - 1].x),
                  pts[i - 1].y + f * (pts[i].y - pts[i - 1].y)};
  }

  // Arclength of the closest point on the polyline.
  double project(const Point2& p) const {
    double best_d2 = 1e300, best_s = 0.0;
    for (size_t i = 1; i < pts.size(); ++i) {
      const double ax = pts[i - 1].x, ay = pts[i - 1].y;
      const double bx = pts[i].x, by = pts[i].y;
      const double vx = bx - ax, vy = by - ay;
      const double len2 = vx * vx + vy * vy;
      double f = len2 > 0.0 ? ((p.x - ax) * vx + (p.y - ay) * vy) / len2 : 0.0;
      f = std::clamp(f, 0.0, 1.0);
      const double qx = ax + f * vx, qy = ay + f * vy;
      const double d2 = (p.x - qx) * (p.x - qx) + (p.y - qy) * (p.y - qy);
      if (d2 < best_d2) {
        best_d2 = d2;
        best_s = cum[i - 1] + f * std::sqrt(len2);
      }
    }
    return best_s;
  }
};

Lane straight_lane(const Point2& start, double heading, double length, double step = 2.0) {
  Lane lane;
  const double c = std::cos(heading), s = std::sin(heading);
  const int n = std::max(2, static_cast<int>(std::ceil(length / step)) + 1);
  for (int i = 0; i < n; ++i) {
    const double d = length * i / (n - 1);
    lane.pts.push_back(Point2{start.x + c * d, start.y + s * d});
  }
  lane.finish();
  return lane;
}

// Pure pursuit on a lane polyline: aim at the point one lookahead ahead of the
// projection of the current position.
double pure_pursuit_yaw_rate(const AgentState& s, const Lane& lane) {
  const double lookahead = std::max(3.0, 0.9 * std::abs(s.v));
  const double s_now = lane.project({s.x, s.y});
  const Point2 target = lane.at(s_now + lookahead);
  const double dx = target.x - s.x, dy = target.y - s.y;
  const double dist = std::hypot(dx, dy);
  if (dist < 1e-6 || std::abs(s.v) < 1e-9) return 0.0;
  const double heading_to = std::atan2(dy, dx);
  const double alpha = wrap_angle(heading_to - s.theta);
  return s.v * 2.0 * std::sin(alpha) / dist;
}

// ---------------------------------------------------------------------------
// scripted policies and lockstep rolling
// ---------------------------------------------------------------------------

using Policy = std::function<ControlAction(const std::vector<AgentState>&, size_t)>;

// Advances every agent simultaneously with its quantized policy action; the
// logged track is therefore in-codebook by construction.
void roll_agents(std::vector<Track>& tracks, const std::vector<Policy>& policies,
                 int transitions, double dt) {
  const size_t n = tracks.size();
  std::vector<AgentState> world(n);
  for (size_t i = 0; i < n; ++i) world[i] = tracks[i].states[0];
  for (int t = 0; t < transitions; ++t) {
    std::vector<ActionToken> tokens(n);
    for (size_t i = 0; i < n; ++i) {
      tokens[i] = quantize(policies[i](world, i));
    }
    for (size_t i = 0; i < n; ++i) {
      world[i] = ctra_step(world[i], dequantize(tokens[i]), dt);
      tracks[i].states.push_back(world[i]);
      tracks[i].valid.push_back(true);
      tracks[i].gt_tokens.push_back(tokens[i].flat());
    }
  }
}

Policy lane_keep_policy(const Lane* lane, double v_ref) {
  return [lane, v_ref](const std::vector<AgentState>& world, size_t self) {
    const AgentState& s = world[self];
    return ControlAction{kSpeedGain * (v_ref - s.v), pure_pursuit_yaw_rate(s, *lane)};
  };
}

struct HeadwayStyle {
  double headway = 1.4;     // s
  double min_gap = 2.5;     // m
  double brake_limit = 0.0; // most negative allowed accel (set from a bin center)
  double accel_limit = 0.0;
};

Policy follow_policy(const Lane* lane, size_t leader, double v_cap, HeadwayStyle style) {
  return [lane, leader, v_cap, style](const std::vector<AgentState>& world, size_t self) {
    const AgentState& s = world[self];
    const AgentState& l = world[leader];
    const double center_gap = std::hypot(l.x - s.x, l.y - s.y);
    const double gap = center_gap - 4.5;  // bumper gap for two standard-length cars
    const double v_des = std::clamp((gap - style.min_gap) / style.headway, 0.0, v_cap);
    const double a = std::clamp(kSpeedGain * (v_des - s.v), style.brake_limit, style.accel_limit);
    return ControlAction{a, pure_pursuit_yaw_rate(s, *lane)};
  };
}

// ---------------------------------------------------------------------------
// per-archetype scene builders (local frame, transformed afterwards)
// ---------------------------------------------------------------------------

struct SceneDraft {
  std::vector<Lane> lanes;  // lanes the agents follow (owned; stable addresses needed)
  Scenario scenario;
  std::vector<Policy> policies;
};

Track make_track(int id, AgentKind kind, double length, double width, const AgentState& s0) {
  Track t;
  t.meta = AgentMeta{id, kind, length, width};
  t.states.push_back(s0);
  t.valid.push_back(true);
  return t;
}

void add_lane_polyline(Scenario& sc, const Lane& lane, PolylineKind kind) {
  MapPolyline p;
  p.kind = kind;
  p.points = lane.pts;
  sc.polylines.push_back(std::move(p));
}

void build_straight(SceneDraft& d, Rng& rng, const SyntheticConfig& cfg) {
  const int transitions = cfg.history_len + cfg.future_len;
  const double v0 = rng.uniform(cfg.speed_min, cfg.speed_max);
  const double span = v0 * (transitions + 2) * cfg.dt + 35.0;

  d.lanes.push_back(straight_lane({-15.0, 0.0}, 0.0, span));
  d.scenario.tracks.push_back(make_track(0, AgentKind::vehicle, 4.6, 2.0, {0.0, 0.0, 0.0, v0}));
  d.policies.push_back(lane_keep_policy(&d.lanes[0], v0));

  if (rng.uniform01() < cfg.parallel_prob) {
    const double offset = rng.uniform01() < 0.5 ? 3.6 : -3.6;
    const double v1 = rng.uniform(cfg.speed_min, cfg.speed_max);
    const double x1 = rng.uniform(-12.0, 12.0);
    d.lanes.push_back(straight_lane({-25.0, offset}, 0.0, span + 20.0));
    d.scenario.tracks.push_back(
        make_track(1, AgentKind::vehicle, 4.6, 2.0, {x1, offset, 0.0, v1}));
    d.policies.push_back(lane_keep_policy(&d.lanes[1], v1));
  }
  for (const Lane& lane : d.lanes) add_lane_polyline(d.scenario, lane, PolylineKind::lane_center);
}

void build_curve(SceneDraft& d, Rng& rng, const SyntheticConfig& cfg) {
  const int transitions = cfg.history_len + cfg.future_len;
  const double v0 = rng.uniform(cfg.speed_min, cfg.speed_max);
  // Curvature matching a yaw-rate bin center exactly, radius kept >= 8 m.
  const int max_off = std::min(10, static_cast<int>(std::floor(v0 / (8.0 * yaw_center(1)))));
  const int off = (rng.uniform01() < 0.5 ? 1 : -1) * rng.uniform_int(2, std::max(2, max_off));
  const double w = yaw_center(std::abs(off)) * (off < 0 ? -1.0 : 1.0);
  const double radius = v0 / std::abs(w);

  // Arc through the start pose (origin, heading +x), center on the +/-y axis.
  const double side = off > 0 ? 1.0 : -1.0;
  const double cx = 0.0, cy = side * radius;
  const double travel = v0 * (transitions + 2) * cfg.dt + 30.0;
  const double a0 = side > 0 ? -kPi / 2 : kPi / 2;  // angle of start point from center
  Lane lane;
  const double arc_step = 2.0 / radius;
  const double back = 15.0 / radius;
  const int n = static_cast<int>(std::ceil((travel / radius + back) / arc_step)) + 2;
  for (int i = 0; i < n; ++i) {
    const double ang = a0 + side * (-back + i * arc_step);
    lane.pts.push_back(Point2{cx + radius * std::cos(ang), cy + radius * std::sin(ang)});
  }
  lane.finish();
  d.lanes.push_back(std::move(lane));
  add_lane_polyline(d.scenario, d.lanes[0], PolylineKind::lane_center);

  d.scenario.tracks.push_back(make_track(0, AgentKind::vehicle, 4.6, 2.0, {0.0, 0.0, 0.0, v0}));
  d.policies.push_back(lane_keep_policy(&d.lanes[0], v0));
}

void build_intersection(SceneDraft& d, Rng& rng, const SyntheticConfig& cfg) {
  // Design the speed profile on the codebook grid so ramp tokens are exact.
  const int yaw_off = (rng.uniform01() < 0.5 ? 1 : -1) * rng.uniform_int(8, 10);
  const double w_turn = yaw_center(std::abs(yaw_off)) * (yaw_off < 0 ? -1.0 : 1.0);
  const int brake_off = -2 * rng.uniform_int(4, 6);  // bins -8, -10, -12
  const double a_brake = accel_center(brake_off);
  const int brake_steps = rng.uniform_int(2, 4);
  const double v_turn = rng.uniform(2.2, 3.4);
  const double v0 = v_turn + brake_steps * std::abs(a_brake) * cfg.dt;
  const int cruise_steps = rng.uniform_int(2, 3);

  const double radius = v_turn / std::abs(w_turn);
  const int turn_steps = static_cast<int>(std::round((kPi / 2) / (std::abs(w_turn) * cfg.dt)));
  const double turn_angle = turn_steps * std::abs(w_turn) * cfg.dt;

  // Braking distance of the designed ramp, plus the approach cruise.
  double brake_dist = 0.0;
  for (int j = 0; j < brake_steps; ++j) {
    brake_dist += (v0 + a_brake * (j + 1) * cfg.dt) * cfg.dt;
  }
  const double approach = cruise_steps * v0 * cfg.dt + brake_dist;
  const double side = yaw_off > 0 ? 1.0 : -1.0;

  // Lane: straight approach, exact arc, straight exit.
  Lane lane;
  for (double s = -15.0; s < approach; s += 2.0) lane.pts.push_back(Point2{s, 0.0});
  const double acx = approach, acy = side * radius;
  const double a_start = side > 0 ? -kPi / 2 : kPi / 2;
  const int arc_n = std::max(2, static_cast<int>(std::ceil(turn_angle * radius / 1.5)));
  for (int i = 0; i <= arc_n; ++i) {
    const double ang = a_start + side * turn_angle * i / arc_n;
    lane.pts.push_back(Point2{acx + radius * std::cos(ang), acy + radius * std::sin(ang)});
  }
  const double exit_heading = side * turn_angle;
  const Point2 exit_pt = lane.pts.back();
  for (double s = 2.0; s <= 45.0; s += 2.0) {
    lane.pts.push_back(Point2{exit_pt.x + std::cos(exit_heading) * s,
                              exit_pt.y + std::sin(exit_heading) * s});
  }
  lane.finish();
  d.lanes.push_back(std::move(lane));
  const Lane& ego_lane = d.lanes[0];

  // Cross road and dressing near the turn entry.
  Lane cross = straight_lane({approach + radius, -side * 30.0}, side * kPi / 2, 60.0);
  add_lane_polyline(d.scenario, ego_lane, PolylineKind::lane_center);
  add_lane_polyline(d.scenario, cross, PolylineKind::lane_center);
  MapPolyline stop_line;
  stop_line.kind = PolylineKind::stop_line;
  stop_line.points = {Point2{approach, -2.0}, Point2{approach, 2.0}};
  d.scenario.polylines.push_back(stop_line);
  TrafficLight light;
  light.stop_point = Point2{approach, 2.5};
  light.states.assign(cfg.history_len + 1 + cfg.future_len, LightState::green);
  d.scenario.lights.push_back(light);

  // Speed profile trigger, with a half-step margin so the tie is robust. The
  // lane's arclength origin sits 15 m behind the x origin.
  const double brake_at_s = (approach - brake_dist - 0.5 * v0 * cfg.dt) + 15.0;
  const double ego_x = approach - brake_dist - cruise_steps * v0 * cfg.dt;

  d.scenario.tracks.push_back(make_track(0, AgentKind::vehicle, 4.6, 2.0, {ego_x, 0.0, 0.0, v0}));
  const Lane* lane_ptr = &ego_lane;
  const double a_accel_cap = accel_center(8);
  d.policies.push_back([lane_ptr, v0, v_turn, brake_at_s, a_brake, a_accel_cap](
                           const std::vector<AgentState>& world, size_t self) {
    const AgentState& s = world[self];
    const double s_now = lane_ptr->project({s.x, s.y});
    const double v_ref = s_now >= brake_at_s ? v_turn : v0;
    const double a = std::clamp(kSpeedGain * (v_ref - s.v), a_brake, a_accel_cap);
    return ControlAction{a, pure_pursuit_yaw_rate(s, *lane_ptr)};
  });

  // Occasional cross-traffic driving away from the junction, and a pedestrian
  // strolling along the roadside; neither interacts with the ego path.
  if (rng.uniform01() < 0.5) {
    const double vx = rng.uniform(3.0, 6.0);
    d.lanes.push_back(std::move(cross));
    const Lane& cl = d.lanes.back();
    const Point2 p0 = cl.at(42.0);
    d.scenario.tracks.push_back(
        make_track(1, AgentKind::vehicle, 4.6, 2.0, {p0.x, p0.y, side * kPi / 2, vx}));
    d.policies.push_back(lane_keep_policy(&cl, vx));
  }
  if (rng.uniform01() < 0.4) {
    const double py = -side * 6.0;
    d.scenario.tracks.push_back(make_track(
        2, AgentKind::pedestrian, 0.6, 0.6, {approach - 25.0, py, 0.0, 1.2}));
    d.policies.push_back([](const std::vector<AgentState>&, size_t) {
      return ControlAction{0.0, 0.0};
    });
  }
}

void build_car_follow(SceneDraft& d, Rng& rng, const SyntheticConfig& cfg, bool conflict) {
  const int transitions = cfg.history_len + cfg.future_len;
  const bool late = rng.uniform01() < cfg.late_style_frac && !(conflict && cfg.conflict_tight);

  HeadwayStyle style;
  if (late) {
    style.headway = 0.6;
    style.brake_limit = accel_center(-27);  // about -4.29 m/s^2
    style.accel_limit = accel_center(8);
  } else {
    style.headway = 1.4;
    style.brake_limit = accel_center(-24);  // about -3.81 m/s^2
    style.accel_limit = accel_center(8);
  }

  double v_lead, v_ego, gap0, v_cap;
  if (!conflict) {
    v_lead = rng.uniform(cfg.speed_min, cfg.speed_max - 1.0);
    v_ego = v_lead;
    const double eq_gap = style.min_gap + style.headway * v_lead;
    gap0 = eq_gap * rng.uniform(1.1, 1.7);
    v_cap = cfg.speed_max + 1.0;
  } else if (cfg.conflict_tight) {
    v_lead = 0.0;
    v_ego = rng.uniform(6.5, 8.0);
    gap0 = rng.uniform(12.0, 16.0);
    v_cap = v_ego;  // approach speed, not a free acceleration budget
  } else {
    v_lead = 0.0;
    v_ego = rng.uniform(3.0, 4.5);
    gap0 = rng.uniform(10.0, 18.0);
    v_cap = v_ego;
  }

  const double span = std::max(v_ego, v_lead) * (transitions + 2) * cfg.dt + gap0 + 40.0;
  d.lanes.push_back(straight_lane({-15.0, 0.0}, 0.0, span));
  const Lane& lane = d.lanes[0];
  add_lane_polyline(d.scenario, lane, PolylineKind::lane_center);

  // The follower is the scene's ego and carries id 0 like every archetype.
  const double lead_x = gap0 + 4.5;  // center-to-center with bumper gap gap0
  d.scenario.tracks.push_back(make_track(0, AgentKind::vehicle, 4.5, 2.0, {0.0, 0.0, 0.0, v_ego}));
  d.policies.push_back(follow_policy(&lane, 1, v_cap, style));

  d.scenario.tracks.push_back(
      make_track(1, AgentKind::vehicle, 4.5, 2.0, {lead_x, 0.0, 0.0, v_lead}));
  d.policies.push_back(lane_keep_policy(&lane, v_lead));
}

// Applies a random rigid motion to the finished local-frame draft.
void apply_world_transform(SceneDraft& d, Rng& rng) {
  const double phi = rng.uniform(-kPi, kPi);
  const double tx = rng.uniform(-400.0, 400.0);
  const double ty = rng.uniform(-400.0, 400.0);
  const double c = std::cos(phi), s = std::sin(phi);
  auto xform_pt = [&](Point2& p) {
    const double x = c * p.x - s * p.y + tx;
    const double y = s * p.x + c * p.y + ty;
    p = Point2{x, y};
  };
  for (MapPolyline& p : d.scenario.polylines) {
    for (Point2& pt : p.points) xform_pt(pt);
  }
  for (TrafficLight& l : d.scenario.lights) xform_pt(l.stop_point);
  for (Track& t : d.scenario.tracks) {
    for (AgentState& st : t.states) {
      const double x = c * st.x - s * st.y + tx;
      const double y = s * st.x + c * st.y + ty;
      st.x = x;
      st.y = y;
      st.theta = wrap_angle(st.theta + phi);
    }
  }
  for (Lane& lane : d.lanes) {
    for (Point2& pt : lane.pts) xform_pt(pt);
    lane.finish();
  }
}

enum class Archetype { straight, curve, intersection, car_follow, conflict };

Scenario build_scene(Archetype kind, const SyntheticConfig& cfg, uint64_t scene_seed) {
  Rng rng(scene_seed);
  SceneDraft d;
  d.lanes.reserve(4);  // policies keep lane pointers; avoid reallocation
  d.scenario.dt = cfg.dt;
  d.scenario.history_len = cfg.history_len;
  d.scenario.future_len = cfg.future_len;

  switch (kind) {
    case Archetype::straight: build_straight(d, rng, cfg); break;
    case Archetype::curve: build_curve(d, rng, cfg); break;
    case Archetype::intersection: build_intersection(d, rng, cfg); break;
    case Archetype::car_follow: build_car_follow(d, rng, cfg, false); break;
    case Archetype::conflict: build_car_follow(d, rng, cfg, true); break;
  }

  apply_world_transform(d, rng);
  roll_agents(d.scenario.tracks, d.policies, cfg.history_len + cfg.future_len, cfg.dt);

  // Lights were sized before rolling; tracks grew to the full step count.
  d.scenario.validate();
  return std::move(d.scenario);
}

}  // namespace

void SyntheticConfig::validate() const {
  if (straight_count < 0 || curve_count < 0 || intersection_count < 0 ||
      car_follow_count < 0 || conflict_count < 0) {
    throw std::invalid_argument("synthetic config: counts must be non-negative");
  }
  if (history_len < 0 || future_len < 1) {
    throw std::invalid_argument("synthetic config: history_len >= 0 and future_len >= 1 required");
  }
  if (!(dt > 0.0)) throw std::invalid_argument("synthetic config: dt must be positive");
  if (!(speed_min > 0.0) || !(speed_max > speed_min)) {
    throw std::invalid_argument("synthetic config: need 0 < speed_min < speed_max");
  }
  if (parallel_prob < 0.0 || parallel_prob > 1.0 || late_style_frac < 0.0 ||
      late_style_frac > 1.0) {
    throw std::invalid_argument("synthetic config: probabilities must be in [0, 1]");
  }
}

SyntheticConfig parse_synthetic_config_text(const std::string& text) {
  SyntheticConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    // trim
    const size_t b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const size_t e = line.find_last_not_of(" \t\r");
    line = line.substr(b, e - b + 1);
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("synthetic config line " + std::to_string(line_no) +
                                  ": expected key=value");
    }
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);
    auto as_int = [&] { return std::stoi(value); };
    auto as_double = [&] { return std::stod(value); };
    if (key == "straight_count") cfg.straight_count = as_int();
    else if (key == "curve_count") cfg.curve_count = as_int();
    else if (key == "intersection_count") cfg.intersection_count = as_int();
    else if (key == "car_follow_count") cfg.car_follow_count = as_int();
    else if (key == "conflict_count") cfg.conflict_count = as_int();
    else if (key == "history_len") cfg.history_len = as_int();
    else if (key == "future_len") cfg.future_len = as_int();
    else if (key == "dt") cfg.dt = as_double();
    else if (key == "speed_min") cfg.speed_min = as_double();
    else if (key == "speed_max") cfg.speed_max = as_double();
    else if (key == "parallel_prob") cfg.parallel_prob = as_double();
    else if (key == "late_style_frac") cfg.late_style_frac = as_double();
    else if (key == "conflict_tight") cfg.conflict_tight = as_int() != 0;
    else throw std::invalid_argument("synthetic config: unknown key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

SyntheticConfig load_synthetic_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_synthetic_config_text(ss.str());
}

std::vector<Scenario> generate_synthetic(const SyntheticConfig& config, uint64_t seed) {
  config.validate();
  std::vector<Scenario> out;
  std::vector<Archetype> plan;
  auto add = [&plan](Archetype a, int n) { plan.insert(plan.end(), n, a); };
  add(Archetype::straight, config.straight_count);
  add(Archetype::curve, config.curve_count);
  add(Archetype::intersection, config.intersection_count);
  add(Archetype::car_follow, config.car_follow_count);
  add(Archetype::conflict, config.conflict_count);
  out.reserve(plan.size());
  for (size_t i = 0; i < plan.size(); ++i) {
    out.push_back(build_scene(plan[i], config, Rng::mix(seed, i + 1)));
  }
  return out;
}

}  // namespace kinesim
