#include "kinesim/scene.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace kinesim {

const char* to_string(AgentKind k) {
  switch (k) {
    case AgentKind::vehicle: return "vehicle";
    case AgentKind::pedestrian: return "pedestrian";
    case AgentKind::cyclist: return "cyclist";
  }
  return "vehicle";
}

const char* to_string(PolylineKind k) {
  switch (k) {
    case PolylineKind::lane_center: return "lane_center";
    case PolylineKind::road_edge: return "road_edge";
    case PolylineKind::crosswalk: return "crosswalk";
    case PolylineKind::stop_line: return "stop_line";
  }
  return "lane_center";
}

char to_char(LightState s) {
  switch (s) {
    case LightState::red: return 'r';
    case LightState::yellow: return 'y';
    case LightState::green: return 'g';
    case LightState::unknown: return 'u';
  }
  return 'u';
}

AgentKind agent_kind_from_string(const std::string& s) {
  if (s == "vehicle") return AgentKind::vehicle;
  if (s == "pedestrian") return AgentKind::pedestrian;
  if (s == "cyclist") return AgentKind::cyclist;
  throw std::runtime_error("unknown agent kind: " + s);
}

PolylineKind polyline_kind_from_string(const std::string& s) {
  if (s == "lane_center") return PolylineKind::lane_center;
  if (s == "road_edge") return PolylineKind::road_edge;
  if (s == "crosswalk") return PolylineKind::crosswalk;
  if (s == "stop_line") return PolylineKind::stop_line;
  throw std::runtime_error("unknown polyline kind: " + s);
}

LightState light_state_from_char(char c) {
  switch (c) {
    case 'r': return LightState::red;
    case 'y': return LightState::yellow;
    case 'g': return LightState::green;
    case 'u': return LightState::unknown;
  }
  throw std::runtime_error(std::string("unknown light state char: ") + c);
}

void Scenario::validate() const {
  if (!(dt > 0.0)) throw std::runtime_error("scenario: dt must be positive");
  if (history_len < 0 || future_len < 0) {
    throw std::runtime_error("scenario: negative step counts");
  }
  const size_t steps = static_cast<size_t>(step_count());
  for (const Track& t : tracks) {
    if (t.states.size() != steps) {
      throw std::runtime_error("scenario: track " + std::to_string(t.meta.id) +
                               " has " + std::to_string(t.states.size()) +
                               " states, expected " + std::to_string(steps));
    }
    if (t.valid.size() != steps) {
      throw std::runtime_error("scenario: track " + std::to_string(t.meta.id) +
                               " valid mask length mismatch");
    }
    if (!(t.meta.length > 0.0) || !(t.meta.width > 0.0)) {
      throw std::runtime_error("scenario: track " + std::to_string(t.meta.id) +
                               " has non-positive extent");
    }
    if (!t.gt_tokens.empty() && t.gt_tokens.size() != steps - 1) {
      throw std::runtime_error("scenario: track " + std::to_string(t.meta.id) +
                               " gt token count mismatch");
    }
  }
  for (const MapPolyline& p : polylines) {
    if (p.points.size() < 2) throw std::runtime_error("scenario: polyline with < 2 points");
  }
  for (const TrafficLight& l : lights) {
    if (l.states.size() != steps) {
      throw std::runtime_error("scenario: light state sequence length mismatch");
    }
  }
}

const Track* Scenario::find_track(int agent_id) const {
  for (const Track& t : tracks) {
    if (t.meta.id == agent_id) return &t;
  }
  return nullptr;
}

Point2 to_agent_frame(const Point2& world_point, const Pose& pose) {
  const double dx = world_point.x - pose.x;
  const double dy = world_point.y - pose.y;
  const double c = std::cos(pose.theta);
  const double s = std::sin(pose.theta);
  return Point2{c * dx + s * dy, -s * dx + c * dy};
}

Point2 from_agent_frame(const Point2& local_point, const Pose& pose) {
  const double c = std::cos(pose.theta);
  const double s = std::sin(pose.theta);
  return Point2{pose.x + c * local_point.x - s * local_point.y,
                pose.y + s * local_point.x + c * local_point.y};
}

std::array<Segment2, 4> bbox_vectors(const AgentState& state, const AgentMeta& meta) {
  const double hl = 0.5 * meta.length;
  const double hw = 0.5 * meta.width;
  const Pose pose{state.x, state.y, state.theta};
  // Counterclockwise from front-left.
  const std::array<Point2, 4> corners = {
      from_agent_frame({hl, hw}, pose),
      from_agent_frame({-hl, hw}, pose),
      from_agent_frame({-hl, -hw}, pose),
      from_agent_frame({hl, -hw}, pose),
  };
  std::array<Segment2, 4> edges;
  for (int i = 0; i < 4; ++i) {
    edges[i] = Segment2{corners[i], corners[(i + 1) % 4]};
  }
  return edges;
}

std::vector<Segment2> polyline_vectors(const MapPolyline& p) {
  if (p.points.size() < 2) {
    throw std::invalid_argument("polyline_vectors: need at least 2 points");
  }
  std::vector<Segment2> out;
  out.reserve(p.points.size() - 1);
  for (size_t i = 0; i + 1 < p.points.size(); ++i) {
    out.push_back(Segment2{p.points[i], p.points[i + 1]});
  }
  return out;
}

MapPolyline resample_polyline(const MapPolyline& p, double max_len) {
  if (!(max_len > 0.0)) throw std::invalid_argument("resample_polyline: max_len must be positive");
  MapPolyline out;
  out.kind = p.kind;
  out.points.push_back(p.points.front());
  for (size_t i = 0; i + 1 < p.points.size(); ++i) {
    const Point2& a = p.points[i];
    const Point2& b = p.points[i + 1];
    const double len = std::hypot(b.x - a.x, b.y - a.y);
    // epsilon keeps the division count stable when len is an exact multiple
    // of max_len up to rounding (rigid motions must not change the count)
    const int pieces = std::max(1, static_cast<int>(std::ceil(len / max_len - 1e-9)));
    for (int j = 1; j <= pieces; ++j) {
      const double f = static_cast<double>(j) / pieces;
      out.points.push_back(Point2{a.x + f * (b.x - a.x), a.y + f * (b.y - a.y)});
    }
  }
  return out;
}

SceneStepInput build_step_input(const Scenario& scenario, int agent_id, int t,
                                int prev_token, const SceneInputOptions& opts) {
  const Track* target = scenario.find_track(agent_id);
  if (target == nullptr) {
    throw std::invalid_argument("build_step_input: unknown agent id " + std::to_string(agent_id));
  }
  if (t < 0 || t >= scenario.step_count()) {
    throw std::invalid_argument("build_step_input: step out of range");
  }
  if (!target->valid[t]) {
    throw std::invalid_argument("build_step_input: target agent " + std::to_string(agent_id) +
                                " invalid at step " + std::to_string(t));
  }

  const AgentState& s = target->states[t];
  const Pose pose{s.x, s.y, s.theta};

  SceneStepInput input;
  input.speed = s.v;
  input.length = target->meta.length;
  input.width = target->meta.width;
  input.kind = target->meta.kind;
  input.prev_token = prev_token;

  // Neighbors: nearest max_neighbors by center distance, id-ascending ties.
  struct Cand {
    double dist2;
    const Track* track;
  };
  std::vector<Cand> cands;
  for (const Track& other : scenario.tracks) {
    if (other.meta.id == agent_id || !other.valid[t]) continue;
    const double dx = other.states[t].x - s.x;
    const double dy = other.states[t].y - s.y;
    cands.push_back(Cand{dx * dx + dy * dy, &other});
  }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.dist2 != b.dist2) return a.dist2 < b.dist2;
    return a.track->meta.id < b.track->meta.id;
  });
  if (static_cast<int>(cands.size()) > opts.max_neighbors) {
    cands.resize(opts.max_neighbors);
  }
  for (const Cand& c : cands) {
    const AgentState& os = c.track->states[t];
    NeighborFeature nf;
    const auto edges = bbox_vectors(os, c.track->meta);
    for (int i = 0; i < 4; ++i) {
      nf.box_edges[i] = Segment2{to_agent_frame(edges[i].start, pose),
                                 to_agent_frame(edges[i].end, pose)};
    }
    const Point2 center = to_agent_frame({os.x, os.y}, pose);
    nf.cx = center.x;
    nf.cy = center.y;
    const double rel = os.theta - s.theta;
    nf.cos_h = std::cos(rel);
    nf.sin_h = std::sin(rel);
    nf.length = c.track->meta.length;
    nf.width = c.track->meta.width;
    nf.kind = c.track->meta.kind;
    input.neighbors.push_back(nf);
  }

  // Map: resample, then keep segments with an endpoint inside the crop radius.
  const double r2 = opts.map_radius * opts.map_radius;
  for (const MapPolyline& p : scenario.polylines) {
    const MapPolyline rp = resample_polyline(p, opts.resample_len);
    for (size_t i = 0; i + 1 < rp.points.size(); ++i) {
      const Point2& a = rp.points[i];
      const Point2& b = rp.points[i + 1];
      const double da = (a.x - s.x) * (a.x - s.x) + (a.y - s.y) * (a.y - s.y);
      const double db = (b.x - s.x) * (b.x - s.x) + (b.y - s.y) * (b.y - s.y);
      if (da > r2 && db > r2) continue;
      input.map_segments.push_back(
          MapFeature{Segment2{to_agent_frame(a, pose), to_agent_frame(b, pose)}, rp.kind});
    }
  }

  for (const TrafficLight& l : scenario.lights) {
    const double dx = l.stop_point.x - s.x;
    const double dy = l.stop_point.y - s.y;
    if (dx * dx + dy * dy > r2) continue;
    input.lights.push_back(LightFeature{to_agent_frame(l.stop_point, pose), l.states[t]});
  }

  return input;
}

}  // namespace kinesim
