#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "kinesim/kinematics.hpp"

namespace kinesim {

enum class AgentKind : uint8_t { vehicle = 0, pedestrian = 1, cyclist = 2 };
enum class PolylineKind : uint8_t { lane_center = 0, road_edge = 1, crosswalk = 2, stop_line = 3 };
enum class LightState : uint8_t { red = 0, yellow = 1, green = 2, unknown = 3 };

inline constexpr int kAgentKindCount = 3;
inline constexpr int kPolylineKindCount = 4;
inline constexpr int kLightStateCount = 4;

const char* to_string(AgentKind k);
const char* to_string(PolylineKind k);
char to_char(LightState s);
AgentKind agent_kind_from_string(const std::string& s);
PolylineKind polyline_kind_from_string(const std::string& s);
LightState light_state_from_char(char c);

struct Point2 {
  double x{0.0};
  double y{0.0};
  bool operator==(const Point2&) const = default;
};

struct AgentMeta {
  int id{0};
  AgentKind kind{AgentKind::vehicle};
  double length{4.5};  // m, > 0
  double width{2.0};   // m, > 0
  bool operator==(const AgentMeta&) const = default;
};

/// One agent's logged motion at the scenario rate, with a per-step
/// observation mask. gt_tokens is optional generator metadata: the codebook
/// actions the synthetic track was rolled with (empty for real logs).
struct Track {
  AgentMeta meta;
  std::vector<AgentState> states;
  std::vector<bool> valid;
  std::vector<int> gt_tokens;
  bool operator==(const Track&) const = default;
};

struct MapPolyline {
  PolylineKind kind{PolylineKind::lane_center};
  std::vector<Point2> points;  // at least 2
  bool operator==(const MapPolyline&) const = default;
};

struct TrafficLight {
  Point2 stop_point;
  std::vector<LightState> states;  // one per scenario step
  bool operator==(const TrafficLight&) const = default;
};

/// A complete logged scene: static map, agent tracks and light states over
/// history_len + 1 + future_len steps at a fixed dt.
struct Scenario {
  double dt{0.5};
  int history_len{2};
  int future_len{16};
  std::vector<MapPolyline> polylines;
  std::vector<Track> tracks;
  std::vector<TrafficLight> lights;

  int step_count() const { return history_len + 1 + future_len; }
  int current_index() const { return history_len; }

  /// Throws std::runtime_error naming the offending track/light on any
  /// structural violation.
  void validate() const;

  const Track* find_track(int agent_id) const;
  bool operator==(const Scenario&) const = default;
};

struct Pose {
  double x{0.0};
  double y{0.0};
  double theta{0.0};
};

/// Rigid inverse transform into the pose's frame: the pose's own position maps
/// to the origin and its heading to +x.
Point2 to_agent_frame(const Point2& world_point, const Pose& pose);
/// Inverse of to_agent_frame.
Point2 from_agent_frame(const Point2& local_point, const Pose& pose);

struct Segment2 {
  Point2 start;
  Point2 end;
  bool operator==(const Segment2&) const = default;
};

/// The four directed bounding-box edges of an agent at `state`, in world
/// coordinates, traversing the rectangle counterclockwise from the front-left
/// corner.
std::array<Segment2, 4> bbox_vectors(const AgentState& state, const AgentMeta& meta);

/// Directed segments between consecutive polyline points, order preserved.
std::vector<Segment2> polyline_vectors(const MapPolyline& p);

/// Subdivides polyline segments so no piece exceeds max_len. Original points
/// are kept as knots.
MapPolyline resample_polyline(const MapPolyline& p, double max_len);

/// One neighbor as the target sees it: the four box-edge vectors in the
/// target's frame plus the raw local pose/extent (used by the non-unified
/// encoder path).
struct NeighborFeature {
  std::array<Segment2, 4> box_edges;
  double cx{0.0}, cy{0.0};
  double cos_h{1.0}, sin_h{0.0};
  double length{0.0}, width{0.0};
  AgentKind kind{AgentKind::vehicle};
};

struct MapFeature {
  Segment2 seg;
  PolylineKind kind{PolylineKind::lane_center};
};

struct LightFeature {
  Point2 stop_point;  // target frame
  LightState state{LightState::unknown};
};

/// Everything the model sees for one (agent, timestep): all coordinates in the
/// target's agent-centric frame at that step's pose.
struct SceneStepInput {
  double speed{0.0};
  double length{0.0}, width{0.0};
  AgentKind kind{AgentKind::vehicle};
  int prev_token{-1};  // -1 = sequence start
  std::vector<NeighborFeature> neighbors;
  std::vector<MapFeature> map_segments;
  std::vector<LightFeature> lights;
};

struct SceneInputOptions {
  double map_radius = 50.0;   // m
  int max_neighbors = 64;
  double resample_len = 2.0;  // m
};

/// Builds the agent-centric step input for `agent_id` at step `t`: the nearest
/// max_neighbors other agents (center distance, id-ascending tie-break; agents
/// are never radius-cropped), map segments cropped to map_radius, lights in
/// radius, everything re-expressed in the target's frame. Throws if the target
/// is invalid at t.
SceneStepInput build_step_input(const Scenario& scenario, int agent_id, int t,
                                int prev_token, const SceneInputOptions& opts = {});

}  // namespace kinesim
