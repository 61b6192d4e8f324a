#include "kinesim/plot.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace kinesim {

namespace {

struct Bounds {
  double min_x = 1e300, min_y = 1e300, max_x = -1e300, max_y = -1e300;
  void add(double x, double y) {
    min_x = std::min(min_x, x);
    min_y = std::min(min_y, y);
    max_x = std::max(max_x, x);
    max_y = std::max(max_y, y);
  }
};

const char* polyline_color(PolylineKind k) {
  switch (k) {
    case PolylineKind::lane_center: return "#b0b0b0";
    case PolylineKind::road_edge: return "#606060";
    case PolylineKind::crosswalk: return "#9fd0ff";
    case PolylineKind::stop_line: return "#d08020";
  }
  return "#b0b0b0";
}

}  // namespace

std::string scenario_svg(const Scenario& s, const std::vector<int>& highlight_ids) {
  Bounds b;
  for (const MapPolyline& p : s.polylines) {
    for (const Point2& pt : p.points) b.add(pt.x, pt.y);
  }
  for (const Track& t : s.tracks) {
    for (size_t i = 0; i < t.states.size(); ++i) {
      if (t.valid[i]) b.add(t.states[i].x, t.states[i].y);
    }
  }
  if (b.min_x > b.max_x) b = Bounds{0, 0, 1, 1};
  const double margin = 8.0;
  const double w = b.max_x - b.min_x + 2 * margin;
  const double h = b.max_y - b.min_y + 2 * margin;
  const double scale = 900.0 / std::max(w, h);

  auto px = [&](double x) { return (x - b.min_x + margin) * scale; };
  // Flip y so north is up.
  auto py = [&](double y) { return (b.max_y - y + margin) * scale; };

  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << static_cast<int>(w * scale)
      << "\" height=\"" << static_cast<int>(h * scale) << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"#fafafa\"/>\n";

  for (const MapPolyline& p : s.polylines) {
    out << "<polyline fill=\"none\" stroke=\"" << polyline_color(p.kind)
        << "\" stroke-width=\"1.5\" points=\"";
    for (const Point2& pt : p.points) out << px(pt.x) << ',' << py(pt.y) << ' ';
    out << "\"/>\n";
  }

  for (const TrafficLight& l : s.lights) {
    out << "<circle cx=\"" << px(l.stop_point.x) << "\" cy=\"" << py(l.stop_point.y)
        << "\" r=\"4\" fill=\"#30a030\"/>\n";
  }

  for (const Track& t : s.tracks) {
    const bool highlighted =
        std::find(highlight_ids.begin(), highlight_ids.end(), t.meta.id) != highlight_ids.end();
    const char* color = highlighted ? "#d03030" : "#3060d0";

    out << "<polyline fill=\"none\" stroke=\"" << color
        << "\" stroke-width=\"1\" stroke-opacity=\"0.7\" points=\"";
    for (size_t i = 0; i < t.states.size(); ++i) {
      if (t.valid[i]) out << px(t.states[i].x) << ',' << py(t.states[i].y) << ' ';
    }
    out << "\"/>\n";

    // Boxes every few steps, fading in toward the end.
    const int stride = std::max(1, s.step_count() / 6);
    for (int i = 0; i < s.step_count(); i += stride) {
      if (!t.valid[i]) continue;
      const AgentState& st = t.states[i];
      const double opacity = 0.15 + 0.85 * i / std::max(1, s.step_count() - 1);
      out << "<rect x=\"" << -0.5 * t.meta.length * scale << "\" y=\""
          << -0.5 * t.meta.width * scale << "\" width=\"" << t.meta.length * scale
          << "\" height=\"" << t.meta.width * scale << "\" fill=\"" << color
          << "\" fill-opacity=\"" << opacity << "\" transform=\"translate(" << px(st.x) << ' '
          << py(st.y) << ") rotate(" << -st.theta * 180.0 / 3.14159265358979 << ")\"/>\n";
    }
  }
  out << "</svg>\n";
  return out.str();
}

void save_scenario_svg(const Scenario& s, const std::string& path,
                       const std::vector<int>& highlight_ids) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_scenario_svg: cannot open " + path);
  f << scenario_svg(s, highlight_ids);
}

}  // namespace kinesim
