#include "kinesim/scene_io.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <system_error>

namespace kinesim {

namespace {

struct ParseCtx {
  std::string name;
  int line = 0;

  [[noreturn]] void fail(const std::string& msg) const {
    throw std::runtime_error(name + ":" + std::to_string(line) + ": " + msg);
  }
};

double parse_double(const ParseCtx& ctx, std::string_view s) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    ctx.fail("bad float '" + std::string(s) + "'");
  }
  return v;
}

int parse_int(const ParseCtx& ctx, std::string_view s) {
  int v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    ctx.fail("bad integer '" + std::string(s) + "'");
  }
  return v;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  size_t start = 0;
  while (start <= s.size()) {
    const size_t pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      break;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

// key=value fields after the record tag; order is fixed per record type.
std::string_view expect_field(const ParseCtx& ctx, std::string_view tok,
                              std::string_view key) {
  if (tok.size() < key.size() + 1 || tok.substr(0, key.size()) != key ||
      tok[key.size()] != '=') {
    ctx.fail("expected field '" + std::string(key) + "=', got '" + std::string(tok) + "'");
  }
  return tok.substr(key.size() + 1);
}

}  // namespace

std::string format_double(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string serialize_scenario(const Scenario& s) {
  std::ostringstream out;
  out << "scenario dt=" << format_double(s.dt) << " history=" << s.history_len
      << " future=" << s.future_len << "\n";
  for (const MapPolyline& p : s.polylines) {
    out << "polyline kind=" << to_string(p.kind) << " points=";
    for (size_t i = 0; i < p.points.size(); ++i) {
      if (i != 0) out << ';';
      out << format_double(p.points[i].x) << ',' << format_double(p.points[i].y);
    }
    out << "\n";
  }
  for (const TrafficLight& l : s.lights) {
    out << "light stop=" << format_double(l.stop_point.x) << ','
        << format_double(l.stop_point.y) << " states=";
    for (LightState st : l.states) out << to_char(st);
    out << "\n";
  }
  for (const Track& t : s.tracks) {
    out << "track id=" << t.meta.id << " kind=" << to_string(t.meta.kind)
        << " length=" << format_double(t.meta.length)
        << " width=" << format_double(t.meta.width) << " states=";
    for (size_t i = 0; i < t.states.size(); ++i) {
      if (i != 0) out << ';';
      const AgentState& st = t.states[i];
      out << format_double(st.x) << ',' << format_double(st.y) << ','
          << format_double(st.theta) << ',' << format_double(st.v) << ','
          << (t.valid[i] ? '1' : '0');
    }
    if (!t.gt_tokens.empty()) {
      out << " tokens=";
      for (size_t i = 0; i < t.gt_tokens.size(); ++i) {
        if (i != 0) out << ',';
        out << t.gt_tokens[i];
      }
    }
    out << "\n";
  }
  out << "end\n";
  return out.str();
}

void save_scenario(const Scenario& s, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_scenario: cannot open " + path);
  f << serialize_scenario(s);
  if (!f) throw std::runtime_error("save_scenario: write failed for " + path);
}

Scenario parse_scenario(std::istream& in, const std::string& name) {
  ParseCtx ctx{name, 0};
  Scenario s;
  bool have_header = false;
  bool have_end = false;
  std::string line;
  while (std::getline(in, line)) {
    ++ctx.line;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    std::vector<std::string> toks;
    std::string tok;
    while (ls >> tok) toks.push_back(tok);

    if (tag == "scenario") {
      if (have_header) ctx.fail("duplicate scenario header");
      if (toks.size() != 3) ctx.fail("scenario header needs dt, history, future");
      s.dt = parse_double(ctx, expect_field(ctx, toks[0], "dt"));
      s.history_len = parse_int(ctx, expect_field(ctx, toks[1], "history"));
      s.future_len = parse_int(ctx, expect_field(ctx, toks[2], "future"));
      have_header = true;
    } else if (tag == "polyline") {
      if (!have_header) ctx.fail("polyline before scenario header");
      if (toks.size() != 2) ctx.fail("polyline needs kind and points");
      MapPolyline p;
      try {
        p.kind = polyline_kind_from_string(std::string(expect_field(ctx, toks[0], "kind")));
      } catch (const std::runtime_error& e) {
        ctx.fail(e.what());
      }
      for (std::string_view pt : split(expect_field(ctx, toks[1], "points"), ';')) {
        const auto xy = split(pt, ',');
        if (xy.size() != 2) ctx.fail("bad point '" + std::string(pt) + "'");
        p.points.push_back(Point2{parse_double(ctx, xy[0]), parse_double(ctx, xy[1])});
      }
      if (p.points.size() < 2) ctx.fail("polyline needs at least 2 points");
      s.polylines.push_back(std::move(p));
    } else if (tag == "light") {
      if (!have_header) ctx.fail("light before scenario header");
      if (toks.size() != 2) ctx.fail("light needs stop and states");
      TrafficLight l;
      const auto xy = split(expect_field(ctx, toks[0], "stop"), ',');
      if (xy.size() != 2) ctx.fail("bad stop point");
      l.stop_point = Point2{parse_double(ctx, xy[0]), parse_double(ctx, xy[1])};
      for (char c : expect_field(ctx, toks[1], "states")) {
        try {
          l.states.push_back(light_state_from_char(c));
        } catch (const std::runtime_error& e) {
          ctx.fail(e.what());
        }
      }
      s.lights.push_back(std::move(l));
    } else if (tag == "track") {
      if (!have_header) ctx.fail("track before scenario header");
      if (toks.size() != 5 && toks.size() != 6) {
        ctx.fail("track needs id, kind, length, width, states [, tokens]");
      }
      Track t;
      t.meta.id = parse_int(ctx, expect_field(ctx, toks[0], "id"));
      try {
        t.meta.kind = agent_kind_from_string(std::string(expect_field(ctx, toks[1], "kind")));
      } catch (const std::runtime_error& e) {
        ctx.fail(e.what());
      }
      t.meta.length = parse_double(ctx, expect_field(ctx, toks[2], "length"));
      t.meta.width = parse_double(ctx, expect_field(ctx, toks[3], "width"));
      for (std::string_view st : split(expect_field(ctx, toks[4], "states"), ';')) {
        const auto f = split(st, ',');
        if (f.size() != 5) ctx.fail("bad state '" + std::string(st) + "'");
        t.states.push_back(AgentState{parse_double(ctx, f[0]), parse_double(ctx, f[1]),
                                      parse_double(ctx, f[2]), parse_double(ctx, f[3])});
        if (f[4] != "0" && f[4] != "1") ctx.fail("valid flag must be 0 or 1");
        t.valid.push_back(f[4] == "1");
      }
      if (toks.size() == 6) {
        for (std::string_view tk : split(expect_field(ctx, toks[5], "tokens"), ',')) {
          t.gt_tokens.push_back(parse_int(ctx, tk));
        }
      }
      s.tracks.push_back(std::move(t));
    } else if (tag == "end") {
      have_end = true;
      break;
    } else {
      ctx.fail("unknown record tag '" + tag + "'");
    }
  }
  if (!have_header) ctx.fail("missing scenario header");
  if (!have_end) ctx.fail("truncated file: missing end record");
  try {
    s.validate();
  } catch (const std::runtime_error& e) {
    ctx.fail(e.what());
  }
  return s;
}

Scenario load_scenario(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_scenario: cannot open " + path);
  return parse_scenario(f, path);
}

}  // namespace kinesim
