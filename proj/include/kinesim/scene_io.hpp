#pragma once

#include <iosfwd>
#include <string>

#include "kinesim/scene.hpp"

namespace kinesim {

/// Serializes a double as the shortest decimal string that parses back to the
/// identical bit pattern, so save/load round trips are exact.
std::string format_double(double v);

std::string serialize_scenario(const Scenario& s);
void save_scenario(const Scenario& s, const std::string& path);

/// Parses the line-record scenario format. Errors carry the offending
/// file/line, e.g. "scene.txt:7: track 3 has 12 states, expected 19".
Scenario parse_scenario(std::istream& in, const std::string& name);
Scenario load_scenario(const std::string& path);

}  // namespace kinesim
