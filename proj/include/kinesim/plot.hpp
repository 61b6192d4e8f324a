#pragma once

#include <string>

#include "kinesim/rollout.hpp"
#include "kinesim/scene.hpp"

namespace kinesim {

/// Static top-down SVG of a scene: map polylines, per-agent trajectories and
/// bounding boxes at a few timesteps. Highlighted ids are drawn in red.
std::string scenario_svg(const Scenario& s, const std::vector<int>& highlight_ids = {});

void save_scenario_svg(const Scenario& s, const std::string& path,
                       const std::vector<int>& highlight_ids = {});

}  // namespace kinesim
