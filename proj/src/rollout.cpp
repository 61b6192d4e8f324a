#include "kinesim/rollout.hpp"

#include <algorithm>
#include <memory>
#include <stdexcept>

#include "kinesim/rng.hpp"

namespace kinesim {

void RolloutConfig::validate(const Scenario& scenario) const {
  if (horizon < 0) throw std::invalid_argument("rollout: horizon must be >= 0");
  if (samples < 1) throw std::invalid_argument("rollout: samples must be >= 1");
  for (int id : controlled_ids) {
    for (int rid : replayed_ids) {
      if (id == rid) {
        throw std::invalid_argument("rollout: agent " + std::to_string(id) +
                                    " is both controlled and replayed");
      }
    }
    const Track* t = scenario.find_track(id);
    if (t == nullptr) throw std::invalid_argument("rollout: unknown agent id " + std::to_string(id));
    if (!t->valid[scenario.current_index()]) {
      throw std::invalid_argument("rollout: controlled agent " + std::to_string(id) +
                                  " invalid at the current step");
    }
  }
  if (horizon > scenario.future_len) {
    // Replayed agents need logged states over the whole horizon.
    throw std::invalid_argument("rollout: horizon exceeds the logged future");
  }
  for (int id : replayed_ids) {
    const Track* t = scenario.find_track(id);
    if (t == nullptr) throw std::invalid_argument("rollout: unknown agent id " + std::to_string(id));
    for (int s = scenario.current_index(); s <= scenario.current_index() + horizon; ++s) {
      if (!t->valid[s]) {
        throw std::invalid_argument("rollout: missing replay state for agent " +
                                    std::to_string(id) + " at step " + std::to_string(s));
      }
    }
  }
}

std::vector<AgentState> step_world(const Scenario& scenario,
                                   std::span<const AgentState> current,
                                   const std::map<int, ActionToken>& controlled_tokens,
                                   int t_next) {
  if (t_next < 0 || t_next >= scenario.step_count()) {
    throw std::invalid_argument("step_world: step out of range");
  }
  std::vector<AgentState> next(current.begin(), current.end());
  for (size_t i = 0; i < scenario.tracks.size(); ++i) {
    const Track& track = scenario.tracks[i];
    const auto it = controlled_tokens.find(track.meta.id);
    if (it != controlled_tokens.end()) {
      next[i] = ctra_step(current[i], dequantize(it->second), scenario.dt);
    } else {
      // Log replay; presence is governed by the scenario's validity mask.
      next[i] = track.states[t_next];
    }
  }
  return next;
}

namespace {

// World view used while simulating: a copy of the scenario whose track states
// up to `filled` steps are the simulated ones.
struct SimWorld {
  Scenario world;
  std::vector<AgentState> current;
  int t_index;  // scenario step index of `current`
};

}  // namespace

std::vector<ActionToken> history_tokens(const Scenario& scenario, int agent_id,
                                        const TokenizerOptions& opts) {
  const Track* track = scenario.find_track(agent_id);
  if (track == nullptr) throw std::invalid_argument("history_tokens: unknown agent id");
  const int n = scenario.current_index() + 1;
  if (n < 2) return {};
  std::vector<AgentState> states(track->states.begin(), track->states.begin() + n);
  std::unique_ptr<bool[]> valid(new bool[n]);
  for (int i = 0; i < n; ++i) valid[i] = track->valid[i];
  const TokenizedTrack tt =
      tokenize_track(states, std::span<const bool>(valid.get(), n), scenario.dt, opts);
  return tt.tokens;
}

SimulatedScenario closed_loop(const Scenario& scenario, const ModelParams& params,
                              const RolloutConfig& config) {
  scenario.validate();
  config.validate(scenario);
  Rng rng(config.seed);

  SimulatedScenario sim;
  sim.world = scenario;
  sim.controlled_ids = config.controlled_ids;
  sim.horizon = config.horizon;
  std::sort(sim.controlled_ids.begin(), sim.controlled_ids.end());
  if (config.horizon == 0 || sim.controlled_ids.empty()) return sim;

  const int cur = scenario.current_index();

  // Prev-token context for each controlled agent's history transitions.
  std::map<int, std::vector<int>> prev_tokens;  // flat indices, one per input step
  for (int id : sim.controlled_ids) {
    std::vector<int> flats;
    for (const ActionToken& t : history_tokens(scenario, id)) flats.push_back(t.flat());
    prev_tokens[id] = std::move(flats);
    sim.tokens[id] = {};
  }

  for (int step = 0; step < config.horizon; ++step) {
    const int t_now = cur + step;
    // All decisions read the same world snapshot (sim.world states filled
    // through t_now).
    std::map<int, ActionToken> decisions;
    for (int id : sim.controlled_ids) {
      const std::vector<int>& hist = prev_tokens[id];
      std::vector<SceneStepInput> inputs;
      inputs.reserve(t_now + 1);
      for (int t = 0; t <= t_now; ++t) {
        const int prev = t > 0 && t - 1 < static_cast<int>(hist.size()) ? hist[t - 1] : -1;
        inputs.push_back(build_step_input(sim.world, id, t, prev, config.input_opts));
      }
      const auto dists = forward(params, inputs);
      decisions[id] = sample_action(dists.back(), config.sampler, rng);
    }

    std::vector<AgentState> current(sim.world.tracks.size());
    for (size_t i = 0; i < sim.world.tracks.size(); ++i) {
      current[i] = sim.world.tracks[i].states[t_now];
    }
    const std::vector<AgentState> next = step_world(sim.world, current, decisions, t_now + 1);

    for (size_t i = 0; i < sim.world.tracks.size(); ++i) {
      Track& track = sim.world.tracks[i];
      const auto it = decisions.find(track.meta.id);
      if (it != decisions.end()) {
        track.states[t_now + 1] = next[i];
        track.valid[t_now + 1] = true;
      }
    }
    for (int id : sim.controlled_ids) {
      sim.tokens[id].push_back(decisions[id]);
      prev_tokens[id].push_back(decisions[id].flat());
    }
  }
  return sim;
}

std::vector<SimulatedScenario> batch_rollouts(const Scenario& scenario,
                                              const ModelParams& params,
                                              const RolloutConfig& config) {
  std::vector<SimulatedScenario> out;
  out.reserve(config.samples);
  for (int k = 0; k < config.samples; ++k) {
    RolloutConfig one = config;
    one.samples = 1;
    one.seed = Rng::mix(config.seed, static_cast<uint64_t>(k));
    out.push_back(closed_loop(scenario, params, one));
  }
  return out;
}

}  // namespace kinesim
