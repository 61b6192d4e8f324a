#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "kinesim/model.hpp"
#include "kinesim/scene.hpp"
#include "kinesim/tokenizer.hpp"

namespace kinesim {

struct RolloutConfig {
  int horizon = 16;  // future steps to simulate
  SamplerSpec sampler;
  std::vector<int> controlled_ids;  // agents driven by the model
  std::vector<int> replayed_ids;    // declared log-replayed agents (optional;
                                    // any agent not controlled replays its log)
  uint64_t seed = 0;
  int samples = 1;  // K for batch_rollouts
  SceneInputOptions input_opts;

  void validate(const Scenario& scenario) const;  // throws on violations
};

/// Result of one closed-loop run: the world with controlled agents' future
/// states replaced by generated ones, plus the chosen token per controlled
/// agent per simulated step. Controlled transitions satisfy
/// state[t+1] == ctra_step(state[t], dequantize(token[t]), dt) bit-exactly.
struct SimulatedScenario {
  Scenario world;
  std::vector<int> controlled_ids;
  std::map<int, std::vector<ActionToken>> tokens;  // per controlled agent
  int horizon = 0;
};

/// One synchronized world update: all controlled agents advance via the
/// kinematic transition simultaneously (decisions at t never see another
/// agent's t+1 state), replayed agents take their logged state, the map stays
/// fixed and lights advance per log. `world` holds per-agent current states
/// indexed like scenario.tracks.
std::vector<AgentState> step_world(const Scenario& scenario,
                                   std::span<const AgentState> current,
                                   const std::map<int, ActionToken>& controlled_tokens,
                                   int t_next);

/// Reactive closed-loop simulation: every future step rebuilds each controlled
/// agent's agent-centric view of the current world (full temporal context
/// re-encoded), runs the model, samples one token per agent, then advances the
/// world once. Deterministic per seed.
SimulatedScenario closed_loop(const Scenario& scenario, const ModelParams& params,
                              const RolloutConfig& config);

/// K independent rollouts; run k uses seed mix(seed, k), so K=1 reproduces
/// closed_loop exactly.
std::vector<SimulatedScenario> batch_rollouts(const Scenario& scenario,
                                              const ModelParams& params,
                                              const RolloutConfig& config);

/// Tokenizes the logged history transitions of an agent (the prev-token
/// context the model expects at inference).
std::vector<ActionToken> history_tokens(const Scenario& scenario, int agent_id,
                                        const TokenizerOptions& opts = {});

}  // namespace kinesim
