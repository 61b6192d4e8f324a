#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "kinesim/model.hpp"
#include "kinesim/rollout.hpp"
#include "kinesim/scene.hpp"

namespace kinesim {

enum class DriverProfile : uint8_t { safety = 0, fast = 1, comfort = 2 };

DriverProfile profile_from_string(const std::string& s);
const char* to_string(DriverProfile p);

/// One winner/loser pair: the scene context plus two physically feasible
/// candidate futures for the target agent.
struct PreferencePair {
  const Scenario* scenario = nullptr;
  int scenario_index = -1;  // index into the owning scene set, for file records
  int agent_id = 0;
  std::vector<ActionToken> winner;
  std::vector<ActionToken> loser;
};

/// Selects pairs from K sampled rollouts of one scene per the profile rule:
/// safety takes any non-collision rollout as winner; fast takes the fastest
/// (highest mean ego speed) non-collision one; comfort the lowest max-jerk
/// non-collision one. The loser is always the earliest-colliding rollout.
/// Scenes lacking either class yield no pair.
std::vector<PreferencePair> build_pairs(std::span<const SimulatedScenario> rollouts,
                                        DriverProfile profile, const Scenario& log,
                                        int scenario_index = -1);

/// Log-probability of the token sequence under the model with rollout-style
/// conditioning: the target's states are reconstructed from y itself via the
/// kinematic chain, other agents replay the log.
double seq_logprob(const ModelParams& params, const Scenario& scenario, int agent_id,
                   std::span<const ActionToken> y,
                   const SceneInputOptions& opts = {});

/// -log sigmoid(beta * ((logpi_w - logref_w) - (logpi_l - logref_l))), averaged
/// over pairs. Equals ln 2 at theta == ref.
double dpo_loss(const ModelParams& theta, const ModelParams& ref,
                std::span<const PreferencePair> pairs, double beta);

/// Closed-form margin variant used by tests: loss for one pair given the four
/// sequence log-probabilities.
double dpo_loss_from_logprobs(double lp_w_theta, double lp_l_theta, double lp_w_ref,
                              double lp_l_ref, double beta);

struct DpoConfig {
  double beta = 1.0;
  double lr = 1e-5;
  int epochs = 4;
  int batch_size = 8;
  uint64_t seed = 1;
  int workers = 1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct DpoResult {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  double mean_margin = 0.0;  // mean (delta_w - delta_l) over pairs after tuning
  int steps = 0;
};

/// Preference fine-tuning against a frozen copy of the input params.
/// Deterministic per seed; aborts if the loss turns non-finite.
DpoResult dpo_finetune(ModelParams& params, std::span<const PreferencePair> pairs,
                       const DpoConfig& cfg);

}  // namespace kinesim
