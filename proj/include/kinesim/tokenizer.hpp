#pragma once

#include <span>
#include <vector>

#include "kinesim/action_codec.hpp"
#include "kinesim/kinematics.hpp"

namespace kinesim {

/// Tuning for the rolling-horizon inversion. The weights make heading and
/// speed errors commensurate with position errors in meters at urban scale.
struct TokenizerOptions {
  int window = 3;             // rolling window length k
  double weight_theta = 2.0;  // m/rad
  double weight_v = 0.5;      // m*s/m
  double fd_step = 1e-5;      // central-difference step for Jacobians
  double lambda0 = 1e-3;      // initial Levenberg damping
  int max_iters = 50;
  double tol = 1e-10;  // relative cost-decrease stopping threshold
};

/// Result of inverting one logged track into discrete actions.
/// ctl_states[t+1] == ctra_step(ctl_states[t], dequantize(tokens[t]), dt)
/// bit-exactly: the propagated chain is built from the committed quantized
/// actions, never from the raw log, so quantization error is compensated
/// instead of accumulated.
struct TokenizedTrack {
  std::vector<ActionToken> tokens;      // length T
  std::vector<AgentState> ctl_states;   // length T+1; [0] is the logged start
  std::vector<double> residuals;        // per-step weighted cost, length T
};

/// Per-iteration cost trace of one window solve, for inspection in tests.
struct SolveDiagnostics {
  std::vector<double> accepted_costs;  // cost after each accepted step
  int iterations = 0;
};

/// Finite-difference warm start from two consecutive logged states.
ControlAction init_estimate(const AgentState& s0, const AgentState& s1, double dt);

/// Weighted squared tracking cost of a candidate action window. The control
/// states chain from s_init via ctra_step. Entries of `target_valid` that are
/// false are skipped in the sum; pass an empty span to treat all targets as
/// valid.
double window_cost(const AgentState& s_init, std::span<const ControlAction> u_seq,
                   std::span<const AgentState> targets,
                   std::span<const bool> target_valid, double dt,
                   const TokenizerOptions& opts);

/// Minimizes window_cost over the continuous action window with damped
/// Gauss-Newton (numerical Jacobians, Levenberg damping, box projection onto
/// the codec ranges). Non-convergence is not an error: the best iterate is
/// returned. Throws if the cost turns non-finite.
std::vector<ControlAction> solve_window(const AgentState& s_init,
                                        std::span<const AgentState> targets,
                                        std::span<const bool> target_valid,
                                        std::span<const ControlAction> u_init,
                                        double dt, const TokenizerOptions& opts,
                                        SolveDiagnostics* diag = nullptr);

/// Nearest codebook token to a continuous action, measured in range-normalized
/// coordinates. Ties break toward the lower index.
ActionToken nearest_token(const ControlAction& u);

/// Inverts a logged trajectory into its discrete action sequence by rolling
/// the solve window forward one step at a time, committing only the first
/// action of each window and propagating the state it produces. `valid` marks
/// observed states; pass empty for all-valid. Requires at least two states.
TokenizedTrack tokenize_track(std::span<const AgentState> states,
                              std::span<const bool> valid, double dt,
                              const TokenizerOptions& opts = {});

}  // namespace kinesim
