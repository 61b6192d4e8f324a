#include "kinesim/preference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "kinesim/metrics.hpp"
#include "kinesim/rng.hpp"

namespace kinesim {

DriverProfile profile_from_string(const std::string& s) {
  if (s == "safety") return DriverProfile::safety;
  if (s == "fast") return DriverProfile::fast;
  if (s == "comfort") return DriverProfile::comfort;
  throw std::invalid_argument("unknown driver profile '" + s + "'");
}

const char* to_string(DriverProfile p) {
  switch (p) {
    case DriverProfile::safety: return "safety";
    case DriverProfile::fast: return "fast";
    case DriverProfile::comfort: return "comfort";
  }
  return "safety";
}

std::vector<PreferencePair> build_pairs(std::span<const SimulatedScenario> rollouts,
                                        DriverProfile profile, const Scenario& log,
                                        int scenario_index) {
  std::vector<PreferencePair> out;
  if (rollouts.empty()) return out;

  for (int ego : rollouts.front().controlled_ids) {
    // Classify the rollouts for this ego.
    struct Entry {
      size_t index;
      int first_collision;  // -1 = clean
      double mean_speed;
      double max_jerk;
    };
    std::vector<Entry> clean, colliding;
    for (size_t k = 0; k < rollouts.size(); ++k) {
      const SimulatedScenario& sim = rollouts[k];
      const auto tok_it = sim.tokens.find(ego);
      if (tok_it == sim.tokens.end() || tok_it->second.size() < 2) continue;
      Entry e;
      e.index = k;
      e.first_collision = first_collision_step(sim.world, ego);
      const Track* track = sim.world.find_track(ego);
      const KinStats st = kinematic_stats(track->states[sim.world.current_index()].v,
                                          tok_it->second, sim.world.dt);
      e.mean_speed = st.mean_speed;
      e.max_jerk = st.max_abs_jerk;
      if (e.first_collision < 0) {
        clean.push_back(e);
      } else {
        colliding.push_back(e);
      }
    }
    if (clean.empty() || colliding.empty()) continue;  // no pair for this scene

    // Loser: the earliest-colliding rollout (lowest index on ties).
    const Entry* loser = &colliding.front();
    for (const Entry& e : colliding) {
      if (e.first_collision < loser->first_collision) loser = &e;
    }

    const Entry* winner = &clean.front();
    switch (profile) {
      case DriverProfile::safety:
        break;  // any non-collision rollout; the first is the deterministic pick
      case DriverProfile::fast:
        for (const Entry& e : clean) {
          if (e.mean_speed > winner->mean_speed) winner = &e;
        }
        break;
      case DriverProfile::comfort:
        for (const Entry& e : clean) {
          if (e.max_jerk < winner->max_jerk) winner = &e;
        }
        break;
    }

    PreferencePair pair;
    pair.scenario = &log;
    pair.scenario_index = scenario_index;
    pair.agent_id = ego;
    pair.winner = rollouts[winner->index].tokens.at(ego);
    pair.loser = rollouts[loser->index].tokens.at(ego);
    if (pair.winner == pair.loser) continue;  // degenerate; cannot happen with disjoint classes
    out.push_back(std::move(pair));
  }
  return out;
}

namespace {

// Rebuilds the scenario with the target's future replaced by the kinematic
// chain of y, then the step-input sequence conditioned on it.
std::vector<SceneStepInput> conditioned_inputs(const Scenario& scenario, int agent_id,
                                               std::span<const ActionToken> y,
                                               const SceneInputOptions& opts) {
  const int cur = scenario.current_index();
  if (static_cast<int>(y.size()) > scenario.future_len) {
    throw std::invalid_argument("seq_logprob: sequence longer than the scenario future");
  }
  Scenario world = scenario;
  Track* track = nullptr;
  for (Track& t : world.tracks) {
    if (t.meta.id == agent_id) track = &t;
  }
  if (track == nullptr) throw std::invalid_argument("seq_logprob: unknown agent id");

  AgentState s = track->states[cur];
  for (size_t t = 0; t < y.size(); ++t) {
    s = ctra_step(s, dequantize(y[t]), world.dt);
    track->states[cur + 1 + t] = s;
    track->valid[cur + 1 + t] = true;
  }

  std::vector<int> prev;
  for (const ActionToken& t : history_tokens(scenario, agent_id)) prev.push_back(t.flat());
  for (const ActionToken& t : y) prev.push_back(t.flat());

  const int T = cur + static_cast<int>(y.size());
  std::vector<SceneStepInput> inputs;
  inputs.reserve(T);
  for (int t = 0; t < T; ++t) {
    const int pt = t > 0 ? prev[t - 1] : -1;
    inputs.push_back(build_step_input(world, agent_id, t, pt, opts));
  }
  return inputs;
}

double logprob_from_logits(const std::vector<double>& logits, int vocab, int cur,
                           std::span<const ActionToken> y) {
  double lp = 0.0;
  for (size_t t = 0; t < y.size(); ++t) {
    const double* lt = logits.data() + (static_cast<size_t>(cur + t)) * vocab;
    double mx = lt[0];
    for (int c = 1; c < vocab; ++c) mx = std::max(mx, lt[c]);
    double denom = 0.0;
    for (int c = 0; c < vocab; ++c) denom += std::exp(lt[c] - mx);
    lp += lt[y[t].flat()] - mx - std::log(denom);
  }
  return lp;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

double seq_logprob(const ModelParams& params, const Scenario& scenario, int agent_id,
                   std::span<const ActionToken> y, const SceneInputOptions& opts) {
  if (y.empty()) return 0.0;
  const auto inputs = conditioned_inputs(scenario, agent_id, y, opts);
  const std::vector<double> logits = forward_logits(params, inputs);
  return logprob_from_logits(logits, params.cfg.vocab, scenario.current_index(), y);
}

double dpo_loss_from_logprobs(double lp_w_theta, double lp_l_theta, double lp_w_ref,
                              double lp_l_ref, double beta) {
  const double margin = beta * ((lp_w_theta - lp_w_ref) - (lp_l_theta - lp_l_ref));
  // -log sigma(m) in a numerically stable form
  return margin >= 0.0 ? std::log1p(std::exp(-margin))
                       : -margin + std::log1p(std::exp(margin));
}

double dpo_loss(const ModelParams& theta, const ModelParams& ref,
                std::span<const PreferencePair> pairs, double beta) {
  if (!(beta > 0.0)) throw std::invalid_argument("dpo_loss: beta must be positive");
  if (pairs.empty()) throw std::invalid_argument("dpo_loss: no pairs");
  double loss = 0.0;
  for (const PreferencePair& pair : pairs) {
    const double lpw_t = seq_logprob(theta, *pair.scenario, pair.agent_id, pair.winner);
    const double lpl_t = seq_logprob(theta, *pair.scenario, pair.agent_id, pair.loser);
    const double lpw_r = seq_logprob(ref, *pair.scenario, pair.agent_id, pair.winner);
    const double lpl_r = seq_logprob(ref, *pair.scenario, pair.agent_id, pair.loser);
    loss += dpo_loss_from_logprobs(lpw_t, lpl_t, lpw_r, lpl_r, beta);
  }
  return loss / static_cast<double>(pairs.size());
}

DpoResult dpo_finetune(ModelParams& params, std::span<const PreferencePair> pairs,
                       const DpoConfig& cfg) {
  if (pairs.empty()) throw std::invalid_argument("dpo_finetune: no pairs");
  if (!(cfg.beta > 0.0)) throw std::invalid_argument("dpo_finetune: beta must be positive");
  const ModelParams ref = params;  // frozen reference

  // Reference log-probabilities are fixed; compute them once.
  struct PairCtx {
    std::vector<SceneStepInput> winner_inputs, loser_inputs;
    double lpw_ref, lpl_ref;
  };
  std::vector<PairCtx> ctx(pairs.size());
  for (size_t i = 0; i < pairs.size(); ++i) {
    const PreferencePair& pair = pairs[i];
    ctx[i].winner_inputs =
        conditioned_inputs(*pair.scenario, pair.agent_id, pair.winner, SceneInputOptions{});
    ctx[i].loser_inputs =
        conditioned_inputs(*pair.scenario, pair.agent_id, pair.loser, SceneInputOptions{});
    const int cur = pair.scenario->current_index();
    ctx[i].lpw_ref = logprob_from_logits(forward_logits(ref, ctx[i].winner_inputs),
                                         ref.cfg.vocab, cur, pair.winner);
    ctx[i].lpl_ref = logprob_from_logits(forward_logits(ref, ctx[i].loser_inputs),
                                         ref.cfg.vocab, cur, pair.loser);
  }

  // Adam state.
  std::vector<std::vector<double>> m, v;
  for_each_tensor(params, [&](const std::string&, const Tensor& t) {
    m.emplace_back(t.size(), 0.0);
    v.emplace_back(t.size(), 0.0);
  });

  DpoResult result;
  ModelGrads grads;
  int step = 0;

  auto pair_logprobs = [&](size_t i) {
    const PreferencePair& pair = pairs[i];
    const int cur = pair.scenario->current_index();
    const double lpw = logprob_from_logits(forward_logits(params, ctx[i].winner_inputs),
                                           params.cfg.vocab, cur, pair.winner);
    const double lpl = logprob_from_logits(forward_logits(params, ctx[i].loser_inputs),
                                           params.cfg.vocab, cur, pair.loser);
    return std::pair<double, double>(lpw, lpl);
  };

  auto mean_loss = [&] {
    double loss = 0.0;
    for (size_t i = 0; i < pairs.size(); ++i) {
      const auto [lpw, lpl] = pair_logprobs(i);
      loss += dpo_loss_from_logprobs(lpw, lpl, ctx[i].lpw_ref, ctx[i].lpl_ref, cfg.beta);
    }
    return loss / static_cast<double>(pairs.size());
  };
  result.initial_loss = mean_loss();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng epoch_rng(Rng::mix(cfg.seed, 0xd90 + epoch));
    std::vector<size_t> order(pairs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    epoch_rng.shuffle(order);

    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      grads.init_like(params);
      double batch_loss = 0.0;
      for (size_t oi = start; oi < end; ++oi) {
        const size_t i = order[oi];
        const PreferencePair& pair = pairs[i];
        const int cur = pair.scenario->current_index();
        const auto [lpw, lpl] = pair_logprobs(i);
        const double margin =
            cfg.beta * ((lpw - ctx[i].lpw_ref) - (lpl - ctx[i].lpl_ref));
        batch_loss += dpo_loss_from_logprobs(lpw, lpl, ctx[i].lpw_ref, ctx[i].lpl_ref, cfg.beta);
        // dL/d lp_w = -beta * sigma(-m); dL/d lp_l = +beta * sigma(-m)
        const double coeff = cfg.beta * sigmoid(-margin) / static_cast<double>(end - start);

        auto make_grad_fn = [&](std::span<const ActionToken> y, double sign) {
          return [&, y, sign](const std::vector<double>& logits,
                              std::vector<double>& dlogits) {
            const int vocab = params.cfg.vocab;
            for (size_t t = 0; t < y.size(); ++t) {
              const double* lt = logits.data() + (static_cast<size_t>(cur + t)) * vocab;
              double* dt = dlogits.data() + (static_cast<size_t>(cur + t)) * vocab;
              double mx = lt[0];
              for (int c = 1; c < vocab; ++c) mx = std::max(mx, lt[c]);
              double denom = 0.0;
              for (int c = 0; c < vocab; ++c) denom += std::exp(lt[c] - mx);
              const double inv = 1.0 / denom;
              // d lp / d logit_c = 1[c == y_t] - p_c, scaled by sign * coeff
              for (int c = 0; c < vocab; ++c) {
                dt[c] = -sign * coeff * std::exp(lt[c] - mx) * inv;
              }
              dt[y[t].flat()] += sign * coeff;
            }
          };
        };
        // Winner: gradient descends -lp_w, i.e. dL/dlogits uses sign -1 times
        // the (onehot - p) direction; loser the opposite.
        forward_backward_logits(params, ctx[i].winner_inputs, make_grad_fn(pair.winner, -1.0),
                                grads);
        forward_backward_logits(params, ctx[i].loser_inputs, make_grad_fn(pair.loser, +1.0),
                                grads);
      }
      if (!std::isfinite(batch_loss)) {
        throw std::runtime_error("dpo_finetune: loss diverged at step " + std::to_string(step));
      }

      const double bc1 = 1.0 - std::pow(cfg.adam_beta1, step + 1);
      const double bc2 = 1.0 - std::pow(cfg.adam_beta2, step + 1);
      size_t slot = 0;
      for_each_tensor(params, [&](const std::string&, Tensor& t) {
        auto& tm = m[slot];
        auto& tv = v[slot];
        const auto& tg = grads.g[slot];
        for (size_t j = 0; j < tg.size(); ++j) {
          tm[j] = cfg.adam_beta1 * tm[j] + (1.0 - cfg.adam_beta1) * tg[j];
          tv[j] = cfg.adam_beta2 * tv[j] + (1.0 - cfg.adam_beta2) * tg[j] * tg[j];
          t.v[j] -= cfg.lr * (tm[j] / bc1) / (std::sqrt(tv[j] / bc2) + cfg.adam_eps);
        }
        ++slot;
      });
      ++step;
    }
  }

  result.final_loss = mean_loss();
  double margin_sum = 0.0;
  for (size_t i = 0; i < pairs.size(); ++i) {
    const auto [lpw, lpl] = pair_logprobs(i);
    margin_sum += (lpw - ctx[i].lpw_ref) - (lpl - ctx[i].lpl_ref);
  }
  result.mean_margin = margin_sum / static_cast<double>(pairs.size());
  result.steps = step;
  return result;
}

}  // namespace kinesim
