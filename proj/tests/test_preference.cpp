#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "kinesim/metrics.hpp"
#include "kinesim/preference.hpp"
#include "kinesim/rng.hpp"
#include "kinesim/rollout.hpp"
#include "kinesim/synthetic.hpp"

using namespace kinesim;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.max_seq_len = 32;
  return cfg;
}

Scenario simple_scene(int future_len = 8) {
  Scenario s;
  s.dt = 0.5;
  s.history_len = 2;
  s.future_len = future_len;
  Track ego;
  ego.meta = AgentMeta{0, AgentKind::vehicle, 4.0, 2.0};
  AgentState st{0, 0, 0, 3.0};
  for (int k = 0; k < s.step_count(); ++k) {
    ego.states.push_back(st);
    ego.valid.push_back(true);
    st = ctra_step(st, {0, 0}, s.dt);
  }
  s.tracks.push_back(ego);
  return s;
}

// Simulated rollout with a scripted ego trajectory; `wall_x` < 0 disables the
// obstacle, otherwise a parked car sits there and the ego plows into it.
SimulatedScenario scripted_rollout(const Scenario& base, const std::vector<int>& accel_offsets,
                                   double wall_x) {
  SimulatedScenario sim;
  sim.world = base;
  sim.controlled_ids = {0};
  sim.horizon = static_cast<int>(accel_offsets.size());

  if (wall_x > 0) {
    Track wall;
    wall.meta = AgentMeta{9, AgentKind::vehicle, 4.0, 2.0};
    for (int k = 0; k < base.step_count(); ++k) {
      wall.states.push_back(AgentState{wall_x, 0, 0, 0});
      wall.valid.push_back(true);
    }
    sim.world.tracks.push_back(wall);
  }

  Track& ego = sim.world.tracks[0];
  const int cur = base.current_index();
  std::vector<ActionToken> tokens;
  for (size_t k = 0; k < accel_offsets.size(); ++k) {
    const ActionToken t{31 + accel_offsets[k], 31};
    tokens.push_back(t);
    ego.states[cur + k + 1] = ctra_step(ego.states[cur + k], dequantize(t), base.dt);
  }
  sim.tokens[0] = tokens;
  return sim;
}

}  // namespace

TEST_CASE("build_pairs selection rules") {
  const Scenario base = simple_scene();
  const std::vector<int> coast(8, 0);
  const std::vector<int> slow(8, -4);
  const std::vector<int> fast{8, 8, 8, 8, 0, 0, 0, 0};
  const std::vector<int> jerky{8, -8, 8, -8, 8, -8, 8, -8};

  // all collision-free: no pairs
  std::vector<SimulatedScenario> all_clean{scripted_rollout(base, coast, -1),
                                           scripted_rollout(base, slow, -1)};
  CHECK(build_pairs(all_clean, DriverProfile::safety, base).empty());

  // one of each: exactly one pair, winner the clean one
  std::vector<SimulatedScenario> one_each{scripted_rollout(base, coast, 6.0),
                                          scripted_rollout(base, slow, 1e9)};
  // first rollout hits the wall at 6 m; second has no wall in reach
  auto pairs = build_pairs(one_each, DriverProfile::safety, base, 4);
  REQUIRE(pairs.size() == 1);
  CHECK(pairs[0].winner == one_each[1].tokens.at(0));
  CHECK(pairs[0].loser == one_each[0].tokens.at(0));
  CHECK(pairs[0].scenario_index == 4);
  CHECK(pairs[0].agent_id == 0);

  // fast profile: winner is the highest mean speed among the clean ones
  std::vector<SimulatedScenario> mix{
      scripted_rollout(base, slow, -1),    // clean, slow
      scripted_rollout(base, fast, -1),    // clean, fastest
      scripted_rollout(base, coast, -1),   // clean, middle
      scripted_rollout(base, coast, 6.0),  // collides
  };
  pairs = build_pairs(mix, DriverProfile::fast, base);
  REQUIRE(pairs.size() == 1);
  CHECK(pairs[0].winner == mix[1].tokens.at(0));

  // comfort profile: winner is the lowest max jerk among the clean ones
  std::vector<SimulatedScenario> comfy{
      scripted_rollout(base, jerky, -1),
      scripted_rollout(base, coast, -1),
      scripted_rollout(base, fast, 5.0),  // collides
  };
  pairs = build_pairs(comfy, DriverProfile::comfort, base);
  REQUIRE(pairs.size() == 1);
  CHECK(pairs[0].winner == comfy[1].tokens.at(0));

  // loser selection: earliest collision wins the loser slot
  std::vector<SimulatedScenario> losers{
      scripted_rollout(base, coast, -1),
      scripted_rollout(base, coast, 11.0),  // collides late
      scripted_rollout(base, fast, 5.0),    // collides early
  };
  pairs = build_pairs(losers, DriverProfile::safety, base);
  REQUIRE(pairs.size() == 1);
  CHECK(pairs[0].loser == losers[2].tokens.at(0));
}

TEST_CASE("seq_logprob under the uniform model") {
  const Scenario base = simple_scene(16);
  ModelParams p = init_params(tiny_config(), 5);  // zero head: uniform distribution

  std::vector<ActionToken> y(16, ActionToken{31, 31});
  const double lp = seq_logprob(p, base, 0, y);
  CHECK(lp == doctest::Approx(-16.0 * 8.2862695).epsilon(1e-6));
  CHECK(lp == doctest::Approx(-132.58).epsilon(1e-3));

  // monotonicity: appending a step strictly lowers the log-probability
  std::vector<ActionToken> y5(y.begin(), y.begin() + 5);
  std::vector<ActionToken> y4(y.begin(), y.begin() + 4);
  CHECK(seq_logprob(p, base, 0, y5) < seq_logprob(p, base, 0, y4));

  // near-one-hot model matching y: logprob approaches 0
  ModelParams hot = p;
  hot.head.b.v[1984] = 300.0;
  CHECK(seq_logprob(hot, base, 0, y) == doctest::Approx(0.0).epsilon(1e-12));

  CHECK(seq_logprob(p, base, 0, {}) == 0.0);
}

TEST_CASE("dpo loss closed form") {
  // theta == ref: margin 0, loss ln 2
  CHECK(dpo_loss_from_logprobs(-5, -9, -5, -9, 1.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  // winner raised to +infinity: loss -> 0
  CHECK(dpo_loss_from_logprobs(1e6, -9, -5, -9, 1.0) == doctest::Approx(0.0));
  // beta scales the margin inside the sigmoid: loss = -ln sigma(beta * m)
  const double m = 0.7;
  const double expect = -std::log(1.0 / (1.0 + std::exp(-2.0 * m)));
  CHECK(dpo_loss_from_logprobs(m, 0, 0, 0, 2.0) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("dpo loss equals ln 2 at theta == ref") {
  const Scenario base = simple_scene();
  ModelParams p = init_params(tiny_config(), 21);
  Rng hrng(3);
  for (double& w : p.head.w.v) w = hrng.normal(0.0, 0.05);

  std::vector<PreferencePair> pairs;
  PreferencePair pair;
  pair.scenario = &base;
  pair.agent_id = 0;
  pair.winner.assign(8, ActionToken{31, 31});
  pair.loser.assign(8, ActionToken{35, 31});
  pairs.push_back(pair);

  CHECK(dpo_loss(p, p, pairs, 1.0) == doctest::Approx(std::log(2.0)).epsilon(1e-9));
  CHECK_THROWS_AS(dpo_loss(p, p, pairs, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(dpo_loss(p, p, {}, 1.0), std::invalid_argument);
}

TEST_CASE("dpo gradient at ref matches -beta/2 grad logprob difference") {
  const Scenario base = simple_scene(4);
  ModelParams p = init_params(tiny_config(), 33);
  Rng hrng(4);
  for (double& w : p.head.w.v) w = hrng.normal(0.0, 0.05);
  const ModelParams ref = p;

  PreferencePair pair;
  pair.scenario = &base;
  pair.agent_id = 0;
  pair.winner.assign(4, ActionToken{31, 31});
  pair.loser.assign(4, ActionToken{28, 33});
  std::vector<PreferencePair> pairs{pair};
  const double beta = 1.0;

  // finite differences on a strided sample of parameters
  const double h = 1e-5;
  size_t checked = 0;
  for_each_tensor(p, [&](const std::string&, Tensor& t) {
    const size_t stride = std::max<size_t>(1, t.size() / 5);
    for (size_t i = 0; i < t.size(); i += stride * 7 + 1) {
      const double saved = t.v[i];
      t.v[i] = saved + h;
      const double loss_p = dpo_loss(p, ref, pairs, beta);
      const double diff_p = seq_logprob(p, base, 0, pair.winner) -
                            seq_logprob(p, base, 0, pair.loser);
      t.v[i] = saved - h;
      const double loss_m = dpo_loss(p, ref, pairs, beta);
      const double diff_m = seq_logprob(p, base, 0, pair.winner) -
                            seq_logprob(p, base, 0, pair.loser);
      t.v[i] = saved;
      const double g_loss = (loss_p - loss_m) / (2 * h);
      const double g_diff = (diff_p - diff_m) / (2 * h);
      CHECK(g_loss == doctest::Approx(-beta / 2.0 * g_diff).epsilon(1e-4));
      ++checked;
    }
  });
  CHECK(checked > 20);
}

TEST_CASE("dpo_finetune raises the margin and is deterministic") {
  const Scenario base = simple_scene();
  ModelParams p = init_params(tiny_config(), 55);
  Rng hrng(5);
  for (double& w : p.head.w.v) w = hrng.normal(0.0, 0.02);

  std::vector<PreferencePair> pairs;
  for (int k = 0; k < 3; ++k) {
    PreferencePair pair;
    pair.scenario = &base;
    pair.agent_id = 0;
    pair.winner.assign(8, ActionToken{31 - k, 31});
    pair.loser.assign(8, ActionToken{35 + k, 31});
    pairs.push_back(pair);
  }

  DpoConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 2;
  cfg.lr = 1e-3;  // large enough to move the tiny model measurably
  cfg.seed = 9;

  ModelParams tuned1 = p;
  const DpoResult r1 = dpo_finetune(tuned1, pairs, cfg);
  CHECK(r1.initial_loss == doctest::Approx(std::log(2.0)).epsilon(1e-9));
  CHECK(r1.final_loss < r1.initial_loss);
  CHECK(r1.mean_margin > 0.0);

  ModelParams tuned2 = p;
  const DpoResult r2 = dpo_finetune(tuned2, pairs, cfg);
  CHECK(r1.final_loss == r2.final_loss);
  std::vector<const Tensor*> t1, t2;
  for_each_tensor(tuned1, [&](const std::string&, const Tensor& t) { t1.push_back(&t); });
  for_each_tensor(tuned2, [&](const std::string&, const Tensor& t) { t2.push_back(&t); });
  for (size_t i = 0; i < t1.size(); ++i) REQUIRE(t1[i]->v == t2[i]->v);

  CHECK_THROWS_AS(dpo_finetune(tuned1, {}, cfg), std::invalid_argument);
}

TEST_CASE("profile name parsing") {
  CHECK(profile_from_string("safety") == DriverProfile::safety);
  CHECK(profile_from_string("fast") == DriverProfile::fast);
  CHECK(profile_from_string("comfort") == DriverProfile::comfort);
  CHECK(std::string(to_string(DriverProfile::comfort)) == "comfort");
  CHECK_THROWS_AS(profile_from_string("reckless"), std::invalid_argument);
}
