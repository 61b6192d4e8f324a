#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numbers>

#include "kinesim/kinematics.hpp"
#include "kinesim/rng.hpp"
#include "oracles.hpp"

using namespace kinesim;

namespace {
constexpr double kPi = std::numbers::pi;
}

TEST_CASE("wrap_angle basics") {
  CHECK(wrap_angle(0.0) == 0.0);
  CHECK(wrap_angle(2.0 * kPi) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(wrap_angle(-kPi) == doctest::Approx(kPi));  // upper half-open boundary
  CHECK(wrap_angle(kPi) == doctest::Approx(kPi));
  CHECK(wrap_angle(3.0 * kPi) == doctest::Approx(kPi));
  CHECK(wrap_angle(7.5) == doctest::Approx(7.5 - 2.0 * kPi));
  CHECK_THROWS_AS(wrap_angle(std::nan("")), std::invalid_argument);
  CHECK_THROWS_AS(wrap_angle(INFINITY), std::invalid_argument);

  // result is congruent mod 2*pi and in range
  Rng rng(7);
  for (int i = 0; i < 1000; ++i) {
    const double t = rng.uniform(-50.0, 50.0);
    const double w = wrap_angle(t);
    CHECK(w > -kPi);
    CHECK(w <= kPi);
    CHECK(std::remainder(w - t, 2.0 * kPi) == doctest::Approx(0.0).epsilon(1e-9));
  }
}

TEST_CASE("ctra_step trivial examples") {
  // constant velocity
  AgentState s = ctra_step({0, 0, 0, 2}, {0, 0}, 0.5);
  CHECK(s.x == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(s.y == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(s.theta == 0.0);
  CHECK(s.v == 2.0);

  // half a t^2 from rest, heading +y
  s = ctra_step({0, 0, kPi / 2, 0}, {2, 0}, 0.5);
  CHECK(s.x == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(s.y == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(s.theta == doctest::Approx(kPi / 2));
  CHECK(s.v == doctest::Approx(1.0));
}

TEST_CASE("ctra_step matches the frozen RK4 value on the turning example") {
  // Frozen from the RK4 oracle at 1e6 substeps: (4.9480792, 0.6217516).
  const AgentState s = ctra_step({0, 0, 0, 10}, {0, 0.5}, 0.5);
  CHECK(s.x == doctest::Approx(4.9480792).epsilon(1e-6));
  CHECK(s.y == doctest::Approx(0.6217516).epsilon(1e-6));
  CHECK(s.theta == doctest::Approx(0.25));
  CHECK(s.v == doctest::Approx(10.0));

  // and against the fine-integration oracle itself
  const AgentState r = oracles::rk4_ctra({0, 0, 0, 10}, {0, 0.5}, 0.5, 1000000);
  CHECK(std::abs(s.x - r.x) < 1e-6);
  CHECK(std::abs(s.y - r.y) < 1e-6);
}

TEST_CASE("ctra_step error handling") {
  CHECK_THROWS_AS(ctra_step({0, 0, 0, 1}, {std::nan(""), 0}, 0.5), std::invalid_argument);
  CHECK_THROWS_AS(ctra_step({0, 0, 0, 1}, {0, 0}, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(ctra_step({0, 0, 0, 1}, {0, 0}, -1.0), std::invalid_argument);
}

TEST_CASE("ctra_rollout chains and guards") {
  std::vector<ControlAction> coast(4, ControlAction{0, 0});
  const auto states = ctra_rollout({0, 0, 0, 2}, coast, 0.5);
  REQUIRE(states.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(states[i].x == doctest::Approx(1.0 * (i + 1)).epsilon(1e-12));
  }

  const ControlAction zero{0, 0};
  const auto still = ctra_rollout({3, 4, 1, 0}, std::span<const ControlAction>(&zero, 1), 0.5);
  CHECK(still[0].x == 3.0);
  CHECK(still[0].y == 4.0);
  CHECK(still[0].v == 0.0);

  CHECK_THROWS_AS(ctra_rollout({0, 0, 0, 0}, {}, 0.5), std::invalid_argument);

  // chained headings example
  const std::vector<ControlAction> turn = {{0, 0.5}, {0, -0.5}};
  const auto hs = ctra_rollout({0, 0, 0, 10}, turn, 0.5);
  CHECK(hs[0].theta == doctest::Approx(0.25));
  CHECK(hs[1].theta == doctest::Approx(0.0).epsilon(1e-12));
  const auto ref = oracles::rk4_rollout({0, 0, 0, 10}, turn, 0.5, 20000);
  CHECK(std::abs(hs[1].x - ref[1].x) < 1e-6);
  CHECK(std::abs(hs[1].y - ref[1].y) < 1e-6);
}

TEST_CASE("semigroup flow property over random actions") {
  Rng rng(42);
  for (int i = 0; i < 1000; ++i) {
    const AgentState s{rng.uniform(-100, 100), rng.uniform(-100, 100),
                       rng.uniform(-kPi, kPi), rng.uniform(-10, 30)};
    const ControlAction u{rng.uniform(kAccelMin, kAccelMax),
                          rng.uniform(kYawRateMin, kYawRateMax)};
    const double dt = 0.5;
    const AgentState whole = ctra_step(s, u, dt);
    const AgentState halves = ctra_step(ctra_step(s, u, dt / 2), u, dt / 2);
    CHECK(std::abs(whole.x - halves.x) < 1e-9);
    CHECK(std::abs(whole.y - halves.y) < 1e-9);
    CHECK(std::abs(wrap_angle(whole.theta - halves.theta)) < 1e-9);
    CHECK(std::abs(whole.v - halves.v) < 1e-9);
  }
}

TEST_CASE("straight-line continuity at the branch boundary") {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const AgentState s{rng.uniform(-10, 10), rng.uniform(-10, 10), rng.uniform(-kPi, kPi),
                       rng.uniform(-5, 15)};
    const double a = rng.uniform(kAccelMin, kAccelMax);
    for (const double w : {1e-7, -1e-7}) {
      const AgentState tiny = ctra_step(s, {a, w}, 0.5);
      const AgentState zero = ctra_step(s, {a, 0.0}, 0.5);
      CHECK(std::abs(tiny.x - zero.x) < 1e-6);
      CHECK(std::abs(tiny.y - zero.y) < 1e-6);
    }
    // both branches agree around the threshold itself
    for (const double w : {kOmegaEps * (1.0 - 1e-9), kOmegaEps * (1.0 + 1e-9)}) {
      const AgentState below = ctra_step(s, {a, w * (1.0 - 1e-9)}, 0.5);
      const AgentState above = ctra_step(s, {a, w * (1.0 + 1e-9)}, 0.5);
      CHECK(std::abs(below.x - above.x) < 1e-7);
      CHECK(std::abs(below.y - above.y) < 1e-7);
    }
  }
}

TEST_CASE("SE(2) equivariance") {
  Rng rng(11);
  for (int i = 0; i < 500; ++i) {
    const AgentState s{rng.uniform(-50, 50), rng.uniform(-50, 50), rng.uniform(-kPi, kPi),
                       rng.uniform(-10, 20)};
    const ControlAction u{rng.uniform(kAccelMin, kAccelMax),
                          rng.uniform(kYawRateMin, kYawRateMax)};
    const double phi = rng.uniform(-kPi, kPi);
    const double tx = rng.uniform(-100, 100), ty = rng.uniform(-100, 100);
    const double c = std::cos(phi), sn = std::sin(phi);

    const AgentState moved{c * s.x - sn * s.y + tx, sn * s.x + c * s.y + ty,
                           wrap_angle(s.theta + phi), s.v};
    const AgentState out_then_move = [&] {
      const AgentState o = ctra_step(s, u, 0.5);
      return AgentState{c * o.x - sn * o.y + tx, sn * o.x + c * o.y + ty,
                        wrap_angle(o.theta + phi), o.v};
    }();
    const AgentState move_then_out = ctra_step(moved, u, 0.5);
    CHECK(std::abs(out_then_move.x - move_then_out.x) < 1e-9);
    CHECK(std::abs(out_then_move.y - move_then_out.y) < 1e-9);
    CHECK(std::abs(wrap_angle(out_then_move.theta - move_then_out.theta)) < 1e-12);
    CHECK(out_then_move.v == move_then_out.v);
  }
}

TEST_CASE("exact speed and heading updates") {
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const AgentState s{0, 0, rng.uniform(-kPi, kPi), rng.uniform(-10, 20)};
    const ControlAction u{rng.uniform(kAccelMin, kAccelMax),
                          rng.uniform(kYawRateMin, kYawRateMax)};
    const double dt = 0.5;
    const AgentState o = ctra_step(s, u, dt);
    CHECK(std::abs(o.v - s.v - u.a * dt) < 1e-12);
    CHECK(std::abs(wrap_angle(o.theta - s.theta - u.w * dt)) < 1e-12);
  }
}
