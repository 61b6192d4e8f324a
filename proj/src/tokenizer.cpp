#include "kinesim/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

namespace kinesim {

namespace {

// Residual block of one window step: weighted pose/speed errors vs the target.
void step_residuals(const AgentState& pred, const AgentState& target,
                    const TokenizerOptions& opts, double* r4) {
  r4[0] = pred.x - target.x;
  r4[1] = pred.y - target.y;
  r4[2] = opts.weight_theta * wrap_angle(pred.theta - target.theta);
  r4[3] = opts.weight_v * (pred.v - target.v);
}

// Stacks residuals of the whole window (4 per valid target) into `out`.
// Invalid targets contribute zero rows so the Jacobian layout stays fixed.
void window_residuals(const AgentState& s_init,
                      std::span<const ControlAction> u_seq,
                      std::span<const AgentState> targets,
                      std::span<const bool> target_valid, double dt,
                      const TokenizerOptions& opts, std::vector<double>& out) {
  const size_t k = targets.size();
  out.assign(4 * k, 0.0);
  AgentState cur = s_init;
  for (size_t i = 0; i < k; ++i) {
    cur = ctra_step(cur, u_seq[i], dt);
    if (target_valid.empty() || target_valid[i]) {
      step_residuals(cur, targets[i], opts, &out[4 * i]);
    }
  }
}

double cost_of(const std::vector<double>& r) {
  double c = 0.0;
  for (double v : r) c += v * v;
  return c;
}

ControlAction clamp_action(const ControlAction& u) {
  return ControlAction{std::clamp(u.a, kAccelMin, kAccelMax),
                       std::clamp(u.w, kYawRateMin, kYawRateMax)};
}

// Solves (A + lambda I) x = b for a small dense symmetric system via Gaussian
// elimination with partial pivoting. A is n x n row-major.
bool solve_damped(std::vector<double> a, std::vector<double> b, double lambda,
                  size_t n, std::vector<double>& x) {
  for (size_t i = 0; i < n; ++i) a[i * n + i] += lambda;
  for (size_t col = 0; col < n; ++col) {
    size_t pivot = col;
    for (size_t row = col + 1; row < n; ++row) {
      if (std::abs(a[row * n + col]) > std::abs(a[pivot * n + col])) pivot = row;
    }
    if (std::abs(a[pivot * n + col]) < 1e-300) return false;
    if (pivot != col) {
      for (size_t j = 0; j < n; ++j) std::swap(a[col * n + j], a[pivot * n + j]);
      std::swap(b[col], b[pivot]);
    }
    const double inv = 1.0 / a[col * n + col];
    for (size_t row = col + 1; row < n; ++row) {
      const double f = a[row * n + col] * inv;
      if (f == 0.0) continue;
      for (size_t j = col; j < n; ++j) a[row * n + j] -= f * a[col * n + j];
      b[row] -= f * b[col];
    }
  }
  x.assign(n, 0.0);
  for (size_t i = n; i-- > 0;) {
    double s = b[i];
    for (size_t j = i + 1; j < n; ++j) s -= a[i * n + j] * x[j];
    x[i] = s / a[i * n + i];
  }
  return true;
}

}  // namespace

ControlAction init_estimate(const AgentState& s0, const AgentState& s1, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("init_estimate: dt must be positive");
  return ControlAction{(s1.v - s0.v) / dt, wrap_angle(s1.theta - s0.theta) / dt};
}

double window_cost(const AgentState& s_init, std::span<const ControlAction> u_seq,
                   std::span<const AgentState> targets,
                   std::span<const bool> target_valid, double dt,
                   const TokenizerOptions& opts) {
  if (u_seq.size() != targets.size() || targets.empty()) {
    throw std::invalid_argument("window_cost: window must be non-empty with matching lengths");
  }
  std::vector<double> r;
  window_residuals(s_init, u_seq, targets, target_valid, dt, opts, r);
  return cost_of(r);
}

std::vector<ControlAction> solve_window(const AgentState& s_init,
                                        std::span<const AgentState> targets,
                                        std::span<const bool> target_valid,
                                        std::span<const ControlAction> u_init,
                                        double dt, const TokenizerOptions& opts,
                                        SolveDiagnostics* diag) {
  const size_t k = targets.size();
  if (k == 0 || u_init.size() != k) {
    throw std::invalid_argument("solve_window: window must be non-empty with matching lengths");
  }
  const size_t n = 2 * k;

  std::vector<ControlAction> u(u_init.begin(), u_init.end());
  for (ControlAction& ui : u) ui = clamp_action(ui);

  std::vector<double> r, r_plus, r_minus, r_try;
  window_residuals(s_init, u, targets, target_valid, dt, opts, r);
  double cost = cost_of(r);
  if (!std::isfinite(cost)) throw std::runtime_error("solve_window: non-finite cost");
  if (diag != nullptr) diag->accepted_costs.push_back(cost);

  std::vector<double> jac(r.size() * n);  // row-major, rows = residuals
  std::vector<double> jtj(n * n), jtr(n), delta(n);
  double lambda = opts.lambda0;

  auto param = [&u](size_t p) -> double& {
    return (p % 2 == 0) ? u[p / 2].a : u[p / 2].w;
  };

  for (int iter = 0; iter < opts.max_iters; ++iter) {
    if (cost < 1e-24) break;
    if (diag != nullptr) diag->iterations = iter + 1;

    // Central-difference Jacobian.
    for (size_t p = 0; p < n; ++p) {
      const double saved = param(p);
      param(p) = saved + opts.fd_step;
      window_residuals(s_init, u, targets, target_valid, dt, opts, r_plus);
      param(p) = saved - opts.fd_step;
      window_residuals(s_init, u, targets, target_valid, dt, opts, r_minus);
      param(p) = saved;
      const double inv2h = 1.0 / (2.0 * opts.fd_step);
      for (size_t row = 0; row < r.size(); ++row) {
        jac[row * n + p] = (r_plus[row] - r_minus[row]) * inv2h;
      }
    }

    for (size_t i = 0; i < n; ++i) {
      for (size_t j = i; j < n; ++j) {
        double s = 0.0;
        for (size_t row = 0; row < r.size(); ++row) {
          s += jac[row * n + i] * jac[row * n + j];
        }
        jtj[i * n + j] = s;
        jtj[j * n + i] = s;
      }
      double s = 0.0;
      for (size_t row = 0; row < r.size(); ++row) s += jac[row * n + i] * r[row];
      jtr[i] = -s;
    }

    bool accepted = false;
    while (lambda < 1e12) {
      if (!solve_damped(jtj, jtr, lambda, n, delta)) {
        lambda *= 10.0;
        continue;
      }
      std::vector<ControlAction> u_try = u;
      for (size_t p = 0; p < n; ++p) {
        double& slot = (p % 2 == 0) ? u_try[p / 2].a : u_try[p / 2].w;
        slot += delta[p];
      }
      for (ControlAction& ui : u_try) ui = clamp_action(ui);
      window_residuals(s_init, u_try, targets, target_valid, dt, opts, r_try);
      const double cost_try = cost_of(r_try);
      if (!std::isfinite(cost_try)) throw std::runtime_error("solve_window: non-finite cost");
      if (cost_try < cost) {
        const double rel_drop = (cost - cost_try) / std::max(cost, 1e-300);
        u = std::move(u_try);
        r = r_try;
        cost = cost_try;
        lambda = std::max(lambda * 0.1, 1e-12);
        accepted = true;
        if (diag != nullptr) diag->accepted_costs.push_back(cost);
        if (rel_drop < opts.tol) return u;
        break;
      }
      lambda *= 10.0;
    }
    if (!accepted) break;  // damping exhausted; current iterate is the best seen
  }
  return u;
}

ActionToken nearest_token(const ControlAction& u) {
  auto nearest = [](double value, double lo, double hi, double width) {
    const double x = (std::clamp(value, lo, hi) - lo) / width;  // in [0, bins]
    int idx = static_cast<int>(std::floor(x));
    if (x - std::floor(x) == 0.0 && idx > 0) idx -= 1;  // tie toward lower index
    return std::clamp(idx, 0, kActionBins - 1);
  };
  return ActionToken{nearest(u.a, kAccelMin, kAccelMax, kAccelBinWidth),
                     nearest(u.w, kYawRateMin, kYawRateMax, kYawRateBinWidth)};
}

TokenizedTrack tokenize_track(std::span<const AgentState> states,
                              std::span<const bool> valid, double dt,
                              const TokenizerOptions& opts) {
  if (states.size() < 2) {
    throw std::invalid_argument("tokenize_track: need at least two states");
  }
  if (!valid.empty() && valid.size() != states.size()) {
    throw std::invalid_argument("tokenize_track: valid mask length mismatch");
  }
  const size_t horizon = states.size() - 1;

  TokenizedTrack out;
  out.tokens.reserve(horizon);
  out.ctl_states.reserve(horizon + 1);
  out.residuals.reserve(horizon);
  out.ctl_states.push_back(states[0]);

  std::vector<ControlAction> warm;
  std::unique_ptr<bool[]> window_valid(new bool[opts.window > 0 ? opts.window : 1]);
  for (size_t t = 0; t < horizon; ++t) {
    const size_t k = std::min<size_t>(opts.window, horizon - t);
    std::span<const AgentState> targets = states.subspan(t + 1, k);

    for (size_t i = 0; i < k; ++i) {
      window_valid[i] = valid.empty() || valid[t + 1 + i];
    }
    std::span<const bool> valid_span(window_valid.get(), k);

    // Warm start: shift the previous window's solution; seed fresh steps from
    // the logged finite differences.
    std::vector<ControlAction> u_init(k);
    for (size_t i = 0; i < k; ++i) {
      if (i + 1 < warm.size()) {
        u_init[i] = warm[i + 1];
      } else if (window_valid[i]) {
        const AgentState& prev = (i == 0) ? out.ctl_states.back() : targets[i - 1];
        u_init[i] = init_estimate(prev, targets[i], dt);
      } else {
        u_init[i] = ControlAction{0.0, 0.0};
      }
    }

    warm = solve_window(out.ctl_states.back(), targets, valid_span, u_init, dt, opts);

    const ActionToken token = nearest_token(warm[0]);
    const AgentState next = ctra_step(out.ctl_states.back(), dequantize(token), dt);

    double residual = 0.0;
    if (window_valid[0]) {
      double r4[4];
      step_residuals(next, targets[0], opts, r4);
      residual = r4[0] * r4[0] + r4[1] * r4[1] + r4[2] * r4[2] + r4[3] * r4[3];
    }

    out.tokens.push_back(token);
    out.ctl_states.push_back(next);
    out.residuals.push_back(residual);
  }
  return out;
}

}  // namespace kinesim
