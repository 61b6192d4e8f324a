#include "kinesim/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <unordered_map>

namespace kinesim {

namespace {

constexpr double kLnEps = 1e-5;

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * (1.0 / std::numbers::sqrt2))); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * (1.0 / std::numbers::sqrt2)));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

// ---------------------------------------------------------------------------
// element assembly: flattens a SceneStepInput into typed embedder inputs
// ---------------------------------------------------------------------------

enum class ElemType : uint8_t { target, spatial, agent6, map4, light };

struct Element {
  ElemType type;
  double f[6];
  int nf;
  int attr_table;  // 0 = agent kind, 1 = polyline kind, 2 = light state, -1 = none
  int attr_row;
};

std::vector<Element> assemble_elements(const ModelConfig& cfg, const SceneStepInput& in) {
  std::vector<Element> out;
  out.reserve(1 + in.neighbors.size() * 4 + in.map_segments.size() + in.lights.size());

  Element target;
  target.type = ElemType::target;
  target.f[0] = in.speed;
  target.f[1] = in.length;
  target.f[2] = in.width;
  target.nf = 3;
  target.attr_table = 0;
  target.attr_row = static_cast<int>(in.kind);
  out.push_back(target);

  for (const NeighborFeature& nb : in.neighbors) {
    if (cfg.unified_spatial_repr) {
      for (const Segment2& e : nb.box_edges) {
        Element el;
        el.type = ElemType::spatial;
        el.f[0] = e.start.x;
        el.f[1] = e.start.y;
        el.f[2] = e.end.x;
        el.f[3] = e.end.y;
        el.nf = 4;
        el.attr_table = 0;
        el.attr_row = static_cast<int>(nb.kind);
        out.push_back(el);
      }
    } else {
      Element el;
      el.type = ElemType::agent6;
      el.f[0] = nb.cx;
      el.f[1] = nb.cy;
      el.f[2] = nb.cos_h;
      el.f[3] = nb.sin_h;
      el.f[4] = nb.length;
      el.f[5] = nb.width;
      el.nf = 6;
      el.attr_table = 0;
      el.attr_row = static_cast<int>(nb.kind);
      out.push_back(el);
    }
  }

  for (const MapFeature& mf : in.map_segments) {
    Element el;
    el.type = cfg.unified_spatial_repr ? ElemType::spatial : ElemType::map4;
    el.f[0] = mf.seg.start.x;
    el.f[1] = mf.seg.start.y;
    el.f[2] = mf.seg.end.x;
    el.f[3] = mf.seg.end.y;
    el.nf = 4;
    el.attr_table = 1;
    el.attr_row = static_cast<int>(mf.kind);
    out.push_back(el);
  }

  for (const LightFeature& lf : in.lights) {
    Element el;
    el.type = ElemType::light;
    el.f[0] = lf.stop_point.x;
    el.f[1] = lf.stop_point.y;
    el.nf = 2;
    el.attr_table = 2;
    el.attr_row = static_cast<int>(lf.state);
    out.push_back(el);
  }
  return out;
}

// ---------------------------------------------------------------------------
// primitive layers
// ---------------------------------------------------------------------------

// Y(n x out) = X(n x in) * W^T + b
void linear_fwd(const LinearParams& l, const double* x, int n, double* y) {
  const int in = l.w.cols, out = l.w.rows;
  for (int r = 0; r < n; ++r) {
    const double* xr = x + static_cast<size_t>(r) * in;
    double* yr = y + static_cast<size_t>(r) * out;
    for (int o = 0; o < out; ++o) {
      const double* wr = l.w.row(o);
      double s = l.b.v[o];
      for (int i = 0; i < in; ++i) s += xr[i] * wr[i];
      yr[o] = s;
    }
  }
}

void linear_bwd(const LinearParams& l, const double* x, const double* dy, int n,
                double* dx, std::vector<double>& gw, std::vector<double>& gb) {
  const int in = l.w.cols, out = l.w.rows;
  for (int r = 0; r < n; ++r) {
    const double* xr = x + static_cast<size_t>(r) * in;
    const double* dyr = dy + static_cast<size_t>(r) * out;
    for (int o = 0; o < out; ++o) {
      const double d = dyr[o];
      if (d == 0.0) continue;
      gb[o] += d;
      double* gwr = gw.data() + static_cast<size_t>(o) * in;
      for (int i = 0; i < in; ++i) gwr[i] += d * xr[i];
    }
    if (dx != nullptr) {
      double* dxr = dx + static_cast<size_t>(r) * in;
      for (int o = 0; o < out; ++o) {
        const double d = dyr[o];
        if (d == 0.0) continue;
        const double* wr = l.w.row(o);
        for (int i = 0; i < in; ++i) dxr[i] += d * wr[i];
      }
    }
  }
}

struct LnTrace {
  std::vector<double> inv_sigma;  // per row
  std::vector<double> xhat;       // n x d
};

void layernorm_fwd(const LayerNormParams& ln, const double* x, int n, int d, double* y,
                   LnTrace* tr) {
  if (tr != nullptr) {
    tr->inv_sigma.resize(n);
    tr->xhat.resize(static_cast<size_t>(n) * d);
  }
  for (int r = 0; r < n; ++r) {
    const double* xr = x + static_cast<size_t>(r) * d;
    double* yr = y + static_cast<size_t>(r) * d;
    double mu = 0.0;
    for (int i = 0; i < d; ++i) mu += xr[i];
    mu /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= d;
    const double inv_sigma = 1.0 / std::sqrt(var + kLnEps);
    for (int i = 0; i < d; ++i) {
      const double xh = (xr[i] - mu) * inv_sigma;
      if (tr != nullptr) tr->xhat[static_cast<size_t>(r) * d + i] = xh;
      yr[i] = ln.gamma.v[i] * xh + ln.beta.v[i];
    }
    if (tr != nullptr) tr->inv_sigma[r] = inv_sigma;
  }
}

void layernorm_bwd(const LayerNormParams& ln, const LnTrace& tr, const double* dy, int n,
                   int d, double* dx, std::vector<double>& ggamma,
                   std::vector<double>& gbeta) {
  for (int r = 0; r < n; ++r) {
    const double* dyr = dy + static_cast<size_t>(r) * d;
    const double* xh = tr.xhat.data() + static_cast<size_t>(r) * d;
    double* dxr = dx + static_cast<size_t>(r) * d;
    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (int i = 0; i < d; ++i) {
      const double dxh = dyr[i] * ln.gamma.v[i];
      sum_dxhat += dxh;
      sum_dxhat_xhat += dxh * xh[i];
      ggamma[i] += dyr[i] * xh[i];
      gbeta[i] += dyr[i];
    }
    const double inv_d = 1.0 / d;
    for (int i = 0; i < d; ++i) {
      const double dxh = dyr[i] * ln.gamma.v[i];
      dxr[i] += tr.inv_sigma[r] * (dxh - inv_d * sum_dxhat - xh[i] * inv_d * sum_dxhat_xhat);
    }
  }
}

struct AttnTrace {
  std::vector<double> q, k, v;  // n x d
  std::vector<double> probs;    // heads x n x n (row-softmaxed; masked entries 0)
  std::vector<double> concat;   // n x d
};

// Multi-head self-attention. With `causal` each position attends to j <= i
// only; masked entries are never touched, so later inputs cannot perturb
// earlier outputs even at the bit level.
void attention_fwd(const BlockParams& blk, const ModelConfig& cfg, const double* x, int n,
                   double* y, bool causal, AttnTrace* tr) {
  const int d = cfg.d_model;
  const int heads = cfg.n_heads;
  const int hd = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<double> q(static_cast<size_t>(n) * d), k(q.size()), v(q.size());
  linear_fwd(blk.wq, x, n, q.data());
  linear_fwd(blk.wk, x, n, k.data());
  linear_fwd(blk.wv, x, n, v.data());

  std::vector<double> probs(static_cast<size_t>(heads) * n * n, 0.0);
  std::vector<double> concat(static_cast<size_t>(n) * d, 0.0);
  std::vector<double> scores(n);
  for (int h = 0; h < heads; ++h) {
    const int off = h * hd;
    for (int i = 0; i < n; ++i) {
      const int jmax = causal ? i + 1 : n;
      const double* qi = q.data() + static_cast<size_t>(i) * d + off;
      double mx = -1e300;
      for (int j = 0; j < jmax; ++j) {
        const double* kj = k.data() + static_cast<size_t>(j) * d + off;
        double s = 0.0;
        for (int c = 0; c < hd; ++c) s += qi[c] * kj[c];
        s *= scale;
        scores[j] = s;
        if (s > mx) mx = s;
      }
      double denom = 0.0;
      double* pi = probs.data() + (static_cast<size_t>(h) * n + i) * n;
      for (int j = 0; j < jmax; ++j) {
        const double e = std::exp(scores[j] - mx);
        pi[j] = e;
        denom += e;
      }
      const double inv = 1.0 / denom;
      double* oi = concat.data() + static_cast<size_t>(i) * d + off;
      for (int j = 0; j < jmax; ++j) {
        pi[j] *= inv;
        const double* vj = v.data() + static_cast<size_t>(j) * d + off;
        const double pj = pi[j];
        for (int c = 0; c < hd; ++c) oi[c] += pj * vj[c];
      }
    }
  }

  linear_fwd(blk.wo, concat.data(), n, y);

  if (tr != nullptr) {
    tr->q = std::move(q);
    tr->k = std::move(k);
    tr->v = std::move(v);
    tr->probs = std::move(probs);
    tr->concat = std::move(concat);
  }
}

struct GradMap {
  std::unordered_map<const Tensor*, std::vector<double>*> slots;

  GradMap(const ModelParams& p, ModelGrads& g) {
    size_t i = 0;
    for_each_tensor(p, [&](const std::string&, const Tensor& t) {
      slots[&t] = &g.g[i++];
    });
  }
  std::vector<double>& operator[](const Tensor& t) const { return *slots.at(&t); }
};

void attention_bwd(const BlockParams& blk, const ModelConfig& cfg, const double* x, int n,
                   const AttnTrace& tr, const double* dy, double* dx, const GradMap& gm,
                   bool causal) {
  const int d = cfg.d_model;
  const int heads = cfg.n_heads;
  const int hd = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<double> dconcat(static_cast<size_t>(n) * d, 0.0);
  linear_bwd(blk.wo, tr.concat.data(), dy, n, dconcat.data(), gm[blk.wo.w], gm[blk.wo.b]);

  std::vector<double> dq(static_cast<size_t>(n) * d, 0.0), dk(dq.size(), 0.0),
      dv(dq.size(), 0.0);
  std::vector<double> dp(n), ds(n);
  for (int h = 0; h < heads; ++h) {
    const int off = h * hd;
    for (int i = 0; i < n; ++i) {
      const int jmax = causal ? i + 1 : n;
      const double* pi = tr.probs.data() + (static_cast<size_t>(h) * n + i) * n;
      const double* doi = dconcat.data() + static_cast<size_t>(i) * d + off;
      // dP and dV
      for (int j = 0; j < jmax; ++j) {
        const double* vj = tr.v.data() + static_cast<size_t>(j) * d + off;
        double s = 0.0;
        for (int c = 0; c < hd; ++c) s += doi[c] * vj[c];
        dp[j] = s;
        double* dvj = dv.data() + static_cast<size_t>(j) * d + off;
        const double pj = pi[j];
        for (int c = 0; c < hd; ++c) dvj[c] += pj * doi[c];
      }
      // softmax backward
      double dot = 0.0;
      for (int j = 0; j < jmax; ++j) dot += pi[j] * dp[j];
      for (int j = 0; j < jmax; ++j) ds[j] = pi[j] * (dp[j] - dot) * scale;
      // dQ, dK
      double* dqi = dq.data() + static_cast<size_t>(i) * d + off;
      const double* qi = tr.q.data() + static_cast<size_t>(i) * d + off;
      for (int j = 0; j < jmax; ++j) {
        const double dsj = ds[j];
        if (dsj == 0.0) continue;
        const double* kj = tr.k.data() + static_cast<size_t>(j) * d + off;
        double* dkj = dk.data() + static_cast<size_t>(j) * d + off;
        for (int c = 0; c < hd; ++c) {
          dqi[c] += dsj * kj[c];
          dkj[c] += dsj * qi[c];
        }
      }
    }
  }

  linear_bwd(blk.wq, x, dq.data(), n, dx, gm[blk.wq.w], gm[blk.wq.b]);
  linear_bwd(blk.wk, x, dk.data(), n, dx, gm[blk.wk.w], gm[blk.wk.b]);
  linear_bwd(blk.wv, x, dv.data(), n, dx, gm[blk.wv.w], gm[blk.wv.b]);
}

struct BlockTrace {
  LnTrace ln1;
  std::vector<double> h1;  // n x d
  AttnTrace attn;
  std::vector<double> drop_attn;  // dropout mask (scaled), empty = off
  LnTrace ln2;
  std::vector<double> h2;       // n x d
  std::vector<double> fc1_pre;  // n x dff
  std::vector<double> fc1_act;  // n x dff
  std::vector<double> drop_mlp;
};

struct DropoutCtx {
  double rate = 0.0;
  Rng* rng = nullptr;
};

void apply_dropout(std::vector<double>& mask, double* x, size_t n, DropoutCtx* drop) {
  if (drop == nullptr || drop->rate <= 0.0) return;
  mask.resize(n);
  const double keep = 1.0 - drop->rate;
  for (size_t i = 0; i < n; ++i) {
    mask[i] = drop->rng->uniform01() < drop->rate ? 0.0 : 1.0 / keep;
    x[i] *= mask[i];
  }
}

// Pre-norm transformer block; writes output in place over x.
void block_fwd(const BlockParams& blk, const ModelConfig& cfg, std::vector<double>& x,
               int n, bool causal, BlockTrace* tr, DropoutCtx* drop) {
  const int d = cfg.d_model;
  const int dff = blk.fc1.w.rows;
  std::vector<double> h1(static_cast<size_t>(n) * d);
  layernorm_fwd(blk.ln1, x.data(), n, d, h1.data(), tr ? &tr->ln1 : nullptr);
  std::vector<double> attn(static_cast<size_t>(n) * d);
  attention_fwd(blk, cfg, h1.data(), n, attn.data(), causal, tr ? &tr->attn : nullptr);
  if (tr != nullptr) {
    tr->h1 = std::move(h1);
    apply_dropout(tr->drop_attn, attn.data(), attn.size(), drop);
  }
  for (size_t i = 0; i < x.size(); ++i) x[i] += attn[i];

  std::vector<double> h2(static_cast<size_t>(n) * d);
  layernorm_fwd(blk.ln2, x.data(), n, d, h2.data(), tr ? &tr->ln2 : nullptr);
  std::vector<double> pre(static_cast<size_t>(n) * dff);
  linear_fwd(blk.fc1, h2.data(), n, pre.data());
  std::vector<double> act(pre.size());
  for (size_t i = 0; i < pre.size(); ++i) act[i] = gelu(pre[i]);
  std::vector<double> mlp(static_cast<size_t>(n) * d);
  linear_fwd(blk.fc2, act.data(), n, mlp.data());
  if (tr != nullptr) {
    tr->h2 = std::move(h2);
    tr->fc1_pre = std::move(pre);
    tr->fc1_act = std::move(act);
    apply_dropout(tr->drop_mlp, mlp.data(), mlp.size(), drop);
  }
  for (size_t i = 0; i < x.size(); ++i) x[i] += mlp[i];
}

// dx accumulates the gradient w.r.t. the block input (in place over dy).
void block_bwd(const BlockParams& blk, const ModelConfig& cfg, const BlockTrace& tr, int n,
               std::vector<double>& dy, const GradMap& gm, bool causal) {
  const int d = cfg.d_model;
  const int dff = blk.fc1.w.rows;

  // MLP branch
  std::vector<double> dmlp = dy;  // residual: d(out)/d(mlp) = I
  if (!tr.drop_mlp.empty()) {
    for (size_t i = 0; i < dmlp.size(); ++i) dmlp[i] *= tr.drop_mlp[i];
  }
  std::vector<double> dact(static_cast<size_t>(n) * dff, 0.0);
  linear_bwd(blk.fc2, tr.fc1_act.data(), dmlp.data(), n, dact.data(), gm[blk.fc2.w],
             gm[blk.fc2.b]);
  for (size_t i = 0; i < dact.size(); ++i) dact[i] *= gelu_grad(tr.fc1_pre[i]);
  std::vector<double> dh2(static_cast<size_t>(n) * d, 0.0);
  linear_bwd(blk.fc1, tr.h2.data(), dact.data(), n, dh2.data(), gm[blk.fc1.w], gm[blk.fc1.b]);
  // dy currently also carries d/dx2 through the residual; add LN2 path.
  layernorm_bwd(blk.ln2, tr.ln2, dh2.data(), n, d, dy.data(), gm[blk.ln2.gamma],
                gm[blk.ln2.beta]);

  // Attention branch
  std::vector<double> dattn = dy;
  if (!tr.drop_attn.empty()) {
    for (size_t i = 0; i < dattn.size(); ++i) dattn[i] *= tr.drop_attn[i];
  }
  std::vector<double> dh1(static_cast<size_t>(n) * d, 0.0);
  attention_bwd(blk, cfg, tr.h1.data(), n, tr.attn, dattn.data(), dh1.data(), gm, causal);
  layernorm_bwd(blk.ln1, tr.ln1, dh1.data(), n, d, dy.data(), gm[blk.ln1.gamma],
                gm[blk.ln1.beta]);
}

struct PoolTrace {
  LnTrace ln;
  std::vector<double> h;      // n x d
  std::vector<double> k, v;   // n x d
  std::vector<double> probs;  // heads x n
  std::vector<double> concat; // d
};

// Attention-pooling with a learned query vector: one output row.
void pool_fwd(const PoolParams& pool, const ModelConfig& cfg, const double* x, int n,
              double* y, PoolTrace* tr) {
  const int d = cfg.d_model;
  const int heads = cfg.n_heads;
  const int hd = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<double> h(static_cast<size_t>(n) * d);
  layernorm_fwd(pool.ln, x, n, d, h.data(), tr ? &tr->ln : nullptr);
  std::vector<double> k(h.size()), v(h.size());
  linear_fwd(pool.wk, h.data(), n, k.data());
  linear_fwd(pool.wv, h.data(), n, v.data());

  std::vector<double> probs(static_cast<size_t>(heads) * n);
  std::vector<double> concat(d, 0.0);
  for (int hh = 0; hh < heads; ++hh) {
    const int off = hh * hd;
    double mx = -1e300;
    for (int j = 0; j < n; ++j) {
      const double* kj = k.data() + static_cast<size_t>(j) * d + off;
      double s = 0.0;
      for (int c = 0; c < hd; ++c) s += pool.query.v[off + c] * kj[c];
      s *= scale;
      probs[static_cast<size_t>(hh) * n + j] = s;
      if (s > mx) mx = s;
    }
    double denom = 0.0;
    for (int j = 0; j < n; ++j) {
      double& p = probs[static_cast<size_t>(hh) * n + j];
      p = std::exp(p - mx);
      denom += p;
    }
    const double inv = 1.0 / denom;
    for (int j = 0; j < n; ++j) {
      double& p = probs[static_cast<size_t>(hh) * n + j];
      p *= inv;
      const double* vj = v.data() + static_cast<size_t>(j) * d + off;
      for (int c = 0; c < hd; ++c) concat[off + c] += p * vj[c];
    }
  }
  linear_fwd(pool.wo, concat.data(), 1, y);

  if (tr != nullptr) {
    tr->h = std::move(h);
    tr->k = std::move(k);
    tr->v = std::move(v);
    tr->probs = std::move(probs);
    tr->concat = std::move(concat);
  }
}

void pool_bwd(const PoolParams& pool, const ModelConfig& cfg, int n, const PoolTrace& tr,
              const double* dy, double* dx, const GradMap& gm) {
  const int d = cfg.d_model;
  const int heads = cfg.n_heads;
  const int hd = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<double> dconcat(d, 0.0);
  linear_bwd(pool.wo, tr.concat.data(), dy, 1, dconcat.data(), gm[pool.wo.w], gm[pool.wo.b]);

  std::vector<double> dk(static_cast<size_t>(n) * d, 0.0), dv(dk.size(), 0.0);
  std::vector<double>& gquery = gm[pool.query];
  std::vector<double> dp(n), ds(n);
  for (int hh = 0; hh < heads; ++hh) {
    const int off = hh * hd;
    const double* p = tr.probs.data() + static_cast<size_t>(hh) * n;
    for (int j = 0; j < n; ++j) {
      const double* vj = tr.v.data() + static_cast<size_t>(j) * d + off;
      double s = 0.0;
      for (int c = 0; c < hd; ++c) s += dconcat[off + c] * vj[c];
      dp[j] = s;
      double* dvj = dv.data() + static_cast<size_t>(j) * d + off;
      for (int c = 0; c < hd; ++c) dvj[c] += p[j] * dconcat[off + c];
    }
    double dot = 0.0;
    for (int j = 0; j < n; ++j) dot += p[j] * dp[j];
    for (int j = 0; j < n; ++j) ds[j] = p[j] * (dp[j] - dot) * scale;
    for (int j = 0; j < n; ++j) {
      const double dsj = ds[j];
      if (dsj == 0.0) continue;
      const double* kj = tr.k.data() + static_cast<size_t>(j) * d + off;
      double* dkj = dk.data() + static_cast<size_t>(j) * d + off;
      for (int c = 0; c < hd; ++c) {
        gquery[off + c] += dsj * kj[c];
        dkj[c] += dsj * pool.query.v[off + c];
      }
    }
  }

  std::vector<double> dh(static_cast<size_t>(n) * d, 0.0);
  linear_bwd(pool.wk, tr.h.data(), dk.data(), n, dh.data(), gm[pool.wk.w], gm[pool.wk.b]);
  linear_bwd(pool.wv, tr.h.data(), dv.data(), n, dh.data(), gm[pool.wv.w], gm[pool.wv.b]);
  layernorm_bwd(pool.ln, tr.ln, dh.data(), n, d, dx, gm[pool.ln.gamma], gm[pool.ln.beta]);
}

// ---------------------------------------------------------------------------
// step encoder and sequence forward
// ---------------------------------------------------------------------------

const LinearParams& embedder_for(const ModelParams& p, ElemType t) {
  switch (t) {
    case ElemType::target: return p.embed_target;
    case ElemType::spatial: return p.embed_spatial;
    case ElemType::agent6: return p.embed_agent;
    case ElemType::map4: return p.embed_map;
    case ElemType::light: return p.embed_light;
  }
  return p.embed_target;
}

const Tensor* attr_table_for(const ModelParams& p, int table) {
  switch (table) {
    case 0: return &p.emb_agent_kind;
    case 1: return &p.emb_poly_kind;
    case 2: return &p.emb_light_state;
  }
  return nullptr;
}

struct StepTrace {
  std::vector<Element> elems;
  std::vector<BlockTrace> blocks;
  PoolTrace pool;
  std::vector<double> drop_token;
  int n = 0;
  int prev_row = -1;  // row used in emb_prev_action, -1 = u-embedding off
};

void embed_elements_fwd(const ModelParams& p, const std::vector<Element>& elems,
                        std::vector<double>& x0) {
  const int d = p.cfg.d_model;
  x0.assign(elems.size() * static_cast<size_t>(d), 0.0);
  for (size_t e = 0; e < elems.size(); ++e) {
    const Element& el = elems[e];
    const LinearParams& lin = embedder_for(p, el.type);
    double* xe = x0.data() + e * d;
    linear_fwd(lin, el.f, 1, xe);
    const Tensor* table = attr_table_for(p, el.attr_table);
    if (table != nullptr) {
      const double* row = table->row(el.attr_row);
      for (int i = 0; i < d; ++i) xe[i] += row[i];
    }
  }
}

void embed_elements_bwd(const ModelParams& p, const std::vector<Element>& elems,
                        const std::vector<double>& dx0, const GradMap& gm) {
  const int d = p.cfg.d_model;
  for (size_t e = 0; e < elems.size(); ++e) {
    const Element& el = elems[e];
    const LinearParams& lin = embedder_for(p, el.type);
    const double* dxe = dx0.data() + e * d;
    linear_bwd(lin, el.f, dxe, 1, nullptr, gm[lin.w], gm[lin.b]);
    const Tensor* table = attr_table_for(p, el.attr_table);
    if (table != nullptr) {
      std::vector<double>& grow = gm[*table];
      double* g = grow.data() + static_cast<size_t>(el.attr_row) * d;
      for (int i = 0; i < d; ++i) g[i] += dxe[i];
    }
  }
}

// Encodes one step into a d_model token. The trace is optional (inference
// passes nullptr).
void encode_step_fwd(const ModelParams& p, const SceneStepInput& input, double* token,
                     StepTrace* tr, DropoutCtx* drop) {
  const int d = p.cfg.d_model;
  std::vector<Element> elems = assemble_elements(p.cfg, input);
  const int n = static_cast<int>(elems.size());

  std::vector<double> x;
  embed_elements_fwd(p, elems, x);

  if (tr != nullptr) tr->blocks.resize(p.enc.size());
  for (size_t l = 0; l < p.enc.size(); ++l) {
    block_fwd(p.enc[l], p.cfg, x, n, /*causal=*/false, tr ? &tr->blocks[l] : nullptr, drop);
  }
  pool_fwd(p.pool, p.cfg, x.data(), n, token, tr ? &tr->pool : nullptr);

  int prev_row = -1;
  if (p.cfg.u_embedding) {
    if (input.prev_token >= p.cfg.vocab) {
      throw std::invalid_argument("encode_step: prev_token out of range");
    }
    prev_row = input.prev_token >= 0 ? input.prev_token : p.cfg.vocab;
    const double* row = p.emb_prev_action.row(prev_row);
    for (int i = 0; i < d; ++i) token[i] += row[i];
  }

  if (tr != nullptr) {
    tr->elems = std::move(elems);
    tr->n = n;
    tr->prev_row = prev_row;
    apply_dropout(tr->drop_token, token, d, drop);
  }
}

void encode_step_bwd(const ModelParams& p, const StepTrace& tr, std::vector<double> dtoken,
                     const GradMap& gm) {
  const int d = p.cfg.d_model;
  if (!tr.drop_token.empty()) {
    for (int i = 0; i < d; ++i) dtoken[i] *= tr.drop_token[i];
  }
  if (tr.prev_row >= 0) {
    std::vector<double>& g = gm[p.emb_prev_action];
    double* row = g.data() + static_cast<size_t>(tr.prev_row) * d;
    for (int i = 0; i < d; ++i) row[i] += dtoken[i];
  }

  const int n = tr.n;
  std::vector<double> dx(static_cast<size_t>(n) * d, 0.0);
  pool_bwd(p.pool, p.cfg, n, tr.pool, dtoken.data(), dx.data(), gm);
  for (size_t l = p.enc.size(); l-- > 0;) {
    block_bwd(p.enc[l], p.cfg, tr.blocks[l], n, dx, gm, /*causal=*/false);
  }
  embed_elements_bwd(p, tr.elems, dx, gm);
}

struct SeqTrace {
  std::vector<StepTrace> steps;
  std::vector<double> h_in;  // T x d, decoder input (tokens + pos)
  std::vector<BlockTrace> dec_blocks;
  LnTrace final_ln;
  std::vector<double> final_h;  // T x d
  int T = 0;
};

void forward_internal(const ModelParams& p, std::span<const SceneStepInput> inputs,
                      std::vector<double>& logits, SeqTrace* tr, DropoutCtx* drop) {
  const int d = p.cfg.d_model;
  const int T = static_cast<int>(inputs.size());
  if (T == 0) throw std::invalid_argument("forward: empty input sequence");
  if (T > p.cfg.max_seq_len) {
    throw std::invalid_argument("forward: sequence longer than max_seq_len");
  }

  std::vector<double> h(static_cast<size_t>(T) * d);
  if (tr != nullptr) tr->steps.resize(T);
  for (int t = 0; t < T; ++t) {
    encode_step_fwd(p, inputs[t], h.data() + static_cast<size_t>(t) * d,
                    tr ? &tr->steps[t] : nullptr, drop);
    const double* pos = p.pos_emb.row(t);
    double* ht = h.data() + static_cast<size_t>(t) * d;
    for (int i = 0; i < d; ++i) ht[i] += pos[i];
  }
  if (tr != nullptr) {
    tr->h_in = h;
    tr->dec_blocks.resize(p.dec.size());
    tr->T = T;
  }

  for (size_t l = 0; l < p.dec.size(); ++l) {
    block_fwd(p.dec[l], p.cfg, h, T, p.cfg.causal_attention,
              tr ? &tr->dec_blocks[l] : nullptr, drop);
  }

  std::vector<double> final_h(static_cast<size_t>(T) * d);
  layernorm_fwd(p.final_ln, h.data(), T, d, final_h.data(), tr ? &tr->final_ln : nullptr);
  logits.assign(static_cast<size_t>(T) * p.cfg.vocab, 0.0);
  linear_fwd(p.head, final_h.data(), T, logits.data());
  if (tr != nullptr) tr->final_h = std::move(final_h);
}

// dlogits: T x vocab. Accumulates into gm.
void backward_internal(const ModelParams& p, const SeqTrace& tr,
                       const std::vector<double>& dlogits, const GradMap& gm) {
  const int d = p.cfg.d_model;
  const int T = tr.T;

  std::vector<double> dfinal(static_cast<size_t>(T) * d, 0.0);
  linear_bwd(p.head, tr.final_h.data(), dlogits.data(), T, dfinal.data(), gm[p.head.w],
             gm[p.head.b]);

  std::vector<double> dh(static_cast<size_t>(T) * d, 0.0);
  layernorm_bwd(p.final_ln, tr.final_ln, dfinal.data(), T, d, dh.data(),
                gm[p.final_ln.gamma], gm[p.final_ln.beta]);

  for (size_t l = p.dec.size(); l-- > 0;) {
    block_bwd(p.dec[l], p.cfg, tr.dec_blocks[l], T, dh, gm, p.cfg.causal_attention);
  }

  std::vector<double>& gpos = gm[p.pos_emb];
  for (int t = 0; t < T; ++t) {
    const double* dht = dh.data() + static_cast<size_t>(t) * d;
    double* gp = gpos.data() + static_cast<size_t>(t) * d;
    for (int i = 0; i < d; ++i) gp[i] += dht[i];
    std::vector<double> dtoken(dht, dht + d);
    encode_step_bwd(p, tr.steps[t], std::move(dtoken), gm);
  }
}

double softmax_ce_grad(const std::vector<double>& logits, int vocab,
                       std::span<const int> targets, std::span<const uint8_t> valid,
                       double weight, std::vector<double>& dlogits) {
  const int T = static_cast<int>(targets.size());
  dlogits.assign(logits.size(), 0.0);
  int n_valid = 0;
  for (int t = 0; t < T; ++t) {
    if (valid.empty() || valid[t]) ++n_valid;
  }
  if (n_valid == 0) throw std::invalid_argument("cross_entropy: all steps masked out");

  double loss = 0.0;
  const double inv = weight / n_valid;
  for (int t = 0; t < T; ++t) {
    if (!valid.empty() && !valid[t]) continue;
    const double* lt = logits.data() + static_cast<size_t>(t) * vocab;
    double* dt = dlogits.data() + static_cast<size_t>(t) * vocab;
    double mx = lt[0];
    for (int c = 1; c < vocab; ++c) mx = std::max(mx, lt[c]);
    double denom = 0.0;
    for (int c = 0; c < vocab; ++c) denom += std::exp(lt[c] - mx);
    const double log_denom = std::log(denom);
    const int y = targets[t];
    if (y < 0 || y >= vocab) throw std::invalid_argument("cross_entropy: target out of range");
    loss += -(lt[y] - mx - log_denom) / n_valid;
    const double inv_denom = 1.0 / denom;
    for (int c = 0; c < vocab; ++c) {
      dt[c] = std::exp(lt[c] - mx) * inv_denom * inv;
    }
    dt[y] -= inv;
  }
  return loss;
}

void init_linear(LinearParams& l, int out, int in, Rng& rng, double std_dev) {
  l.w.init(out, in);
  l.b.init(out, 1);
  for (double& x : l.w.v) x = rng.normal(0.0, std_dev);
}

void init_layernorm(LayerNormParams& ln, int d) {
  ln.gamma.init(d, 1);
  ln.beta.init(d, 1);
  for (double& x : ln.gamma.v) x = 1.0;
}

void init_block(BlockParams& blk, const ModelConfig& cfg, Rng& rng, double std_dev) {
  const int d = cfg.d_model;
  const int dff = 4 * d;
  init_layernorm(blk.ln1, d);
  init_linear(blk.wq, d, d, rng, std_dev);
  init_linear(blk.wk, d, d, rng, std_dev);
  init_linear(blk.wv, d, d, rng, std_dev);
  init_linear(blk.wo, d, d, rng, std_dev);
  init_layernorm(blk.ln2, d);
  init_linear(blk.fc1, dff, d, rng, std_dev);
  init_linear(blk.fc2, d, dff, rng, std_dev);
}

}  // namespace

// ---------------------------------------------------------------------------
// public API
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0) {
    throw std::invalid_argument("model config: d_model must be a positive multiple of n_heads");
  }
  if (enc_layers < 0 || dec_layers < 0 || max_seq_len <= 0) {
    throw std::invalid_argument("model config: bad layer or sequence sizes");
  }
  if (vocab != kVocabSize) {
    throw std::invalid_argument("model config: vocab must equal the codebook size");
  }
  if (dropout < 0.0 || dropout >= 1.0) {
    throw std::invalid_argument("model config: dropout must be in [0, 1)");
  }
}

ModelParams init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ModelParams p;
  p.cfg = cfg;
  Rng rng(Rng::mix(seed, 0x7a11));
  const int d = cfg.d_model;
  const double std_dev = 0.05;

  init_linear(p.embed_spatial, d, 4, rng, std_dev);
  init_linear(p.embed_agent, d, 6, rng, std_dev);
  init_linear(p.embed_map, d, 4, rng, std_dev);
  init_linear(p.embed_target, d, 3, rng, std_dev);
  init_linear(p.embed_light, d, 2, rng, std_dev);
  p.emb_agent_kind.init(kAgentKindCount, d);
  p.emb_poly_kind.init(kPolylineKindCount, d);
  p.emb_light_state.init(kLightStateCount, d);
  p.emb_prev_action.init(cfg.vocab + 1, d);
  for (Tensor* t : {&p.emb_agent_kind, &p.emb_poly_kind, &p.emb_light_state,
                    &p.emb_prev_action}) {
    for (double& x : t->v) x = rng.normal(0.0, std_dev);
  }

  p.enc.resize(cfg.enc_layers);
  for (BlockParams& blk : p.enc) init_block(blk, cfg, rng, std_dev);

  init_layernorm(p.pool.ln, d);
  p.pool.query.init(d, 1);
  for (double& x : p.pool.query.v) x = rng.normal(0.0, std_dev);
  init_linear(p.pool.wk, d, d, rng, std_dev);
  init_linear(p.pool.wv, d, d, rng, std_dev);
  init_linear(p.pool.wo, d, d, rng, std_dev);

  p.pos_emb.init(cfg.max_seq_len, d);
  for (double& x : p.pos_emb.v) x = rng.normal(0.0, std_dev);

  p.dec.resize(cfg.dec_layers);
  for (BlockParams& blk : p.dec) init_block(blk, cfg, rng, std_dev);

  init_layernorm(p.final_ln, d);
  // Zero-initialized head: the untrained model outputs the uniform
  // distribution over actions.
  p.head.w.init(cfg.vocab, d);
  p.head.b.init(cfg.vocab, 1);
  return p;
}

size_t param_count(const ModelParams& p) {
  size_t n = 0;
  for_each_tensor(p, [&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

namespace {

template <typename P, typename F>
void enumerate_tensors(P& p, const F& fn) {
  auto lin = [&](const std::string& name, auto& l) {
    fn(name + ".w", l.w);
    fn(name + ".b", l.b);
  };
  auto ln = [&](const std::string& name, auto& l) {
    fn(name + ".gamma", l.gamma);
    fn(name + ".beta", l.beta);
  };
  auto block = [&](const std::string& name, auto& blk) {
    ln(name + ".ln1", blk.ln1);
    lin(name + ".wq", blk.wq);
    lin(name + ".wk", blk.wk);
    lin(name + ".wv", blk.wv);
    lin(name + ".wo", blk.wo);
    ln(name + ".ln2", blk.ln2);
    lin(name + ".fc1", blk.fc1);
    lin(name + ".fc2", blk.fc2);
  };

  lin("embed_spatial", p.embed_spatial);
  lin("embed_agent", p.embed_agent);
  lin("embed_map", p.embed_map);
  lin("embed_target", p.embed_target);
  lin("embed_light", p.embed_light);
  fn("emb_agent_kind", p.emb_agent_kind);
  fn("emb_poly_kind", p.emb_poly_kind);
  fn("emb_light_state", p.emb_light_state);
  fn("emb_prev_action", p.emb_prev_action);
  for (size_t i = 0; i < p.enc.size(); ++i) block("enc." + std::to_string(i), p.enc[i]);
  ln("pool.ln", p.pool.ln);
  fn("pool.query", p.pool.query);
  lin("pool.wk", p.pool.wk);
  lin("pool.wv", p.pool.wv);
  lin("pool.wo", p.pool.wo);
  fn("pos_emb", p.pos_emb);
  for (size_t i = 0; i < p.dec.size(); ++i) block("dec." + std::to_string(i), p.dec[i]);
  ln("final_ln", p.final_ln);
  lin("head", p.head);
}

}  // namespace

void for_each_tensor(ModelParams& p,
                     const std::function<void(const std::string&, Tensor&)>& fn) {
  enumerate_tensors(p, fn);
}

void for_each_tensor(const ModelParams& p,
                     const std::function<void(const std::string&, const Tensor&)>& fn) {
  enumerate_tensors(p, fn);
}

std::vector<double> ActionDistribution::probabilities() const {
  std::vector<double> out(logits.size());
  double mx = logits[0];
  for (double l : logits) mx = std::max(mx, l);
  double denom = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    denom += out[i];
  }
  for (double& p : out) p /= denom;
  return out;
}

void ModelGrads::init_like(const ModelParams& p) {
  g.clear();
  for_each_tensor(p, [&](const std::string&, const Tensor& t) {
    g.emplace_back(t.size(), 0.0);
  });
}

void ModelGrads::accumulate(const ModelGrads& other) {
  for (size_t i = 0; i < g.size(); ++i) {
    for (size_t j = 0; j < g[i].size(); ++j) g[i][j] += other.g[i][j];
  }
}

void ModelGrads::scale(double f) {
  for (auto& t : g) {
    for (double& x : t) x *= f;
  }
}

double ModelGrads::squared_norm() const {
  double s = 0.0;
  for (const auto& t : g) {
    for (double x : t) s += x * x;
  }
  return s;
}

namespace {

void check_gradients_finite(const ModelParams& p, const ModelGrads& grads) {
  size_t slot = 0;
  std::string bad;
  for_each_tensor(p, [&](const std::string& name, const Tensor&) {
    if (bad.empty()) {
      for (double x : grads.g[slot]) {
        if (!std::isfinite(x)) {
          bad = name;
          break;
        }
      }
    }
    ++slot;
  });
  if (!bad.empty()) {
    throw std::runtime_error("backward: non-finite gradient in tensor '" + bad + "'");
  }
}

}  // namespace

std::vector<double> encode_step(const ModelParams& p, const SceneStepInput& input) {
  std::vector<double> token(p.cfg.d_model, 0.0);
  encode_step_fwd(p, input, token.data(), nullptr, nullptr);
  return token;
}

std::vector<ActionDistribution> forward(const ModelParams& p,
                                        std::span<const SceneStepInput> inputs) {
  std::vector<double> logits;
  forward_internal(p, inputs, logits, nullptr, nullptr);
  const int T = static_cast<int>(inputs.size());
  std::vector<ActionDistribution> out(T);
  for (int t = 0; t < T; ++t) {
    out[t].logits.assign(logits.begin() + static_cast<size_t>(t) * p.cfg.vocab,
                         logits.begin() + static_cast<size_t>(t + 1) * p.cfg.vocab);
  }
  return out;
}

double cross_entropy(std::span<const ActionDistribution> dists,
                     std::span<const int> targets, std::span<const uint8_t> valid) {
  if (dists.size() != targets.size() || (!valid.empty() && valid.size() != dists.size())) {
    throw std::invalid_argument("cross_entropy: length mismatch");
  }
  int n_valid = 0;
  double loss = 0.0;
  for (size_t t = 0; t < dists.size(); ++t) {
    if (!valid.empty() && !valid[t]) continue;
    ++n_valid;
    const std::vector<double>& lt = dists[t].logits;
    double mx = lt[0];
    for (double l : lt) mx = std::max(mx, l);
    double denom = 0.0;
    for (double l : lt) denom += std::exp(l - mx);
    const int y = targets[t];
    if (y < 0 || y >= static_cast<int>(lt.size())) {
      throw std::invalid_argument("cross_entropy: target out of range");
    }
    loss += -(lt[y] - mx - std::log(denom));
  }
  if (n_valid == 0) throw std::invalid_argument("cross_entropy: all steps masked out");
  return loss / n_valid;
}

namespace {

// Gradient of one sample's CE (already scaled by `weight`) accumulated into
// grads. Returns the weighted loss contribution.
double sample_backward(const ModelParams& p, const TrainSample& sample, double weight,
                       const GradMap& gm, uint64_t dropout_seed, bool use_dropout) {
  SeqTrace tr;
  std::vector<double> logits;
  Rng drop_rng(dropout_seed);
  DropoutCtx drop{p.cfg.dropout, &drop_rng};
  DropoutCtx* drop_ptr = (use_dropout && p.cfg.dropout > 0.0) ? &drop : nullptr;
  forward_internal(p, sample.inputs, logits, &tr, drop_ptr);
  std::vector<double> dlogits;
  const double loss =
      softmax_ce_grad(logits, p.cfg.vocab, sample.targets, sample.valid, weight, dlogits);
  backward_internal(p, tr, dlogits, gm);
  return loss * weight;
}

}  // namespace

double backward(const ModelParams& p, std::span<const TrainSample> batch,
                ModelGrads& grads, int workers, uint64_t dropout_seed, bool use_dropout) {
  if (batch.empty()) throw std::invalid_argument("backward: empty batch");
  grads.init_like(p);
  const double weight = 1.0 / static_cast<double>(batch.size());

  if (workers <= 1 || batch.size() == 1) {
    GradMap gm(p, grads);
    double loss = 0.0;
    for (size_t i = 0; i < batch.size(); ++i) {
      loss += sample_backward(p, batch[i], weight, gm, Rng::mix(dropout_seed, i + 1),
                              use_dropout);
    }
    check_gradients_finite(p, grads);
    return loss;
  }

  const int w = std::min<int>(workers, static_cast<int>(batch.size()));
  std::vector<ModelGrads> partial(w);
  std::vector<double> losses(w, 0.0);
  std::vector<std::thread> threads;
  threads.reserve(w);
  for (int wi = 0; wi < w; ++wi) {
    partial[wi].init_like(p);
    threads.emplace_back([&, wi] {
      GradMap gm(p, partial[wi]);
      // Static round-robin assignment; reduction below runs in worker order,
      // so the result is deterministic for a fixed worker count.
      for (size_t i = wi; i < batch.size(); i += w) {
        losses[wi] += sample_backward(p, batch[i], weight, gm,
                                      Rng::mix(dropout_seed, i + 1), use_dropout);
      }
    });
  }
  for (std::thread& t : threads) t.join();
  double loss = 0.0;
  for (int wi = 0; wi < w; ++wi) {
    grads.accumulate(partial[wi]);
    loss += losses[wi];
  }
  check_gradients_finite(p, grads);
  return loss;
}

std::vector<double> forward_logits(const ModelParams& p,
                                   std::span<const SceneStepInput> inputs) {
  std::vector<double> logits;
  forward_internal(p, inputs, logits, nullptr, nullptr);
  return logits;
}

void forward_backward_logits(
    const ModelParams& p, std::span<const SceneStepInput> inputs,
    const std::function<void(const std::vector<double>&, std::vector<double>&)>& grad_fn,
    ModelGrads& grads) {
  SeqTrace tr;
  std::vector<double> logits;
  forward_internal(p, inputs, logits, &tr, nullptr);
  std::vector<double> dlogits(logits.size(), 0.0);
  grad_fn(logits, dlogits);
  GradMap gm(p, grads);
  backward_internal(p, tr, dlogits, gm);
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

namespace {

double one_cycle_lr(double peak, double warmup_frac, int step, int total_steps) {
  if (total_steps <= 1) return peak;
  const int warm = std::max(1, static_cast<int>(warmup_frac * total_steps));
  if (step < warm) return peak * static_cast<double>(step + 1) / warm;
  const double progress = static_cast<double>(step - warm) / std::max(1, total_steps - warm);
  return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace

TrainResult train(ModelParams& params, const std::vector<TrainSample>& data,
                  const TrainConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("train: empty dataset");
  if (cfg.batch_size <= 0 || cfg.epochs <= 0) {
    throw std::invalid_argument("train: batch_size and epochs must be positive");
  }

  // Deterministic split.
  std::vector<size_t> order(data.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng(Rng::mix(cfg.seed, 0x5917));
  split_rng.shuffle(order);
  const size_t val_n = std::min(data.size() - 1,
                                static_cast<size_t>(cfg.val_fraction * data.size()));
  std::vector<size_t> val_idx(order.begin(), order.begin() + val_n);
  std::vector<size_t> train_idx(order.begin() + val_n, order.end());

  const int steps_per_epoch =
      static_cast<int>((train_idx.size() + cfg.batch_size - 1) / cfg.batch_size);
  const int total_steps = steps_per_epoch * cfg.epochs;

  // Adam state per tensor.
  std::vector<std::vector<double>> m, v;
  for_each_tensor(params, [&](const std::string&, const Tensor& t) {
    m.emplace_back(t.size(), 0.0);
    v.emplace_back(t.size(), 0.0);
  });

  TrainResult result;
  result.curve_rows.push_back("step,lr,train_loss");
  ModelGrads grads;
  int step = 0;
  double last_epoch_mean = 0.0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng epoch_rng(Rng::mix(cfg.seed, 0xe90c + epoch));
    std::vector<size_t> idx = train_idx;
    epoch_rng.shuffle(idx);

    double epoch_loss = 0.0;
    int epoch_batches = 0;
    for (size_t start = 0; start < idx.size(); start += cfg.batch_size) {
      const size_t end = std::min(idx.size(), start + cfg.batch_size);
      std::vector<TrainSample> batch;
      batch.reserve(end - start);
      for (size_t i = start; i < end; ++i) batch.push_back(data[idx[i]]);

      const double loss = backward(params, batch, grads, cfg.workers,
                                   Rng::mix(cfg.seed, 0xd209 + step),
                                   params.cfg.dropout > 0.0);
      if (!std::isfinite(loss)) {
        throw std::runtime_error("train: loss diverged to non-finite at step " +
                                 std::to_string(step));
      }
      epoch_loss += loss;
      ++epoch_batches;

      const double lr = one_cycle_lr(cfg.peak_lr, cfg.warmup_frac, step, total_steps);
      const double bc1 = 1.0 - std::pow(cfg.adam_beta1, step + 1);
      const double bc2 = 1.0 - std::pow(cfg.adam_beta2, step + 1);
      size_t slot = 0;
      for_each_tensor(params, [&](const std::string&, Tensor& t) {
        auto& tm = m[slot];
        auto& tv = v[slot];
        const auto& tg = grads.g[slot];
        for (size_t i = 0; i < tg.size(); ++i) {
          tm[i] = cfg.adam_beta1 * tm[i] + (1.0 - cfg.adam_beta1) * tg[i];
          tv[i] = cfg.adam_beta2 * tv[i] + (1.0 - cfg.adam_beta2) * tg[i] * tg[i];
          const double mhat = tm[i] / bc1;
          const double vhat = tv[i] / bc2;
          t.v[i] -= lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        }
        ++slot;
      });

      result.curve_rows.push_back(std::to_string(step) + "," + std::to_string(lr) + "," +
                                  std::to_string(loss));
      ++step;
    }
    last_epoch_mean = epoch_loss / std::max(1, epoch_batches);

    if (!val_idx.empty()) {
      double val_ce = 0.0;
      for (size_t i : val_idx) {
        const TrainSample& s = data[i];
        const auto dists = forward(params, s.inputs);
        val_ce += cross_entropy(dists, s.targets, s.valid);
      }
      val_ce /= val_idx.size();
      result.final_val_ce = val_ce;
      result.curve_rows.push_back("epoch," + std::to_string(epoch) + ",val_ce," +
                                  std::to_string(val_ce));
    } else {
      result.final_val_ce = last_epoch_mean;
    }
  }
  result.steps = step;
  return result;
}

// ---------------------------------------------------------------------------
// sampling
// ---------------------------------------------------------------------------

SamplerSpec parse_sampler(const std::string& text) {
  SamplerSpec s;
  if (text == "argmax") {
    s.kind = SamplerSpec::Kind::argmax;
    return s;
  }
  const size_t colon = text.find(':');
  const std::string head = text.substr(0, colon);
  if (colon == std::string::npos || colon + 1 >= text.size()) {
    throw std::invalid_argument("sampler: expected 'argmax', 'top_p:P' or 'temperature:T'");
  }
  const double value = std::stod(text.substr(colon + 1));
  if (head == "top_p") {
    if (value <= 0.0 || value > 1.0) throw std::invalid_argument("sampler: top_p needs p in (0, 1]");
    s.kind = SamplerSpec::Kind::top_p;
  } else if (head == "temperature") {
    if (value <= 0.0) throw std::invalid_argument("sampler: temperature must be positive");
    s.kind = SamplerSpec::Kind::temperature;
  } else {
    throw std::invalid_argument("sampler: unknown kind '" + head + "'");
  }
  s.value = value;
  return s;
}

std::string to_string(const SamplerSpec& s) {
  switch (s.kind) {
    case SamplerSpec::Kind::argmax: return "argmax";
    case SamplerSpec::Kind::top_p: return "top_p:" + std::to_string(s.value);
    case SamplerSpec::Kind::temperature: return "temperature:" + std::to_string(s.value);
  }
  return "argmax";
}

ActionToken sample_action(const ActionDistribution& dist, const SamplerSpec& sampler,
                          Rng& rng) {
  const int n = static_cast<int>(dist.logits.size());
  if (sampler.kind == SamplerSpec::Kind::argmax) {
    int best = 0;
    for (int i = 1; i < n; ++i) {
      if (dist.logits[i] > dist.logits[best]) best = i;  // ties keep the lowest index
    }
    return token_from_flat(best);
  }

  std::vector<double> probs;
  if (sampler.kind == SamplerSpec::Kind::temperature) {
    ActionDistribution scaled;
    scaled.logits.resize(n);
    for (int i = 0; i < n; ++i) scaled.logits[i] = dist.logits[i] / sampler.value;
    probs = scaled.probabilities();
  } else {
    probs = dist.probabilities();
  }

  if (sampler.kind == SamplerSpec::Kind::top_p && sampler.value < 1.0) {
    // Keep the smallest descending-probability prefix with mass >= p.
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
      if (probs[a] != probs[b]) return probs[a] > probs[b];
      return a < b;
    });
    double mass = 0.0;
    size_t keep = 0;
    while (keep < idx.size() && mass < sampler.value) {
      mass += probs[idx[keep]];
      ++keep;
    }
    std::vector<double> renorm(n, 0.0);
    for (size_t i = 0; i < keep; ++i) renorm[idx[i]] = probs[idx[i]] / mass;
    probs = std::move(renorm);
  }

  const double u = rng.uniform01();
  double cum = 0.0;
  for (int i = 0; i < n; ++i) {
    cum += probs[i];
    if (u < cum) return token_from_flat(i);
  }
  return token_from_flat(n - 1);  // guard against rounding at the tail
}

// ---------------------------------------------------------------------------
// checkpoint io
// ---------------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'K', 'S', 'I', 'M'};
constexpr uint32_t kCkptVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint: truncated file " + path);
  return v;
}

}  // namespace

void save_checkpoint(const ModelParams& p, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path);
  out.write(kCkptMagic, 4);
  write_pod(out, kCkptVersion);
  write_pod<int32_t>(out, p.cfg.d_model);
  write_pod<int32_t>(out, p.cfg.n_heads);
  write_pod<int32_t>(out, p.cfg.enc_layers);
  write_pod<int32_t>(out, p.cfg.dec_layers);
  write_pod<int32_t>(out, p.cfg.vocab);
  write_pod<int32_t>(out, p.cfg.max_seq_len);
  write_pod<double>(out, p.cfg.dropout);
  write_pod<uint8_t>(out, p.cfg.causal_attention ? 1 : 0);
  write_pod<uint8_t>(out, p.cfg.unified_spatial_repr ? 1 : 0);
  write_pod<uint8_t>(out, p.cfg.u_embedding ? 1 : 0);

  uint32_t count = 0;
  for_each_tensor(p, [&](const std::string&, const Tensor&) { ++count; });
  write_pod(out, count);
  for_each_tensor(p, [&](const std::string& name, const Tensor& t) {
    write_pod<uint32_t>(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<uint32_t>(out, static_cast<uint32_t>(t.rows));
    write_pod<uint32_t>(out, static_cast<uint32_t>(t.cols));
    out.write(reinterpret_cast<const char*>(t.v.data()),
              static_cast<std::streamsize>(t.v.size() * sizeof(double)));
  });
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCkptMagic, 4) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path);
  }
  const uint32_t version = read_pod<uint32_t>(in, path);
  if (version != kCkptVersion) {
    throw std::runtime_error("checkpoint: unsupported version in " + path);
  }
  ModelConfig cfg;
  cfg.d_model = read_pod<int32_t>(in, path);
  cfg.n_heads = read_pod<int32_t>(in, path);
  cfg.enc_layers = read_pod<int32_t>(in, path);
  cfg.dec_layers = read_pod<int32_t>(in, path);
  cfg.vocab = read_pod<int32_t>(in, path);
  cfg.max_seq_len = read_pod<int32_t>(in, path);
  cfg.dropout = read_pod<double>(in, path);
  cfg.causal_attention = read_pod<uint8_t>(in, path) != 0;
  cfg.unified_spatial_repr = read_pod<uint8_t>(in, path) != 0;
  cfg.u_embedding = read_pod<uint8_t>(in, path) != 0;

  ModelParams p = init_params(cfg, 0);
  const uint32_t count = read_pod<uint32_t>(in, path);
  uint32_t expected = 0;
  for_each_tensor(p, [&](const std::string&, const Tensor&) { ++expected; });
  if (count != expected) throw std::runtime_error("checkpoint: tensor count mismatch in " + path);

  for_each_tensor(p, [&](const std::string& name, Tensor& t) {
    const uint32_t name_len = read_pod<uint32_t>(in, path);
    std::string file_name(name_len, '\0');
    in.read(file_name.data(), name_len);
    const uint32_t rows = read_pod<uint32_t>(in, path);
    const uint32_t cols = read_pod<uint32_t>(in, path);
    if (!in || file_name != name || rows != static_cast<uint32_t>(t.rows) ||
        cols != static_cast<uint32_t>(t.cols)) {
      throw std::runtime_error("checkpoint: tensor layout mismatch at '" + name + "' in " + path);
    }
    in.read(reinterpret_cast<char*>(t.v.data()),
            static_cast<std::streamsize>(t.v.size() * sizeof(double)));
    if (!in) throw std::runtime_error("checkpoint: truncated tensor data in " + path);
  });
  return p;
}

TrainSample make_train_sample(const Scenario& scenario, int agent_id,
                              std::span<const int> token_flats,
                              const SceneInputOptions& opts) {
  const Track* track = scenario.find_track(agent_id);
  if (track == nullptr) {
    throw std::invalid_argument("make_train_sample: unknown agent id");
  }
  const int T = scenario.step_count() - 1;
  if (static_cast<int>(token_flats.size()) != T) {
    throw std::invalid_argument("make_train_sample: token count must equal transition count");
  }
  TrainSample sample;
  sample.inputs.reserve(T);
  sample.targets.assign(token_flats.begin(), token_flats.end());
  sample.valid.resize(T);
  for (int t = 0; t < T; ++t) {
    const int prev = t > 0 ? token_flats[t - 1] : -1;
    if (track->valid[t]) {
      sample.inputs.push_back(build_step_input(scenario, agent_id, t, prev, opts));
    } else {
      // Unobserved step: placeholder input keeps the sequence positions
      // aligned; the step is masked out of the loss below.
      SceneStepInput blank;
      blank.kind = track->meta.kind;
      blank.length = track->meta.length;
      blank.width = track->meta.width;
      blank.prev_token = prev;
      sample.inputs.push_back(std::move(blank));
    }
    sample.valid[t] = track->valid[t] && track->valid[t + 1] ? 1 : 0;
  }
  return sample;
}

}  // namespace kinesim
