#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "kinesim/model.hpp"
#include "kinesim/rng.hpp"
#include "kinesim/synthetic.hpp"
#include "kinesim/tokenizer.hpp"
#include "oracles.hpp"

using namespace kinesim;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.max_seq_len = 8;
  return cfg;
}

// A small synthetic step input with a few of every element kind.
SceneStepInput make_input(Rng& rng, int prev_token) {
  SceneStepInput in;
  in.speed = rng.uniform(0, 10);
  in.length = 4.5;
  in.width = 2.0;
  in.kind = AgentKind::vehicle;
  in.prev_token = prev_token;
  for (int n = 0; n < 2; ++n) {
    NeighborFeature nb;
    const double cx = rng.uniform(-20, 20), cy = rng.uniform(-20, 20);
    const double h = rng.uniform(-1.5, 1.5);
    nb.cx = cx;
    nb.cy = cy;
    nb.cos_h = std::cos(h);
    nb.sin_h = std::sin(h);
    nb.length = 4.0;
    nb.width = 1.8;
    nb.kind = n == 0 ? AgentKind::vehicle : AgentKind::pedestrian;
    const auto edges = bbox_vectors({cx, cy, h, 0}, {0, nb.kind, nb.length, nb.width});
    for (int e = 0; e < 4; ++e) nb.box_edges[e] = edges[e];
    in.neighbors.push_back(nb);
  }
  for (int m = 0; m < 3; ++m) {
    MapFeature mf;
    mf.seg.start = {rng.uniform(-30, 30), rng.uniform(-30, 30)};
    mf.seg.end = {mf.seg.start.x + 2, mf.seg.start.y + 0.3};
    mf.kind = m == 2 ? PolylineKind::road_edge : PolylineKind::lane_center;
    in.map_segments.push_back(mf);
  }
  LightFeature lf;
  lf.stop_point = {rng.uniform(-30, 30), rng.uniform(-30, 30)};
  lf.state = LightState::green;
  in.lights.push_back(lf);
  return in;
}

std::vector<TrainSample> tiny_batch(int n_samples, int T, uint64_t seed) {
  Rng rng(seed);
  std::vector<TrainSample> batch;
  for (int s = 0; s < n_samples; ++s) {
    TrainSample sample;
    int prev = -1;
    for (int t = 0; t < T; ++t) {
      sample.inputs.push_back(make_input(rng, prev));
      const int target = rng.uniform_int(0, kVocabSize - 1);
      sample.targets.push_back(target);
      sample.valid.push_back(1);
      prev = target;
    }
    batch.push_back(std::move(sample));
  }
  return batch;
}

}  // namespace

TEST_CASE("encode_step is invariant to element permutation") {
  const ModelParams p = init_params(tiny_config(), 3);
  Rng rng(5);
  SceneStepInput in = make_input(rng, 17);

  const auto base = encode_step(p, in);
  std::reverse(in.neighbors.begin(), in.neighbors.end());
  std::reverse(in.map_segments.begin(), in.map_segments.end());
  const auto permuted = encode_step(p, in);
  REQUIRE(base.size() == permuted.size());
  for (size_t i = 0; i < base.size(); ++i) {
    CHECK(std::abs(base[i] - permuted[i]) < 1e-9);
  }
}

TEST_CASE("u-embedding switch semantics") {
  ModelConfig cfg = tiny_config();
  Rng rng(6);
  const SceneStepInput in_a = make_input(rng, 100);
  SceneStepInput in_b = in_a;
  in_b.prev_token = 2000;

  cfg.u_embedding = false;
  const ModelParams off = init_params(cfg, 3);
  CHECK(encode_step(off, in_a) == encode_step(off, in_b));  // independent of prev token

  cfg.u_embedding = true;
  const ModelParams on = init_params(cfg, 3);
  CHECK(encode_step(on, in_a) != encode_step(on, in_b));
}

TEST_CASE("encode_step reacts to a far-but-in-radius map segment") {
  const ModelParams p = init_params(tiny_config(), 9);
  Rng rng(8);
  const SceneStepInput base = make_input(rng, -1);
  SceneStepInput more = base;
  MapFeature far;
  far.seg.start = {45.0, 20.0};
  far.seg.end = {46.8, 20.5};
  far.kind = PolylineKind::lane_center;
  more.map_segments.push_back(far);
  CHECK(encode_step(p, base) != encode_step(p, more));
}

TEST_CASE("encode_step with no scene elements still encodes the target") {
  const ModelParams p = init_params(tiny_config(), 4);
  SceneStepInput in;
  in.speed = 3.0;
  in.length = 4.5;
  in.width = 2.0;
  in.prev_token = -1;
  const auto token = encode_step(p, in);
  CHECK(token.size() == 8);
  for (double v : token) CHECK(std::isfinite(v));
}

TEST_CASE("causal mask blocks future perturbations bit-exactly") {
  ModelParams p = init_params(tiny_config(), 11);
  Rng hrng(54);
  for (double& w : p.head.w.v) w = hrng.normal(0.0, 0.05);
  Rng rng(21);
  std::vector<SceneStepInput> inputs;
  for (int t = 0; t < 5; ++t) inputs.push_back(make_input(rng, t));

  const auto base = forward(p, inputs);
  for (int tp = 1; tp < 5; ++tp) {
    auto perturbed = inputs;
    perturbed[tp].speed += 1.0;
    perturbed[tp].map_segments[0].seg.start.x += 2.0;
    const auto out = forward(p, perturbed);
    for (int t = 0; t < tp; ++t) {
      REQUIRE(out[t].logits == base[t].logits);  // bit-identical
    }
    CHECK(out[tp].logits != base[tp].logits);
  }
}

TEST_CASE("non-causal mode lets later steps leak") {
  ModelConfig cfg = tiny_config();
  cfg.causal_attention = false;
  ModelParams p = init_params(cfg, 11);
  Rng hrng(54);
  for (double& w : p.head.w.v) w = hrng.normal(0.0, 0.05);
  Rng rng(21);
  std::vector<SceneStepInput> inputs;
  for (int t = 0; t < 4; ++t) inputs.push_back(make_input(rng, t));
  const auto base = forward(p, inputs);
  auto perturbed = inputs;
  perturbed[3].speed += 2.0;
  const auto out = forward(p, perturbed);
  CHECK(out[0].logits != base[0].logits);
}

TEST_CASE("single-step forward and uniform head") {
  const ModelParams p = init_params(tiny_config(), 2);  // head zero-initialized
  Rng rng(31);
  std::vector<SceneStepInput> one{make_input(rng, -1)};
  const auto dists = forward(p, one);
  REQUIRE(dists.size() == 1);
  const auto probs = dists[0].probabilities();
  double sum = 0.0, entropy = 0.0;
  for (double q : probs) {
    sum += q;
    entropy -= q * std::log(q);
  }
  CHECK(std::abs(sum - 1.0) < 1e-6);
  CHECK(entropy == doctest::Approx(std::log(3969.0)).epsilon(1e-9));
  CHECK(entropy == doctest::Approx(8.28627).epsilon(1e-5));  // 2 ln 63
}

TEST_CASE("cross entropy examples") {
  ActionDistribution uniform;
  uniform.logits.assign(kVocabSize, 0.0);
  const std::vector<int> target{1234};
  const std::vector<uint8_t> valid{1};
  CHECK(cross_entropy(std::span<const ActionDistribution>(&uniform, 1), target, valid) ==
        doctest::Approx(8.28627).epsilon(1e-5));

  ActionDistribution peaked;
  peaked.logits.assign(kVocabSize, 0.0);
  peaked.logits[1234] = 200.0;  // effectively one-hot
  CHECK(cross_entropy(std::span<const ActionDistribution>(&peaked, 1), target, valid) ==
        doctest::Approx(0.0).epsilon(1e-12));

  const std::vector<uint8_t> all_invalid{0};
  CHECK_THROWS_AS(
      cross_entropy(std::span<const ActionDistribution>(&uniform, 1), target, all_invalid),
      std::invalid_argument);
}

TEST_CASE("analytic gradients match central finite differences") {
  // Sampled per-tensor here to keep the suite fast; the acceptance suite runs
  // the exhaustive every-parameter sweep.
  ModelConfig cfg = tiny_config();
  ModelParams p = init_params(cfg, 123);
  // Non-zero head so its gradient path is exercised too.
  Rng hrng(55);
  for (double& w : p.head.w.v) w = hrng.normal(0.0, 0.02);

  const auto batch = tiny_batch(2, 3, 777);
  ModelGrads grads;
  backward(p, batch, grads);

  const auto loss_fn = [&] {
    double loss = 0.0;
    for (const TrainSample& s : batch) {
      loss += cross_entropy(forward(p, s.inputs), s.targets, s.valid);
    }
    return loss / batch.size();
  };

  const double h = 1e-4;
  size_t slot = 0;
  double worst = 0.0;
  std::string worst_name;
  for_each_tensor(p, [&](const std::string& name, Tensor& t) {
    const size_t stride = t.size() > 512 ? 101 : 1;
    for (size_t i = 0; i < t.size(); i += stride) {
      const double saved = t.v[i];
      t.v[i] = saved + h;
      const double plus = loss_fn();
      t.v[i] = saved - h;
      const double minus = loss_fn();
      t.v[i] = saved;
      const double a = grads.g[slot][i];
      const double b = (plus - minus) / (2.0 * h);
      const double rel = std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
      if (rel > worst) {
        worst = rel;
        worst_name = name;
      }
    }
    ++slot;
  });
  INFO("worst relative error ", worst, " in ", worst_name);
  CHECK(worst <= 1e-4);
}

TEST_CASE("zero head makes upstream gradients vanish") {
  ModelConfig cfg = tiny_config();
  ModelParams p = init_params(cfg, 5);  // head is zero by construction
  const auto batch = tiny_batch(1, 2, 99);
  ModelGrads grads;
  backward(p, batch, grads);

  size_t slot = 0;
  for_each_tensor(p, [&](const std::string& name, const Tensor&) {
    if (name != "head.w" && name != "head.b") {
      for (double g : grads.g[slot]) CHECK(g == 0.0);
    } else {
      double mag = 0.0;
      for (double g : grads.g[slot]) mag += std::abs(g);
      CHECK(mag > 0.0);
    }
    ++slot;
  });
}

TEST_CASE("batch gradient is the mean over samples") {
  ModelParams p = init_params(tiny_config(), 15);
  Rng hrng(56);
  for (double& w : p.head.w.v) w = hrng.normal(0.0, 0.02);
  const auto batch = tiny_batch(1, 2, 100);

  ModelGrads g1;
  backward(p, batch, g1);
  std::vector<TrainSample> doubled = {batch[0], batch[0]};
  ModelGrads g2;
  backward(p, doubled, g2);
  for (size_t s = 0; s < g1.g.size(); ++s) {
    for (size_t i = 0; i < g1.g[s].size(); ++i) {
      CHECK(g2.g[s][i] == doctest::Approx(g1.g[s][i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("multi-worker backward reduces deterministically") {
  ModelParams p = init_params(tiny_config(), 19);
  Rng hrng(57);
  for (double& w : p.head.w.v) w = hrng.normal(0.0, 0.02);
  const auto batch = tiny_batch(5, 3, 101);
  ModelGrads g1, g2;
  const double l1 = backward(p, batch, g1, 1);
  const double l2 = backward(p, batch, g2, 2);
  CHECK(l1 == l2);
  for (size_t s = 0; s < g1.g.size(); ++s) {
    for (size_t i = 0; i < g1.g[s].size(); ++i) {
      CHECK(g1.g[s][i] == doctest::Approx(g2.g[s][i]).epsilon(1e-13));
    }
  }
}

TEST_CASE("training on a tiny scripted dataset reduces the loss deterministically") {
  SyntheticConfig scfg;
  scfg.straight_count = 12;
  scfg.parallel_prob = 0.0;
  scfg.future_len = 6;
  const auto scenes = generate_synthetic(scfg, 61);

  std::vector<TrainSample> data;
  for (const Scenario& s : scenes) {
    data.push_back(make_train_sample(s, s.tracks[0].meta.id, s.tracks[0].gt_tokens));
  }

  ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.max_seq_len = 16;

  TrainConfig tcfg;
  tcfg.epochs = 4;
  tcfg.batch_size = 4;
  tcfg.peak_lr = 2e-3;
  tcfg.val_fraction = 0.25;
  tcfg.seed = 5;

  ModelParams p1 = init_params(cfg, 42);
  const TrainResult r1 = train(p1, data, tcfg);
  CHECK(r1.steps > 0);
  REQUIRE(r1.curve_rows.size() > 2);

  // loss decreases between the first and last recorded steps
  const auto row_loss = [&](const std::string& row) {
    const size_t c2 = row.rfind(',');
    return std::stod(row.substr(c2 + 1));
  };
  CHECK(row_loss(r1.curve_rows[1]) > row_loss(r1.curve_rows[r1.steps]));
  CHECK(std::isfinite(r1.final_val_ce));

  // bit-identical rerun with the same seed
  ModelParams p2 = init_params(cfg, 42);
  const TrainResult r2 = train(p2, data, tcfg);
  CHECK(r1.final_val_ce == r2.final_val_ce);
  std::vector<const Tensor*> t1, t2;
  for_each_tensor(p1, [&](const std::string&, const Tensor& t) { t1.push_back(&t); });
  for_each_tensor(p2, [&](const std::string&, const Tensor& t) { t2.push_back(&t); });
  bool identical = true;
  for (size_t i = 0; i < t1.size(); ++i) {
    if (t1[i]->v != t2[i]->v) identical = false;
  }
  CHECK(identical);
}

TEST_CASE("sampler behaviors") {
  Rng rng(17);

  // one-hot distribution: every sampler returns that token
  ActionDistribution hot;
  hot.logits.assign(kVocabSize, -50.0);
  hot.logits[777] = 50.0;
  CHECK(sample_action(hot, parse_sampler("argmax"), rng).flat() == 777);
  CHECK(sample_action(hot, parse_sampler("top_p:0.5"), rng).flat() == 777);
  CHECK(sample_action(hot, parse_sampler("temperature:1.0"), rng).flat() == 777);

  // argmax tie breaks toward the lowest flat index
  ActionDistribution tie;
  tie.logits.assign(kVocabSize, 0.0);
  tie.logits[5] = 3.0;
  tie.logits[9] = 3.0;
  CHECK(sample_action(tie, parse_sampler("argmax"), rng).flat() == 5);

  // top_p(0.5) over {0.4, 0.35, 0.25}: support is the first two, renormalized
  // to {8/15, 7/15}
  ActionDistribution three;
  three.logits.assign(kVocabSize, -1e9);
  three.logits[0] = std::log(0.40);
  three.logits[1] = std::log(0.35);
  three.logits[2] = std::log(0.25);
  int counts[3] = {0, 0, 0};
  Rng srng(99);
  const SamplerSpec tp = parse_sampler("top_p:0.5");
  for (int i = 0; i < 30000; ++i) {
    const int f = sample_action(three, tp, srng).flat();
    REQUIRE(f <= 2);
    ++counts[f];
  }
  CHECK(counts[2] == 0);
  CHECK(std::abs(counts[0] / 30000.0 - 8.0 / 15.0) < 0.01);
  CHECK(std::abs(counts[1] / 30000.0 - 7.0 / 15.0) < 0.01);

  // top_p(1.0) behaves like full categorical sampling: all three appear
  const SamplerSpec full = parse_sampler("top_p:1.0");
  int seen[3] = {0, 0, 0};
  for (int i = 0; i < 10000; ++i) seen[sample_action(three, full, srng).flat()]++;
  CHECK(seen[0] > 0);
  CHECK(seen[1] > 0);
  CHECK(seen[2] > 0);

  CHECK_THROWS_AS(parse_sampler("nope"), std::invalid_argument);
  CHECK_THROWS_AS(parse_sampler("top_p:0"), std::invalid_argument);
  CHECK_THROWS_AS(parse_sampler("temperature:-1"), std::invalid_argument);
}

TEST_CASE("checkpoint round trip is bit exact") {
  ModelConfig cfg = tiny_config();
  cfg.unified_spatial_repr = false;
  ModelParams p = init_params(cfg, 1234);
  Rng hrng(58);
  for (double& w : p.head.w.v) w = hrng.normal(0.0, 0.3);

  const std::string path = (std::filesystem::temp_directory_path() / "kinesim_test.ckpt").string();
  save_checkpoint(p, path);
  const ModelParams q = load_checkpoint(path);
  CHECK(q.cfg == p.cfg);
  std::vector<const Tensor*> tp, tq;
  for_each_tensor(p, [&](const std::string&, const Tensor& t) { tp.push_back(&t); });
  for_each_tensor(q, [&](const std::string&, const Tensor& t) { tq.push_back(&t); });
  for (size_t i = 0; i < tp.size(); ++i) {
    REQUIRE(tp[i]->v == tq[i]->v);  // bit exact
  }
  std::filesystem::remove(path);

  CHECK_THROWS_AS(load_checkpoint("/nonexistent/x.ckpt"), std::runtime_error);
}

TEST_CASE("model config validation") {
  ModelConfig cfg;
  cfg.d_model = 10;
  cfg.n_heads = 4;  // not divisible
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = ModelConfig{};
  cfg.vocab = 100;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = ModelConfig{};
  cfg.dropout = 1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("usr switch changes the agent encoding path") {
  Rng rng(3);
  const SceneStepInput in = make_input(rng, -1);
  ModelConfig cfg = tiny_config();
  cfg.unified_spatial_repr = true;
  const auto usr_on = encode_step(init_params(cfg, 7), in);
  cfg.unified_spatial_repr = false;
  const auto usr_off = encode_step(init_params(cfg, 7), in);
  CHECK(usr_on != usr_off);
}
