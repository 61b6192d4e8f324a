#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "kinesim/action_codec.hpp"
#include "kinesim/rng.hpp"
#include "kinesim/scene.hpp"

namespace kinesim {

/// Architecture switches mirror the ablation rows: causal temporal attention,
/// the unified spatial representation (agents and map lines through one shared
/// vector encoder) and the previous-action embedding.
struct ModelConfig {
  int d_model = 64;
  int n_heads = 4;
  int enc_layers = 3;
  int dec_layers = 3;
  int vocab = kVocabSize;
  int max_seq_len = 64;
  double dropout = 0.0;
  bool causal_attention = true;
  bool unified_spatial_repr = true;
  bool u_embedding = true;

  void validate() const;  // throws std::invalid_argument
  bool operator==(const ModelConfig&) const = default;
};

struct Tensor {
  int rows = 0;
  int cols = 1;
  std::vector<double> v;

  void init(int r, int c) {
    rows = r;
    cols = c;
    v.assign(static_cast<size_t>(r) * c, 0.0);
  }
  size_t size() const { return v.size(); }
  double* row(int r) { return v.data() + static_cast<size_t>(r) * cols; }
  const double* row(int r) const { return v.data() + static_cast<size_t>(r) * cols; }
};

struct LinearParams {
  Tensor w;  // out x in
  Tensor b;  // out
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
};

struct BlockParams {
  LayerNormParams ln1;
  LinearParams wq, wk, wv, wo;
  LayerNormParams ln2;
  LinearParams fc1, fc2;
};

struct PoolParams {
  LayerNormParams ln;
  Tensor query;  // d
  LinearParams wk, wv, wo;
};

/// All weights. Tensors are enumerated in a fixed order by for_each_tensor,
/// which drives the optimizer, serialization and the finite-difference
/// checks.
struct ModelParams {
  ModelConfig cfg;
  LinearParams embed_spatial;  // 4 -> d, shared by agents and map when USR is on
  LinearParams embed_agent;    // 6 -> d, per-agent center features when USR is off
  LinearParams embed_map;      // 4 -> d when USR is off
  LinearParams embed_target;   // 3 -> d
  LinearParams embed_light;    // 2 -> d
  Tensor emb_agent_kind;       // 3 x d
  Tensor emb_poly_kind;        // 4 x d
  Tensor emb_light_state;      // 4 x d
  Tensor emb_prev_action;      // (vocab + 1) x d; last row = sequence start
  std::vector<BlockParams> enc;
  PoolParams pool;
  Tensor pos_emb;  // max_seq_len x d
  std::vector<BlockParams> dec;
  LayerNormParams final_ln;
  LinearParams head;  // vocab x d
};

ModelParams init_params(const ModelConfig& cfg, uint64_t seed);
size_t param_count(const ModelParams& p);

void for_each_tensor(ModelParams& p,
                     const std::function<void(const std::string&, Tensor&)>& fn);
void for_each_tensor(const ModelParams& p,
                     const std::function<void(const std::string&, const Tensor&)>& fn);

/// Per-step categorical over the 3969 actions.
struct ActionDistribution {
  std::vector<double> logits;
  std::vector<double> probabilities() const;  // softmax, sums to 1 within 1e-6
};

/// One teacher-forced sequence: step inputs built from logged states, targets
/// from the inverse-kinematic tokens, with a per-step supervision mask.
struct TrainSample {
  std::vector<SceneStepInput> inputs;
  std::vector<int> targets;
  std::vector<uint8_t> valid;
};

/// Gradient buffer parallel to the for_each_tensor enumeration of ModelParams.
struct ModelGrads {
  std::vector<std::vector<double>> g;

  void init_like(const ModelParams& p);
  void accumulate(const ModelGrads& other);
  void scale(double f);
  double squared_norm() const;
};

/// Fuses one step's scene elements into a single d_model token: shared
/// element embeddings plus attribute embeddings, enc_layers of self-attention
/// over the element set, attention-pooling with a learned query, then the
/// previous-action embedding when the switch is on.
std::vector<double> encode_step(const ModelParams& p, const SceneStepInput& input);

/// Full sequence forward: per-step encodings plus position embeddings through
/// the temporal decoder (lower-triangular mask when causal_attention is on)
/// and the classification head.
std::vector<ActionDistribution> forward(const ModelParams& p,
                                        std::span<const SceneStepInput> inputs);

/// Mean of -log p[target] over valid steps. Throws if the mask is all false.
double cross_entropy(std::span<const ActionDistribution> dists,
                     std::span<const int> targets, std::span<const uint8_t> valid);

/// Exact reverse-mode gradients of the batch-mean cross-entropy. Returns the
/// loss. Throws (naming the tensor) if any gradient turns non-finite.
double backward(const ModelParams& p, std::span<const TrainSample> batch,
                ModelGrads& grads, int workers = 1, uint64_t dropout_seed = 0,
                bool use_dropout = false);

/// Raw per-step logits (T x vocab, row-major) without building distributions.
std::vector<double> forward_logits(const ModelParams& p,
                                   std::span<const SceneStepInput> inputs);

/// Forward with trace, then backpropagation of a caller-supplied logits
/// gradient (same T x vocab layout). grad_fn receives the logits and fills
/// dlogits; gradients accumulate into `grads`, which must be init_like'd.
/// Used for objectives other than plain cross-entropy.
void forward_backward_logits(
    const ModelParams& p, std::span<const SceneStepInput> inputs,
    const std::function<void(const std::vector<double>&, std::vector<double>&)>& grad_fn,
    ModelGrads& grads);

struct TrainConfig {
  int epochs = 10;
  int batch_size = 64;
  double peak_lr = 2e-4;  // one-cycle peak
  double warmup_frac = 0.3;
  double val_fraction = 0.1;
  uint64_t seed = 1;
  int workers = 1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct TrainResult {
  std::vector<std::string> curve_rows;  // "step,lr,train_loss" plus epoch rows
  double final_val_ce = 0.0;
  int steps = 0;
};

/// Teacher-forced mini-batch training with Adam and a one-cycle schedule
/// (linear warmup to peak_lr, cosine decay). Deterministic given seed and
/// worker count. Aborts with diagnostics if the loss turns non-finite.
TrainResult train(ModelParams& params, const std::vector<TrainSample>& data,
                  const TrainConfig& cfg);

struct SamplerSpec {
  enum class Kind { argmax, top_p, temperature } kind = Kind::argmax;
  double value = 1.0;
};

SamplerSpec parse_sampler(const std::string& text);
std::string to_string(const SamplerSpec& s);

/// argmax breaks ties toward the lowest flat index; top_p renormalizes the
/// smallest descending-probability prefix with mass >= p.
ActionToken sample_action(const ActionDistribution& dist, const SamplerSpec& sampler,
                          Rng& rng);

/// Versioned binary checkpoint; load(save(p)) is bit-exact.
void save_checkpoint(const ModelParams& p, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

/// Builds the teacher-forced sample for one (scenario, agent): inputs from the
/// logged states at every transition step, prev-token chain from `tokens`.
TrainSample make_train_sample(const Scenario& scenario, int agent_id,
                              std::span<const int> token_flats,
                              const SceneInputOptions& opts = {});

}  // namespace kinesim
