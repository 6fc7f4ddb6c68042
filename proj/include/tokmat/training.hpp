#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tokmat/backbone.hpp"
#include "tokmat/embedding_space.hpp"
#include "tokmat/tensor.hpp"

namespace tokmat {

struct LossConfig {
  Scalar lambda = 1.0;        // weight of the contrastive term
  Scalar tau = 1.0;           // extra divisor on the similarity logits
  Scalar logit_scale = 20.0;  // multiplier on cosine similarity
  std::size_t negatives = 256;
  bool loss_weighting = true;  // (1 - alpha) per-position weights

  void validate() const;
  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

struct CorruptionPlan {
  std::size_t suffix_len = 4;
  Vector alphas;                // one per suffix position, oldest first
  Scalar noise_fraction = 0.01; // c, noise norm at alpha = 0 as a fraction of R
};

struct TrainConfig {
  std::size_t steps = 1000;
  std::size_t batch_size = 8;
  std::size_t grad_accum = 1;
  Scalar lr = 3e-4;
  Scalar lr_min = 3e-5;          // cosine floor
  std::size_t warmup_steps = 0;
  Scalar weight_decay = 0.01;
  Scalar grad_clip = 1.0;        // global norm, 0 disables
  Scalar beta1 = 0.9;
  Scalar beta2 = 0.999;
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 0;  // 0: only the final checkpoint
  std::size_t log_every = 10;
  bool finetune_embeddings = false;
  Scalar tail_only_fraction = 0.1;  // share of rows trained under the tail-only mask
  Scalar alpha_max_lo = 0.5;        // per-row alpha_max ~ U[lo, hi]
  Scalar alpha_max_hi = 1.0;
  Scalar noise_fraction = 0.01;
  bool random_lengths = true;  // crop each window to a random length in [K+1, max_seq_len]

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// --- losses ----------------------------------------------------------------

struct CorruptedSequence {
  Matrix vectors;
  Vector alphas;
};

/// Prefix untouched (alpha = 1); suffix slot with level a becomes
/// a * e + c * (1 - a) * R * u, u a random unit direction.
CorruptedSequence corrupt_suffix(const Matrix& embeddings, const CorruptionPlan& plan,
                                 Scalar radius, std::mt19937_64& rng);

/// ||pred - target||^2, optionally writing d/dpred.
Scalar mse_loss(std::span<const Scalar> pred, std::span<const Scalar> target,
                std::span<Scalar> grad = {});

/// -log softmax over {positive} + negatives of logit_scale * cos(pred, e_j) / tau.
/// grad_pred / grad_table (rows touched) are accumulated when given.
Scalar infonce_loss(std::span<const Scalar> pred, TokenId positive,
                    std::span<const TokenId> negatives, const EmbeddingTable& table,
                    const LossConfig& cfg, std::span<Scalar> grad_pred = {},
                    Matrix* grad_table = nullptr);

/// N distinct ids drawn uniformly from the vocabulary minus `positive`.
std::vector<TokenId> sample_negatives(TokenId positive, std::size_t vocab_size, std::size_t count,
                                      std::mt19937_64& rng);

struct LossBreakdown {
  Scalar total = 0.0;
  Scalar reg = 0.0;  // weighted mean of the regression term
  Scalar nce = 0.0;  // weighted mean of the contrastive term (before lambda)
  std::size_t positions = 0;
};

/// Mean over positions of w_t (L_reg,t + lambda L_NCE,t), w_t = 1 - alpha_t
/// (or 1 with weighting disabled). `grad_outputs` receives dLoss/doutputs,
/// `grad_table` accumulates dLoss/dtable. A nonzero `normalizer` replaces the
/// position count as the divisor, so several calls can add up to one batch mean.
LossBreakdown batch_loss(const Matrix& outputs, std::span<const TokenId> targets,
                         std::span<const Scalar> alphas,
                         std::span<const std::vector<TokenId>> negatives,
                         const EmbeddingTable& table, const LossConfig& cfg,
                         Matrix* grad_outputs = nullptr, Matrix* grad_table = nullptr,
                         std::size_t normalizer = 0);

// --- one training example ----------------------------------------------------

/// Everything random about one row, drawn up front so the loss is a pure
/// function of (params, table) for gradient checking.
struct PreparedRow {
  std::vector<TokenId> tokens;  // T tokens
  std::size_t tail_len = 1;
  Vector alphas;                // T levels, prefix 1
  Matrix noise;                 // T x d unit directions (rows used only in the suffix)
  Scalar noise_fraction = 0.01;
  MaskKind mask = MaskKind::full_causal;
  std::vector<std::vector<TokenId>> negatives;  // one list per output position 0..T-2
};

PreparedRow prepare_row(std::vector<TokenId> tokens, std::size_t tail_len, Scalar alpha_max,
                        MaskKind mask, const TrainConfig& tcfg, const LossConfig& lcfg,
                        std::size_t vocab_size, std::size_t dim, std::mt19937_64& rng);

/// Builds the corrupted inputs from the table (so embedding gradients flow),
/// runs forward + batch_loss, and, when grads are given, backward. Output at
/// position t is scored against token t+1 with the noise level of slot t+1.
LossBreakdown row_loss(const Backbone& model, const EmbeddingTable& table, const PreparedRow& row,
                       const LossConfig& cfg, BackboneParams* grads = nullptr,
                       Matrix* table_grads = nullptr, std::size_t normalizer = 0);

// --- optimizer -------------------------------------------------------------

/// Decoupled-weight-decay Adam over the backbone (and optionally the table).
class AdamW {
 public:
  AdamW(const BackboneParams& like, const TrainConfig& cfg, std::optional<Matrix> table_like);
  void step(BackboneParams& params, const BackboneParams& grads, Matrix* table,
            const Matrix* table_grads, Scalar lr);

 private:
  BackboneParams m_, v_;
  std::optional<Matrix> tm_, tv_;
  TrainConfig cfg_;
  std::size_t t_ = 0;
};

Scalar learning_rate(const TrainConfig& cfg, std::size_t step);

// --- training loop -------------------------------------------------------------

struct TrainLogEntry {
  std::size_t step = 0;
  LossBreakdown loss;
  Scalar lr = 0.0;
};

/// "step=12 loss=... reg=... nce=... lr=..."
std::string format_log_line(const TrainLogEntry& e);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainResult {
  Backbone model;
  EmbeddingTable table;
  std::vector<TrainLogEntry> log;
};

struct TrainHooks {
  std::ostream* log = nullptr;  // receives one key=value line per log_every steps
  // Called with (completed steps, model, table) at checkpoint cadence and at the end.
  std::function<void(std::size_t, const Backbone&, const EmbeddingTable&)> checkpoint;
};

/// Simulated-maturation training: corrupt a K-suffix of each window, predict
/// next-token embeddings, weighted MSE + InfoNCE, AdamW.
TrainResult train(const std::vector<TokenId>& corpus, Backbone model, EmbeddingTable table,
                  std::size_t tail_len, const TrainConfig& tcfg, const LossConfig& lcfg,
                  const TrainHooks& hooks = {});

}  // namespace tokmat
