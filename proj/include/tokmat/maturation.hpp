#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include <json.hpp>

#include "tokmat/backbone.hpp"
#include "tokmat/embedding_space.hpp"
#include "tokmat/tensor.hpp"

namespace tokmat {

struct MaturationConfig {
  std::size_t tail_len = 16;      // K
  Scalar alpha_max = 0.9;         // front-of-tail noise level / step size
  Scalar embryo_fraction = 0.01;  // embryo norm as a fraction of R
  Scalar guidance = 1.0;          // CFG scale s; 1 disables the unconditional pass
  std::size_t max_tokens = 80;
  std::optional<TokenId> stop_token;

  void validate() const;
  friend bool operator==(const MaturationConfig&, const MaturationConfig&) = default;
};

void to_json(nlohmann::json& j, const MaturationConfig& c);
void from_json(const nlohmann::json& j, MaturationConfig& c);

/// Linear fade alpha_j = alpha_max * (1 - j/K), j = 0 at the front (oldest).
Vector alpha_profile(std::size_t tail_len, Scalar alpha_max);

/// The liquid tail: K uncommitted vectors, oldest first, and their noise levels.
struct TailState {
  Matrix vectors;
  Vector alphas;

  std::size_t size() const { return vectors.rows(); }
};

TailState init_tail(const MaturationConfig& cfg, std::size_t dim, Scalar radius,
                    std::mt19937_64& rng);

/// z_i <- z_i + alpha_i (zhat_i - z_i) for every tail slot.
TailState maturation_step(const TailState& tail, const Matrix& predictions);

/// s * cond + (1 - s) * uncond. Exact at s = 1 (cond) and s = 0 (uncond).
Matrix cfg_combine(const Matrix& cond, const Matrix& uncond, Scalar guidance);

/// Tail contents right after one maturation update. Slots [0, updated) moved
/// in this update; `front_position` is the sequence index of slot 0.
struct TailSnapshot {
  std::size_t step = 0;
  std::size_t front_position = 0;
  std::size_t updated = 0;
  Matrix vectors;
};

/// Committed prefix + liquid tail + RNG. Single owner; share only the
/// predictor and the table between sessions.
class GenerationSession {
 public:
  GenerationSession(std::vector<TokenId> prompt, MaturationConfig cfg, const EmbeddingTable& table,
                    std::uint64_t seed);

  const std::vector<TokenId>& committed_ids() const { return committed_ids_; }
  const Matrix& committed_vectors() const { return committed_vectors_; }
  std::size_t prompt_length() const { return prompt_length_; }
  std::vector<TokenId> generated() const;
  std::size_t generated_count() const { return committed_ids_.size() - prompt_length_; }

  const TailState& tail() const { return tail_; }
  TailState& mutable_tail() { return tail_; }
  const MaturationConfig& config() const { return cfg_; }
  void set_guidance(Scalar s);

  std::size_t step_count() const { return steps_; }
  bool terminated() const { return terminated_; }
  /// True once the session can take no more steps (stop token or max_tokens).
  bool finished() const { return terminated_ || generated_count() >= cfg_.max_tokens; }
  std::uint64_t seed() const { return seed_; }
  std::mt19937_64& rng() { return rng_; }

  void record_history(bool on) { record_history_ = on; }
  const std::vector<TailSnapshot>& history() const { return history_; }

  nlohmann::json to_json() const;
  static GenerationSession from_json(const nlohmann::json& j, const EmbeddingTable& table);

 private:
  friend TokenId step_once(GenerationSession&, const Predictor&, const EmbeddingTable&);

  GenerationSession() = default;
  void append_committed(TokenId id, const EmbeddingTable& table);

  std::vector<TokenId> committed_ids_;
  Matrix committed_vectors_;
  std::size_t prompt_length_ = 0;
  TailState tail_;
  MaturationConfig cfg_;
  Scalar radius_ = 1.0;
  std::uint64_t seed_ = 0;
  std::mt19937_64 rng_;
  std::size_t steps_ = 0;
  bool warmed_up_ = false;
  bool terminated_ = false;
  bool record_history_ = false;
  std::vector<TailSnapshot> history_;
};

/// One outer iteration: conditional + unconditional passes, CFG, maturation
/// update, commit the front slot, append an embryo. Returns the committed id.
/// The first call also runs the staggered warm-up that gives the initial
/// embryos the same K updates every later token receives.
TokenId step_once(GenerationSession& session, const Predictor& predictor,
                  const EmbeddingTable& table);

/// Steps until the stop token is committed or max_tokens are generated.
/// Returns the tokens committed by this call.
std::vector<TokenId> generate(GenerationSession& session, const Predictor& predictor,
                              const EmbeddingTable& table);

/// Adds a random vector of norm `magnitude` to each listed tail slot.
void intervene_noise(GenerationSession& session, Scalar magnitude,
                     std::span<const std::size_t> positions, std::mt19937_64& rng);
void intervene_noise(GenerationSession& session, Scalar magnitude,
                     std::span<const std::size_t> positions);

/// Front-to-back EMA over the tail: m_0 = z_0, m_j = c m_{j-1} + (1 - c) z_j.
void intervene_ema(GenerationSession& session, Scalar coefficient);

}  // namespace tokmat
