#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tokmat/backbone.hpp"
#include "tokmat/embedding_space.hpp"
#include "tokmat/maturation.hpp"
#include "tokmat/tensor.hpp"

namespace tokmat {

/// |unique n-grams| / max(1, total n-grams); 1.0 when the sequence is shorter than n.
Scalar distinct_n(std::span<const TokenId> tokens, std::size_t n);
/// Exactly 1 - distinct_n.
Scalar rep_n(std::span<const TokenId> tokens, std::size_t n);
/// Some trigram occurs at least 3 times.
bool has_trigram_loop(std::span<const TokenId> tokens);

inline constexpr std::size_t kLoopThreshold = 3;

struct GenerationMetrics {
  std::array<Scalar, 3> distinct{};  // n = 1, 2, 3
  std::array<Scalar, 3> rep{};
  bool trigram_loop = false;
  std::size_t length = 0;
};

struct RepetitionReport {
  std::vector<GenerationMetrics> generations;
  std::array<Scalar, 3> mean_distinct{};
  std::array<Scalar, 3> mean_rep{};
  Scalar loop_fraction = 0.0;
  std::size_t empty_generations = 0;
};

GenerationMetrics generation_metrics(std::span<const TokenId> tokens);
RepetitionReport repetition_report(const std::vector<std::vector<TokenId>>& generations);
nlohmann::json to_json(const RepetitionReport& r);
std::string to_text(const RepetitionReport& r);

struct EntropyPoint {
  std::size_t step = 0;
  std::size_t slot = 0;
  Scalar entropy = 0.0;
  TokenId top_candidate = 0;
};

struct EntropyTrajectory {
  std::size_t position = 0;
  std::vector<EntropyPoint> points;
};

/// Entropy and top-1 candidate of sequence position `position` at every
/// recorded maturation update that moved it. Throws when no snapshot covers it.
EntropyTrajectory entropy_trajectory(std::span<const TailSnapshot> history, std::size_t position,
                                     const EmbeddingTable& table, Scalar temperature = 1.0);
nlohmann::json to_json(const EntropyTrajectory& t);
std::string to_text(const EntropyTrajectory& t);

struct SweepRow {
  std::size_t tail_len = 0;
  std::size_t seeds = 0;
  std::size_t unique_sequences = 0;
  std::size_t unique_first_tokens = 0;
  Scalar mean_distinct_2 = 0.0;
};

/// One generation per (K, seed) from `base` with tail_len overridden.
std::vector<SweepRow> diversity_sweep(const std::vector<TokenId>& prompt,
                                      std::span<const std::uint64_t> seeds,
                                      std::span<const std::size_t> tail_lengths,
                                      const Predictor& predictor, const EmbeddingTable& table,
                                      const MaturationConfig& base);
std::string sweep_csv(std::span<const SweepRow> rows);
nlohmann::json sweep_json(std::span<const SweepRow> rows);
std::string sweep_text(std::span<const SweepRow> rows);

struct DriftEntry {
  TokenId id = 0;
  Scalar drift = 0.0;
};

struct DriftReport {
  Vector drift;                   // per token, L2
  std::vector<DriftEntry> top;    // non-increasing drift, ties by id
  std::vector<std::vector<TokenId>> neighbors_before;  // cosine, self excluded
  std::vector<std::vector<TokenId>> neighbors_after;
  Scalar mean_drift = 0.0;
};

inline constexpr std::size_t kDriftNeighbors = 5;

DriftReport embedding_drift(const Matrix& initial, const Matrix& learned, std::size_t top_k,
                            std::size_t neighbors = kDriftNeighbors);
nlohmann::json to_json(const DriftReport& r);
std::string to_text(const DriftReport& r);

}  // namespace tokmat
