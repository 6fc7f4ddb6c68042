#pragma once

#include <filesystem>

#include "tokmat/backbone.hpp"
#include "tokmat/config.hpp"
#include "tokmat/corpus_io.hpp"
#include "tokmat/embedding_space.hpp"

namespace tokmat {

inline constexpr const char* kEmbeddingTensor = "embeddings";

struct Model {
  RunConfig config;
  Backbone backbone;
  EmbeddingTable table;
  std::uint64_t step = 0;
};

/// "embeddings" first, then every backbone tensor under its stable name.
Checkpoint make_checkpoint(const RunConfig& cfg, const Backbone& backbone,
                           const EmbeddingTable& table, std::uint64_t step);
/// Rebuilds the model; missing, extra or misshapen tensors are shape_table errors.
Model model_from_checkpoint(const Checkpoint& ckpt);

void save_model(const std::filesystem::path& path, const RunConfig& cfg, const Backbone& backbone,
                const EmbeddingTable& table, std::uint64_t step);
Model load_model(const std::filesystem::path& path);

/// Fresh backbone and random table from cfg.seed.
Model init_model(const RunConfig& cfg);

}  // namespace tokmat
