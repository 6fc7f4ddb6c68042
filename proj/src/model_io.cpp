#include "tokmat/model_io.hpp"

#include <set>

namespace tokmat {

Checkpoint make_checkpoint(const RunConfig& cfg, const Backbone& backbone,
                           const EmbeddingTable& table, std::uint64_t step) {
  Checkpoint ckpt;
  ckpt.step = step;
  ckpt.config_json = config_to_json(cfg).dump();
  ckpt.tensors.push_back(to_named_tensor(kEmbeddingTensor, table.vectors()));
  backbone.params().for_each([&](const std::string& name, const Matrix& m) {
    ckpt.tensors.push_back(to_named_tensor(name, m));
  });
  return ckpt;
}

Model model_from_checkpoint(const Checkpoint& ckpt) {
  using Kind = CheckpointError::Kind;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ckpt.config_json);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Kind::invalid, std::string("checkpoint config: ") + e.what());
  }
  RunConfig cfg;
  try {
    cfg = config_from_json(j);
    cfg.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(Kind::invalid, std::string("checkpoint ") + e.what());
  }

  const NamedTensor* emb = ckpt.find(kEmbeddingTensor);
  if (!emb) throw CheckpointError(Kind::shape_table, "checkpoint has no embeddings", kEmbeddingTensor);
  const Matrix rows = to_matrix(*emb);
  if (rows.cols() != cfg.backbone.dim) {
    throw CheckpointError(Kind::shape_table, "embeddings width " + std::to_string(rows.cols()) +
                                                 " != backbone.dim", kEmbeddingTensor);
  }
  EmbeddingTable table = [&] {
    try {
      return EmbeddingTable::from_stored(rows, cfg.radius);
    } catch (const std::invalid_argument& e) {
      throw CheckpointError(Kind::invalid, e.what(), kEmbeddingTensor);
    }
  }();

  BackboneParams params = BackboneParams::zeros(cfg.backbone);
  std::set<std::string> used{kEmbeddingTensor};
  params.for_each([&](const std::string& name, Matrix& m) {
    const NamedTensor* t = ckpt.find(name);
    if (!t) throw CheckpointError(Kind::shape_table, "checkpoint is missing " + name, name);
    Matrix loaded = to_matrix(*t);
    if (!loaded.same_shape(m)) {
      throw CheckpointError(Kind::shape_table, name + " has shape " + shape_string(loaded) +
                                                   ", config expects " + shape_string(m), name);
    }
    m = std::move(loaded);
    used.insert(name);
  });
  for (const auto& t : ckpt.tensors) {
    if (!used.count(t.name)) {
      throw CheckpointError(Kind::shape_table, "unexpected tensor " + t.name, t.name);
    }
  }
  return Model{cfg, Backbone(cfg.backbone, std::move(params)), std::move(table), ckpt.step};
}

void save_model(const std::filesystem::path& path, const RunConfig& cfg, const Backbone& backbone,
                const EmbeddingTable& table, std::uint64_t step) {
  write_checkpoint(make_checkpoint(cfg, backbone, table, step), path);
}

Model load_model(const std::filesystem::path& path) {
  return model_from_checkpoint(read_checkpoint(path));
}

Model init_model(const RunConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  EmbeddingTable table = EmbeddingTable::random(vocab::kSize, cfg.backbone.dim, cfg.radius, rng);
  Backbone backbone(cfg.backbone, BackboneParams::init(cfg.backbone, rng));
  return Model{cfg, std::move(backbone), std::move(table), 0};
}

}  // namespace tokmat
