#include "tokmat/maturation.hpp"

#include <sstream>
#include <stdexcept>
#include <string>

namespace tokmat {

void MaturationConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("MaturationConfig: " + m); };
  if (tail_len < 1) fail("tail_len must be >= 1");
  if (!(alpha_max > 0.0 && alpha_max <= 1.0)) fail("alpha_max must be in (0, 1]");
  if (!(embryo_fraction > 0.0 && embryo_fraction < 1.0)) fail("embryo_fraction must be in (0, 1)");
  if (!(guidance >= 0.0) || !std::isfinite(guidance)) fail("guidance must be finite and >= 0");
}

void to_json(nlohmann::json& j, const MaturationConfig& c) {
  j = nlohmann::json{{"tail_len", c.tail_len},
                     {"alpha_max", c.alpha_max},
                     {"embryo_fraction", c.embryo_fraction},
                     {"guidance", c.guidance},
                     {"max_tokens", c.max_tokens},
                     {"stop_token", c.stop_token ? nlohmann::json(*c.stop_token) : nlohmann::json()}};
}

void from_json(const nlohmann::json& j, MaturationConfig& c) {
  c.tail_len = j.at("tail_len").get<std::size_t>();
  c.alpha_max = j.at("alpha_max").get<Scalar>();
  c.embryo_fraction = j.at("embryo_fraction").get<Scalar>();
  c.guidance = j.at("guidance").get<Scalar>();
  c.max_tokens = j.at("max_tokens").get<std::size_t>();
  if (j.contains("stop_token") && !j.at("stop_token").is_null()) {
    c.stop_token = j.at("stop_token").get<TokenId>();
  } else {
    c.stop_token.reset();
  }
}

Vector alpha_profile(std::size_t tail_len, Scalar alpha_max) {
  if (tail_len < 1) throw std::invalid_argument("alpha_profile: tail length must be >= 1");
  Vector a(tail_len);
  const Scalar k = static_cast<Scalar>(tail_len);
  for (std::size_t j = 0; j < tail_len; ++j) {
    a[j] = alpha_max * (1.0 - static_cast<Scalar>(j) / k);
  }
  return a;
}

namespace {

Vector embryo(std::size_t dim, Scalar norm_target, std::mt19937_64& rng) {
  Vector v = random_direction(dim, rng);
  for (auto& x : v) x *= norm_target;
  return v;
}

void update_slots(TailState& tail, const Matrix& predictions, std::size_t count) {
  for (std::size_t j = 0; j < count; ++j) {
    const Scalar a = tail.alphas[j];
    auto z = tail.vectors.row(j);
    const auto p = predictions.row(j);
    for (std::size_t e = 0; e < z.size(); ++e) z[e] += a * (p[e] - z[e]);
  }
}

// Guided per-slot predictions for the current tail. The prediction for the
// slot at sequence position p is the output at p - 1 (next-token targets).
Matrix tail_predictions(const GenerationSession& s, const Predictor& predictor) {
  const std::size_t K = s.tail().size();
  const std::size_t n = s.committed_ids().size();
  const std::size_t window = std::min(n + K, predictor.max_sequence());
  if (K + 1 > window) {
    throw std::invalid_argument("step_once: tail length " + std::to_string(K) +
                                " leaves no committed context in a window of " +
                                std::to_string(predictor.max_sequence()));
  }
  const std::size_t dim = s.tail().vectors.cols();
  const std::size_t ctx = window - K;
  Matrix seq(window, dim);
  Vector alphas(window, 1.0);
  for (std::size_t r = 0; r < ctx; ++r) seq.set_row(r, s.committed_vectors().row(n - ctx + r));
  for (std::size_t j = 0; j < K; ++j) {
    seq.set_row(ctx + j, s.tail().vectors.row(j));
    alphas[ctx + j] = s.tail().alphas[j];
  }

  auto slice = [&](const Matrix& out) {
    Matrix m(K, dim);
    for (std::size_t j = 0; j < K; ++j) m.set_row(j, out.row(ctx - 1 + j));
    return m;
  };
  Matrix cond = slice(predictor.predict(seq, alphas, K, MaskKind::full_causal));
  const Scalar guidance = s.config().guidance;
  if (guidance == 1.0) return cond;
  Matrix uncond = slice(predictor.predict(seq, alphas, K, MaskKind::tail_only));
  return cfg_combine(cond, uncond, guidance);
}

}  // namespace

TailState init_tail(const MaturationConfig& cfg, std::size_t dim, Scalar radius,
                    std::mt19937_64& rng) {
  cfg.validate();
  TailState t;
  t.vectors = Matrix(cfg.tail_len, dim);
  for (std::size_t j = 0; j < cfg.tail_len; ++j) {
    t.vectors.set_row(j, embryo(dim, cfg.embryo_fraction * radius, rng));
  }
  t.alphas = alpha_profile(cfg.tail_len, cfg.alpha_max);
  return t;
}

TailState maturation_step(const TailState& tail, const Matrix& predictions) {
  if (!predictions.same_shape(tail.vectors)) {
    throw std::invalid_argument("maturation_step: predictions " + shape_string(predictions) +
                                " vs tail " + shape_string(tail.vectors));
  }
  for (std::size_t j = 0; j < predictions.rows(); ++j) {
    if (!all_finite(predictions.row(j))) {
      throw std::invalid_argument("maturation_step: non-finite prediction for tail slot " +
                                  std::to_string(j));
    }
  }
  TailState out = tail;
  update_slots(out, predictions, out.size());
  return out;
}

Matrix cfg_combine(const Matrix& cond, const Matrix& uncond, Scalar guidance) {
  if (!cond.same_shape(uncond)) {
    throw std::invalid_argument("cfg_combine: conditional " + shape_string(cond) +
                                " vs unconditional " + shape_string(uncond));
  }
  Matrix out(cond.rows(), cond.cols());
  const Scalar rest = 1.0 - guidance;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.flat()[i] = guidance * cond.flat()[i] + rest * uncond.flat()[i];
  }
  return out;
}

GenerationSession::GenerationSession(std::vector<TokenId> prompt, MaturationConfig cfg,
                                     const EmbeddingTable& table, std::uint64_t seed)
    : cfg_(cfg), radius_(table.radius()), seed_(seed), rng_(seed) {
  cfg_.validate();
  if (prompt.empty()) throw std::invalid_argument("GenerationSession: prompt must be non-empty");
  committed_vectors_ = Matrix(0, table.dim());
  committed_ids_.reserve(prompt.size() + cfg_.max_tokens);
  for (TokenId id : prompt) append_committed(id, table);
  prompt_length_ = prompt.size();
  tail_ = init_tail(cfg_, table.dim(), radius_, rng_);
}

void GenerationSession::append_committed(TokenId id, const EmbeddingTable& table) {
  committed_vectors_.append_row(table.row(id));
  committed_ids_.push_back(id);
}

std::vector<TokenId> GenerationSession::generated() const {
  return {committed_ids_.begin() + static_cast<std::ptrdiff_t>(prompt_length_),
          committed_ids_.end()};
}

void GenerationSession::set_guidance(Scalar s) {
  if (!(s >= 0.0) || !std::isfinite(s)) {
    throw std::invalid_argument("guidance must be finite and >= 0");
  }
  cfg_.guidance = s;
}

TokenId step_once(GenerationSession& s, const Predictor& predictor, const EmbeddingTable& table) {
  if (s.terminated_) throw std::logic_error("step_once: session already terminated");
  const std::size_t K = s.tail_.size();
  if (K > predictor.max_tail()) {
    throw std::invalid_argument("step_once: tail length " + std::to_string(K) +
                                " exceeds model maximum " + std::to_string(predictor.max_tail()));
  }
  const std::size_t front = s.committed_ids_.size();

  auto snapshot = [&](std::size_t updated) {
    if (s.record_history_) s.history_.push_back({s.steps_, front, updated, s.tail_.vectors});
  };

  if (!s.warmed_up_) {
    // Slot j should enter the loop with K-1-j updates already applied.
    for (std::size_t w = 1; w < K; ++w) {
      Matrix pred = tail_predictions(s, predictor);
      TailState next = maturation_step(s.tail_, pred);
      for (std::size_t j = 0; j < K - w; ++j) s.tail_.vectors.set_row(j, next.vectors.row(j));
      snapshot(K - w);
    }
    s.warmed_up_ = true;
  }

  s.tail_ = maturation_step(s.tail_, tail_predictions(s, predictor));
  snapshot(K);

  const TokenId id = commit(s.tail_.vectors.row(0), table);
  s.append_committed(id, table);

  Matrix shifted(K, s.tail_.vectors.cols());
  for (std::size_t j = 1; j < K; ++j) shifted.set_row(j - 1, s.tail_.vectors.row(j));
  shifted.set_row(K - 1, embryo(shifted.cols(), s.cfg_.embryo_fraction * s.radius_, s.rng_));
  s.tail_.vectors = std::move(shifted);
  s.tail_.alphas = alpha_profile(K, s.cfg_.alpha_max);

  ++s.steps_;
  if (s.cfg_.stop_token && id == *s.cfg_.stop_token) s.terminated_ = true;
  return id;
}

std::vector<TokenId> generate(GenerationSession& s, const Predictor& predictor,
                              const EmbeddingTable& table) {
  std::vector<TokenId> out;
  while (!s.finished()) out.push_back(step_once(s, predictor, table));
  return out;
}

void intervene_noise(GenerationSession& s, Scalar magnitude,
                     std::span<const std::size_t> positions, std::mt19937_64& rng) {
  if (!(magnitude >= 0.0) || !std::isfinite(magnitude)) {
    throw std::invalid_argument("intervene_noise: magnitude must be finite and >= 0");
  }
  auto& tail = s.mutable_tail();
  for (std::size_t p : positions) {
    if (p >= tail.size()) {
      throw std::out_of_range("intervene_noise: position " + std::to_string(p) +
                              " outside tail of " + std::to_string(tail.size()));
    }
  }
  if (magnitude == 0.0) return;
  for (std::size_t p : positions) {
    const Vector u = random_direction(tail.vectors.cols(), rng);
    axpy(magnitude, u, tail.vectors.row(p));
  }
}

void intervene_noise(GenerationSession& s, Scalar magnitude,
                     std::span<const std::size_t> positions) {
  intervene_noise(s, magnitude, positions, s.rng());
}

void intervene_ema(GenerationSession& s, Scalar c) {
  if (!(c >= 0.0 && c <= 1.0)) {
    throw std::invalid_argument("intervene_ema: coefficient " + std::to_string(c) +
                                " outside [0, 1]");
  }
  auto& tail = s.mutable_tail();
  if (tail.size() < 2) throw std::invalid_argument("intervene_ema: tail needs >= 2 positions");
  if (c == 0.0) return;
  for (std::size_t j = 1; j < tail.size(); ++j) {
    const auto prev = tail.vectors.row(j - 1);
    auto cur = tail.vectors.row(j);
    for (std::size_t e = 0; e < cur.size(); ++e) cur[e] = c * prev[e] + (1.0 - c) * cur[e];
  }
}

nlohmann::json GenerationSession::to_json() const {
  std::ostringstream rng_state;
  rng_state << rng_;
  nlohmann::json tail_vectors = nlohmann::json::array();
  for (std::size_t j = 0; j < tail_.size(); ++j) {
    const auto r = tail_.vectors.row(j);
    tail_vectors.push_back(std::vector<Scalar>(r.begin(), r.end()));
  }
  return {{"committed_ids", committed_ids_},
          {"prompt_length", prompt_length_},
          {"tail_vectors", tail_vectors},
          {"alphas", tail_.alphas},
          {"config", cfg_},
          {"seed", seed_},
          {"rng_state", rng_state.str()},
          {"step", steps_},
          {"warmed_up", warmed_up_},
          {"terminated", terminated_}};
}

GenerationSession GenerationSession::from_json(const nlohmann::json& j,
                                               const EmbeddingTable& table) {
  GenerationSession s;
  s.cfg_ = j.at("config").get<MaturationConfig>();
  s.cfg_.validate();
  s.radius_ = table.radius();
  s.seed_ = j.at("seed").get<std::uint64_t>();
  std::istringstream rng_state(j.at("rng_state").get<std::string>());
  rng_state >> s.rng_;
  if (!rng_state) throw std::invalid_argument("session snapshot: malformed rng_state");
  s.committed_vectors_ = Matrix(0, table.dim());
  for (TokenId id : j.at("committed_ids").get<std::vector<TokenId>>()) {
    s.append_committed(id, table);
  }
  s.prompt_length_ = j.at("prompt_length").get<std::size_t>();
  if (s.prompt_length_ == 0 || s.prompt_length_ > s.committed_ids_.size()) {
    throw std::invalid_argument("session snapshot: bad prompt_length");
  }
  const auto rows = j.at("tail_vectors").get<std::vector<std::vector<Scalar>>>();
  s.tail_.alphas = j.at("alphas").get<Vector>();
  if (rows.size() != s.cfg_.tail_len || s.tail_.alphas.size() != rows.size()) {
    throw std::invalid_argument("session snapshot: tail size does not match tail_len");
  }
  s.tail_.vectors = Matrix(rows.size(), table.dim());
  for (std::size_t r = 0; r < rows.size(); ++r) s.tail_.vectors.set_row(r, rows[r]);
  s.steps_ = j.at("step").get<std::size_t>();
  s.warmed_up_ = j.at("warmed_up").get<bool>();
  s.terminated_ = j.at("terminated").get<bool>();
  return s;
}

}  // namespace tokmat
