#include "tokmat/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <ostream>
#include <sstream>

#include "tokmat/corpus_io.hpp"

namespace tokmat {

void LossConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("LossConfig: " + m); };
  if (!(tau > 0.0)) fail("tau must be > 0");
  if (!(logit_scale > 0.0)) fail("logit_scale must be > 0");
  if (!(lambda >= 0.0)) fail("lambda must be >= 0");
  if (negatives < 1) fail("negatives must be >= 1");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
  if (steps < 1 || batch_size < 1 || grad_accum < 1) {
    fail("steps, batch_size and grad_accum must be positive");
  }
  if (!(lr >= 0.0) || !(lr_min >= 0.0)) fail("learning rates must be >= 0");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
  if (!(grad_clip >= 0.0)) fail("grad_clip must be >= 0");
  if (!(tail_only_fraction >= 0.0 && tail_only_fraction <= 1.0)) {
    fail("tail_only_fraction must be in [0, 1]");
  }
  if (!(alpha_max_lo > 0.0 && alpha_max_lo <= alpha_max_hi && alpha_max_hi <= 1.0)) {
    fail("need 0 < alpha_max_lo <= alpha_max_hi <= 1");
  }
  if (!(noise_fraction >= 0.0 && noise_fraction < 1.0)) fail("noise_fraction must be in [0, 1)");
}

CorruptedSequence corrupt_suffix(const Matrix& embeddings, const CorruptionPlan& plan,
                                 Scalar radius, std::mt19937_64& rng) {
  const std::size_t T = embeddings.rows();
  if (plan.suffix_len > T || plan.alphas.size() != plan.suffix_len) {
    throw std::invalid_argument("corrupt_suffix: plan with suffix " +
                                std::to_string(plan.suffix_len) + " and " +
                                std::to_string(plan.alphas.size()) + " levels for " +
                                std::to_string(T) + " positions");
  }
  for (Scalar a : plan.alphas) {
    if (!(a >= 0.0 && a <= 1.0)) throw std::invalid_argument("corrupt_suffix: alpha outside [0, 1]");
  }
  CorruptedSequence out{embeddings, Vector(T, 1.0)};
  const std::size_t start = T - plan.suffix_len;
  for (std::size_t j = 0; j < plan.suffix_len; ++j) {
    const Scalar a = plan.alphas[j];
    const Vector u = random_direction(embeddings.cols(), rng);
    auto row = out.vectors.row(start + j);
    const Scalar noise = plan.noise_fraction * (1.0 - a) * radius;
    for (std::size_t e = 0; e < row.size(); ++e) row[e] = a * row[e] + noise * u[e];
    out.alphas[start + j] = a;
  }
  return out;
}

Scalar mse_loss(std::span<const Scalar> pred, std::span<const Scalar> target,
                std::span<Scalar> grad) {
  if (pred.size() != target.size()) {
    throw std::invalid_argument("mse_loss: dims " + std::to_string(pred.size()) + " vs " +
                                std::to_string(target.size()));
  }
  Scalar s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const Scalar d = pred[i] - target[i];
    s += d * d;
    if (!grad.empty()) grad[i] = 2.0 * d;
  }
  return s;
}

Scalar infonce_loss(std::span<const Scalar> pred, TokenId positive,
                    std::span<const TokenId> negatives, const EmbeddingTable& table,
                    const LossConfig& cfg, std::span<Scalar> grad_pred, Matrix* grad_table) {
  if (!table.valid_id(positive)) {
    throw std::out_of_range("infonce_loss: positive id " + std::to_string(positive));
  }
  for (TokenId n : negatives) {
    if (!table.valid_id(n)) throw std::out_of_range("infonce_loss: negative id " + std::to_string(n));
    if (n == positive) {
      throw std::invalid_argument("infonce_loss: positive id " + std::to_string(positive) +
                                  " appears among negatives");
    }
  }
  if (pred.size() != table.dim()) throw std::invalid_argument("infonce_loss: dim mismatch");

  const Scalar pn = std::max(norm(pred), 1e-12);
  const Scalar mult = cfg.logit_scale / cfg.tau;
  const std::size_t n = negatives.size() + 1;
  std::vector<TokenId> ids(n);
  ids[0] = positive;
  std::copy(negatives.begin(), negatives.end(), ids.begin() + 1);

  Vector cosines(n), logits(n);
  Scalar mx = -std::numeric_limits<Scalar>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    const auto e = table.row(ids[j]);
    cosines[j] = dot(pred, e) / (pn * norm(e));
    logits[j] = mult * cosines[j];
    mx = std::max(mx, logits[j]);
  }
  Scalar z = 0.0;
  for (std::size_t j = 0; j < n; ++j) z += std::exp(logits[j] - mx);
  const Scalar loss = -(logits[0] - mx) + std::log(z);

  if (!grad_pred.empty() || grad_table) {
    for (std::size_t j = 0; j < n; ++j) {
      const Scalar dl = std::exp(logits[j] - mx) / z - (j == 0 ? 1.0 : 0.0);
      if (dl == 0.0) continue;
      const auto e = table.row(ids[j]);
      const Scalar en = norm(e);
      const Scalar dc = dl * mult;
      if (!grad_pred.empty()) {
        for (std::size_t i = 0; i < pred.size(); ++i) {
          grad_pred[i] += dc * (e[i] / (pn * en) - cosines[j] * pred[i] / (pn * pn));
        }
      }
      if (grad_table) {
        auto g = grad_table->row(static_cast<std::size_t>(ids[j]));
        for (std::size_t i = 0; i < pred.size(); ++i) {
          g[i] += dc * (pred[i] / (pn * en) - cosines[j] * e[i] / (en * en));
        }
      }
    }
  }
  return loss;
}

std::vector<TokenId> sample_negatives(TokenId positive, std::size_t vocab_size, std::size_t count,
                                      std::mt19937_64& rng) {
  if (vocab_size < 2 || count + 1 > vocab_size) {
    throw std::invalid_argument("sample_negatives: " + std::to_string(count) +
                                " negatives requested from a vocabulary of " +
                                std::to_string(vocab_size));
  }
  if (positive < 0 || static_cast<std::size_t>(positive) >= vocab_size) {
    throw std::out_of_range("sample_negatives: positive id " + std::to_string(positive));
  }
  // partial Fisher-Yates over the vocabulary minus the positive
  std::vector<TokenId> pool;
  pool.reserve(vocab_size - 1);
  for (std::size_t i = 0; i < vocab_size; ++i) {
    if (static_cast<TokenId>(i) != positive) pool.push_back(static_cast<TokenId>(i));
  }
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
    std::swap(pool[i], pool[pick(rng)]);
  }
  pool.resize(count);
  return pool;
}

LossBreakdown batch_loss(const Matrix& outputs, std::span<const TokenId> targets,
                         std::span<const Scalar> alphas,
                         std::span<const std::vector<TokenId>> negatives,
                         const EmbeddingTable& table, const LossConfig& cfg, Matrix* grad_outputs,
                         Matrix* grad_table, std::size_t normalizer) {
  const std::size_t P = outputs.rows();
  if (targets.size() != P || alphas.size() != P || negatives.size() != P) {
    throw std::invalid_argument("batch_loss: " + std::to_string(P) + " outputs, " +
                                std::to_string(targets.size()) + " targets, " +
                                std::to_string(alphas.size()) + " alphas, " +
                                std::to_string(negatives.size()) + " negative lists");
  }
  if (outputs.cols() != table.dim()) throw std::invalid_argument("batch_loss: dim mismatch");
  if (grad_outputs) *grad_outputs = Matrix(P, outputs.cols());

  LossBreakdown out;
  out.positions = P;
  if (P == 0) return out;
  const Scalar inv = 1.0 / static_cast<Scalar>(normalizer ? normalizer : P);
  Vector g_reg(outputs.cols()), g_nce(outputs.cols());
  Matrix scratch;
  if (grad_table) scratch = Matrix(grad_table->rows(), grad_table->cols());
  for (std::size_t t = 0; t < P; ++t) {
    const Scalar w = cfg.loss_weighting ? 1.0 - alphas[t] : 1.0;
    if (w == 0.0) continue;
    const auto pred = outputs.row(t);
    const auto target = table.row(targets[t]);
    const Scalar reg = mse_loss(pred, target, g_reg);
    std::fill(g_nce.begin(), g_nce.end(), 0.0);
    const Scalar nce = infonce_loss(pred, targets[t], negatives[t], table, cfg, g_nce,
                                    grad_table ? &scratch : nullptr);
    out.reg += w * reg * inv;
    out.nce += w * nce * inv;
    if (grad_outputs) {
      auto go = grad_outputs->row(t);
      for (std::size_t e = 0; e < go.size(); ++e) {
        go[e] = w * inv * (g_reg[e] + cfg.lambda * g_nce[e]);
      }
    }
    if (grad_table) {
      auto row = grad_table->row(static_cast<std::size_t>(targets[t]));
      for (std::size_t e = 0; e < row.size(); ++e) row[e] -= w * inv * g_reg[e];
      const Scalar s = w * inv * cfg.lambda;
      auto flush = [&](TokenId id) {
        auto src = scratch.row(static_cast<std::size_t>(id));
        axpy(s, src, grad_table->row(static_cast<std::size_t>(id)));
        std::fill(src.begin(), src.end(), 0.0);
      };
      flush(targets[t]);
      for (TokenId n : negatives[t]) flush(n);
    }
  }
  out.total = out.reg + cfg.lambda * out.nce;
  return out;
}

PreparedRow prepare_row(std::vector<TokenId> tokens, std::size_t tail_len, Scalar alpha_max,
                        MaskKind mask, const TrainConfig& tcfg, const LossConfig& lcfg,
                        std::size_t vocab_size, std::size_t dim, std::mt19937_64& rng) {
  const std::size_t T = tokens.size();
  if (tail_len < 1 || tail_len + 1 > T) {
    throw std::invalid_argument("prepare_row: tail length " + std::to_string(tail_len) +
                                " needs a sequence longer than " + std::to_string(T));
  }
  PreparedRow row;
  row.tokens = std::move(tokens);
  row.tail_len = tail_len;
  row.mask = mask;
  row.noise_fraction = tcfg.noise_fraction;
  row.alphas.assign(T, 1.0);
  const Vector profile = [&] {
    Vector a(tail_len);
    for (std::size_t j = 0; j < tail_len; ++j) {
      a[j] = alpha_max * (1.0 - static_cast<Scalar>(j) / static_cast<Scalar>(tail_len));
    }
    return a;
  }();
  row.noise = Matrix(T, dim);
  for (std::size_t j = 0; j < tail_len; ++j) {
    row.alphas[T - tail_len + j] = profile[j];
    row.noise.set_row(T - tail_len + j, random_direction(dim, rng));
  }
  // Vocabularies smaller than the configured count use every other token.
  const std::size_t n_neg = std::min(lcfg.negatives, vocab_size - 1);
  row.negatives.resize(T - 1);
  for (std::size_t t = 0; t + 1 < T; ++t) {
    const bool weighted = !lcfg.loss_weighting || row.alphas[t + 1] < 1.0;
    if (weighted) row.negatives[t] = sample_negatives(row.tokens[t + 1], vocab_size, n_neg, rng);
  }
  return row;
}

LossBreakdown row_loss(const Backbone& model, const EmbeddingTable& table, const PreparedRow& row,
                       const LossConfig& cfg, BackboneParams* grads, Matrix* table_grads,
                       std::size_t normalizer) {
  const std::size_t T = row.tokens.size();
  const std::size_t d = table.dim();
  const Scalar noise_scale = row.noise_fraction * table.radius();
  Matrix inputs(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    const auto e = table.row(row.tokens[t]);
    const Scalar a = row.alphas[t];
    auto x = inputs.row(t);
    const auto u = row.noise.row(t);
    for (std::size_t i = 0; i < d; ++i) x[i] = a * e[i] + noise_scale * (1.0 - a) * u[i];
  }

  ForwardCache cache;
  const Matrix out = model.forward(inputs, row.alphas, row.tail_len, row.mask, cache);
  Matrix shifted(T - 1, d);
  for (std::size_t t = 0; t + 1 < T; ++t) shifted.set_row(t, out.row(t));
  const std::span<const TokenId> targets(row.tokens.data() + 1, T - 1);
  const std::span<const Scalar> target_alphas(row.alphas.data() + 1, T - 1);

  Matrix g_shifted;
  const bool want_grads = grads != nullptr || table_grads != nullptr;
  const LossBreakdown lb =
      batch_loss(shifted, targets, target_alphas, row.negatives, table, cfg,
                 want_grads ? &g_shifted : nullptr, table_grads, normalizer);
  if (!want_grads) return lb;

  Matrix upstream(T, d);
  for (std::size_t t = 0; t + 1 < T; ++t) upstream.set_row(t, g_shifted.row(t));
  BackboneParams scratch;
  BackboneParams& g = grads ? *grads : (scratch = model.params().zeros_like());
  const Matrix d_inputs = model.backward(cache, upstream, g);
  if (table_grads) {
    for (std::size_t t = 0; t < T; ++t) {
      axpy(row.alphas[t], d_inputs.row(t),
           table_grads->row(static_cast<std::size_t>(row.tokens[t])));
    }
  }
  return lb;
}

// --- optimizer --------------------------------------------------------------

namespace {

bool decays(const std::string& name) {
  const auto dot = name.rfind('.');
  const std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
  return !leaf.empty() && leaf[0] == 'w';
}

void adam_update(Matrix& p, const Matrix& g, Matrix& m, Matrix& v, const TrainConfig& cfg,
                 Scalar lr, Scalar bc1, Scalar bc2, Scalar decay) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    const Scalar gi = g.flat()[i];
    Scalar& mi = m.flat()[i];
    Scalar& vi = v.flat()[i];
    mi = cfg.beta1 * mi + (1.0 - cfg.beta1) * gi;
    vi = cfg.beta2 * vi + (1.0 - cfg.beta2) * gi * gi;
    const Scalar mhat = mi / bc1, vhat = vi / bc2;
    Scalar& pi = p.flat()[i];
    pi -= lr * (mhat / (std::sqrt(vhat) + 1e-8) + decay * pi);
  }
}

}  // namespace

AdamW::AdamW(const BackboneParams& like, const TrainConfig& cfg, std::optional<Matrix> table_like)
    : m_(like.zeros_like()), v_(like.zeros_like()), cfg_(cfg) {
  if (table_like) {
    tm_ = Matrix(table_like->rows(), table_like->cols());
    tv_ = Matrix(table_like->rows(), table_like->cols());
  }
}

void AdamW::step(BackboneParams& params, const BackboneParams& grads, Matrix* table,
                 const Matrix* table_grads, Scalar lr) {
  ++t_;
  const Scalar bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<Scalar>(t_));
  const Scalar bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<Scalar>(t_));
  std::vector<Matrix*> ps, ms, vs;
  std::vector<const Matrix*> gs;
  std::vector<std::string> names;
  params.for_each([&](const std::string& n, Matrix& m) {
    ps.push_back(&m);
    names.push_back(n);
  });
  grads.for_each([&](const std::string&, const Matrix& m) { gs.push_back(&m); });
  m_.for_each([&](const std::string&, Matrix& m) { ms.push_back(&m); });
  v_.for_each([&](const std::string&, Matrix& m) { vs.push_back(&m); });
  for (std::size_t i = 0; i < ps.size(); ++i) {
    adam_update(*ps[i], *gs[i], *ms[i], *vs[i], cfg_, lr, bc1, bc2,
                decays(names[i]) ? cfg_.weight_decay : 0.0);
  }
  if (table && table_grads && tm_) adam_update(*table, *table_grads, *tm_, *tv_, cfg_, lr, bc1, bc2, 0.0);
}

Scalar learning_rate(const TrainConfig& cfg, std::size_t step) {
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps) {
    return cfg.lr * static_cast<Scalar>(step + 1) / static_cast<Scalar>(cfg.warmup_steps);
  }
  const std::size_t span = cfg.steps > cfg.warmup_steps ? cfg.steps - cfg.warmup_steps : 1;
  const Scalar progress =
      std::min<Scalar>(1.0, static_cast<Scalar>(step - std::min(step, cfg.warmup_steps)) /
                                static_cast<Scalar>(span));
  const Scalar floor = std::min(cfg.lr_min, cfg.lr);
  return floor + 0.5 * (cfg.lr - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

std::string format_log_line(const TrainLogEntry& e) {
  std::ostringstream s;
  s.precision(6);
  s << "step=" << e.step << " loss=" << e.loss.total << " reg=" << e.loss.reg
    << " nce=" << e.loss.nce << " lr=" << e.lr;
  return s.str();
}

// --- loop ---------------------------------------------------------------------

TrainResult train(const std::vector<TokenId>& corpus, Backbone model, EmbeddingTable table,
                  std::size_t tail_len, const TrainConfig& tcfg, const LossConfig& lcfg,
                  const TrainHooks& hooks) {
  tcfg.validate();
  lcfg.validate();
  if (corpus.empty()) throw std::invalid_argument("train: empty corpus");
  const auto& bcfg = model.config();
  if (tail_len < 1 || tail_len > bcfg.max_tail || tail_len + 1 > bcfg.max_seq_len) {
    throw std::invalid_argument("train: tail length " + std::to_string(tail_len) +
                                " incompatible with the backbone config");
  }
  if (table.dim() != bcfg.dim) throw std::invalid_argument("train: table dim != backbone dim");
  for (TokenId id : corpus) {
    if (!table.valid_id(id)) throw std::invalid_argument("train: corpus id outside the table");
  }

  std::mt19937_64 rng(tcfg.seed);
  const std::size_t window = std::min(bcfg.max_seq_len, corpus.size());
  if (window < tail_len + 1) throw std::invalid_argument("train: corpus shorter than tail + 1");
  BatchIterator batches(corpus, window, tcfg.batch_size, rng());

  const Scalar radius = table.radius();
  Matrix table_raw = table.vectors();
  AdamW opt(model.params(), tcfg,
            tcfg.finetune_embeddings ? std::optional<Matrix>(table_raw) : std::nullopt);
  std::uniform_real_distribution<Scalar> unit(0.0, 1.0);

  TrainResult result{model, table, {}};
  std::vector<PreparedRow> rows;
  for (std::size_t step = 0; step < tcfg.steps; ++step) {
    BackboneParams grads = model.params().zeros_like();
    Matrix table_grads(table.vocab_size(), table.dim());
    Matrix* tg = tcfg.finetune_embeddings ? &table_grads : nullptr;

    rows.clear();
    std::size_t positions = 0;
    for (std::size_t a = 0; a < tcfg.grad_accum; ++a) {
      for (auto& toks : batches.next()) {
        if (tcfg.random_lengths && toks.size() > tail_len + 1) {
          std::uniform_int_distribution<std::size_t> len(tail_len + 1, toks.size());
          toks.resize(len(rng));
        }
        const Scalar amax = tcfg.alpha_max_lo + (tcfg.alpha_max_hi - tcfg.alpha_max_lo) * unit(rng);
        const MaskKind mask =
            unit(rng) < tcfg.tail_only_fraction ? MaskKind::tail_only : MaskKind::full_causal;
        positions += toks.size() - 1;
        rows.push_back(prepare_row(std::move(toks), tail_len, amax, mask, tcfg, lcfg,
                                   table.vocab_size(), table.dim(), rng));
      }
    }

    LossBreakdown sum;
    for (const auto& row : rows) {
      const LossBreakdown lb = row_loss(model, table, row, lcfg, &grads, tg, positions);
      sum.total += lb.total;
      sum.reg += lb.reg;
      sum.nce += lb.nce;
      sum.positions += lb.positions;
    }
    if (!std::isfinite(sum.total) || !grads.all_finite()) {
      throw TrainingError("non-finite loss at step " + std::to_string(step) +
                          ": loss=" + std::to_string(sum.total) + " reg=" +
                          std::to_string(sum.reg) + " nce=" + std::to_string(sum.nce));
    }

    if (tcfg.grad_clip > 0.0) {
      Scalar sq = 0.0;
      grads.for_each([&](const std::string&, const Matrix& m) {
        for (Scalar v : m.flat()) sq += v * v;
      });
      if (tg) for (Scalar v : tg->flat()) sq += v * v;
      const Scalar gn = std::sqrt(sq);
      if (gn > tcfg.grad_clip) {
        const Scalar s = tcfg.grad_clip / gn;
        grads.for_each([&](const std::string&, Matrix& m) {
          for (Scalar& v : m.flat()) v *= s;
        });
        if (tg) for (Scalar& v : tg->flat()) v *= s;
      }
    }

    const Scalar lr = learning_rate(tcfg, step);
    opt.step(model.mutable_params(), grads, tcfg.finetune_embeddings ? &table_raw : nullptr, tg,
             lr);
    if (tcfg.finetune_embeddings) {
      table = EmbeddingTable::from_rows(table_raw, radius);
      table_raw = table.vectors();
    }

    const TrainLogEntry entry{step + 1, sum, lr};
    result.log.push_back(entry);
    if (hooks.log && (tcfg.log_every == 0 || (step + 1) % tcfg.log_every == 0 ||
                      step + 1 == tcfg.steps)) {
      *hooks.log << format_log_line(entry) << '\n';
      hooks.log->flush();
    }
    if (hooks.checkpoint && tcfg.checkpoint_every > 0 && (step + 1) % tcfg.checkpoint_every == 0 &&
        step + 1 != tcfg.steps) {
      hooks.checkpoint(step + 1, model, table);
    }
  }
  if (hooks.checkpoint) hooks.checkpoint(tcfg.steps, model, table);
  result.model = std::move(model);
  result.table = std::move(table);
  return result;
}

}  // namespace tokmat
