#include <doctest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "../support.hpp"
#include "tokmat/training.hpp"

using namespace tokmat;

TEST_CASE("corrupt_suffix follows a*e + c(1-a)R*u") {
  std::mt19937_64 rng(1);
  const Matrix emb = tmtest::random_matrix(5, 4, rng);
  const CorruptionPlan plan{2, Vector{0.75, 0.25}, 0.1};
  std::mt19937_64 a(9), b(9);
  const auto out = corrupt_suffix(emb, plan, 2.0, a);
  CHECK(out.alphas == Vector{1, 1, 1, 0.75, 0.25});
  for (std::size_t r = 0; r < 3; ++r) CHECK(out.vectors.row(r)[0] == emb(r, 0));
  for (std::size_t j = 0; j < 2; ++j) {
    const Vector u = random_direction(4, b);
    const Scalar al = plan.alphas[j];
    for (std::size_t e = 0; e < 4; ++e) {
      CHECK(out.vectors(3 + j, e) == doctest::Approx(al * emb(3 + j, e) + 0.1 * (1 - al) * 2.0 * u[e]));
    }
  }
  CHECK_THROWS(corrupt_suffix(emb, CorruptionPlan{6, Vector(6, 0.5), 0.1}, 1.0, a));
  CHECK_THROWS(corrupt_suffix(emb, CorruptionPlan{1, Vector{1.5}, 0.1}, 1.0, a));
}

TEST_CASE("mse_loss") {
  Vector g(2);
  CHECK(mse_loss(Vector{1, 2}, Vector{0, 4}, g) == 5.0);
  CHECK(g == Vector{2, -4});
  CHECK_THROWS(mse_loss(Vector{1}, Vector{1, 2}));
}

TEST_CASE("infonce_loss against a direct log-softmax and finite differences") {
  std::mt19937_64 rng(2);
  const auto table = EmbeddingTable::random(11, 5, 1.5, rng);
  const Vector pred = tmtest::random_vector(5, rng);
  const std::vector<TokenId> negs{0, 3, 9, 10};
  LossConfig cfg;
  cfg.logit_scale = 7;
  cfg.tau = 0.5;

  auto cosine = [&](TokenId id) { return dot(pred, table.row(id)) / (norm(pred) * 1.5); };
  Scalar z = std::exp(14 * cosine(4));
  for (TokenId n : negs) z += std::exp(14 * cosine(n));
  CHECK(infonce_loss(pred, 4, negs, table, cfg) == doctest::Approx(-14 * cosine(4) + std::log(z)));

  Vector gp(5, 0.0);
  Matrix gt(11, 5);
  infonce_loss(pred, 4, negs, table, cfg, gp, &gt);
  const Scalar eps = 1e-6;
  for (std::size_t i = 0; i < 5; ++i) {
    Vector up = pred, dn = pred;
    up[i] += eps;
    dn[i] -= eps;
    const Scalar num = (infonce_loss(up, 4, negs, table, cfg) - infonce_loss(dn, 4, negs, table, cfg)) / (2 * eps);
    CHECK(gp[i] == doctest::Approx(num).epsilon(1e-6));
  }
  // table rows: perturb the raw row (the table is rebuilt without renormalising)
  for (TokenId id : {4, 3, 7}) {
    for (std::size_t e = 0; e < 5; ++e) {
      Matrix up = table.vectors(), dn = table.vectors();
      up(id, e) += eps;
      dn(id, e) -= eps;
      // from_stored keeps rows bit-exact; a loose tolerance admits the nudge
      const auto tu = EmbeddingTable::from_stored(up, 1.5, 1e-3), td = EmbeddingTable::from_stored(dn, 1.5, 1e-3);
      const Scalar num = (infonce_loss(pred, 4, negs, tu, cfg) - infonce_loss(pred, 4, negs, td, cfg)) / (2 * eps);
      CHECK(gt(id, e) == doctest::Approx(num).epsilon(1e-6));
    }
  }
  CHECK_THROWS(infonce_loss(pred, 4, std::vector<TokenId>{4}, table, cfg));
  CHECK_THROWS(infonce_loss(pred, 11, negs, table, cfg));
}

TEST_CASE("sample_negatives draws distinct ids other than the positive") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto n = sample_negatives(5, 20, 12, rng);
    CHECK(n.size() == 12);
    const std::set<TokenId> s(n.begin(), n.end());
    CHECK(s.size() == 12);
    CHECK(s.count(5) == 0);
    for (TokenId id : n) CHECK((id >= 0 && id < 20));
  }
  CHECK(sample_negatives(0, 4, 3, rng).size() == 3);
  CHECK_THROWS(sample_negatives(0, 4, 4, rng));
  CHECK_THROWS(sample_negatives(4, 4, 1, rng));
  std::mt19937_64 a(8), b(8);
  CHECK(sample_negatives(1, 100, 10, a) == sample_negatives(1, 100, 10, b));

  // roughly uniform over the allowed ids
  std::vector<int> hits(10, 0);
  for (int i = 0; i < 9000; ++i) hits[static_cast<std::size_t>(sample_negatives(3, 10, 1, rng)[0])]++;
  CHECK(hits[3] == 0);
  for (std::size_t i = 0; i < 10; ++i) {
    if (i != 3) CHECK(std::abs(hits[i] - 1000) < 150);
  }
}

TEST_CASE("batch_loss weights positions by 1 - alpha") {
  std::mt19937_64 rng(4);
  const auto table = EmbeddingTable::random(6, 3, 1.0, rng);
  const Matrix out = tmtest::random_matrix(3, 3, rng);
  const std::vector<TokenId> targets{1, 2, 3};
  const std::vector<std::vector<TokenId>> negs{{0, 4}, {0, 4}, {0, 4}};
  LossConfig cfg;
  cfg.lambda = 0.5;

  auto term = [&](std::size_t t) {
    return mse_loss(out.row(t), table.row(targets[t])) +
           0.5 * infonce_loss(out.row(t), targets[t], negs[t], table, cfg);
  };
  const Vector alphas{1.0, 0.25, 0.0};
  Matrix g;
  const auto lb = batch_loss(out, targets, alphas, negs, table, cfg, &g);
  CHECK(lb.total == doctest::Approx((0.75 * term(1) + 1.0 * term(2)) / 3));
  CHECK(lb.total == doctest::Approx(lb.reg + 0.5 * lb.nce));
  for (std::size_t e = 0; e < 3; ++e) CHECK(g(0, e) == 0.0);

  cfg.loss_weighting = false;
  const auto flat = batch_loss(out, targets, alphas, negs, table, cfg);
  CHECK(flat.total == doctest::Approx((term(0) + term(1) + term(2)) / 3));
  const auto halved = batch_loss(out, targets, alphas, negs, table, cfg, nullptr, nullptr, 6);
  CHECK(halved.total == doctest::Approx(flat.total / 2));
  CHECK_THROWS(batch_loss(out, targets, Vector{1, 1}, negs, table, cfg));
}

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  c.steps = 100;
  c.lr = 1e-3;
  c.lr_min = 1e-4;
  CHECK(learning_rate(c, 0) == doctest::Approx(1e-3));
  CHECK(learning_rate(c, 50) == doctest::Approx(5.5e-4));
  CHECK(learning_rate(c, 100) == doctest::Approx(1e-4));
  c.warmup_steps = 10;
  CHECK(learning_rate(c, 0) == doctest::Approx(1e-4));
  CHECK(learning_rate(c, 9) == doctest::Approx(1e-3));
  CHECK(learning_rate(c, 10) == doctest::Approx(1e-3));
}

TEST_CASE("AdamW step matches the update rule") {
  const BackboneConfig cfg = tmtest::tiny_config();
  std::mt19937_64 rng(5);
  BackboneParams p = BackboneParams::init(cfg, rng);
  const BackboneParams start = p;
  BackboneParams g = p.zeros_like();
  g.in_w(0, 0) = 0.3;
  g.in_b(0, 0) = -2.0;
  TrainConfig tc;
  tc.weight_decay = 0.1;
  AdamW opt(p, tc, std::nullopt);
  opt.step(p, g, nullptr, nullptr, 0.01);
  // first bias-corrected Adam step has magnitude lr; decay only on weight matrices
  CHECK(p.in_w(0, 0) == doctest::Approx(start.in_w(0, 0) - 0.01 * (0.3 / (0.3 + 1e-8) + 0.1 * start.in_w(0, 0))));
  CHECK(p.in_b(0, 0) == doctest::Approx(start.in_b(0, 0) + 0.01));
  CHECK(p.in_w(1, 1) == doctest::Approx(start.in_w(1, 1) * (1 - 0.01 * 0.1)));
  CHECK(p.lnf_g(0, 0) == start.lnf_g(0, 0));
}

TEST_CASE("row_loss gradients, including the embedding table") {
  const BackboneConfig cfg = tmtest::tiny_config();
  std::mt19937_64 rng(6);
  Backbone model(cfg, tmtest::scrambled_params(cfg, rng, 0.2));
  const auto table = EmbeddingTable::random(13, cfg.dim, 1.0, rng);
  TrainConfig tc;
  tc.noise_fraction = 0.3;
  LossConfig lc;
  lc.negatives = 5;
  const PreparedRow row = prepare_row({1, 5, 7, 2, 12, 3}, 3, 0.8, MaskKind::full_causal, tc, lc,
                                      13, cfg.dim, rng);
  BackboneParams g = model.params().zeros_like();
  Matrix tg(13, cfg.dim);
  row_loss(model, table, row, lc, &g, &tg);

  const Scalar eps = 1e-5;
  for (TokenId id : {1, 5, 12, 0}) {
    for (std::size_t e = 0; e < cfg.dim; e += 3) {
      Matrix up = table.vectors(), dn = table.vectors();
      up(id, e) += eps;
      dn(id, e) -= eps;
      const Scalar num = (row_loss(model, EmbeddingTable::from_stored(up, 1.0, 1e-3), row, lc).total -
                          row_loss(model, EmbeddingTable::from_stored(dn, 1.0, 1e-3), row, lc).total) /
                         (2 * eps);
      CHECK(tg(id, e) == doctest::Approx(num).epsilon(1e-5).scale(1e-6));
    }
  }
  Matrix& w = model.mutable_params().layers[1].ff1_w;
  for (std::size_t i = 0; i < w.size(); i += 7) {
    const Scalar orig = w.flat()[i];
    w.flat()[i] = orig + eps;
    const Scalar up = row_loss(model, table, row, lc).total;
    w.flat()[i] = orig - eps;
    const Scalar dn = row_loss(model, table, row, lc).total;
    w.flat()[i] = orig;
    CHECK(g.layers[1].ff1_w.flat()[i] == doctest::Approx((up - dn) / (2 * eps)).epsilon(1e-5).scale(1e-6));
  }
}

TEST_CASE("prepare_row") {
  std::mt19937_64 rng(7);
  TrainConfig tc;
  LossConfig lc;
  lc.negatives = 300;
  const PreparedRow r = prepare_row({1, 2, 3, 4, 5}, 2, 0.6, MaskKind::tail_only, tc, lc, 10, 4, rng);
  CHECK(r.alphas == Vector{1, 1, 1, 0.6, 0.3});
  CHECK(r.negatives.size() == 4);
  // positions whose target is already clean carry no loss and need no negatives
  CHECK(r.negatives[0].empty());
  CHECK(r.negatives[2].size() == 9);
  CHECK(r.negatives[3].size() == 9);
  CHECK(r.mask == MaskKind::tail_only);
  CHECK_THROWS(prepare_row({1, 2}, 2, 0.6, MaskKind::tail_only, tc, lc, 10, 4, rng));
}

TEST_CASE("training reduces the loss on a periodic corpus") {
  BackboneConfig cfg = tmtest::tiny_config();
  cfg.dim = 16;
  cfg.hidden = 16;
  std::mt19937_64 rng(8);
  const auto table = EmbeddingTable::random(6, cfg.dim, 1.0, rng);
  std::vector<TokenId> corpus;
  for (int i = 0; i < 200; ++i) corpus.push_back(i % 6);
  TrainConfig tc;
  tc.steps = 120;
  tc.lr = 3e-3;
  tc.log_every = 40;
  LossConfig lc;
  lc.negatives = 4;
  std::ostringstream log;
  std::vector<std::size_t> saved;
  TrainHooks hooks{&log, [&](std::size_t s, const Backbone&, const EmbeddingTable&) { saved.push_back(s); }};
  tc.checkpoint_every = 50;
  const auto r = train(corpus, Backbone(cfg, BackboneParams::init(cfg, rng)), table, 2, tc, lc, hooks);
  REQUIRE(r.log.size() == 120);
  Scalar first = 0, last = 0;
  for (int i = 0; i < 10; ++i) {
    first += r.log[i].loss.total;
    last += r.log[110 + i].loss.total;
  }
  CHECK(last < 0.5 * first);
  CHECK(saved == std::vector<std::size_t>{50, 100, 120});
  CHECK(log.str().find("step=40 loss=") == 0);
  CHECK(r.table.vectors() == table.vectors());

  tc.steps = 3;
  tc.finetune_embeddings = true;
  const auto ft = train(corpus, Backbone(cfg, BackboneParams::init(cfg, rng)), table, 2, tc, lc);
  CHECK(ft.table.vectors() != table.vectors());
  for (std::size_t i = 0; i < 6; ++i) CHECK(norm(ft.table.vectors().row(i)) == doctest::Approx(1.0));
}

TEST_CASE("training reports divergence and bad setups") {
  const BackboneConfig cfg = tmtest::tiny_config();
  std::mt19937_64 rng(9);
  const auto table = EmbeddingTable::random(6, cfg.dim, 1.0, rng);
  std::vector<TokenId> corpus;
  for (int i = 0; i < 100; ++i) corpus.push_back(i % 6);
  TrainConfig tc;
  tc.steps = 20;
  tc.lr = 1e200;
  tc.lr_min = 1e200;
  LossConfig lc;
  lc.negatives = 3;
  CHECK_THROWS_AS(train(corpus, Backbone(cfg, BackboneParams::init(cfg, rng)), table, 2, tc, lc),
                  TrainingError);
  tc.lr = 1e-3;
  tc.lr_min = 1e-4;
  CHECK_THROWS(train(corpus, Backbone(cfg, BackboneParams::init(cfg, rng)), table, 5, tc, lc));
  CHECK_THROWS(train({}, Backbone(cfg, BackboneParams::init(cfg, rng)), table, 2, tc, lc));
  CHECK_THROWS(train({0, 1, 9}, Backbone(cfg, BackboneParams::init(cfg, rng)), table, 2, tc, lc));
}

TEST_CASE("log line format") {
  TrainLogEntry e{12, {0.5, 0.25, 0.125, 4}, 0.001};
  CHECK(format_log_line(e) == "step=12 loss=0.5 reg=0.25 nce=0.125 lr=0.001");
}
