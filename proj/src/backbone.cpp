#include "tokmat/backbone.hpp"

#include <algorithm>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "tokmat/kernels.hpp"

namespace tokmat {

using kernels::Accumulate;

void BackboneConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("BackboneConfig: " + m); };
  if (dim < 2) fail("dim must be >= 2");
  if (hidden < 1 || heads < 1) fail("hidden and heads must be positive");
  if (hidden % heads != 0) {
    fail("hidden " + std::to_string(hidden) + " not divisible by heads " + std::to_string(heads));
  }
  if (layers < 1) fail("layers must be >= 1");
  if (max_tail < 1) fail("max_tail must be >= 1");
  if (max_seq_len < 2) fail("max_seq_len must be >= 2");
  if (alpha_freqs < 1) fail("alpha_freqs must be >= 1");
  if (ffn_mult < 1) fail("ffn_mult must be >= 1");
}

std::string_view to_string(MaskKind m) {
  return m == MaskKind::full_causal ? "full_causal" : "tail_only";
}

namespace {

Matrix gaussian(std::size_t r, std::size_t c, Scalar stddev, std::mt19937_64& rng) {
  std::normal_distribution<Scalar> g(0.0, stddev);
  Matrix m(r, c);
  for (auto& v : m.flat()) v = g(rng);
  return m;
}

Matrix ones_row(std::size_t n) { return Matrix(1, n, 1.0); }
Matrix zeros_row(std::size_t n) { return Matrix(1, n, 0.0); }

// y = x W^T + b
void linear(const Matrix& x, const Matrix& w, const Matrix& b, Matrix& y) {
  y = Matrix(x.rows(), w.rows());
  kernels::matmul_nt(x, w, y);
  kernels::add_row_bias(y, b.flat());
}

// Accumulates dW, db and returns dx for y = x W^T + b.
Matrix linear_backward(const Matrix& x, const Matrix& w, const Matrix& dy, Matrix& dw,
                       Matrix& db) {
  kernels::matmul_tn_acc(dy, x, dw);
  kernels::column_sums_acc(dy, db.flat());
  Matrix dx(dy.rows(), w.cols());
  kernels::matmul_nn(dy, w, dx);
  return dx;
}

void layer_norm(const Matrix& x, const Matrix& g, const Matrix& b, Matrix& y, Vector& mean,
                Vector& rstd) {
  const std::size_t n = x.cols();
  y = Matrix(x.rows(), n);
  mean.assign(x.rows(), 0.0);
  rstd.assign(x.rows(), 0.0);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto xr = x.row(r);
    Scalar mu = 0.0;
    for (Scalar v : xr) mu += v;
    mu /= static_cast<Scalar>(n);
    Scalar var = 0.0;
    for (Scalar v : xr) var += (v - mu) * (v - mu);
    var /= static_cast<Scalar>(n);
    const Scalar rs = 1.0 / std::sqrt(var + kLayerNormEps);
    mean[r] = mu;
    rstd[r] = rs;
    auto yr = y.row(r);
    for (std::size_t j = 0; j < n; ++j) yr[j] = (xr[j] - mu) * rs * g(0, j) + b(0, j);
  }
}

Matrix layer_norm_backward(const Matrix& x, const Vector& mean, const Vector& rstd,
                           const Matrix& g, const Matrix& dy, Matrix& dg, Matrix& db) {
  const std::size_t n = x.cols();
  Matrix dx(x.rows(), n);
  Vector xhat(n), dxhat(n);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto xr = x.row(r);
    const auto dyr = dy.row(r);
    Scalar sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      xhat[j] = (xr[j] - mean[r]) * rstd[r];
      dxhat[j] = dyr[j] * g(0, j);
      sum_dxhat += dxhat[j];
      sum_dxhat_xhat += dxhat[j] * xhat[j];
      dg(0, j) += dyr[j] * xhat[j];
      db(0, j) += dyr[j];
    }
    const Scalar inv_n = 1.0 / static_cast<Scalar>(n);
    auto dxr = dx.row(r);
    for (std::size_t j = 0; j < n; ++j) {
      dxr[j] = rstd[r] * (dxhat[j] - sum_dxhat * inv_n - xhat[j] * sum_dxhat_xhat * inv_n);
    }
  }
  return dx;
}

constexpr Scalar kGeluC = 0.7978845608028654;  // sqrt(2/pi)

Scalar gelu(Scalar x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x)));
}

Scalar gelu_grad(Scalar x) {
  const Scalar u = kGeluC * (x + 0.044715 * x * x * x);
  const Scalar t = std::tanh(u);
  const Scalar du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

Scalar silu(Scalar x) { return x / (1.0 + std::exp(-x)); }

Scalar silu_grad(Scalar x) {
  const Scalar s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

}  // namespace

BackboneParams BackboneParams::init(const BackboneConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const std::size_t d = cfg.dim, h = cfg.hidden, f = cfg.hidden * cfg.ffn_mult;
  const std::size_t s = 2 * cfg.alpha_freqs;
  const Scalar inv_h = 1.0 / std::sqrt(static_cast<Scalar>(h));
  const Scalar depth = 1.0 / std::sqrt(2.0 * static_cast<Scalar>(cfg.layers));

  BackboneParams p;
  p.in_w = gaussian(h, d, 1.0, rng);
  p.in_b = zeros_row(h);
  p.pos = gaussian(cfg.max_seq_len, h, 0.1, rng);
  p.alpha_w1 = gaussian(h, s, 1.0 / std::sqrt(static_cast<Scalar>(s)), rng);
  p.alpha_b1 = zeros_row(h);
  p.alpha_w2 = gaussian(h, h, 0.5 * inv_h, rng);
  p.alpha_b2 = zeros_row(h);
  p.film_gamma = Matrix(cfg.max_tail, h);
  p.film_beta = Matrix(cfg.max_tail, h);
  p.layers.resize(cfg.layers);
  for (auto& L : p.layers) {
    L.ln1_g = ones_row(h);
    L.ln1_b = zeros_row(h);
    L.wq = gaussian(h, h, inv_h, rng);
    L.bq = zeros_row(h);
    L.wk = gaussian(h, h, inv_h, rng);
    L.bk = zeros_row(h);
    L.wv = gaussian(h, h, inv_h, rng);
    L.bv = zeros_row(h);
    L.wo = gaussian(h, h, inv_h * depth, rng);
    L.bo = zeros_row(h);
    L.ln2_g = ones_row(h);
    L.ln2_b = zeros_row(h);
    L.ff1_w = gaussian(f, h, inv_h, rng);
    L.ff1_b = zeros_row(f);
    L.ff2_w = gaussian(h, f, depth / std::sqrt(static_cast<Scalar>(f)), rng);
    L.ff2_b = zeros_row(h);
  }
  p.lnf_g = ones_row(h);
  p.lnf_b = zeros_row(h);
  p.out_w = gaussian(d, h, 1.0 / std::sqrt(static_cast<Scalar>(h * d)), rng);
  p.out_b = zeros_row(d);
  return p;
}

BackboneParams BackboneParams::zeros(const BackboneConfig& cfg) {
  std::mt19937_64 rng(0);
  return init(cfg, rng).zeros_like();
}

BackboneParams BackboneParams::zeros_like() const {
  BackboneParams z = *this;
  z.for_each([](const std::string&, Matrix& m) { m.fill(0.0); });
  return z;
}

std::size_t BackboneParams::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Matrix& m) { n += m.size(); });
  return n;
}

bool BackboneParams::all_finite() const {
  bool ok = true;
  for_each([&](const std::string&, const Matrix& m) { ok = ok && tokmat::all_finite(m.flat()); });
  return ok;
}

Scalar sin_embed_frequency(std::size_t band, std::size_t frequencies) {
  return 1000.0 * std::exp(-std::log(10000.0) * static_cast<Scalar>(band) /
                           static_cast<Scalar>(frequencies));
}

Vector sin_embed_alpha(Scalar alpha, std::size_t frequencies) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw std::invalid_argument("sin_embed_alpha: alpha " + std::to_string(alpha) +
                                " outside [0, 1]");
  }
  Vector out(2 * frequencies);
  for (std::size_t i = 0; i < frequencies; ++i) {
    const Scalar w = sin_embed_frequency(i, frequencies);
    out[2 * i] = std::sin(w * alpha);
    out[2 * i + 1] = std::cos(w * alpha);
  }
  return out;
}

Matrix apply_film(const Matrix& hidden, std::span<const Scalar> gamma,
                  std::span<const Scalar> beta) {
  if (gamma.size() != hidden.cols() || beta.size() != hidden.cols()) {
    throw std::invalid_argument("apply_film: hidden width " + std::to_string(hidden.cols()) +
                                ", gamma " + std::to_string(gamma.size()) + ", beta " +
                                std::to_string(beta.size()));
  }
  Matrix out(hidden.rows(), hidden.cols());
  for (std::size_t r = 0; r < hidden.rows(); ++r) {
    const auto h = hidden.row(r);
    auto o = out.row(r);
    for (std::size_t j = 0; j < h.size(); ++j) o[j] = (1.0 + gamma[j]) * h[j] + beta[j];
  }
  return out;
}

bool attention_allowed(MaskKind mask, std::size_t length, std::size_t tail_len,
                       std::size_t query, std::size_t key) {
  if (key > query) return false;
  if (mask == MaskKind::full_causal) return true;
  const std::size_t tail_start = length - tail_len;
  return (query >= tail_start) == (key >= tail_start);
}

Backbone::Backbone(BackboneConfig cfg, BackboneParams params)
    : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  if (params_.layers.size() != cfg_.layers || params_.in_w.rows() != cfg_.hidden ||
      params_.in_w.cols() != cfg_.dim || params_.film_gamma.rows() != cfg_.max_tail ||
      params_.pos.rows() != cfg_.max_seq_len || params_.alpha_w1.cols() != 2 * cfg_.alpha_freqs ||
      params_.out_w.rows() != cfg_.dim) {
    throw std::invalid_argument("Backbone: parameters do not match config");
  }
}

void Backbone::check_inputs(const Matrix& vectors, std::span<const Scalar> alphas,
                            std::size_t tail_len) const {
  const std::size_t t = vectors.rows();
  if (t == 0 || t > cfg_.max_seq_len) {
    throw std::invalid_argument("Backbone: sequence length " + std::to_string(t) +
                                " outside [1, " + std::to_string(cfg_.max_seq_len) + "]");
  }
  if (vectors.cols() != cfg_.dim) {
    throw std::invalid_argument("Backbone: input dim " + std::to_string(vectors.cols()) +
                                " != " + std::to_string(cfg_.dim));
  }
  if (alphas.size() != t) {
    throw std::invalid_argument("Backbone: " + std::to_string(alphas.size()) +
                                " alphas for " + std::to_string(t) + " positions");
  }
  if (tail_len < 1 || tail_len > cfg_.max_tail) {
    throw std::invalid_argument("Backbone: tail length " + std::to_string(tail_len) +
                                " outside [1, " + std::to_string(cfg_.max_tail) + "]");
  }
  if (tail_len > t) {
    throw std::invalid_argument("Backbone: tail length " + std::to_string(tail_len) +
                                " exceeds sequence length " + std::to_string(t));
  }
}

Matrix Backbone::forward(const Matrix& vectors, std::span<const Scalar> alphas,
                         std::size_t tail_len, MaskKind mask) const {
  ForwardCache cache;
  return forward(vectors, alphas, tail_len, mask, cache);
}

Matrix Backbone::forward(const Matrix& vectors, std::span<const Scalar> alphas,
                         std::size_t tail_len, MaskKind mask, ForwardCache& c) const {
  check_inputs(vectors, alphas, tail_len);
  const auto& p = params_;
  const std::size_t T = vectors.rows(), H = cfg_.hidden, nh = cfg_.heads, hd = H / nh;
  const Scalar scale = 1.0 / std::sqrt(static_cast<Scalar>(hd));

  c.inputs = vectors;
  c.alphas.assign(alphas.begin(), alphas.end());
  c.tail_len = tail_len;
  c.mask = mask;

  Matrix h;
  linear(vectors, p.in_w, p.in_b, h);
  for (std::size_t t = 0; t < T; ++t) axpy(1.0, p.pos.row(t), h.row(t));

  c.sin_emb = Matrix(T, 2 * cfg_.alpha_freqs);
  for (std::size_t t = 0; t < T; ++t) c.sin_emb.set_row(t, sin_embed_alpha(alphas[t], cfg_.alpha_freqs));
  linear(c.sin_emb, p.alpha_w1, p.alpha_b1, c.alpha_pre);
  c.alpha_act = c.alpha_pre;
  for (auto& v : c.alpha_act.flat()) v = silu(v);
  Matrix alpha_out;
  linear(c.alpha_act, p.alpha_w2, p.alpha_b2, alpha_out);
  for (std::size_t i = 0; i < h.size(); ++i) h.flat()[i] += alpha_out.flat()[i];
  c.h_cond = h;

  Matrix x = apply_film(h, p.film_gamma.row(tail_len - 1), p.film_beta.row(tail_len - 1));

  c.layers.resize(cfg_.layers);
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const auto& L = p.layers[l];
    auto& lc = c.layers[l];
    lc.x_in = x;
    layer_norm(x, L.ln1_g, L.ln1_b, lc.ln1_out, lc.ln1_mean, lc.ln1_rstd);
    linear(lc.ln1_out, L.wq, L.bq, lc.q);
    linear(lc.ln1_out, L.wk, L.bk, lc.k);
    linear(lc.ln1_out, L.wv, L.bv, lc.v);

    lc.probs.assign(nh, Matrix(T, T));
    lc.attn = Matrix(T, H);
    const long long nheads = static_cast<long long>(nh);
#pragma omp parallel for schedule(static) if (T * T * H > (1u << 14))
    for (long long hh = 0; hh < nheads; ++hh) {
      const std::size_t off = static_cast<std::size_t>(hh) * hd;
      Matrix& P = lc.probs[static_cast<std::size_t>(hh)];
      for (std::size_t i = 0; i < T; ++i) {
        Scalar mx = -std::numeric_limits<Scalar>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          if (!attention_allowed(mask, T, tail_len, i, j)) continue;
          Scalar s = 0.0;
          for (std::size_t e = 0; e < hd; ++e) s += lc.q(i, off + e) * lc.k(j, off + e);
          P(i, j) = s * scale;
          mx = std::max(mx, P(i, j));
        }
        Scalar z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          if (!attention_allowed(mask, T, tail_len, i, j)) continue;
          P(i, j) = std::exp(P(i, j) - mx);
          z += P(i, j);
        }
        for (std::size_t j = 0; j <= i; ++j) {
          if (!attention_allowed(mask, T, tail_len, i, j)) continue;
          P(i, j) /= z;
          const Scalar w = P(i, j);
          for (std::size_t e = 0; e < hd; ++e) lc.attn(i, off + e) += w * lc.v(j, off + e);
        }
      }
    }

    Matrix o;
    linear(lc.attn, L.wo, L.bo, o);
    lc.x_mid = x;
    for (std::size_t i = 0; i < x.size(); ++i) lc.x_mid.flat()[i] += o.flat()[i];

    layer_norm(lc.x_mid, L.ln2_g, L.ln2_b, lc.ln2_out, lc.ln2_mean, lc.ln2_rstd);
    linear(lc.ln2_out, L.ff1_w, L.ff1_b, lc.ff_pre);
    lc.ff_act = lc.ff_pre;
    for (auto& v : lc.ff_act.flat()) v = gelu(v);
    Matrix f;
    linear(lc.ff_act, L.ff2_w, L.ff2_b, f);
    x = lc.x_mid;
    for (std::size_t i = 0; i < x.size(); ++i) x.flat()[i] += f.flat()[i];
  }

  c.x_final = x;
  layer_norm(x, p.lnf_g, p.lnf_b, c.lnf_out, c.lnf_mean, c.lnf_rstd);
  Matrix out;
  linear(c.lnf_out, p.out_w, p.out_b, out);
  return out;
}

Matrix Backbone::backward(const ForwardCache& c, const Matrix& upstream,
                          BackboneParams& g) const {
  const auto& p = params_;
  const std::size_t T = c.inputs.rows(), H = cfg_.hidden, nh = cfg_.heads, hd = H / nh;
  if (upstream.rows() != T || upstream.cols() != cfg_.dim) {
    throw std::invalid_argument("Backbone::backward: upstream " + shape_string(upstream) +
                                " for sequence of " + std::to_string(T));
  }
  const Scalar scale = 1.0 / std::sqrt(static_cast<Scalar>(hd));

  Matrix dy = linear_backward(c.lnf_out, p.out_w, upstream, g.out_w, g.out_b);
  Matrix dx = layer_norm_backward(c.x_final, c.lnf_mean, c.lnf_rstd, p.lnf_g, dy, g.lnf_g, g.lnf_b);

  for (std::size_t li = cfg_.layers; li-- > 0;) {
    const auto& L = p.layers[li];
    auto& G = g.layers[li];
    const auto& lc = c.layers[li];

    // feed-forward branch
    Matrix d_act = linear_backward(lc.ff_act, L.ff2_w, dx, G.ff2_w, G.ff2_b);
    for (std::size_t i = 0; i < d_act.size(); ++i) d_act.flat()[i] *= gelu_grad(lc.ff_pre.flat()[i]);
    Matrix d_ln2 = linear_backward(lc.ln2_out, L.ff1_w, d_act, G.ff1_w, G.ff1_b);
    Matrix d_mid = layer_norm_backward(lc.x_mid, lc.ln2_mean, lc.ln2_rstd, L.ln2_g, d_ln2,
                                       G.ln2_g, G.ln2_b);
    for (std::size_t i = 0; i < d_mid.size(); ++i) d_mid.flat()[i] += dx.flat()[i];

    // attention branch
    Matrix d_attn = linear_backward(lc.attn, L.wo, d_mid, G.wo, G.bo);
    Matrix dq(T, H), dk(T, H), dv(T, H);
    const long long nheads = static_cast<long long>(nh);
#pragma omp parallel for schedule(static) if (T * T * H > (1u << 14))
    for (long long hh = 0; hh < nheads; ++hh) {
      const std::size_t off = static_cast<std::size_t>(hh) * hd;
      const Matrix& P = lc.probs[static_cast<std::size_t>(hh)];
      Vector dp(T);
      for (std::size_t i = 0; i < T; ++i) {
        Scalar row_dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          if (!attention_allowed(c.mask, T, c.tail_len, i, j)) {
            dp[j] = 0.0;
            continue;
          }
          Scalar s = 0.0;
          for (std::size_t e = 0; e < hd; ++e) s += d_attn(i, off + e) * lc.v(j, off + e);
          dp[j] = s;
          row_dot += s * P(i, j);
          for (std::size_t e = 0; e < hd; ++e) dv(j, off + e) += P(i, j) * d_attn(i, off + e);
        }
        for (std::size_t j = 0; j <= i; ++j) {
          if (!attention_allowed(c.mask, T, c.tail_len, i, j)) continue;
          const Scalar ds = P(i, j) * (dp[j] - row_dot) * scale;
          for (std::size_t e = 0; e < hd; ++e) {
            dq(i, off + e) += ds * lc.k(j, off + e);
            dk(j, off + e) += ds * lc.q(i, off + e);
          }
        }
      }
    }
    Matrix d_ln1 = linear_backward(lc.ln1_out, L.wq, dq, G.wq, G.bq);
    Matrix tmp = linear_backward(lc.ln1_out, L.wk, dk, G.wk, G.bk);
    for (std::size_t i = 0; i < tmp.size(); ++i) d_ln1.flat()[i] += tmp.flat()[i];
    tmp = linear_backward(lc.ln1_out, L.wv, dv, G.wv, G.bv);
    for (std::size_t i = 0; i < tmp.size(); ++i) d_ln1.flat()[i] += tmp.flat()[i];
    Matrix d_in = layer_norm_backward(lc.x_in, lc.ln1_mean, lc.ln1_rstd, L.ln1_g, d_ln1, G.ln1_g,
                                      G.ln1_b);
    for (std::size_t i = 0; i < d_in.size(); ++i) d_in.flat()[i] += d_mid.flat()[i];
    dx = std::move(d_in);
  }

  // FiLM
  const std::size_t krow = c.tail_len - 1;
  const auto gamma = p.film_gamma.row(krow);
  auto g_gamma = g.film_gamma.row(krow);
  auto g_beta = g.film_beta.row(krow);
  Matrix dh(T, H);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t j = 0; j < H; ++j) {
      const Scalar d = dx(t, j);
      g_gamma[j] += d * c.h_cond(t, j);
      g_beta[j] += d;
      dh(t, j) = d * (1.0 + gamma[j]);
    }
  }

  // alpha conditioning
  Matrix d_alpha_act = linear_backward(c.alpha_act, p.alpha_w2, dh, g.alpha_w2, g.alpha_b2);
  for (std::size_t i = 0; i < d_alpha_act.size(); ++i) {
    d_alpha_act.flat()[i] *= silu_grad(c.alpha_pre.flat()[i]);
  }
  kernels::matmul_tn_acc(d_alpha_act, c.sin_emb, g.alpha_w1);
  kernels::column_sums_acc(d_alpha_act, g.alpha_b1.flat());

  for (std::size_t t = 0; t < T; ++t) axpy(1.0, dh.row(t), g.pos.row(t));
  return linear_backward(c.inputs, p.in_w, dh, g.in_w, g.in_b);
}

}  // namespace tokmat
