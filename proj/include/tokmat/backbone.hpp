#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tokmat/tensor.hpp"

namespace tokmat {

struct BackboneConfig {
  std::size_t dim = 64;          // embedding dimension d
  std::size_t hidden = 128;      // transformer width
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t max_seq_len = 64;  // learned positions; also the inference window
  std::size_t max_tail = 16;     // K_max, rows of the FiLM table
  std::size_t alpha_freqs = 16;  // sinusoidal bands for the noise level
  std::size_t ffn_mult = 4;

  void validate() const;
  friend bool operator==(const BackboneConfig&, const BackboneConfig&) = default;
};

enum class MaskKind {
  full_causal,
  // Causal within each block; the last tail_len positions never see the
  // committed history in front of them.
  tail_only,
};

std::string_view to_string(MaskKind m);

struct LayerParams {
  Matrix ln1_g, ln1_b;
  Matrix wq, bq, wk, bk, wv, bv, wo, bo;
  Matrix ln2_g, ln2_b;
  Matrix ff1_w, ff1_b, ff2_w, ff2_b;
};

/// Every learnable tensor of the backbone. Also used as the gradient
/// container: zeros_like() gives a same-shaped accumulator.
struct BackboneParams {
  Matrix in_w, in_b;          // d -> hidden
  Matrix pos;                 // max_seq_len x hidden
  Matrix alpha_w1, alpha_b1;  // 2*alpha_freqs -> hidden
  Matrix alpha_w2, alpha_b2;  // hidden -> hidden
  Matrix film_gamma, film_beta;  // max_tail x hidden, row K-1 used for tail length K
  std::vector<LayerParams> layers;
  Matrix lnf_g, lnf_b;
  Matrix out_w, out_b;        // hidden -> d

  static BackboneParams init(const BackboneConfig& cfg, std::mt19937_64& rng);
  static BackboneParams zeros(const BackboneConfig& cfg);
  BackboneParams zeros_like() const;

  // Visits (stable name, tensor) in a fixed order. Names are the checkpoint keys.
  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  std::size_t parameter_count() const;
  bool all_finite() const;

 private:
  template <typename Self, typename F>
  static void visit(Self& p, F& f) {
    f("backbone.in.w", p.in_w);
    f("backbone.in.b", p.in_b);
    f("backbone.pos", p.pos);
    f("backbone.alpha.w1", p.alpha_w1);
    f("backbone.alpha.b1", p.alpha_b1);
    f("backbone.alpha.w2", p.alpha_w2);
    f("backbone.alpha.b2", p.alpha_b2);
    f("backbone.film.gamma", p.film_gamma);
    f("backbone.film.beta", p.film_beta);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      auto& L = p.layers[l];
      const std::string pre = "backbone.layer" + std::to_string(l) + ".";
      f(pre + "ln1.g", L.ln1_g);
      f(pre + "ln1.b", L.ln1_b);
      f(pre + "attn.wq", L.wq);
      f(pre + "attn.bq", L.bq);
      f(pre + "attn.wk", L.wk);
      f(pre + "attn.bk", L.bk);
      f(pre + "attn.wv", L.wv);
      f(pre + "attn.bv", L.bv);
      f(pre + "attn.wo", L.wo);
      f(pre + "attn.bo", L.bo);
      f(pre + "ln2.g", L.ln2_g);
      f(pre + "ln2.b", L.ln2_b);
      f(pre + "ff.w1", L.ff1_w);
      f(pre + "ff.b1", L.ff1_b);
      f(pre + "ff.w2", L.ff2_w);
      f(pre + "ff.b2", L.ff2_b);
    }
    f("backbone.lnf.g", p.lnf_g);
    f("backbone.lnf.b", p.lnf_b);
    f("backbone.out.w", p.out_w);
    f("backbone.out.b", p.out_b);
  }
};

/// Interleaved [sin(w_0 a), cos(w_0 a), sin(w_1 a), ...] with a geometric
/// frequency ladder w_i = 1000 * 10000^(-i/frequencies).
Vector sin_embed_alpha(Scalar alpha, std::size_t frequencies);
Scalar sin_embed_frequency(std::size_t band, std::size_t frequencies);

/// (1 + gamma) * h + beta, row by row.
Matrix apply_film(const Matrix& hidden, std::span<const Scalar> gamma,
                  std::span<const Scalar> beta);

/// Anything that maps a (committed prefix + tail) sequence to per-position
/// predicted vectors. The trained backbone is one; tests plug in stubs.
class Predictor {
 public:
  virtual ~Predictor() = default;
  virtual Matrix predict(const Matrix& vectors, std::span<const Scalar> alphas,
                         std::size_t tail_len, MaskKind mask) const = 0;
  /// Longest sequence predict() accepts; generation windows to this length.
  virtual std::size_t max_sequence() const = 0;
  virtual std::size_t max_tail() const = 0;
};

struct LayerCache {
  Matrix x_in, ln1_out;
  Vector ln1_mean, ln1_rstd;
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per head, T x T, zero where masked
  Matrix attn;                // concatenated head outputs
  Matrix x_mid, ln2_out;
  Vector ln2_mean, ln2_rstd;
  Matrix ff_pre, ff_act;
};

struct ForwardCache {
  Matrix inputs;
  Vector alphas;
  std::size_t tail_len = 0;
  MaskKind mask = MaskKind::full_causal;
  Matrix sin_emb, alpha_pre, alpha_act;
  Matrix h_cond;  // after alpha conditioning, before FiLM
  std::vector<LayerCache> layers;
  Matrix x_final, lnf_out;
  Vector lnf_mean, lnf_rstd;
};

class Backbone final : public Predictor {
 public:
  Backbone(BackboneConfig cfg, BackboneParams params);

  const BackboneConfig& config() const { return cfg_; }
  const BackboneParams& params() const { return params_; }
  BackboneParams& mutable_params() { return params_; }

  Matrix forward(const Matrix& vectors, std::span<const Scalar> alphas, std::size_t tail_len,
                 MaskKind mask) const;
  Matrix forward(const Matrix& vectors, std::span<const Scalar> alphas, std::size_t tail_len,
                 MaskKind mask, ForwardCache& cache) const;

  /// Accumulates dL/dparams into `grads` and returns dL/dinputs for the
  /// sequence recorded in `cache`.
  Matrix backward(const ForwardCache& cache, const Matrix& upstream,
                  BackboneParams& grads) const;

  Matrix predict(const Matrix& vectors, std::span<const Scalar> alphas, std::size_t tail_len,
                 MaskKind mask) const override {
    return forward(vectors, alphas, tail_len, mask);
  }
  std::size_t max_sequence() const override { return cfg_.max_seq_len; }
  std::size_t max_tail() const override { return cfg_.max_tail; }

 private:
  void check_inputs(const Matrix& vectors, std::span<const Scalar> alphas,
                    std::size_t tail_len) const;

  BackboneConfig cfg_;
  BackboneParams params_;
};

/// True when position `query` may attend to position `key` in a sequence of
/// `length` whose last `tail_len` positions form the tail.
bool attention_allowed(MaskKind mask, std::size_t length, std::size_t tail_len,
                       std::size_t query, std::size_t key);

inline constexpr Scalar kLayerNormEps = 1e-5;

}  // namespace tokmat
