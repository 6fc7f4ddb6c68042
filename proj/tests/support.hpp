#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "tokmat/backbone.hpp"
#include "tokmat/embedding_space.hpp"
#include "tokmat/tensor.hpp"

namespace tmtest {

using namespace tokmat;

inline Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, Scalar sd = 1.0) {
  std::normal_distribution<Scalar> g(0.0, sd);
  Matrix m(r, c);
  for (auto& v : m.flat()) v = g(rng);
  return m;
}

inline Vector random_vector(std::size_t n, std::mt19937_64& rng, Scalar sd = 1.0) {
  std::normal_distribution<Scalar> g(0.0, sd);
  Vector v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

inline Scalar rel_diff(const Matrix& a, const Matrix& b) {
  Scalar num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a.flat()[i] - b.flat()[i]));
    den = std::max(den, std::abs(b.flat()[i]));
  }
  return num / std::max(den, 1e-300);
}

inline BackboneConfig tiny_config() {
  BackboneConfig c;
  c.dim = 8;
  c.hidden = 8;
  c.layers = 2;
  c.heads = 2;
  c.max_seq_len = 12;
  c.max_tail = 4;
  c.alpha_freqs = 4;
  c.ffn_mult = 2;
  return c;
}

// Randomises every tensor, including the zero-initialised FiLM table, biases
// and LayerNorm gains, so no term of the network is trivially the identity.
inline BackboneParams scrambled_params(const BackboneConfig& cfg, std::mt19937_64& rng,
                                       Scalar sd = 0.3) {
  BackboneParams p = BackboneParams::init(cfg, rng);
  std::normal_distribution<Scalar> g(0.0, sd);
  p.for_each([&](const std::string& name, Matrix& m) {
    const bool gain = name.ends_with(".g");
    for (auto& v : m.flat()) v = gain ? 1.0 + g(rng) : v + g(rng) * 0.5;
  });
  return p;
}

/// Predicts the same vector at every position.
class ConstantPredictor final : public Predictor {
 public:
  ConstantPredictor(Vector target, std::size_t max_seq, std::size_t max_tail)
      : target_(std::move(target)), max_seq_(max_seq), max_tail_(max_tail) {}
  Matrix predict(const Matrix& vectors, std::span<const Scalar>, std::size_t,
                 MaskKind) const override {
    Matrix out(vectors.rows(), target_.size());
    for (std::size_t r = 0; r < out.rows(); ++r) out.set_row(r, target_);
    return out;
  }
  std::size_t max_sequence() const override { return max_seq_; }
  std::size_t max_tail() const override { return max_tail_; }

 private:
  Vector target_;
  std::size_t max_seq_, max_tail_;
};

/// Conditional pass returns `cond`, tail-only pass returns `uncond`.
class TwoWayPredictor final : public Predictor {
 public:
  TwoWayPredictor(Vector cond, Vector uncond, std::size_t max_seq, std::size_t max_tail)
      : cond_(std::move(cond)), uncond_(std::move(uncond)), max_seq_(max_seq), max_tail_(max_tail) {}
  Matrix predict(const Matrix& vectors, std::span<const Scalar>, std::size_t,
                 MaskKind mask) const override {
    const Vector& v = mask == MaskKind::full_causal ? cond_ : uncond_;
    Matrix out(vectors.rows(), v.size());
    for (std::size_t r = 0; r < out.rows(); ++r) out.set_row(r, v);
    return out;
  }
  std::size_t max_sequence() const override { return max_seq_; }
  std::size_t max_tail() const override { return max_tail_; }

 private:
  Vector cond_, uncond_;
  std::size_t max_seq_, max_tail_;
};

}  // namespace tmtest
