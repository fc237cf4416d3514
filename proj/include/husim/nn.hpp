#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "husim/rng.hpp"
#include "husim/types.hpp"

// Minimal differentiable-computation substrate for the fixed model
// topologies: embeddings, GRU cells, linear maps, softmax cross-entropy,
// diagonal-Gaussian KL, dropout, Adam, finite-difference verification.
// No general autodiff; every backward pass is written against its forward.
namespace husim::nn {

inline constexpr double kInitRange = 0.08;  // uniform [-0.08, 0.08], zero biases

// One trainable tensor with its gradient accumulator. Biases are stored as
// n-by-1 matrices so optimizers and checkpoints treat all parameters alike.
template <typename T>
struct Param {
  std::string name;
  MatrixX<T> value;
  MatrixX<T> grad;

  void resize(const std::string& n, Index rows, Index cols) {
    name = n;
    value.setZero(rows, cols);
    grad.setZero(rows, cols);
  }
};

template <typename T>
void init_uniform(Param<T>& p, Rng& rng, T range = static_cast<T>(kInitRange)) {
  for (Index j = 0; j < p.value.cols(); ++j)
    for (Index i = 0; i < p.value.rows(); ++i)
      p.value(i, j) = static_cast<T>(rng.uniform(-range, range));
}

template <typename T>
void zero_grads(const std::vector<Param<T>*>& params) {
  for (Param<T>* p : params) p->grad.setZero();
}

template <typename T>
VectorX<T> sigmoid(const VectorX<T>& x) {
  return ((-x.array()).exp() + T(1)).inverse().matrix();
}

// ---------------------------------------------------------------------------
// GRU cell. Convention:
//   r  = sigmoid(Wr x + Ur h + br)
//   z  = sigmoid(Wz x + Uz h + bz)
//   c  = tanh(Wc x + Uc (r .* h) + bc)
//   h' = (1 - z) .* h + z .* c
// ---------------------------------------------------------------------------

template <typename T>
struct GruParams {
  Param<T> w_reset, w_update, w_cand;  // state x input
  Param<T> u_reset, u_update, u_cand;  // state x state
  Param<T> b_reset, b_update, b_cand;  // state x 1

  Index input_dim = 0, state_dim = 0;

  void resize(const std::string& prefix, Index input, Index state) {
    input_dim = input;
    state_dim = state;
    w_reset.resize(prefix + ".w_reset", state, input);
    w_update.resize(prefix + ".w_update", state, input);
    w_cand.resize(prefix + ".w_cand", state, input);
    u_reset.resize(prefix + ".u_reset", state, state);
    u_update.resize(prefix + ".u_update", state, state);
    u_cand.resize(prefix + ".u_cand", state, state);
    b_reset.resize(prefix + ".b_reset", state, 1);
    b_update.resize(prefix + ".b_update", state, 1);
    b_cand.resize(prefix + ".b_cand", state, 1);
  }

  void init(Rng& rng) {
    for (Param<T>* p : {&w_reset, &w_update, &w_cand, &u_reset, &u_update, &u_cand})
      init_uniform(*p, rng);
    // biases stay zero
  }

  void collect(std::vector<Param<T>*>& out) {
    for (Param<T>* p : {&w_reset, &w_update, &w_cand, &u_reset, &u_update, &u_cand,
                        &b_reset, &b_update, &b_cand})
      out.push_back(p);
  }
};

template <typename T>
struct GruStepCache {
  VectorX<T> x, h_prev, r, z, c;
};

template <typename T>
VectorX<T> gru_step_cached(const GruParams<T>& p, const VectorX<T>& x,
                           const VectorX<T>& h_prev, GruStepCache<T>* cache) {
  if (x.size() != p.input_dim || h_prev.size() != p.state_dim)
    throw std::invalid_argument("gru_step: shape mismatch");
  const VectorX<T> r = sigmoid<T>(p.w_reset.value * x + p.u_reset.value * h_prev + p.b_reset.value);
  const VectorX<T> z = sigmoid<T>(p.w_update.value * x + p.u_update.value * h_prev + p.b_update.value);
  const VectorX<T> c =
      (p.w_cand.value * x + p.u_cand.value * (r.cwiseProduct(h_prev)) + p.b_cand.value)
          .array()
          .tanh()
          .matrix();
  VectorX<T> h_new = (VectorX<T>::Ones(p.state_dim) - z).cwiseProduct(h_prev) + z.cwiseProduct(c);
  if (cache != nullptr) {
    cache->x = x;
    cache->h_prev = h_prev;
    cache->r = r;
    cache->z = z;
    cache->c = c;
  }
  return h_new;
}

template <typename T>
VectorX<T> gru_step(const GruParams<T>& p, const VectorX<T>& x, const VectorX<T>& h_prev) {
  return gru_step_cached<T>(p, x, h_prev, nullptr);
}

// Accumulates parameter gradients into p's grad buffers and writes the
// gradients w.r.t. the step inputs into dx/dh_prev (assigned, not added).
template <typename T>
void gru_step_backward(GruParams<T>& p, const GruStepCache<T>& cache, const VectorX<T>& dh_new,
                       VectorX<T>* dx, VectorX<T>* dh_prev) {
  const VectorX<T>& r = cache.r;
  const VectorX<T>& z = cache.z;
  const VectorX<T>& c = cache.c;
  const VectorX<T>& h = cache.h_prev;
  const VectorX<T>& x = cache.x;

  const VectorX<T> dz = dh_new.cwiseProduct(c - h);
  const VectorX<T> dc = dh_new.cwiseProduct(z);
  VectorX<T> dh = dh_new.cwiseProduct(VectorX<T>::Ones(h.size()) - z);

  const VectorX<T> da_c = dc.array() * (T(1) - c.array().square());
  p.w_cand.grad.noalias() += da_c * x.transpose();
  p.u_cand.grad.noalias() += da_c * (r.cwiseProduct(h)).transpose();
  p.b_cand.grad.noalias() += da_c;

  const VectorX<T> drh = p.u_cand.value.transpose() * da_c;
  const VectorX<T> dr = drh.cwiseProduct(h);
  dh += drh.cwiseProduct(r);

  const VectorX<T> da_r = dr.array() * r.array() * (T(1) - r.array());
  p.w_reset.grad.noalias() += da_r * x.transpose();
  p.u_reset.grad.noalias() += da_r * h.transpose();
  p.b_reset.grad.noalias() += da_r;

  const VectorX<T> da_z = dz.array() * z.array() * (T(1) - z.array());
  p.w_update.grad.noalias() += da_z * x.transpose();
  p.u_update.grad.noalias() += da_z * h.transpose();
  p.b_update.grad.noalias() += da_z;

  dh.noalias() += p.u_reset.value.transpose() * da_r;
  dh.noalias() += p.u_update.value.transpose() * da_z;

  if (dx != nullptr) {
    *dx = p.w_reset.value.transpose() * da_r;
    dx->noalias() += p.w_update.value.transpose() * da_z;
    dx->noalias() += p.w_cand.value.transpose() * da_c;
  }
  if (dh_prev != nullptr) *dh_prev = std::move(dh);
}

// ---------------------------------------------------------------------------
// Token-sequence encoder: run a GRU over token embeddings, use the average
// of hidden states as the sequence encoding; an optional scalar feature is
// appended to the encoding (dialogue-length conditioning).
// ---------------------------------------------------------------------------

template <typename T>
struct SequenceEncoding {
  std::vector<VectorX<T>> states;
  VectorX<T> encoding;
};

template <typename T>
struct SequenceEncodeCache {
  TokenSequence tokens;
  std::vector<GruStepCache<T>> steps;
};

template <typename T>
SequenceEncoding<T> encode_sequence_cached(const TokenSequence& tokens,
                                           const MatrixX<T>& embeddings, const GruParams<T>& p,
                                           const VectorX<T>& h0,
                                           std::optional<T> extra_feature,
                                           SequenceEncodeCache<T>* cache) {
  if (tokens.empty()) throw std::invalid_argument("encode_sequence: empty token sequence");
  SequenceEncoding<T> out;
  out.states.reserve(tokens.size());
  if (cache != nullptr) {
    cache->tokens = tokens;
    cache->steps.resize(tokens.size());
  }
  VectorX<T> h = h0;
  VectorX<T> mean = VectorX<T>::Zero(p.state_dim);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const TokenId tok = tokens[i];
    if (tok < 0 || tok >= embeddings.cols())
      throw std::invalid_argument("encode_sequence: token id out of range");
    h = gru_step_cached<T>(p, embeddings.col(tok), h, cache ? &cache->steps[i] : nullptr);
    out.states.push_back(h);
    mean += h;
  }
  mean /= static_cast<T>(tokens.size());
  if (extra_feature) {
    out.encoding.resize(p.state_dim + 1);
    out.encoding.head(p.state_dim) = mean;
    out.encoding(p.state_dim) = *extra_feature;
  } else {
    out.encoding = std::move(mean);
  }
  return out;
}

template <typename T>
SequenceEncoding<T> encode_sequence(const TokenSequence& tokens, const MatrixX<T>& embeddings,
                                    const GruParams<T>& p, const VectorX<T>& h0,
                                    std::optional<T> extra_feature = std::nullopt) {
  return encode_sequence_cached<T>(tokens, embeddings, p, h0, extra_feature, nullptr);
}

// d_encoding covers the mean-state part only (a trailing feature component,
// if present, is a constant input). Returns the gradient w.r.t. h0 and
// accumulates into the GRU and embedding gradients.
template <typename T>
VectorX<T> encode_sequence_backward(GruParams<T>& p, Param<T>& embeddings,
                                    const SequenceEncodeCache<T>& cache,
                                    const VectorX<T>& d_encoding) {
  const auto n = static_cast<Index>(cache.tokens.size());
  const VectorX<T> d_mean = d_encoding.head(p.state_dim) / static_cast<T>(n);
  VectorX<T> carry = VectorX<T>::Zero(p.state_dim);
  VectorX<T> dx(p.input_dim);
  for (Index i = n - 1; i >= 0; --i) {
    const VectorX<T> dh = carry + d_mean;
    gru_step_backward(p, cache.steps[static_cast<std::size_t>(i)], dh, &dx, &carry);
    embeddings.grad.col(cache.tokens[static_cast<std::size_t>(i)]) += dx;
  }
  return carry;
}

// ---------------------------------------------------------------------------
// Losses and elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
struct SoftmaxXent {
  T loss;
  VectorX<T> grad;  // softmax - one_hot(target)
};

template <typename T>
SoftmaxXent<T> softmax_xent(const VectorX<T>& logits, Index target) {
  if (target < 0 || target >= logits.size())
    throw std::invalid_argument("softmax_xent: target index out of range");
  if (!logits.allFinite()) throw std::invalid_argument("softmax_xent: non-finite logits");
  const T m = logits.maxCoeff();
  VectorX<T> e = (logits.array() - m).exp().matrix();
  const T z = e.sum();
  SoftmaxXent<T> out;
  out.loss = std::log(z) - (logits(target) - m);
  out.grad = e / z;
  out.grad(target) -= T(1);
  return out;
}

// KL(N(mu_x, diag(var_x)) || N(mu_y, diag(var_y))), in nats.
template <typename T>
T kl_diag_gaussians(const VectorX<T>& mu_x, const VectorX<T>& var_x, const VectorX<T>& mu_y,
                    const VectorX<T>& var_y) {
  if (mu_x.size() != var_x.size() || mu_x.size() != mu_y.size() || mu_x.size() != var_y.size())
    throw std::invalid_argument("kl_diag_gaussians: shape mismatch");
  if ((var_x.array() <= T(0)).any() || (var_y.array() <= T(0)).any())
    throw std::invalid_argument("kl_diag_gaussians: nonpositive variance");
  const ArrayX<T> vx = var_x.array(), vy = var_y.array();
  const ArrayX<T> d = (mu_x - mu_y).array();
  return T(0.5) * ((vy / vx).log() + (vx + d.square()) / vy - T(1)).sum();
}

template <typename T>
struct KlGrads {
  VectorX<T> d_mu_x, d_var_x, d_mu_y, d_var_y;
};

template <typename T>
KlGrads<T> kl_diag_gaussians_backward(const VectorX<T>& mu_x, const VectorX<T>& var_x,
                                      const VectorX<T>& mu_y, const VectorX<T>& var_y,
                                      T scale) {
  const ArrayX<T> vx = var_x.array(), vy = var_y.array();
  const ArrayX<T> d = (mu_x - mu_y).array();
  KlGrads<T> g;
  g.d_mu_x = (scale * d / vy).matrix();
  g.d_mu_y = (-scale * d / vy).matrix();
  g.d_var_x = (scale * T(0.5) * (T(1) / vy - T(1) / vx)).matrix();
  g.d_var_y = (scale * T(0.5) * (T(1) / vy - (vx + d.square()) / vy.square())).matrix();
  return g;
}

// Inverted-scaling dropout; identity at inference. The mask (0 or 1/(1-p))
// is exposed so the backward pass can reuse it.
template <typename T>
VectorX<T> dropout(const VectorX<T>& x, T p, bool training, Rng& rng,
                   VectorX<T>* mask_out = nullptr) {
  if (p < T(0) || p >= T(1)) throw std::invalid_argument("dropout: p must lie in [0,1)");
  if (!training || p == T(0)) {
    if (mask_out != nullptr) *mask_out = VectorX<T>::Ones(x.size());
    return x;
  }
  const T keep_scale = T(1) / (T(1) - p);
  VectorX<T> mask(x.size());
  for (Index i = 0; i < x.size(); ++i)
    mask(i) = rng.uniform() < static_cast<double>(p) ? T(0) : keep_scale;
  if (mask_out != nullptr) *mask_out = mask;
  return x.cwiseProduct(mask);
}

// ---------------------------------------------------------------------------
// Adam with bias correction; gradient clipping by global norm.
// ---------------------------------------------------------------------------

template <typename T>
struct AdamConfig {
  T lr = static_cast<T>(1e-3);
  T beta1 = static_cast<T>(0.9);
  T beta2 = static_cast<T>(0.999);
  T eps = static_cast<T>(1e-8);
};

template <typename T>
class AdamState {
public:
  AdamState() = default;
  AdamState(const std::vector<Param<T>*>& params, AdamConfig<T> config) : config_(config) {
    for (const Param<T>* p : params) {
      m_.push_back(MatrixX<T>::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(MatrixX<T>::Zero(p->value.rows(), p->value.cols()));
    }
  }

  long step() const { return step_; }
  const AdamConfig<T>& config() const { return config_; }

  void update(const std::vector<Param<T>*>& params) {
    if (params.size() != m_.size()) throw std::invalid_argument("adam_update: parameter list changed");
    ++step_;
    const T bc1 = T(1) - std::pow(config_.beta1, static_cast<T>(step_));
    const T bc2 = T(1) - std::pow(config_.beta2, static_cast<T>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Param<T>& p = *params[i];
      if (p.grad.rows() != m_[i].rows() || p.grad.cols() != m_[i].cols())
        throw std::invalid_argument("adam_update: shape mismatch for " + p.name);
      m_[i] = config_.beta1 * m_[i] + (T(1) - config_.beta1) * p.grad;
      v_[i] = config_.beta2 * v_[i].array().matrix() +
              (T(1) - config_.beta2) * p.grad.array().square().matrix();
      const auto m_hat = m_[i].array() / bc1;
      const auto v_hat = v_[i].array() / bc2;
      p.value.array() -= config_.lr * m_hat / (v_hat.sqrt() + config_.eps);
    }
  }

private:
  AdamConfig<T> config_;
  long step_ = 0;
  std::vector<MatrixX<T>> m_, v_;
};

template <typename T>
void adam_update(const std::vector<Param<T>*>& params, AdamState<T>& state) {
  state.update(params);
}

// Scales gradients in place when their global norm exceeds max_norm
// (max_norm <= 0 disables clipping). Returns the pre-clip norm.
template <typename T>
T clip_global_norm(const std::vector<Param<T>*>& params, T max_norm) {
  T sq = T(0);
  for (const Param<T>* p : params) sq += p->grad.squaredNorm();
  const T norm = std::sqrt(sq);
  if (max_norm > T(0) && norm > max_norm) {
    const T s = max_norm / norm;
    for (Param<T>* p : params) p->grad *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification
// ---------------------------------------------------------------------------

// Central-difference check of the analytic gradients already stored in each
// Param's grad buffer, using the fourth-order five-point stencil
// (f(-2h) - 8 f(-h) + 8 f(h) - f(2h)) / 12h so that near-zero coordinates
// stay above the roundoff floor in double precision. loss_fn must be
// deterministic (dropout off, latent draws frozen). Checks at most
// max_coords_per_param coordinates per tensor (all of them when the tensor
// is small enough) and returns
// max |analytic - cd| / max(|analytic|, |cd|, 1e-8).
template <typename T>
T grad_check(const std::function<T()>& loss_fn, const std::vector<Param<T>*>& params, T epsilon,
             Index max_coords_per_param, Rng& rng) {
  T worst = T(0);
  for (Param<T>* p : params) {
    const Index n = p->value.size();
    std::vector<Index> coords;
    if (n <= max_coords_per_param) {
      coords.resize(static_cast<std::size_t>(n));
      for (Index i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    } else {
      for (Index i = 0; i < max_coords_per_param; ++i)
        coords.push_back(rng.uniform_int(0, static_cast<int>(n) - 1));
    }
    for (const Index idx : coords) {
      T* slot = p->value.data() + idx;
      const T saved = *slot;
      const auto eval_at = [&](T offset) {
        *slot = saved + offset;
        const T value = loss_fn();
        if (!std::isfinite(static_cast<double>(value)))
          throw std::runtime_error("grad_check: non-finite loss");
        return value;
      };
      const T f1 = eval_at(epsilon);
      const T fm1 = eval_at(-epsilon);
      const T f2 = eval_at(T(2) * epsilon);
      const T fm2 = eval_at(T(-2) * epsilon);
      *slot = saved;
      const T cd = (fm2 - T(8) * fm1 + T(8) * f1 - f2) / (T(12) * epsilon);
      const T analytic = p->grad(idx);
      const T denom = std::max({std::abs(analytic), std::abs(cd), static_cast<T>(1e-8)});
      worst = std::max(worst, std::abs(analytic - cd) / denom);
    }
  }
  return worst;
}

}  // namespace husim::nn
