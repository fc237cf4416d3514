#pragma once

#include <array>
#include <cmath>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "husim/acts.hpp"
#include "husim/corpus.hpp"
#include "husim/nn.hpp"
#include "husim/rng.hpp"
#include "husim/types.hpp"

// The four hierarchical user-simulator variants, their losses, the training
// loop, and incremental turn-by-turn inference sessions.
//
// Shared structure: a goal encoder and a turn-shared system-turn encoder
// produce mean-state encodings; a dialogue-level GRU consumes the system
// turn encodings (dialogue-length feature appended) and the user turn is
// decoded from the dialogue state. Variants differ in the dialogue RNN
// initial state, the decoder-init blend, a latent Gaussian step, and
// bag-of-words regularization heads.
namespace husim::sim {

enum class Variant { Hus, Vhus, HusReg, VhusReg };

inline constexpr std::array<Variant, 4> kVariants = {Variant::Hus, Variant::Vhus,
                                                     Variant::HusReg, Variant::VhusReg};

const std::string& to_string(Variant v);
std::optional<Variant> variant_from_string(const std::string& s);

inline bool has_variational(Variant v) { return v == Variant::Vhus || v == Variant::VhusReg; }
inline bool has_goal_reg(Variant v) { return v == Variant::HusReg || v == Variant::VhusReg; }

// Token ids fixed by vocabulary construction.
inline constexpr TokenId kSosId = 0;
inline constexpr TokenId kEosId = 1;

struct TrainConfig {
  int embedding_dim = 150;
  int state_dim = 200;
  int latent_dim = 50;
  double lr = 1e-3;
  double dropout = 0.5;
  int batch_size = 32;
  int epochs = 10;
  double alpha = 0.1;  // weight of the KL term
  int max_decode_len = 42;
  double clip_norm = 5.0;  // global gradient norm; <= 0 disables clipping
  double validation_fraction = 0.1;
  std::uint64_t seed = 0;

  std::string to_json_text() const;
  static TrainConfig from_json_text(const std::string& text);
};

// Dialogue-length conditioning: round(N(5,2)) clamped to [1,20]; the value
// is fed to encoders as length/20.
int length_from_raw(double raw);
int sample_dialogue_length(Rng& rng);
inline double length_feature(int total_turns) { return static_cast<double>(total_turns) / 20.0; }

// ---------------------------------------------------------------------------
// Model parameters
// ---------------------------------------------------------------------------

template <typename T>
struct LinearT {
  nn::Param<T> weight;  // out x in
  nn::Param<T> bias;    // out x 1

  void resize(const std::string& prefix, Index out, Index in) {
    weight.resize(prefix + ".weight", out, in);
    bias.resize(prefix + ".bias", out, 1);
  }
  void init(Rng& rng) { nn::init_uniform(weight, rng); }
  void collect(std::vector<nn::Param<T>*>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }
  bool empty() const { return weight.value.size() == 0; }

  VectorX<T> apply(const VectorX<T>& x) const { return weight.value * x + bias.value.col(0); }

  // Accumulates parameter grads, returns the input gradient.
  VectorX<T> backward(const VectorX<T>& x, const VectorX<T>& dy) {
    weight.grad.noalias() += dy * x.transpose();
    bias.grad.col(0) += dy;
    return weight.value.transpose() * dy;
  }
};

template <typename T>
struct ModelT {
  Variant variant = Variant::Hus;
  int vocab_size = 0;
  int embedding_dim = 0;
  int state_dim = 0;
  int latent_dim = 0;

  nn::Param<T> embeddings;            // emb x V, shared by encoders and decoder
  nn::GruParams<T> goal_encoder;      // emb -> state
  nn::GruParams<T> system_encoder;    // emb -> state, shared across turns
  nn::GruParams<T> dialogue_encoder;  // (state + 1) -> state
  nn::GruParams<T> decoder;           // emb -> state
  LinearT<T> output_proj;             // state -> emb; logits_j = e_j . (W h + b)

  // latent step (Vhus / VhusReg)
  LinearT<T> prior_mean, prior_logvar;          // state -> latent, from h^D_{t-1}
  LinearT<T> posterior_mean, posterior_logvar;  // state -> latent, from h^D_t

  // decoder-init blend, tanh activated; input depends on the variant:
  //   Vhus [h^D; z], HusReg [h^D; h^C], VhusReg [h^D; h^C; z]
  LinearT<T> blend;

  // bag-of-words heads (HusReg / VhusReg), sigmoid outputs over V
  LinearT<T> bow_dialogue;  // state -> V, approximates BOW of the user turn
  LinearT<T> bow_system;    // state+1 -> V, approximates BOW of the system turn
  LinearT<T> bow_user;      // 2V -> V, approximates BOW of the goal

  static ModelT create(Variant variant, int vocab_size, const TrainConfig& config, Rng& rng) {
    ModelT m;
    m.variant = variant;
    m.vocab_size = vocab_size;
    m.embedding_dim = config.embedding_dim;
    m.state_dim = config.state_dim;
    m.latent_dim = config.latent_dim;

    m.embeddings.resize("embeddings", config.embedding_dim, vocab_size);
    nn::init_uniform(m.embeddings, rng);
    m.goal_encoder.resize("goal_encoder", config.embedding_dim, config.state_dim);
    m.system_encoder.resize("system_encoder", config.embedding_dim, config.state_dim);
    m.dialogue_encoder.resize("dialogue_encoder", config.state_dim + 1, config.state_dim);
    m.decoder.resize("decoder", config.embedding_dim, config.state_dim);
    for (auto* g : {&m.goal_encoder, &m.system_encoder, &m.dialogue_encoder, &m.decoder})
      g->init(rng);
    m.output_proj.resize("output_proj", config.embedding_dim, config.state_dim);
    m.output_proj.init(rng);

    if (has_variational(variant)) {
      m.prior_mean.resize("variational.prior_mean", config.latent_dim, config.state_dim);
      m.prior_logvar.resize("variational.prior_logvar", config.latent_dim, config.state_dim);
      m.posterior_mean.resize("variational.posterior_mean", config.latent_dim, config.state_dim);
      m.posterior_logvar.resize("variational.posterior_logvar", config.latent_dim,
                                config.state_dim);
      for (auto* l : {&m.prior_mean, &m.prior_logvar, &m.posterior_mean, &m.posterior_logvar})
        l->init(rng);
    }
    Index blend_in = 0;
    if (variant == Variant::Vhus) blend_in = config.state_dim + config.latent_dim;
    if (variant == Variant::HusReg) blend_in = 2 * config.state_dim;
    if (variant == Variant::VhusReg) blend_in = 2 * config.state_dim + config.latent_dim;
    if (blend_in > 0) {
      m.blend.resize("blend", config.state_dim, blend_in);
      m.blend.init(rng);
    }
    if (has_goal_reg(variant)) {
      m.bow_dialogue.resize("reg.bow_dialogue", vocab_size, config.state_dim);
      m.bow_system.resize("reg.bow_system", vocab_size, config.state_dim + 1);
      m.bow_user.resize("reg.bow_user", vocab_size, 2 * vocab_size);
      for (auto* l : {&m.bow_dialogue, &m.bow_system, &m.bow_user}) l->init(rng);
    }
    return m;
  }

  std::vector<nn::Param<T>*> params() {
    std::vector<nn::Param<T>*> out;
    out.push_back(&embeddings);
    goal_encoder.collect(out);
    system_encoder.collect(out);
    dialogue_encoder.collect(out);
    decoder.collect(out);
    output_proj.collect(out);
    if (has_variational(variant)) {
      prior_mean.collect(out);
      prior_logvar.collect(out);
      posterior_mean.collect(out);
      posterior_logvar.collect(out);
    }
    if (!blend.empty()) blend.collect(out);
    if (has_goal_reg(variant)) {
      bow_dialogue.collect(out);
      bow_system.collect(out);
      bow_user.collect(out);
    }
    return out;
  }
};

using Model = ModelT<Real>;

// ---------------------------------------------------------------------------
// Training examples
// ---------------------------------------------------------------------------

// Tokenized (C, S_1..t, U_1..t) triplet plus the dialogue-length feature
// (true length during training, sampled at test time).
struct DialogueExample {
  TokenSequence goal_tokens;
  std::vector<TokenSequence> system_turns;
  std::vector<TokenSequence> user_turns;
  double length_feature = 0.0;
};

DialogueExample make_example(const corpus::Dialogue& dialogue, const acts::Vocabulary& vocab,
                             const acts::Schema& schema);
std::vector<DialogueExample> make_examples(const std::vector<corpus::Dialogue>& dialogues,
                                           const acts::Vocabulary& vocab,
                                           const acts::Schema& schema);

template <typename T>
VectorX<T> multihot(const TokenSequence& tokens, int vocab_size) {
  VectorX<T> out = VectorX<T>::Zero(vocab_size);
  for (const TokenId t : tokens) out(t) = T(1);
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

enum class LatentMode {
  PosteriorSample,  // z = mu_y + sigma_y .* eps (training)
  PosteriorMean,    // z = mu_y (deterministic evaluation)
  PriorSample,      // z = mu_x + sigma_x .* eps (interactive inference)
};

template <typename T>
struct ForwardOptions {
  T dropout_p = T(0);
  Rng* dropout_rng = nullptr;
  LatentMode latent = LatentMode::PosteriorSample;
  Rng* latent_rng = nullptr;
  // Frozen per-turn noise for gradient checks; overrides latent_rng.
  const std::vector<VectorX<T>>* fixed_eps = nullptr;
  T alpha = T(0.1);
  // When set, per-turn per-step decoder logits are collected here.
  std::vector<std::vector<VectorX<T>>>* collect_logits = nullptr;
};

template <typename T>
struct ForwardStats {
  T loss = T(0);  // xent + alpha * kl + reg
  T xent = T(0);  // mean token cross-entropy
  T kl = T(0);    // summed over turns, unweighted
  T reg = T(0);   // summed over turns
  long tokens = 0;
  long correct = 0;  // teacher-forced argmax hits
  std::vector<T> kl_per_turn;
};

namespace detail {

inline constexpr double kLogVarClamp = 10.0;

template <typename T>
struct TurnTape {
  nn::SequenceEncodeCache<T> sys_cache;
  VectorX<T> sys_mask;     // dropout mask on the system-turn encoding
  VectorX<T> h_sys;        // state+1, feature appended
  VectorX<T> h_sys_grad;   // gradient contributions outside the dialogue RNN
  nn::GruStepCache<T> dlg_cache;

  VectorX<T> mu_x, raw_x, var_x, mu_y, raw_y, var_y, eps, z;
  VectorX<T> blend_in, d0;

  TokenSequence inputs, targets;
  std::vector<nn::GruStepCache<T>> dec_steps;
  std::vector<VectorX<T>> dec_states;
  std::vector<VectorX<T>> dec_masks;    // dropout masks on decoder inputs
  std::vector<VectorX<T>> dec_proj;     // W h + b per step
  std::vector<VectorX<T>> dec_dlogits;  // (softmax - onehot) / total_tokens

  VectorX<T> bow_d, bow_s, bow_u;
};

template <typename T>
VectorX<T> clamped_exp(const VectorX<T>& raw) {
  return raw.array().min(T(kLogVarClamp)).max(T(-kLogVarClamp)).exp().matrix();
}

}  // namespace detail

// Teacher-forced forward pass over one dialogue; when compute_grads is set,
// accumulates parameter gradients of the full objective.
template <typename T>
ForwardStats<T> forward_backward(ModelT<T>& model, const DialogueExample& ex,
                                 const ForwardOptions<T>& opts, bool compute_grads) {
  using detail::TurnTape;
  if (ex.system_turns.size() != ex.user_turns.size())
    throw std::invalid_argument("forward: system/user turn counts differ");
  if (ex.system_turns.empty()) throw std::invalid_argument("forward: empty dialogue");
  const auto n_turns = ex.system_turns.size();
  const int state = model.state_dim;
  const bool variational = has_variational(model.variant);
  const bool reg = has_goal_reg(model.variant);
  const bool training_noise = opts.dropout_p > T(0);
  if (training_noise && opts.dropout_rng == nullptr)
    throw std::invalid_argument("forward: dropout requires an rng");
  Rng dummy_rng(0);
  Rng& drop_rng = opts.dropout_rng != nullptr ? *opts.dropout_rng : dummy_rng;

  ForwardStats<T> stats;

  // ---- goal encoding ----
  nn::SequenceEncodeCache<T> goal_cache;
  const TokenSequence goal_tokens =
      ex.goal_tokens.empty() ? TokenSequence{kEosId} : ex.goal_tokens;
  const auto goal_enc = nn::encode_sequence_cached<T>(
      goal_tokens, model.embeddings.value, model.goal_encoder, VectorX<T>::Zero(state),
      std::nullopt, compute_grads ? &goal_cache : nullptr);
  VectorX<T> goal_mask;
  const VectorX<T> h_goal =
      nn::dropout<T>(goal_enc.encoding, opts.dropout_p, training_noise, drop_rng, &goal_mask);

  // ---- per-turn forward ----
  std::vector<TurnTape<T>> tapes(n_turns);
  std::vector<VectorX<T>> dlg_states(n_turns + 1);  // h^D_0 .. h^D_T
  dlg_states[0] = (model.variant == Variant::Hus || model.variant == Variant::Vhus)
                      ? h_goal
                      : VectorX<T>::Zero(state);

  long total_tokens = 0;
  for (const TokenSequence& u : ex.user_turns) total_tokens += static_cast<long>(u.size()) + 1;
  stats.tokens = total_tokens;

  T xent_sum = T(0);
  const VectorX<T> bow_goal = reg ? multihot<T>(ex.goal_tokens, model.vocab_size) : VectorX<T>();

  for (std::size_t t = 0; t < n_turns; ++t) {
    TurnTape<T>& tape = tapes[t];

    const TokenSequence sys_tokens =
        ex.system_turns[t].empty() ? TokenSequence{kEosId} : ex.system_turns[t];
    const auto sys_enc = nn::encode_sequence_cached<T>(
        sys_tokens, model.embeddings.value, model.system_encoder, VectorX<T>::Zero(state),
        std::nullopt, compute_grads ? &tape.sys_cache : nullptr);
    const VectorX<T> sys_do =
        nn::dropout<T>(sys_enc.encoding, opts.dropout_p, training_noise, drop_rng, &tape.sys_mask);
    tape.h_sys.resize(state + 1);
    tape.h_sys.head(state) = sys_do;
    tape.h_sys(state) = static_cast<T>(ex.length_feature);

    dlg_states[t + 1] = nn::gru_step_cached<T>(model.dialogue_encoder, tape.h_sys, dlg_states[t],
                                               compute_grads ? &tape.dlg_cache : nullptr);
    const VectorX<T>& h_dlg = dlg_states[t + 1];

    if (variational) {
      const VectorX<T>& h_prev = dlg_states[t];
      tape.mu_x = model.prior_mean.apply(h_prev);
      tape.raw_x = model.prior_logvar.apply(h_prev);
      tape.var_x = detail::clamped_exp<T>(tape.raw_x);
      tape.mu_y = model.posterior_mean.apply(h_dlg);
      tape.raw_y = model.posterior_logvar.apply(h_dlg);
      tape.var_y = detail::clamped_exp<T>(tape.raw_y);

      switch (opts.latent) {
        case LatentMode::PosteriorMean:
          tape.eps = VectorX<T>::Zero(model.latent_dim);
          tape.z = tape.mu_y;
          break;
        case LatentMode::PosteriorSample: {
          if (opts.fixed_eps != nullptr) {
            tape.eps = opts.fixed_eps->at(t);
          } else {
            if (opts.latent_rng == nullptr)
              throw std::invalid_argument("forward: posterior sampling requires an rng");
            tape.eps.resize(model.latent_dim);
            for (Index i = 0; i < tape.eps.size(); ++i)
              tape.eps(i) = static_cast<T>(opts.latent_rng->gaussian());
          }
          tape.z = tape.mu_y + tape.var_y.cwiseSqrt().cwiseProduct(tape.eps);
          break;
        }
        case LatentMode::PriorSample: {
          if (opts.latent_rng == nullptr)
            throw std::invalid_argument("forward: prior sampling requires an rng");
          tape.eps.resize(model.latent_dim);
          for (Index i = 0; i < tape.eps.size(); ++i)
            tape.eps(i) = static_cast<T>(opts.latent_rng->gaussian());
          tape.z = tape.mu_x + tape.var_x.cwiseSqrt().cwiseProduct(tape.eps);
          break;
        }
      }
      const T kl_t = nn::kl_diag_gaussians<T>(tape.mu_x, tape.var_x, tape.mu_y, tape.var_y);
      stats.kl += kl_t;
      stats.kl_per_turn.push_back(kl_t);
    }

    switch (model.variant) {
      case Variant::Hus:
        tape.d0 = h_dlg;
        break;
      case Variant::Vhus:
        tape.blend_in.resize(state + model.latent_dim);
        tape.blend_in << h_dlg, tape.z;
        tape.d0 = model.blend.apply(tape.blend_in).array().tanh().matrix();
        break;
      case Variant::HusReg:
        tape.blend_in.resize(2 * state);
        tape.blend_in << h_dlg, h_goal;
        tape.d0 = model.blend.apply(tape.blend_in).array().tanh().matrix();
        break;
      case Variant::VhusReg:
        tape.blend_in.resize(2 * state + model.latent_dim);
        tape.blend_in << h_dlg, h_goal, tape.z;
        tape.d0 = model.blend.apply(tape.blend_in).array().tanh().matrix();
        break;
    }

    // teacher-forced decode: inputs = <sos> + gold, targets = gold + <eos>
    const TokenSequence& gold = ex.user_turns[t];
    tape.inputs.assign(1, kSosId);
    tape.inputs.insert(tape.inputs.end(), gold.begin(), gold.end());
    tape.targets = gold;
    tape.targets.push_back(kEosId);

    const auto steps = tape.targets.size();
    if (compute_grads) tape.dec_steps.resize(steps);
    tape.dec_states.resize(steps);
    tape.dec_masks.resize(steps);
    tape.dec_proj.resize(steps);
    tape.dec_dlogits.resize(steps);
    if (opts.collect_logits != nullptr) opts.collect_logits->emplace_back();

    VectorX<T> s = tape.d0;
    for (std::size_t i = 0; i < steps; ++i) {
      const VectorX<T> x =
          nn::dropout<T>(model.embeddings.value.col(tape.inputs[i]), opts.dropout_p,
                         training_noise, drop_rng, &tape.dec_masks[i]);
      s = nn::gru_step_cached<T>(model.decoder, x, s, compute_grads ? &tape.dec_steps[i] : nullptr);
      tape.dec_states[i] = s;
      tape.dec_proj[i] = model.output_proj.apply(s);
      const VectorX<T> logits = model.embeddings.value.transpose() * tape.dec_proj[i];
      if (opts.collect_logits != nullptr) opts.collect_logits->back().push_back(logits);
      const auto sx = nn::softmax_xent<T>(logits, tape.targets[i]);
      xent_sum += sx.loss;
      tape.dec_dlogits[i] = sx.grad / static_cast<T>(total_tokens);
      Index argmax;
      logits.maxCoeff(&argmax);
      if (argmax == tape.targets[i]) ++stats.correct;
    }

    if (reg) {
      tape.bow_d = nn::sigmoid<T>(model.bow_dialogue.apply(h_dlg));
      tape.bow_s = nn::sigmoid<T>(model.bow_system.apply(tape.h_sys));
      VectorX<T> bu_in(2 * model.vocab_size);
      bu_in << tape.bow_d, tape.bow_s;
      tape.bow_u = nn::sigmoid<T>(model.bow_user.apply(bu_in));

      const VectorX<T> bow_user_t = multihot<T>(ex.user_turns[t], model.vocab_size);
      const VectorX<T> bow_sys_t = multihot<T>(ex.system_turns[t], model.vocab_size);
      const T inv_v = T(1) / static_cast<T>(model.vocab_size);
      stats.reg += inv_v * ((tape.bow_u - bow_goal).squaredNorm() +
                            (tape.bow_d - bow_user_t).squaredNorm() +
                            (tape.bow_s - bow_sys_t).squaredNorm());
    }
  }

  stats.xent = xent_sum / static_cast<T>(total_tokens);
  stats.loss = stats.xent + opts.alpha * stats.kl + stats.reg;
  if (!std::isfinite(static_cast<double>(stats.loss)))
    throw std::runtime_error("forward: non-finite loss");
  if (!compute_grads) return stats;

  // ------------------------------ backward ------------------------------
  std::vector<VectorX<T>> d_dlg(n_turns + 1, VectorX<T>::Zero(state));
  VectorX<T> d_goal = VectorX<T>::Zero(state);

  for (std::size_t t = n_turns; t-- > 0;) {
    TurnTape<T>& tape = tapes[t];
    const VectorX<T>& h_dlg = dlg_states[t + 1];

    if (reg) {
      const T two_over_v = T(2) / static_cast<T>(model.vocab_size);
      const VectorX<T> bow_user_t = multihot<T>(ex.user_turns[t], model.vocab_size);
      const VectorX<T> bow_sys_t = multihot<T>(ex.system_turns[t], model.vocab_size);

      const VectorX<T> d_bu = two_over_v * (tape.bow_u - bow_goal);
      const VectorX<T> da_u = d_bu.array() * tape.bow_u.array() * (T(1) - tape.bow_u.array());
      VectorX<T> bu_in(2 * model.vocab_size);
      bu_in << tape.bow_d, tape.bow_s;
      const VectorX<T> d_bu_in = model.bow_user.backward(bu_in, da_u);

      const VectorX<T> d_bd =
          two_over_v * (tape.bow_d - bow_user_t) + d_bu_in.head(model.vocab_size);
      const VectorX<T> da_d = d_bd.array() * tape.bow_d.array() * (T(1) - tape.bow_d.array());
      d_dlg[t + 1] += model.bow_dialogue.backward(h_dlg, da_d);

      const VectorX<T> d_bs =
          two_over_v * (tape.bow_s - bow_sys_t) + d_bu_in.tail(model.vocab_size);
      const VectorX<T> da_s = d_bs.array() * tape.bow_s.array() * (T(1) - tape.bow_s.array());
      tape.h_sys_grad = model.bow_system.backward(tape.h_sys, da_s);
    }

    // decoder BPTT
    VectorX<T> carry = VectorX<T>::Zero(state);
    VectorX<T> dx(model.embedding_dim);
    for (std::size_t i = tape.dec_states.size(); i-- > 0;) {
      const VectorX<T>& dlogits = tape.dec_dlogits[i];
      // logits = E^T u  =>  dE += u dlogits^T, du = E dlogits
      model.embeddings.grad.noalias() += tape.dec_proj[i] * dlogits.transpose();
      const VectorX<T> du = model.embeddings.value * dlogits;
      VectorX<T> ds = model.output_proj.backward(tape.dec_states[i], du);
      ds += carry;
      nn::gru_step_backward<T>(model.decoder, tape.dec_steps[i], ds, &dx, &carry);
      model.embeddings.grad.col(tape.inputs[i]) += dx.cwiseProduct(tape.dec_masks[i]);
    }
    const VectorX<T> d_d0 = carry;

    // decoder-init blend
    VectorX<T> dz = VectorX<T>::Zero(model.latent_dim);
    switch (model.variant) {
      case Variant::Hus:
        d_dlg[t + 1] += d_d0;
        break;
      case Variant::Vhus: {
        const VectorX<T> da = d_d0.array() * (T(1) - tape.d0.array().square());
        const VectorX<T> din = model.blend.backward(tape.blend_in, da);
        d_dlg[t + 1] += din.head(state);
        dz = din.tail(model.latent_dim);
        break;
      }
      case Variant::HusReg: {
        const VectorX<T> da = d_d0.array() * (T(1) - tape.d0.array().square());
        const VectorX<T> din = model.blend.backward(tape.blend_in, da);
        d_dlg[t + 1] += din.head(state);
        d_goal += din.tail(state);
        break;
      }
      case Variant::VhusReg: {
        const VectorX<T> da = d_d0.array() * (T(1) - tape.d0.array().square());
        const VectorX<T> din = model.blend.backward(tape.blend_in, da);
        d_dlg[t + 1] += din.head(state);
        d_goal += din.segment(state, state);
        dz = din.tail(model.latent_dim);
        break;
      }
    }

    if (variational) {
      const auto klg = nn::kl_diag_gaussians_backward<T>(tape.mu_x, tape.var_x, tape.mu_y,
                                                         tape.var_y, opts.alpha);
      VectorX<T> d_mu_x = klg.d_mu_x;
      VectorX<T> d_var_x = klg.d_var_x;
      VectorX<T> d_mu_y = klg.d_mu_y;
      VectorX<T> d_var_y = klg.d_var_y;

      switch (opts.latent) {
        case LatentMode::PosteriorMean:
          d_mu_y += dz;
          break;
        case LatentMode::PosteriorSample:
          d_mu_y += dz;
          d_var_y +=
              (dz.array() * tape.eps.array() / (T(2) * tape.var_y.array().sqrt())).matrix();
          break;
        case LatentMode::PriorSample:
          d_mu_x += dz;
          d_var_x +=
              (dz.array() * tape.eps.array() / (T(2) * tape.var_x.array().sqrt())).matrix();
          break;
      }

      // var = exp(raw) inside the clamp window, constant outside
      const auto through_clamp = [](const VectorX<T>& raw, const VectorX<T>& var,
                                    const VectorX<T>& d_var) {
        VectorX<T> out = d_var.cwiseProduct(var);
        for (Index i = 0; i < raw.size(); ++i)
          if (std::abs(static_cast<double>(raw(i))) > detail::kLogVarClamp) out(i) = T(0);
        return out;
      };
      const VectorX<T> d_raw_x = through_clamp(tape.raw_x, tape.var_x, d_var_x);
      const VectorX<T> d_raw_y = through_clamp(tape.raw_y, tape.var_y, d_var_y);

      d_dlg[t] += model.prior_mean.backward(dlg_states[t], d_mu_x);
      d_dlg[t] += model.prior_logvar.backward(dlg_states[t], d_raw_x);
      d_dlg[t + 1] += model.posterior_mean.backward(h_dlg, d_mu_y);
      d_dlg[t + 1] += model.posterior_logvar.backward(h_dlg, d_raw_y);
    }
  }

  // dialogue-level BPTT
  VectorX<T> dlg_carry = VectorX<T>::Zero(state);
  for (std::size_t t = n_turns; t-- > 0;) {
    TurnTape<T>& tape = tapes[t];
    const VectorX<T> dh = d_dlg[t + 1] + dlg_carry;
    VectorX<T> d_hsys(state + 1);
    nn::gru_step_backward<T>(model.dialogue_encoder, tape.dlg_cache, dh, &d_hsys, &dlg_carry);
    if (tape.h_sys_grad.size() > 0) d_hsys += tape.h_sys_grad;

    // back through dropout and the turn encoder; the feature is constant
    const VectorX<T> d_enc = d_hsys.head(state).cwiseProduct(tape.sys_mask);
    nn::encode_sequence_backward<T>(model.system_encoder, model.embeddings, tape.sys_cache, d_enc);
  }

  // dialogue-RNN initial state: the goal encoding for Hus/Vhus, a constant
  // zero vector for the regularized variants
  if (model.variant == Variant::Hus || model.variant == Variant::Vhus)
    d_goal += d_dlg[0] + dlg_carry;

  const VectorX<T> d_goal_enc = d_goal.cwiseProduct(goal_mask);
  nn::encode_sequence_backward<T>(model.goal_encoder, model.embeddings, goal_cache, d_goal_enc);

  return stats;
}

// ---------------------------------------------------------------------------
// Interactive session: incremental turn-by-turn inference
// ---------------------------------------------------------------------------

template <typename T>
class SessionT {
public:
  SessionT(const ModelT<T>* model, const acts::Vocabulary* vocab, const acts::UserGoal& goal,
           std::uint64_t seed, int max_decode_len = 42,
           std::optional<int> forced_length = std::nullopt)
      : model_(model), vocab_(vocab), max_decode_len_(max_decode_len), rng_(seed) {
    target_length_ = forced_length ? *forced_length : sample_dialogue_length(rng_);
    feature_ = static_cast<T>(length_feature(target_length_));

    TokenSequence goal_tokens = acts::linearize_goal(goal, *vocab);
    if (goal_tokens.empty()) goal_tokens.push_back(kEosId);
    h_goal_ = nn::encode_sequence<T>(goal_tokens, model_->embeddings.value, model_->goal_encoder,
                                     VectorX<T>::Zero(model_->state_dim))
                  .encoding;
    h_dlg_ = (model_->variant == Variant::Hus || model_->variant == Variant::Vhus)
                 ? h_goal_
                 : VectorX<T>::Zero(model_->state_dim);
  }

  int target_length() const { return target_length_; }
  int turns_seen() const { return turns_seen_; }

  // Consumes one coarse system turn and decodes the user's token reply
  // greedily until <eos> or max_decode_len.
  TokenSequence respond(const acts::CoarseTurn& system_turn) {
    if (turns_seen_ >= acts::kMaxDialogueTurns)
      throw std::runtime_error("session turn limit exceeded");
    const int state = model_->state_dim;

    TokenSequence tokens = acts::linearize(system_turn, *vocab_);
    if (tokens.empty()) tokens.push_back(kEosId);
    const auto enc = nn::encode_sequence<T>(tokens, model_->embeddings.value,
                                            model_->system_encoder, VectorX<T>::Zero(state));
    VectorX<T> h_sys(state + 1);
    h_sys.head(state) = enc.encoding;
    h_sys(state) = feature_;

    const VectorX<T> h_prev = h_dlg_;
    h_dlg_ = nn::gru_step<T>(model_->dialogue_encoder, h_sys, h_prev);

    VectorX<T> z;
    if (has_variational(model_->variant)) {
      const VectorX<T> mu = model_->prior_mean.apply(h_prev);
      const VectorX<T> var = detail::clamped_exp<T>(model_->prior_logvar.apply(h_prev));
      z.resize(model_->latent_dim);
      for (Index i = 0; i < z.size(); ++i) z(i) = static_cast<T>(rng_.gaussian());
      z = mu + var.cwiseSqrt().cwiseProduct(z);
    }

    VectorX<T> d0;
    switch (model_->variant) {
      case Variant::Hus:
        d0 = h_dlg_;
        break;
      case Variant::Vhus: {
        VectorX<T> in(state + model_->latent_dim);
        in << h_dlg_, z;
        d0 = model_->blend.apply(in).array().tanh().matrix();
        break;
      }
      case Variant::HusReg: {
        VectorX<T> in(2 * state);
        in << h_dlg_, h_goal_;
        d0 = model_->blend.apply(in).array().tanh().matrix();
        break;
      }
      case Variant::VhusReg: {
        VectorX<T> in(2 * state + model_->latent_dim);
        in << h_dlg_, h_goal_, z;
        d0 = model_->blend.apply(in).array().tanh().matrix();
        break;
      }
    }

    TokenSequence out;
    VectorX<T> s = d0;
    TokenId prev = kSosId;
    for (int i = 0; i < max_decode_len_; ++i) {
      s = nn::gru_step_cached<T>(model_->decoder, model_->embeddings.value.col(prev), s, nullptr);
      const VectorX<T> logits =
          model_->embeddings.value.transpose() * model_->output_proj.apply(s);
      Index argmax;
      logits.maxCoeff(&argmax);
      if (static_cast<TokenId>(argmax) == kEosId) break;
      out.push_back(static_cast<TokenId>(argmax));
      prev = static_cast<TokenId>(argmax);
    }
    turns_seen_ += 2;
    return out;
  }

private:
  const ModelT<T>* model_;
  const acts::Vocabulary* vocab_;
  int max_decode_len_;
  Rng rng_;
  int target_length_ = 0;
  T feature_ = T(0);
  VectorX<T> h_goal_, h_dlg_;
  int turns_seen_ = 0;
};

using Session = SessionT<Real>;

template <typename T>
TokenSequence respond(SessionT<T>& session, const acts::CoarseTurn& system_turn) {
  return session.respond(system_turn);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochStats {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double val_token_acc = 0;
};

template <typename T>
struct TrainResultT {
  ModelT<T> model;  // best-validation snapshot
  std::vector<EpochStats> curves;
  int best_epoch = 0;
};

using TrainResult = TrainResultT<Real>;

std::string curves_to_csv(const std::vector<EpochStats>& curves);

// Mini-batch Adam over (C, S_1..t, U_1..t) dialogues with a seed-stable
// train/validation split; returns the best-validation model. Aborts with a
// diagnostic if the loss diverges.
template <typename T>
TrainResultT<T> train(Variant variant, const std::vector<DialogueExample>& examples,
                      int vocab_size, const TrainConfig& config, std::ostream* log = nullptr) {
  if (examples.empty()) throw std::invalid_argument("train: empty corpus");
  if (config.batch_size < 1 || config.epochs < 1)
    throw std::invalid_argument("train: bad batch size or epoch count");

  // split
  std::vector<std::size_t> idx(examples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng split_rng(derive_seed(config.seed, "split"));
  for (std::size_t i = idx.size(); i > 1; --i)
    std::swap(idx[i - 1],
              idx[static_cast<std::size_t>(split_rng.uniform_int(0, static_cast<int>(i) - 1))]);
  const auto n_val =
      static_cast<std::size_t>(static_cast<double>(idx.size()) * config.validation_fraction);
  std::vector<std::size_t> val_idx(idx.end() - static_cast<std::ptrdiff_t>(n_val), idx.end());
  std::vector<std::size_t> train_idx(idx.begin(), idx.end() - static_cast<std::ptrdiff_t>(n_val));
  if (train_idx.empty()) throw std::invalid_argument("train: no training dialogues after split");
  const std::vector<std::size_t>& eval_idx = val_idx.empty() ? train_idx : val_idx;

  Rng init_rng(derive_seed(config.seed, "init"));
  ModelT<T> model = ModelT<T>::create(variant, vocab_size, config, init_rng);
  std::vector<nn::Param<T>*> params = model.params();
  nn::AdamConfig<T> adam_cfg;
  adam_cfg.lr = static_cast<T>(config.lr);
  nn::AdamState<T> adam(params, adam_cfg);

  const std::uint64_t noise_master = derive_seed(config.seed, "noise");
  Rng order_rng(derive_seed(config.seed, "order"));

  TrainResultT<T> result;
  double best_acc = -1.0;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    for (std::size_t i = train_idx.size(); i > 1; --i)
      std::swap(train_idx[i - 1], train_idx[static_cast<std::size_t>(order_rng.uniform_int(
                                      0, static_cast<int>(i) - 1))]);

    double loss_sum = 0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < train_idx.size();
         start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end =
          std::min(train_idx.size(), start + static_cast<std::size_t>(config.batch_size));
      nn::zero_grads(params);
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t ex_id = train_idx[b];
        Rng noise(derive_seed(noise_master, static_cast<std::uint64_t>(epoch) * examples.size() +
                                                ex_id));
        ForwardOptions<T> opts;
        opts.dropout_p = static_cast<T>(config.dropout);
        opts.dropout_rng = &noise;
        opts.latent = LatentMode::PosteriorSample;
        opts.latent_rng = &noise;
        opts.alpha = static_cast<T>(config.alpha);
        const auto stats = forward_backward<T>(model, examples[ex_id], opts, true);
        loss_sum += static_cast<double>(stats.loss);
        ++seen;
      }
      const T inv = T(1) / static_cast<T>(end - start);
      for (nn::Param<T>* p : params) p->grad *= inv;
      nn::clip_global_norm<T>(params, static_cast<T>(config.clip_norm));
      adam.update(params);
    }

    EpochStats es;
    es.epoch = epoch;
    es.train_loss = loss_sum / static_cast<double>(seen);
    if (!std::isfinite(es.train_loss))
      throw std::runtime_error("train: loss diverged at epoch " + std::to_string(epoch));

    double val_loss_sum = 0;
    long val_tokens = 0, val_correct = 0;
    for (const std::size_t ex_id : eval_idx) {
      ForwardOptions<T> opts;
      opts.latent = LatentMode::PosteriorMean;
      opts.alpha = static_cast<T>(config.alpha);
      const auto stats = forward_backward<T>(model, examples[ex_id], opts, false);
      val_loss_sum += static_cast<double>(stats.loss);
      val_tokens += stats.tokens;
      val_correct += stats.correct;
    }
    es.val_loss = val_loss_sum / static_cast<double>(eval_idx.size());
    es.val_token_acc = static_cast<double>(val_correct) / static_cast<double>(val_tokens);
    result.curves.push_back(es);
    if (log != nullptr)
      (*log) << "epoch " << epoch << " train_loss " << es.train_loss << " val_loss " << es.val_loss
             << " val_token_acc " << es.val_token_acc << "\n";

    if (es.val_token_acc > best_acc) {
      best_acc = es.val_token_acc;
      result.model = model;
      result.best_epoch = epoch;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned container of named parameter tensors (little-endian
// doubles, column-major) plus the training config.
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, Model& model, const TrainConfig& config);

struct Checkpoint {
  Model model;
  TrainConfig config;
};
Checkpoint load_checkpoint(const std::string& path);

}  // namespace husim::sim
