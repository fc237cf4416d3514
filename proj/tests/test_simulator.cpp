#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <set>

#include "husim/simulator.hpp"
#include "testutil.hpp"

using namespace husim;
using namespace husim::sim;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.embedding_dim = 8;
  c.state_dim = 12;
  c.latent_dim = 5;
  c.dropout = 0.0;
  c.alpha = 0.1;
  return c;
}

// Arbitrary token ids over a small vocabulary; grammar does not matter for
// the numerical checks.
DialogueExample tiny_example(int vocab_size, Rng& rng, int n_turns = 2) {
  DialogueExample ex;
  const auto seq = [&](int len) {
    TokenSequence s;
    for (int i = 0; i < len; ++i) s.push_back(rng.uniform_int(2, vocab_size - 1));
    return s;
  };
  ex.goal_tokens = seq(3);
  for (int t = 0; t < n_turns; ++t) {
    ex.system_turns.push_back(seq(4));
    ex.user_turns.push_back(seq(4));
  }
  ex.length_feature = 0.45;
  return ex;
}

double check_variant_gradients(Variant variant, std::uint64_t seed) {
  const int vocab = 20;
  const TrainConfig config = tiny_config();
  Rng init(seed);
  Model model = Model::create(variant, vocab, config, init);
  Rng exrng(seed + 1);
  const DialogueExample ex = tiny_example(vocab, exrng);

  std::vector<VectorX<double>> eps;
  Rng eps_rng(seed + 2);
  for (std::size_t t = 0; t < ex.system_turns.size(); ++t) {
    VectorX<double> e(config.latent_dim);
    for (Index i = 0; i < e.size(); ++i) e(i) = eps_rng.gaussian();
    eps.push_back(e);
  }

  ForwardOptions<double> opts;
  opts.latent = LatentMode::PosteriorSample;
  opts.fixed_eps = &eps;
  opts.alpha = config.alpha;

  auto params = model.params();
  nn::zero_grads(params);
  forward_backward<double>(model, ex, opts, true);

  const auto loss_fn = [&]() { return forward_backward<double>(model, ex, opts, false).loss; };
  Rng pick(seed + 3);
  return nn::grad_check<double>(loss_fn, params, 3e-3, 6, pick);
}

}  // namespace

TEST_CASE("untrained hus loss is near log V per token") {
  const int vocab = 20;
  Rng init(3);
  Model model = Model::create(Variant::Hus, vocab, tiny_config(), init);
  Rng exrng(4);
  const DialogueExample ex = tiny_example(vocab, exrng, 1);

  ForwardOptions<double> opts;
  const auto stats = forward_backward<double>(model, ex, opts, false);
  CHECK(std::isfinite(stats.loss));
  CHECK(stats.loss == doctest::Approx(std::log(20.0)).epsilon(0.35));
}

TEST_CASE("a single eos-only gold turn contributes exactly one token") {
  const int vocab = 20;
  Rng init(3);
  Model model = Model::create(Variant::Hus, vocab, tiny_config(), init);
  DialogueExample ex;
  ex.goal_tokens = {5, 6};
  ex.system_turns = {{7, 8}};
  ex.user_turns = {{}};  // gold = end-of-sequence only
  ex.length_feature = 0.2;

  ForwardOptions<double> opts;
  const auto stats = forward_backward<double>(model, ex, opts, false);
  CHECK(stats.tokens == 1);
  CHECK(stats.loss == doctest::Approx(stats.xent));
}

TEST_CASE("all four variants pass finite-difference gradient checks") {
  CHECK(check_variant_gradients(Variant::Hus, 11) < 1e-4);
  CHECK(check_variant_gradients(Variant::Vhus, 22) < 1e-4);
  CHECK(check_variant_gradients(Variant::HusReg, 33) < 1e-4);
  CHECK(check_variant_gradients(Variant::VhusReg, 44) < 1e-4);
}

TEST_CASE("vhus with alpha 0 and z forced to the mean is deterministic") {
  const int vocab = 20;
  Rng init(5);
  Model model = Model::create(Variant::Vhus, vocab, tiny_config(), init);
  Rng exrng(6);
  const DialogueExample ex = tiny_example(vocab, exrng);

  ForwardOptions<double> opts;
  opts.latent = LatentMode::PosteriorMean;
  opts.alpha = 0.0;
  const auto a = forward_backward<double>(model, ex, opts, false);
  const auto b = forward_backward<double>(model, ex, opts, false);
  CHECK(a.loss == b.loss);
  CHECK(a.loss == doctest::Approx(a.xent).epsilon(1e-15));  // variational term inert
  CHECK(a.kl >= 0.0);
}

TEST_CASE("tied prior and posterior give zero variational loss") {
  const int vocab = 20;
  Rng init(5);
  Model model = Model::create(Variant::Vhus, vocab, tiny_config(), init);
  // zero input maps and matched biases make both distributions identical
  // regardless of the dialogue state
  model.prior_mean.weight.value.setZero();
  model.posterior_mean.weight.value.setZero();
  model.prior_logvar.weight.value.setZero();
  model.posterior_logvar.weight.value.setZero();
  model.prior_mean.bias.value.setConstant(0.3);
  model.posterior_mean.bias.value.setConstant(0.3);
  model.prior_logvar.bias.value.setConstant(-0.2);
  model.posterior_logvar.bias.value.setConstant(-0.2);

  Rng exrng(6);
  const DialogueExample ex = tiny_example(vocab, exrng);
  ForwardOptions<double> opts;
  opts.latent = LatentMode::PosteriorMean;
  const auto stats = forward_backward<double>(model, ex, opts, false);
  CHECK(stats.kl == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("rigged bag-of-words heads zero out the regularization loss") {
  const int vocab = 12;
  TrainConfig config = tiny_config();
  Rng init(7);
  Model model = Model::create(Variant::HusReg, vocab, config, init);

  DialogueExample ex;
  ex.goal_tokens = {4, 7};
  ex.system_turns = {{5, 6}};
  ex.user_turns = {{8, 9}};
  ex.length_feature = 0.3;

  // saturate the sigmoids at exactly the multi-hot targets
  const auto rig = [&](LinearT<double>& head, const TokenSequence& target) {
    head.weight.value.setZero();
    head.bias.value.setConstant(-800.0);
    for (const TokenId t : target) head.bias.value(t, 0) = 800.0;
  };
  rig(model.bow_dialogue, ex.user_turns[0]);
  rig(model.bow_system, ex.system_turns[0]);
  rig(model.bow_user, ex.goal_tokens);

  ForwardOptions<double> opts;
  const auto stats = forward_backward<double>(model, ex, opts, false);
  CHECK(stats.reg == 0.0);
}

TEST_CASE("goal bag-of-words marks exactly the linearized goal tokens") {
  const acts::Schema schema = testutil::movie_schema();
  const acts::Vocabulary vocab = acts::build_vocabulary(schema);
  const acts::UserGoal goal = testutil::figure_goal();
  const TokenSequence goal_tokens = acts::linearize_goal(goal, vocab);

  const VectorX<double> bow = multihot<double>(goal_tokens, vocab.size());
  CHECK(bow.sum() == doctest::Approx(5.0));
  CHECK(bow(vocab.id("movie=ValueInGoal")) == 1.0);
  CHECK(bow(vocab.id("theatre_name=DontCare")) == 1.0);
  CHECK(bow(vocab.id("time=DontCare")) == 1.0);
  CHECK(bow(vocab.id("date=ValueInGoal")) == 1.0);
  CHECK(bow(vocab.id("num_tickets=ValueInGoal")) == 1.0);
  CHECK(bow(vocab.id("movie")) == 0.0);
  CHECK(bow(vocab.id("(")) == 0.0);
}

TEST_CASE("combined loss equals the sum of its components") {
  const int vocab = 20;
  Rng init(9);
  Model model = Model::create(Variant::VhusReg, vocab, tiny_config(), init);
  Rng exrng(10);
  const DialogueExample ex = tiny_example(vocab, exrng);

  ForwardOptions<double> opts;
  opts.latent = LatentMode::PosteriorMean;
  opts.alpha = 0.37;
  const auto stats = forward_backward<double>(model, ex, opts, false);
  CHECK(std::abs(stats.loss - (stats.xent + 0.37 * stats.kl + stats.reg)) < 1e-10);
  CHECK(stats.kl >= 0.0);
  CHECK(stats.reg >= 0.0);
}

TEST_CASE("dialogue length sampling") {
  SUBCASE("raw draws round and clamp") {
    CHECK(length_from_raw(-3.0) == 1);
    CHECK(length_from_raw(5.4) == 5);
    CHECK(length_from_raw(5.6) == 6);
    CHECK(length_from_raw(27.0) == 20);
  }
  SUBCASE("mean five, all values in range") {
    Rng rng(123);
    double sum = 0;
    for (int i = 0; i < 100000; ++i) {
      const int len = sample_dialogue_length(rng);
      CHECK(len >= 1);
      CHECK(len <= 20);
      sum += len;
    }
    CHECK(sum / 100000.0 == doctest::Approx(5.0).epsilon(0.01));
  }
}

TEST_CASE("theta_S is one shared parameter block, decoupled from theta_C") {
  const acts::Schema schema = testutil::movie_schema();
  const acts::Vocabulary vocab = acts::build_vocabulary(schema);
  TrainConfig config = tiny_config();
  Rng init(15);
  Model model = Model::create(Variant::Hus, vocab.size(), config, init);

  const TokenSequence turn_a = {4, 2, 3};
  const TokenSequence turn_b = {5, 2, 6, 3};
  const VectorX<double> h0 = VectorX<double>::Zero(config.state_dim);

  const auto enc = [&](const TokenSequence& t) {
    return nn::encode_sequence<double>(t, model.embeddings.value, model.system_encoder, h0)
        .encoding;
  };
  const auto goal_enc = [&]() {
    return nn::encode_sequence<double>(turn_a, model.embeddings.value, model.goal_encoder, h0)
        .encoding;
  };

  const VectorX<double> a0 = enc(turn_a), b0 = enc(turn_b), g0 = goal_enc();
  model.system_encoder.w_cand.value(0, 0) += 0.5;
  const VectorX<double> a1 = enc(turn_a), b1 = enc(turn_b), g1 = goal_enc();

  CHECK((a1 - a0).norm() > 1e-9);  // every turn encoding moves
  CHECK((b1 - b0).norm() > 1e-9);
  CHECK((g1 - g0).norm() == 0.0);  // goal encoder untouched
}

TEST_CASE("session decoding is deterministic for hus and bounded for all variants") {
  const acts::Schema schema = testutil::movie_schema();
  const acts::Vocabulary vocab = acts::build_vocabulary(schema);
  TrainConfig config = tiny_config();
  config.max_decode_len = 19;
  const acts::UserGoal goal = testutil::figure_goal();

  acts::CoarseTurn greet;
  greet.acts.push_back({"greeting", {}});
  acts::CoarseTurn request;
  request.acts.push_back({"request", {{"num_tickets", std::nullopt}}});

  for (const Variant variant : kVariants) {
    Rng init(21);
    Model model = Model::create(variant, vocab.size(), config, init);

    Session s1(&model, &vocab, goal, 99, config.max_decode_len);
    Session s2(&model, &vocab, goal, 99, config.max_decode_len);
    const TokenSequence r1a = s1.respond(greet);
    const TokenSequence r2a = s2.respond(greet);
    const TokenSequence r1b = s1.respond(request);
    const TokenSequence r2b = s2.respond(request);
    CHECK(r1a == r2a);  // same seed, same inputs
    CHECK(r1b == r2b);
    for (const TokenSequence& r : {r1a, r1b}) {
      CHECK(r.size() <= static_cast<std::size_t>(config.max_decode_len));
      for (const TokenId t : r) {
        CHECK(t != vocab.pad_id());
        CHECK(t >= 0);
        CHECK(t < vocab.size());
      }
    }
  }
}

TEST_CASE("session enforces the 20-turn cap") {
  const acts::Schema schema = testutil::movie_schema();
  const acts::Vocabulary vocab = acts::build_vocabulary(schema);
  Rng init(2);
  Model model = Model::create(Variant::Hus, vocab.size(), tiny_config(), init);
  Session session(&model, &vocab, testutil::figure_goal(), 1);

  acts::CoarseTurn greet;
  greet.acts.push_back({"greeting", {}});
  for (int i = 0; i < 10; ++i) session.respond(greet);
  CHECK(session.turns_seen() == 20);
  CHECK_THROWS(session.respond(greet));
}

TEST_CASE("training learns a tiny corpus and replays identically under one seed") {
  const acts::Schema schema = testutil::movie_schema();
  const acts::Vocabulary vocab = acts::build_vocabulary(schema);

  corpus::CorpusConfig cc;
  cc.n_dialogues = 40;
  cc.seed = 31;
  cc.personality = {1.0, 1.0, 0.0, 0.0};
  const auto dialogues = corpus::generate_corpus(schema, cc);
  const auto examples = make_examples(dialogues, vocab, schema);

  TrainConfig config = tiny_config();
  config.embedding_dim = 16;
  config.state_dim = 24;
  config.epochs = 3;
  config.batch_size = 8;
  config.dropout = 0.2;
  config.seed = 7;

  const auto r1 = train<double>(Variant::Hus, examples, vocab.size(), config);
  const auto r2 = train<double>(Variant::Hus, examples, vocab.size(), config);
  REQUIRE(r1.curves.size() == 3);
  for (std::size_t i = 0; i < r1.curves.size(); ++i) {
    CHECK(r1.curves[i].train_loss == r2.curves[i].train_loss);
    CHECK(r1.curves[i].val_loss == r2.curves[i].val_loss);
    CHECK(r1.curves[i].val_token_acc == r2.curves[i].val_token_acc);
  }
  CHECK(r1.curves.back().train_loss < r1.curves.front().train_loss);
}

TEST_CASE("checkpoints round trip bit-exactly") {
  const acts::Schema schema = testutil::movie_schema();
  const acts::Vocabulary vocab = acts::build_vocabulary(schema);
  TrainConfig config = tiny_config();
  config.alpha = 0.25;
  Rng init(77);
  Model model = Model::create(Variant::VhusReg, vocab.size(), config, init);

  const std::string path = "test_checkpoint.bin";
  save_checkpoint(path, model, config);
  Checkpoint loaded = load_checkpoint(path);

  CHECK(loaded.model.variant == Variant::VhusReg);
  CHECK(loaded.config.alpha == 0.25);
  auto a = model.params();
  auto b = loaded.model.params();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i]->name == b[i]->name);
    CHECK((a[i]->value - b[i]->value).norm() == 0.0);
  }
  std::remove(path.c_str());
}

TEST_CASE("make_example pairs system and user turns with the true length feature") {
  const acts::Schema schema = testutil::movie_schema();
  const acts::Vocabulary vocab = acts::build_vocabulary(schema);
  corpus::CorpusConfig cc;
  cc.n_dialogues = 1;
  cc.seed = 12;
  cc.personality = {1.0, 1.0, 0.0, 0.0};
  const auto dialogues = corpus::generate_corpus(schema, cc);
  const corpus::Dialogue& d = dialogues[0];

  const DialogueExample ex = make_example(d, vocab, schema);
  CHECK(ex.system_turns.size() == ex.user_turns.size());
  CHECK(ex.system_turns.size() == d.turns.size() / 2);
  CHECK(ex.length_feature == doctest::Approx(d.turns.size() / 20.0));
  CHECK_FALSE(ex.goal_tokens.empty());
}
