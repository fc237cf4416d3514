#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>

#include "husim/acts.hpp"
#include "testutil.hpp"

using namespace husim;
using namespace husim::acts;

namespace {

DialogueTurn make_turn(Speaker speaker, std::vector<DialogueAct> acts_) {
  DialogueTurn t;
  t.speaker = speaker;
  t.acts = std::move(acts_);
  return t;
}

}  // namespace

TEST_CASE("vocabulary contains the grammar productions of the movie schema") {
  const Schema schema = testutil::movie_schema();
  const Vocabulary vocab = build_vocabulary(schema);
  CHECK(vocab.find("movie=ValueInGoal").has_value());
  CHECK(vocab.find("num_tickets").has_value());
  CHECK(vocab.find("(").has_value());
  CHECK(vocab.find("greeting").has_value());
  CHECK(vocab.is_bare_slot(vocab.id("num_tickets")));
  CHECK(vocab.is_act_name(vocab.id("confirm")));
  const auto comp = vocab.composite(vocab.id("movie=ValueInGoal"));
  REQUIRE(comp.has_value());
  CHECK(comp->first == "movie");
  CHECK(comp->second == CoarseValue::ValueInGoal);
}

TEST_CASE("single-slot vocabulary enumerates structural + bare + composite tokens") {
  const Schema schema({{"date", {"Friday"}}}, {});
  const Vocabulary vocab = build_vocabulary(schema);
  CHECK(vocab.size() == 10);  // 4 structural/special + 1 bare + 5 composites
  CHECK(vocab.token(0) == "<sos>");
  CHECK(vocab.token(1) == "<eos>");
  CHECK(vocab.pad_id() == vocab.eos_id());
  CHECK(vocab.length_feature_id() == vocab.size());
  for (const CoarseValue tag : kCoarseValues) CHECK(vocab.find(composite_token("date", tag)));
}

TEST_CASE("vocabulary is invariant to slot declaration order") {
  const Schema a({{"b", {"1"}}, {"a", {"2"}}}, {"inform"});
  const Schema b({{"a", {"2"}}, {"b", {"1"}}}, {"inform"});
  const Vocabulary va = build_vocabulary(a);
  const Vocabulary vb = build_vocabulary(b);
  REQUIRE(va.size() == vb.size());
  for (int i = 0; i < va.size(); ++i) CHECK(va.token(i) == vb.token(i));
}

TEST_CASE("duplicate names are rejected") {
  CHECK_THROWS(Schema({{"a", {"1"}}, {"a", {"2"}}}, {}));
  CHECK_THROWS(Schema({{"a", {"1"}}}, {"inform", "inform"}));
  CHECK_THROWS(Schema({{"a", {}}}, {}));
  CHECK_THROWS(Schema({}, {"inform"}));
}

TEST_CASE("coarsen maps values by goal precedence") {
  const Schema schema = testutil::movie_schema();
  const UserGoal goal = testutil::figure_goal();

  SUBCASE("value equal to goal becomes ValueInGoal") {
    const auto turn =
        make_turn(Speaker::System, {{"confirm", {{"movie", "Sully"}}}});
    const CoarseTurn ct = coarsen(turn, goal, schema);
    REQUIRE(ct.acts.size() == 1);
    CHECK(ct.acts[0].args[0].value == CoarseValue::ValueInGoal);
  }
  SUBCASE("flexible slot becomes DontCare regardless of value") {
    const auto turn = make_turn(Speaker::User, {{"inform", {{"theatre_name", "AMC"}}}});
    CHECK(coarsen(turn, goal, schema).acts[0].args[0].value == CoarseValue::DontCare);
  }
  SUBCASE("value differing from a fixed goal becomes ValueContradictsGoal") {
    UserGoal g = goal;
    g.constraints.erase("time");
    g.constraints.emplace("time", GoalEntry::fixed("9pm"));
    const auto turn = make_turn(Speaker::User, {{"inform", {{"time", "7pm"}}}});
    CHECK(coarsen(turn, g, schema).acts[0].args[0].value == CoarseValue::ValueContradictsGoal);
  }
  SUBCASE("slot outside the goal becomes Other") {
    UserGoal g = goal;
    g.constraints.erase("date");
    const auto turn = make_turn(Speaker::System, {{"inform", {{"date", "Monday"}}}});
    CHECK(coarsen(turn, g, schema).acts[0].args[0].value == CoarseValue::Other);
  }
  SUBCASE("value-less request args stay bare") {
    const auto turn = make_turn(Speaker::System, {{"request", {{"num_tickets", std::nullopt}}}});
    const CoarseTurn ct = coarsen(turn, goal, schema);
    CHECK_FALSE(ct.acts[0].args[0].value.has_value());
  }
  SUBCASE("unknown slot is rejected") {
    const auto turn = make_turn(Speaker::User, {{"inform", {{"seat", "A1"}}}});
    CHECK_THROWS(coarsen(turn, goal, schema));
  }
}

TEST_CASE("coarsen applies exactly one tag per valued arg") {
  const Schema schema = testutil::movie_schema();
  Rng rng(11);
  for (int iter = 0; iter < 500; ++iter) {
    const UserGoal goal = testutil::random_goal(schema, rng);
    const Slot& slot = schema.slots()[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<int>(schema.slots().size()) - 1))];
    const std::string value = slot.values[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<int>(slot.values.size()) - 1))];
    UserGoal g = goal;
    if (rng.bernoulli(0.2)) g.constraints.erase(slot.name);

    const auto turn = make_turn(Speaker::User, {{"inform", {{slot.name, value}}}});
    const CoarseValue tag = *coarsen(turn, g, schema).acts[0].args[0].value;

    // Independent five-way case analysis; exactly one predicate must hold.
    const bool flexible = g.is_flexible(slot.name);
    const std::string* gv = g.fixed_value(slot.name);
    const bool in_goal = !flexible && gv != nullptr && *gv == value;
    const bool contradicts = !flexible && gv != nullptr && *gv != value;
    const bool other = !flexible && gv == nullptr;
    CHECK(static_cast<int>(flexible) + static_cast<int>(in_goal) + static_cast<int>(contradicts) +
              static_cast<int>(other) ==
          1);
    if (flexible) CHECK(tag == CoarseValue::DontCare);
    if (in_goal) CHECK(tag == CoarseValue::ValueInGoal);
    if (contradicts) CHECK(tag == CoarseValue::ValueContradictsGoal);
    if (other) CHECK(tag == CoarseValue::Other);
  }
}

TEST_CASE("linearize emits act-name ( args ) per act") {
  CoarseTurn ct;
  ct.acts.push_back({"confirm", {{"movie", CoarseValue::ValueInGoal}}});
  ct.acts.push_back({"request", {{"num_tickets", std::nullopt}}});
  const std::vector<std::string> want = {"confirm", "(", "movie=ValueInGoal", ")",
                                         "request", "(", "num_tickets",       ")"};
  CHECK(linearize_strings(ct) == want);

  CoarseTurn greet;
  greet.acts.push_back({"greeting", {}});
  CHECK(linearize_strings(greet) == std::vector<std::string>{"greeting", "(", ")"});

  CHECK(linearize_strings(CoarseTurn{}).empty());
}

TEST_CASE("linearize rejects tokens outside the vocabulary") {
  const Schema schema({{"date", {"Friday"}}}, {"inform"});
  const Vocabulary vocab = build_vocabulary(schema);
  CoarseTurn ct;
  ct.acts.push_back({"reserve", {}});
  CHECK_THROWS(linearize(ct, vocab));
}

TEST_CASE("parse inverts linearize on the worked example") {
  const Schema schema = testutil::movie_schema();
  const Vocabulary vocab = build_vocabulary(schema);

  const CoarseTurn greet = parse_strings({"greeting", "(", ")"}, vocab);
  REQUIRE(greet.acts.size() == 1);
  CHECK(greet.acts[0].name == "greeting");
  CHECK(greet.acts[0].args.empty());

  const CoarseTurn ct = parse_strings(
      {"confirm", "(", "movie=ValueInGoal", ")", "request", "(", "num_tickets", ")"}, vocab);
  REQUIRE(ct.acts.size() == 2);
  CHECK(ct.acts[0].name == "confirm");
  CHECK(ct.acts[0].args[0].value == CoarseValue::ValueInGoal);
  CHECK(ct.acts[1].name == "request");
  CHECK_FALSE(ct.acts[1].args[0].value.has_value());
  CHECK_FALSE(ct.malformed);
}

TEST_CASE("parse reports structured errors with positions") {
  const Schema schema = testutil::movie_schema();
  const Vocabulary vocab = build_vocabulary(schema);

  SUBCASE("act name required") {
    try {
      parse_strings({"(", ")"}, vocab);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.position() == 0);
    }
  }
  SUBCASE("unterminated act") {
    CHECK_THROWS_AS(parse_strings({"inform", "(", "movie=Other"}, vocab), ParseError);
  }
  SUBCASE("arg outside an act") {
    CHECK_THROWS_AS(parse_strings({"num_tickets"}, vocab), ParseError);
  }
  SUBCASE("unknown token") {
    CHECK_THROWS_AS(parse_strings({"inform", "(", "seat", ")"}, vocab), ParseError);
  }
  SUBCASE("missing paren after act name") {
    CHECK_THROWS_AS(parse_strings({"inform", "inform"}, vocab), ParseError);
  }
}

TEST_CASE("parse_recover keeps the longest valid act prefix") {
  const Schema schema = testutil::movie_schema();
  const Vocabulary vocab = build_vocabulary(schema);
  CoarseTurn good;
  good.acts.push_back({"inform", {{"movie", CoarseValue::ValueInGoal}}});
  TokenSequence ids = linearize(good, vocab);
  ids.push_back(vocab.id("request"));  // dangling act, never closed

  const CoarseTurn rec = parse_recover(ids, vocab);
  CHECK(rec.malformed);
  REQUIRE(rec.acts.size() == 1);
  CHECK(rec.acts[0].name == "inform");

  const CoarseTurn empty = parse_recover({vocab.rparen_id()}, vocab);
  CHECK(empty.malformed);
  CHECK(empty.acts.empty());
}

TEST_CASE("round trip: parse of linearize is the identity on random coarse turns") {
  const Schema schema = testutil::movie_schema();
  const Vocabulary vocab = build_vocabulary(schema);
  Rng rng(42);
  for (int iter = 0; iter < 2000; ++iter) {
    const CoarseTurn x = testutil::random_coarse_turn(schema, rng);
    const CoarseTurn back = parse(linearize(x, vocab), vocab);
    REQUIRE(back == x);
  }
}

TEST_CASE("decoarsen grounds tags against the goal and domain") {
  const Schema schema = testutil::movie_schema();
  const UserGoal goal = testutil::figure_goal();
  const std::vector<DialogueTurn> history;

  SUBCASE("ValueInGoal reads the goal") {
    CoarseTurn ct;
    ct.acts.push_back({"inform", {{"movie", CoarseValue::ValueInGoal}}});
    Rng rng(1);
    const DialogueTurn t = decoarsen(ct, goal, history, schema, rng);
    CHECK(t.acts[0].args[0].value == "Sully");
  }
  SUBCASE("ValueContradictsGoal avoids the goal value") {
    const Schema two({{"date", {"Friday", "Saturday"}}}, {"inform"});
    UserGoal g;
    g.constraints.emplace("date", GoalEntry::fixed("Friday"));
    CoarseTurn ct;
    ct.acts.push_back({"inform", {{"date", CoarseValue::ValueContradictsGoal}}});
    Rng rng(1);
    CHECK(decoarsen(ct, g, history, two, rng).acts[0].args[0].value == "Saturday");
  }
  SUBCASE("DontCare sampling is reproducible under a fixed seed") {
    CoarseTurn ct;
    ct.acts.push_back({"inform", {{"time", CoarseValue::DontCare}}});
    Rng a(7), b(7);
    const auto va = decoarsen(ct, goal, history, schema, a).acts[0].args[0].value;
    const auto vb = decoarsen(ct, goal, history, schema, b).acts[0].args[0].value;
    REQUIRE(va.has_value());
    CHECK(va == vb);
    const auto& domain = schema.slot("time").values;
    CHECK(std::find(domain.begin(), domain.end(), *va) != domain.end());
  }
  SUBCASE("Requested decoarsens to a value-less arg") {
    CoarseTurn ct;
    ct.acts.push_back({"request", {{"date", CoarseValue::Requested}}});
    Rng rng(3);
    CHECK_FALSE(decoarsen(ct, goal, history, schema, rng).acts[0].args[0].value.has_value());
  }
  SUBCASE("errors: ValueInGoal outside the goal; no contradicting value left") {
    CoarseTurn vig;
    vig.acts.push_back({"inform", {{"theatre_name", CoarseValue::ValueInGoal}}});
    Rng rng(5);
    CHECK_THROWS(decoarsen(vig, goal, history, schema, rng));

    const Schema one({{"date", {"Friday"}}}, {"inform"});
    UserGoal g;
    g.constraints.emplace("date", GoalEntry::fixed("Friday"));
    CoarseTurn ct;
    ct.acts.push_back({"inform", {{"date", CoarseValue::ValueContradictsGoal}}});
    CHECK_THROWS(decoarsen(ct, g, history, one, rng));
  }
  SUBCASE("recovering variant drops ungroundable args and counts them") {
    CoarseTurn ct;
    ct.acts.push_back({"inform",
                       {{"theatre_name", CoarseValue::ValueInGoal},
                        {"movie", CoarseValue::ValueInGoal}}});
    Rng rng(5);
    const DecoarsenResult res = decoarsen_recover(ct, goal, history, schema, rng);
    CHECK(res.dropped_args == 1);
    REQUIRE(res.turn.acts[0].args.size() == 1);
    CHECK(res.turn.acts[0].args[0].value == "Sully");
  }
}

TEST_CASE("coarsen of decoarsen is the identity for goal-consistent turns") {
  const Schema schema = testutil::movie_schema();
  Rng rng(99);
  const std::vector<DialogueTurn> history;
  for (int iter = 0; iter < 500; ++iter) {
    const UserGoal goal = testutil::random_goal(schema, rng);
    // Build a coarse turn whose tags are compatible with the goal: DontCare
    // on flexible slots, ValueInGoal/Contradicts on fixed ones, Other on
    // unconstrained ones, bare args anywhere.
    CoarseTurn x;
    const int n_acts = rng.uniform_int(1, 3);
    for (int a = 0; a < n_acts; ++a) {
      CoarseAct act;
      act.name = "inform";
      const int n_args = rng.uniform_int(0, 5);
      for (int i = 0; i < n_args; ++i) {
        const Slot& slot = schema.slots()[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<int>(schema.slots().size()) - 1))];
        CoarseArg arg;
        arg.slot = slot.name;
        if (rng.bernoulli(0.25)) {
          arg.value = std::nullopt;
        } else if (goal.is_flexible(slot.name)) {
          arg.value = CoarseValue::DontCare;
        } else if (goal.fixed_value(slot.name) != nullptr) {
          const bool contradicts = rng.bernoulli(0.5);
          if (contradicts && slot.values.size() < 2) {
            arg.value = CoarseValue::ValueInGoal;
          } else {
            arg.value = contradicts ? CoarseValue::ValueContradictsGoal : CoarseValue::ValueInGoal;
          }
        } else {
          arg.value = CoarseValue::Other;
        }
        act.args.push_back(std::move(arg));
      }
      x.acts.push_back(std::move(act));
    }
    const UserGoal* goal_ptr = &goal;
    // Other tags must sit on slots outside the goal for the identity to hold.
    UserGoal pruned = goal;
    for (const CoarseAct& act : x.acts)
      for (const CoarseArg& arg : act.args)
        if (arg.value == CoarseValue::Other) pruned.constraints.erase(arg.slot);
    goal_ptr = &pruned;

    const DialogueTurn concrete = decoarsen(x, *goal_ptr, history, schema, rng);
    const CoarseTurn back = coarsen(concrete, *goal_ptr, schema);
    REQUIRE(back == x);
  }
}

TEST_CASE("cardinality bounds reject rather than truncate") {
  const Schema schema = testutil::movie_schema();
  const UserGoal goal = testutil::figure_goal();

  DialogueTurn four_acts;
  four_acts.speaker = Speaker::User;
  for (int i = 0; i < 4; ++i) four_acts.acts.push_back({"inform", {}});
  CHECK_THROWS(coarsen(four_acts, goal, schema));

  DialogueTurn six_args;
  six_args.speaker = Speaker::User;
  DialogueAct act{"inform", {}};
  for (int i = 0; i < 6; ++i) act.args.push_back({"movie", "Sully"});
  six_args.acts.push_back(act);
  CHECK_THROWS(coarsen(six_args, goal, schema));

  DialogueTurn empty;
  CHECK_THROWS(validate_turn(empty));
}

TEST_CASE("goal linearization marks fixed slots ValueInGoal and flexible DontCare") {
  const UserGoal goal = testutil::figure_goal();
  const std::vector<std::string> want = {
      "date=ValueInGoal", "movie=ValueInGoal", "num_tickets=ValueInGoal",
      "theatre_name=DontCare", "time=DontCare"};
  CHECK(linearize_goal_strings(goal) == want);
}

TEST_CASE("schema round trips through its JSON form") {
  const Schema schema = testutil::movie_schema();
  const Schema back = Schema::from_json_text(schema.to_json_text());
  CHECK(back.slots().size() == schema.slots().size());
  CHECK(back.act_names() == schema.act_names());
  CHECK(back.slot("movie").values == schema.slot("movie").values);
}
