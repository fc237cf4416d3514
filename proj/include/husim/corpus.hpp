#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "husim/acts.hpp"
#include "husim/rng.hpp"

namespace husim::corpus {

enum class Outcome { Success, Failure, Timeout };

const std::string& to_string(Outcome o);
std::optional<Outcome> outcome_from_string(const std::string& s);

// One goal-annotated dialogue: strict SYSTEM/USER alternation starting with
// SYSTEM, at most 20 turns total.
struct Dialogue {
  acts::UserGoal goal;
  std::vector<acts::DialogueTurn> turns;
  Outcome outcome = Outcome::Timeout;
};

struct PersonalityRange {
  double coop_min = 0.5, coop_max = 1.0;
  double rand_min = 0.0, rand_max = 0.3;
};

struct CorpusConfig {
  int n_dialogues = 1;
  std::uint64_t seed = 0;
  double dontcare_probability = 0.25;
  PersonalityRange personality;
};

// Every schema slot becomes Fixed(uniform domain value) with probability
// 1 - dontcare_probability, Flexible otherwise; personality dials are drawn
// uniformly from the configured ranges.
acts::UserGoal sample_goal(const acts::Schema& schema, const CorpusConfig& config, Rng& rng);

// Agenda-style user: a stack of pending goal informs plus the set of slots
// the system has confirmed correctly. The user volunteers pending informs,
// answers requests (withholding with probability 1 - cooperativeness),
// corrects contradicting confirmations, and says bye once every fixed goal
// slot is confirmed.
struct AgendaState {
  std::vector<std::string> pending;  // fixed goal slots still to volunteer (top = back)
  std::set<std::string> satisfied;   // slots the system confirmed correctly
  bool greeted = false;
  bool said_bye = false;
};

AgendaState make_agenda(const acts::UserGoal& goal);

std::pair<acts::DialogueTurn, AgendaState> agenda_respond(const AgendaState& state,
                                                          const acts::UserGoal& goal,
                                                          const acts::DialogueTurn& system_turn,
                                                          Rng& rng);

// Deterministic finite-state system agent: greet, elicit unfilled slots,
// confirm filled ones, close with the confirmed slot-value summary. A
// "dontcare" inform excuses a slot from elicitation and confirmation.
struct FsmState {
  std::map<std::string, std::string> filled;
  std::set<std::string> excused;
  std::set<std::string> confirmed;
  std::vector<std::pair<std::string, std::string>> pending_confirm;
  bool greeted = false;
  bool closed = false;
};

inline constexpr const char* kDontCareValue = "dontcare";

// user_turn is empty for the opening system turn.
std::pair<acts::DialogueTurn, FsmState> fsm_respond(const FsmState& state,
                                                    const acts::Schema& schema,
                                                    const std::optional<acts::DialogueTurn>& user_turn);

Dialogue generate_dialogue(const acts::Schema& schema, const acts::UserGoal& goal, Rng& rng);

// n_dialogues dialogues, each driven by an rng stream derived from
// (seed, dialogue index); bit-exact under a fixed seed.
std::vector<Dialogue> generate_corpus(const acts::Schema& schema, const CorpusConfig& config);

// JSON Lines, one dialogue per line with fields goal, personality, turns,
// outcome.
std::string dialogue_to_jsonl_line(const Dialogue& d);
Dialogue dialogue_from_jsonl_line(const std::string& line);
void write_corpus(const std::string& path, const std::vector<Dialogue>& dialogues);
std::vector<Dialogue> load_corpus(const std::string& path);

// Seed-stable 90/10-style split by dialogue.
std::pair<std::vector<Dialogue>, std::vector<Dialogue>> split_corpus(
    std::vector<Dialogue> dialogues, double validation_fraction, std::uint64_t seed);

}  // namespace husim::corpus
