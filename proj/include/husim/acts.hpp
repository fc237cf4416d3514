#pragma once

#include <array>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "husim/rng.hpp"
#include "husim/types.hpp"

namespace husim::acts {

inline constexpr int kMaxActsPerTurn = 3;
inline constexpr int kMaxArgsPerAct = 5;
inline constexpr int kMaxDialogueTurns = 20;

struct Slot {
  std::string name;
  std::vector<std::string> values;  // finite knowledge-base domain
};

// Slot/act inventory for one task domain. Slots and act names are kept
// sorted so every derived structure (vocabulary, goals) is deterministic.
class Schema {
public:
  Schema() = default;
  Schema(std::vector<Slot> slots, std::vector<std::string> act_names);

  const std::vector<Slot>& slots() const { return slots_; }
  const std::vector<std::string>& act_names() const { return act_names_; }

  const Slot* find_slot(const std::string& name) const;
  const Slot& slot(const std::string& name) const;  // throws if unknown
  bool has_act(const std::string& name) const;

  static Schema from_json_text(const std::string& text);
  static Schema load(const std::string& path);
  std::string to_json_text() const;

private:
  std::vector<Slot> slots_;
  std::vector<std::string> act_names_;
  std::unordered_map<std::string, std::size_t> slot_index_;
};

struct PersonalityProfile {
  double cooperativeness = 1.0;
  double randomness = 0.0;
};

// Goal constraint for one slot: either a fixed required value or "flexible"
// (the user accepts any offered value).
class GoalEntry {
public:
  static GoalEntry fixed(std::string value) { return GoalEntry{false, std::move(value)}; }
  static GoalEntry flexible() { return GoalEntry{true, {}}; }

  bool is_flexible() const { return flexible_; }
  const std::string& value() const;

  bool operator==(const GoalEntry&) const = default;

private:
  GoalEntry(bool flexible, std::string value) : flexible_(flexible), value_(std::move(value)) {}
  bool flexible_ = false;
  std::string value_;
};

struct UserGoal {
  std::map<std::string, GoalEntry> constraints;
  PersonalityProfile personality;

  bool has(const std::string& slot) const { return constraints.count(slot) != 0; }
  bool is_flexible(const std::string& slot) const;
  // Fixed value for the slot, or nullptr when unconstrained/flexible.
  const std::string* fixed_value(const std::string& slot) const;
};

void validate_goal(const UserGoal& goal, const Schema& schema);

struct ActArg {
  std::string slot;
  std::optional<std::string> value;  // empty for request-style args
  bool operator==(const ActArg&) const = default;
};

struct DialogueAct {
  std::string name;
  std::vector<ActArg> args;
  bool operator==(const DialogueAct&) const = default;
};

enum class Speaker { System, User };

struct DialogueTurn {
  Speaker speaker = Speaker::System;
  std::vector<DialogueAct> acts;
  bool operator==(const DialogueTurn&) const = default;

  bool has_act(const std::string& name) const;
  const DialogueAct* find_act(const std::string& name) const;
};

enum class CoarseValue { Requested, DontCare, ValueInGoal, ValueContradictsGoal, Other };

inline constexpr std::array<CoarseValue, 5> kCoarseValues = {
    CoarseValue::Requested, CoarseValue::DontCare, CoarseValue::ValueInGoal,
    CoarseValue::ValueContradictsGoal, CoarseValue::Other};

const std::string& to_string(CoarseValue v);
std::optional<CoarseValue> coarse_value_from_string(const std::string& s);

struct CoarseArg {
  std::string slot;
  std::optional<CoarseValue> value;  // empty = bare slot token
  bool operator==(const CoarseArg&) const = default;
};

struct CoarseAct {
  std::string name;
  std::vector<CoarseArg> args;
  bool operator==(const CoarseAct&) const = default;
};

struct CoarseTurn {
  std::vector<CoarseAct> acts;
  bool malformed = false;  // set by recovering parser when output was repaired
  bool operator==(const CoarseTurn&) const = default;
};

// Cardinality checks (<=3 acts, <=5 args); violations throw, never truncate.
void validate_turn(const DialogueTurn& turn);
void validate_coarse_turn(const CoarseTurn& turn);

// Token inventory over which every encoder/decoder operates. Layout:
// [<sos>, <eos>, (, )] + sorted act names + sorted bare slot names +
// per-slot composite "slot=Tag" tokens for the five coarse tags.
// Padding shares the end-of-sequence id; the dialogue-length feature is an
// appended feature dimension and gets the reserved index size().
class Vocabulary {
public:
  static Vocabulary build(const Schema& schema);

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const;
  int id(const std::string& token) const;  // throws on unknown token
  std::optional<int> find(const std::string& token) const;

  int sos_id() const { return 0; }
  int eos_id() const { return 1; }
  int pad_id() const { return 1; }
  int lparen_id() const { return 2; }
  int rparen_id() const { return 3; }
  int length_feature_id() const { return size(); }

  bool is_act_name(int id) const;
  bool is_bare_slot(int id) const;
  // (slot, tag) for composite tokens, nullopt otherwise.
  std::optional<std::pair<std::string, CoarseValue>> composite(int id) const;

private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  int act_begin_ = 0, act_end_ = 0;
  int slot_begin_ = 0, slot_end_ = 0;
  std::unordered_map<int, std::pair<std::string, CoarseValue>> composite_;
};

Vocabulary build_vocabulary(const Schema& schema);

std::string composite_token(const std::string& slot, CoarseValue tag);

// Replaces concrete slot values by the five coarse tags relative to the
// goal. Precedence for (slot s, value v): flexible slot -> DontCare;
// v equals the goal value -> ValueInGoal; differs -> ValueContradictsGoal;
// slot outside the goal -> Other. Value-less args stay bare.
CoarseTurn coarsen(const DialogueTurn& turn, const UserGoal& goal, const Schema& schema);

// Grammar: act-name "(" arg* ")" per act, acts concatenated in order.
std::vector<std::string> linearize_strings(const CoarseTurn& turn);
TokenSequence linearize(const CoarseTurn& turn, const Vocabulary& vocab);

// Goal token sequence: one "slot=Tag" composite per constrained slot in
// sorted slot order (ValueInGoal for fixed entries, DontCare for flexible).
std::vector<std::string> linearize_goal_strings(const UserGoal& goal);
TokenSequence linearize_goal(const UserGoal& goal, const Vocabulary& vocab);

class ParseError : public std::runtime_error {
public:
  ParseError(std::size_t position, const std::string& what)
      : std::runtime_error(what), position_(position) {}
  std::size_t position() const { return position_; }

private:
  std::size_t position_ = 0;
};

// Strict inverse of linearize; throws ParseError with the offending position.
CoarseTurn parse(const TokenSequence& tokens, const Vocabulary& vocab);
CoarseTurn parse_strings(const std::vector<std::string>& tokens, const Vocabulary& vocab);

// Keeps the longest valid act prefix of malformed decoder output and flags
// the turn instead of failing the dialogue.
CoarseTurn parse_recover(const TokenSequence& tokens, const Vocabulary& vocab);

// Test-time replacement of coarse tags by concrete values: ValueInGoal reads
// the goal, Requested stays value-less, DontCare/Other sample uniformly from
// the domain, ValueContradictsGoal samples from the domain minus the goal
// value. `history` is the dialogue so far (context for value grounding).
DialogueTurn decoarsen(const CoarseTurn& turn, const UserGoal& goal,
                       const std::vector<DialogueTurn>& history, const Schema& schema,
                       Rng& rng);

// Per-arg variant used by dialogue rollouts: un-groundable args (for example
// ValueInGoal on a slot outside the goal) are dropped and counted rather
// than aborting the dialogue.
struct DecoarsenResult {
  DialogueTurn turn;
  int dropped_args = 0;
};
DecoarsenResult decoarsen_recover(const CoarseTurn& turn, const UserGoal& goal,
                                  const std::vector<DialogueTurn>& history,
                                  const Schema& schema, Rng& rng);

}  // namespace husim::acts
