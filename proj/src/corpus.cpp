#include "husim/corpus.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <sstream>

#include "json_util.hpp"

namespace husim::corpus {

using acts::ActArg;
using acts::DialogueAct;
using acts::DialogueTurn;
using acts::Speaker;

namespace {

const std::array<std::string, 3> kOutcomeNames = {"success", "failure", "timeout"};

// Splits slot-value pairs into acts of at most 5 args each.
std::vector<DialogueAct> chunk_act(const std::string& name,
                                   const std::vector<ActArg>& args, std::size_t max_acts) {
  std::vector<DialogueAct> out;
  if (args.empty()) {
    out.push_back({name, {}});
    return out;
  }
  for (std::size_t i = 0; i < args.size(); i += acts::kMaxArgsPerAct) {
    DialogueAct act{name, {}};
    for (std::size_t j = i; j < std::min(args.size(), i + acts::kMaxArgsPerAct); ++j)
      act.args.push_back(args[j]);
    out.push_back(std::move(act));
  }
  if (out.size() > max_acts)
    throw std::invalid_argument("schema too wide: '" + name + "' needs more than " +
                                std::to_string(max_acts) + " acts");
  return out;
}

}  // namespace

const std::string& to_string(Outcome o) { return kOutcomeNames[static_cast<int>(o)]; }

std::optional<Outcome> outcome_from_string(const std::string& s) {
  for (std::size_t i = 0; i < kOutcomeNames.size(); ++i)
    if (kOutcomeNames[i] == s) return static_cast<Outcome>(i);
  return std::nullopt;
}

acts::UserGoal sample_goal(const acts::Schema& schema, const CorpusConfig& config, Rng& rng) {
  acts::UserGoal goal;
  for (const acts::Slot& slot : schema.slots()) {
    if (rng.bernoulli(config.dontcare_probability)) {
      goal.constraints.emplace(slot.name, acts::GoalEntry::flexible());
    } else {
      const auto pick = static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<int>(slot.values.size()) - 1));
      goal.constraints.emplace(slot.name, acts::GoalEntry::fixed(slot.values[pick]));
    }
  }
  goal.personality.cooperativeness =
      rng.uniform(config.personality.coop_min, config.personality.coop_max);
  goal.personality.randomness = rng.uniform(config.personality.rand_min, config.personality.rand_max);
  return goal;
}

AgendaState make_agenda(const acts::UserGoal& goal) {
  AgendaState state;
  for (const auto& [slot, entry] : goal.constraints)
    if (!entry.is_flexible()) state.pending.push_back(slot);
  // constraints iterate in sorted order; reverse so pop_back volunteers
  // slots alphabetically
  std::reverse(state.pending.begin(), state.pending.end());
  return state;
}

std::pair<DialogueTurn, AgendaState> agenda_respond(const AgendaState& state,
                                                    const acts::UserGoal& goal,
                                                    const DialogueTurn& system_turn, Rng& rng) {
  AgendaState next = state;
  const double coop = goal.personality.cooperativeness;
  const double randomness = goal.personality.randomness;

  std::vector<std::string> requested;
  std::vector<std::pair<std::string, std::string>> confirmed_pairs;
  for (const DialogueAct& act : system_turn.acts) {
    if (act.name == "request") {
      for (const ActArg& arg : act.args) requested.push_back(arg.slot);
    } else if (act.name == "confirm") {
      for (const ActArg& arg : act.args)
        if (arg.value) confirmed_pairs.emplace_back(arg.slot, *arg.value);
    }
  }

  const auto drop_pending = [&next](const std::string& slot) {
    next.pending.erase(std::remove(next.pending.begin(), next.pending.end(), slot),
                       next.pending.end());
  };

  // Contradicting confirmations are always corrected with the goal value.
  std::vector<ActArg> informs;
  std::set<std::string> informed;
  for (const auto& [slot, value] : confirmed_pairs) {
    const std::string* gv = goal.fixed_value(slot);
    if (gv != nullptr && *gv != value) {
      if (informed.insert(slot).second) informs.push_back({slot, *gv});
      next.satisfied.erase(slot);
      drop_pending(slot);
    } else {
      next.satisfied.insert(slot);
    }
  }

  bool answered_requests = false;
  if (!requested.empty() && rng.bernoulli(coop)) {
    answered_requests = true;
    for (const std::string& slot : requested) {
      if (informed.count(slot)) continue;
      const std::string* gv = goal.fixed_value(slot);
      informs.push_back({slot, gv != nullptr ? *gv : std::string(kDontCareValue)});
      informed.insert(slot);
      drop_pending(slot);
    }
  }

  // Volunteer the next agenda item when the system gave us nothing to answer
  // (or we chose to withhold the answer).
  if (requested.empty() || !answered_requests) {
    for (auto it = next.pending.rbegin(); it != next.pending.rend(); ++it) {
      if (std::find(requested.begin(), requested.end(), *it) != requested.end()) continue;
      if (informed.count(*it)) continue;
      const std::string slot = *it;
      informs.push_back({slot, *goal.fixed_value(slot)});
      informed.insert(slot);
      drop_pending(slot);
      break;
    }
  }

  // Personality noise: one extra in-goal inform, or a reordered turn.
  bool shuffle_acts = false;
  if (rng.bernoulli(randomness)) {
    if (rng.bernoulli(0.5)) {
      std::string extra;
      for (auto it = next.pending.rbegin(); it != next.pending.rend(); ++it)
        if (!informed.count(*it)) {
          extra = *it;
          break;
        }
      if (extra.empty()) {
        std::vector<std::string> repeatable;
        for (const auto& [slot, entry] : goal.constraints)
          if (!entry.is_flexible() && !informed.count(slot)) repeatable.push_back(slot);
        if (!repeatable.empty())
          extra = repeatable[static_cast<std::size_t>(
              rng.uniform_int(0, static_cast<int>(repeatable.size()) - 1))];
      }
      if (!extra.empty()) {
        informs.push_back({extra, *goal.fixed_value(extra)});
        informed.insert(extra);
        drop_pending(extra);
      }
    } else {
      shuffle_acts = true;
    }
  }

  DialogueTurn turn;
  turn.speaker = Speaker::User;

  bool all_fixed_confirmed = true;
  for (const auto& [slot, entry] : goal.constraints)
    if (!entry.is_flexible() && !next.satisfied.count(slot)) all_fixed_confirmed = false;

  if (system_turn.has_act("greeting") && !state.greeted) turn.acts.push_back({"greeting", {}});
  next.greeted = true;

  if (!informs.empty()) {
    const bool will_bye = all_fixed_confirmed && next.pending.empty();
    const std::size_t room = acts::kMaxActsPerTurn - turn.acts.size() - (will_bye ? 1 : 0);
    for (DialogueAct& a : chunk_act("inform", informs, std::max<std::size_t>(room, 1)))
      turn.acts.push_back(std::move(a));
  }
  if (all_fixed_confirmed && next.pending.empty() && informs.empty()) {
    turn.acts.push_back({"bye", {}});
    next.said_bye = true;
  }
  if (turn.acts.empty()) turn.acts.push_back({"affirm", {}});

  if (shuffle_acts && turn.acts.size() > 1) {
    for (std::size_t i = turn.acts.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1));
      std::swap(turn.acts[i - 1], turn.acts[j]);
    }
  }
  return {std::move(turn), std::move(next)};
}

std::pair<DialogueTurn, FsmState> fsm_respond(const FsmState& state, const acts::Schema& schema,
                                              const std::optional<DialogueTurn>& user_turn) {
  FsmState next = state;
  if (next.closed) throw std::logic_error("fsm_respond called after close");

  DialogueTurn turn;
  turn.speaker = Speaker::System;

  if (!next.greeted) {
    next.greeted = true;
    turn.acts.push_back({"greeting", {}});
    return {std::move(turn), std::move(next)};
  }

  if (user_turn) {
    std::map<std::string, std::string> informs;
    for (const DialogueAct& act : user_turn->acts)
      if (act.name == "inform")
        for (const ActArg& arg : act.args)
          if (arg.value) informs[arg.slot] = *arg.value;

    // confirmations stand unless this user turn re-informs a different value
    for (const auto& [slot, value] : next.pending_confirm) {
      const auto it = informs.find(slot);
      if (it == informs.end() || it->second == value) next.confirmed.insert(slot);
    }
    next.pending_confirm.clear();

    for (const auto& [slot, value] : informs) {
      if (value == kDontCareValue) {
        next.excused.insert(slot);
        next.filled.erase(slot);
        next.confirmed.erase(slot);
        continue;
      }
      const auto it = next.filled.find(slot);
      if (it == next.filled.end() || it->second != value) {
        next.filled[slot] = value;
        next.confirmed.erase(slot);
      }
      next.excused.erase(slot);
    }
  }

  std::vector<ActArg> to_confirm;
  for (const auto& [slot, value] : next.filled)
    if (!next.confirmed.count(slot)) to_confirm.push_back({slot, value});

  std::string next_unfilled;
  for (const acts::Slot& slot : schema.slots())
    if (!next.filled.count(slot.name) && !next.excused.count(slot.name)) {
      next_unfilled = slot.name;
      break;
    }

  if (to_confirm.empty() && next_unfilled.empty()) {
    std::vector<ActArg> summary;
    for (const auto& [slot, value] : next.filled) summary.push_back({slot, value});
    for (DialogueAct& a : chunk_act("close", summary, acts::kMaxActsPerTurn))
      turn.acts.push_back(std::move(a));
    next.closed = true;
    return {std::move(turn), std::move(next)};
  }

  if (!to_confirm.empty()) {
    const std::size_t room = acts::kMaxActsPerTurn - (next_unfilled.empty() ? 0 : 1);
    for (DialogueAct& a : chunk_act("confirm", to_confirm, room)) turn.acts.push_back(std::move(a));
    for (const ActArg& arg : to_confirm) next.pending_confirm.emplace_back(arg.slot, *arg.value);
  }
  if (!next_unfilled.empty()) turn.acts.push_back({"request", {{next_unfilled, std::nullopt}}});

  return {std::move(turn), std::move(next)};
}

Dialogue generate_dialogue(const acts::Schema& schema, const acts::UserGoal& goal, Rng& rng) {
  Dialogue d;
  d.goal = goal;
  AgendaState agenda = make_agenda(goal);
  FsmState fsm;
  std::optional<DialogueTurn> last_user;

  while (static_cast<int>(d.turns.size()) < acts::kMaxDialogueTurns) {
    auto [system_turn, fsm_next] = fsm_respond(fsm, schema, last_user);
    fsm = std::move(fsm_next);
    d.turns.push_back(system_turn);
    if (fsm.closed) break;
    if (static_cast<int>(d.turns.size()) >= acts::kMaxDialogueTurns) break;

    auto [user_turn, agenda_next] = agenda_respond(agenda, goal, system_turn, rng);
    agenda = std::move(agenda_next);
    d.turns.push_back(user_turn);
    last_user = d.turns.back();
  }

  if (!fsm.closed) {
    d.outcome = Outcome::Timeout;
    return d;
  }

  std::map<std::string, std::string> fixed;
  for (const auto& [slot, entry] : goal.constraints)
    if (!entry.is_flexible()) fixed.emplace(slot, entry.value());
  d.outcome = (fsm.filled == fixed) ? Outcome::Success : Outcome::Failure;
  return d;
}

std::vector<Dialogue> generate_corpus(const acts::Schema& schema, const CorpusConfig& config) {
  if (config.n_dialogues < 1) throw std::invalid_argument("n_dialogues must be >= 1");
  std::vector<Dialogue> out;
  out.reserve(static_cast<std::size_t>(config.n_dialogues));
  for (int i = 0; i < config.n_dialogues; ++i) {
    Rng rng(derive_seed(config.seed, static_cast<std::uint64_t>(i)));
    const acts::UserGoal goal = sample_goal(schema, config, rng);
    out.push_back(generate_dialogue(schema, goal, rng));
  }
  return out;
}

std::string dialogue_to_jsonl_line(const Dialogue& d) {
  nlohmann::json j;
  j["goal"] = detail::goal_to_json(d.goal);
  j["personality"] = detail::personality_to_json(d.goal.personality);
  nlohmann::json turns = nlohmann::json::array();
  for (const DialogueTurn& t : d.turns) turns.push_back(detail::turn_to_json(t));
  j["turns"] = std::move(turns);
  j["outcome"] = to_string(d.outcome);
  return j.dump();
}

Dialogue dialogue_from_jsonl_line(const std::string& line) {
  const nlohmann::json j = nlohmann::json::parse(line);
  Dialogue d;
  d.goal = detail::goal_from_json(j.at("goal"));
  d.goal.personality = detail::personality_from_json(j.at("personality"));
  for (const auto& jt : j.at("turns")) d.turns.push_back(detail::turn_from_json(jt));
  const auto outcome = outcome_from_string(j.at("outcome").get<std::string>());
  if (!outcome) throw std::runtime_error("unknown outcome '" + j.at("outcome").get<std::string>() + "'");
  d.outcome = *outcome;
  return d;
}

void write_corpus(const std::string& path, const std::vector<Dialogue>& dialogues) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open corpus file '" + path + "' for writing");
  for (const Dialogue& d : dialogues) out << dialogue_to_jsonl_line(d) << "\n";
  if (!out) throw std::runtime_error("failed writing corpus file '" + path + "'");
}

std::vector<Dialogue> load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open corpus file '" + path + "'");
  std::vector<Dialogue> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(dialogue_from_jsonl_line(line));
  }
  return out;
}

std::pair<std::vector<Dialogue>, std::vector<Dialogue>> split_corpus(
    std::vector<Dialogue> dialogues, double validation_fraction, std::uint64_t seed) {
  if (validation_fraction < 0.0 || validation_fraction >= 1.0)
    throw std::invalid_argument("validation fraction must lie in [0,1)");
  Rng rng(derive_seed(seed, "split"));
  for (std::size_t i = dialogues.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1));
    std::swap(dialogues[i - 1], dialogues[j]);
  }
  const auto n_val = static_cast<std::size_t>(
      static_cast<double>(dialogues.size()) * validation_fraction);
  std::vector<Dialogue> val(dialogues.end() - static_cast<std::ptrdiff_t>(n_val), dialogues.end());
  dialogues.resize(dialogues.size() - n_val);
  return {std::move(dialogues), std::move(val)};
}

}  // namespace husim::corpus
