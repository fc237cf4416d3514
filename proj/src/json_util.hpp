#pragma once

// Internal JSON helpers shared by the corpus and arena file formats.

#include <json.hpp>

#include "husim/acts.hpp"

namespace husim::detail {

inline nlohmann::json turn_to_json(const acts::DialogueTurn& turn) {
  nlohmann::json jacts = nlohmann::json::array();
  for (const acts::DialogueAct& act : turn.acts) {
    nlohmann::json jargs = nlohmann::json::array();
    for (const acts::ActArg& arg : act.args) {
      nlohmann::json ja{{"slot", arg.slot}};
      if (arg.value) ja["value"] = *arg.value;
      jargs.push_back(std::move(ja));
    }
    jacts.push_back({{"name", act.name}, {"args", std::move(jargs)}});
  }
  return {{"speaker", turn.speaker == acts::Speaker::System ? "system" : "user"},
          {"acts", std::move(jacts)}};
}

inline acts::DialogueTurn turn_from_json(const nlohmann::json& j) {
  acts::DialogueTurn turn;
  turn.speaker =
      j.at("speaker").get<std::string>() == "system" ? acts::Speaker::System : acts::Speaker::User;
  for (const auto& ja : j.at("acts")) {
    acts::DialogueAct act;
    act.name = ja.at("name").get<std::string>();
    for (const auto& jarg : ja.at("args")) {
      acts::ActArg arg;
      arg.slot = jarg.at("slot").get<std::string>();
      if (jarg.contains("value")) arg.value = jarg.at("value").get<std::string>();
      act.args.push_back(std::move(arg));
    }
    turn.acts.push_back(std::move(act));
  }
  return turn;
}

// Goal constraints as {"slot": "value"} with null marking flexible entries.
inline nlohmann::json goal_to_json(const acts::UserGoal& goal) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [slot, entry] : goal.constraints)
    j[slot] = entry.is_flexible() ? nlohmann::json(nullptr) : nlohmann::json(entry.value());
  return j;
}

inline acts::UserGoal goal_from_json(const nlohmann::json& j) {
  acts::UserGoal goal;
  for (const auto& [slot, value] : j.items()) {
    goal.constraints.emplace(slot, value.is_null()
                                       ? acts::GoalEntry::flexible()
                                       : acts::GoalEntry::fixed(value.get<std::string>()));
  }
  return goal;
}

inline nlohmann::json personality_to_json(const acts::PersonalityProfile& p) {
  return {{"cooperativeness", p.cooperativeness}, {"randomness", p.randomness}};
}

inline acts::PersonalityProfile personality_from_json(const nlohmann::json& j) {
  acts::PersonalityProfile p;
  p.cooperativeness = j.at("cooperativeness").get<double>();
  p.randomness = j.at("randomness").get<double>();
  return p;
}

}  // namespace husim::detail
