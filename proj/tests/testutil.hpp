#pragma once

#include <string>
#include <vector>

#include "husim/acts.hpp"
#include "husim/rng.hpp"

namespace husim::testutil {

// Movie ticket booking domain used throughout the tests.
inline acts::Schema movie_schema() {
  using acts::Slot;
  std::vector<Slot> slots = {
      {"date", {"Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday"}},
      {"num_tickets", {"1", "2", "3", "4", "5", "6"}},
      {"theatre_name", {"AMC", "Cinemark", "Regal", "Alamo"}},
      {"movie", {"Sully", "Arrival", "Moana", "Inferno", "Trolls"}},
      {"time", {"4pm", "5pm", "6pm", "7pm", "8pm", "9pm"}},
  };
  std::vector<std::string> act_names = {"greeting", "inform",  "request", "confirm",
                                        "affirm",   "close",   "bye"};
  return acts::Schema(std::move(slots), std::move(act_names));
}

// Figure-style goal: date=Friday, num_tickets=2, theatre_name/time flexible,
// movie=Sully.
inline acts::UserGoal figure_goal() {
  acts::UserGoal g;
  g.constraints.emplace("date", acts::GoalEntry::fixed("Friday"));
  g.constraints.emplace("num_tickets", acts::GoalEntry::fixed("2"));
  g.constraints.emplace("theatre_name", acts::GoalEntry::flexible());
  g.constraints.emplace("movie", acts::GoalEntry::fixed("Sully"));
  g.constraints.emplace("time", acts::GoalEntry::flexible());
  return g;
}

// Arbitrary well-formed coarse turn: 1-3 acts, 0-5 args each, bare slots or
// composites drawn uniformly.
inline acts::CoarseTurn random_coarse_turn(const acts::Schema& schema, Rng& rng) {
  acts::CoarseTurn turn;
  const int n_acts = rng.uniform_int(1, acts::kMaxActsPerTurn);
  for (int a = 0; a < n_acts; ++a) {
    acts::CoarseAct act;
    act.name = schema.act_names()[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<int>(schema.act_names().size()) - 1))];
    const int n_args = rng.uniform_int(0, acts::kMaxArgsPerAct);
    for (int i = 0; i < n_args; ++i) {
      acts::CoarseArg arg;
      arg.slot = schema.slots()[static_cast<std::size_t>(
                                    rng.uniform_int(0, static_cast<int>(schema.slots().size()) - 1))]
                     .name;
      if (rng.bernoulli(0.7))
        arg.value = acts::kCoarseValues[static_cast<std::size_t>(rng.uniform_int(0, 4))];
      act.args.push_back(std::move(arg));
    }
    turn.acts.push_back(std::move(act));
  }
  return turn;
}

inline acts::UserGoal random_goal(const acts::Schema& schema, Rng& rng,
                                  double flexible_prob = 0.3) {
  acts::UserGoal g;
  for (const acts::Slot& s : schema.slots()) {
    if (rng.bernoulli(flexible_prob)) {
      g.constraints.emplace(s.name, acts::GoalEntry::flexible());
    } else {
      g.constraints.emplace(
          s.name, acts::GoalEntry::fixed(s.values[static_cast<std::size_t>(
                      rng.uniform_int(0, static_cast<int>(s.values.size()) - 1))]));
    }
  }
  return g;
}

}  // namespace husim::testutil
