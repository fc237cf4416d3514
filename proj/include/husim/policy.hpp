#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>

#include "husim/acts.hpp"
#include "husim/rng.hpp"

// Rule-based system policies of configurable robustness; the interlocutors
// the simulators are evaluated against.
namespace husim::policy {

enum class ConfirmStrategy { Eager, Batch };

struct PolicyConfig {
  double confusion_rate = 0.0;  // probability of misreading one user arg
  ConfirmStrategy confirm_strategy = ConfirmStrategy::Batch;
  int max_reask = 4;  // times one slot may be requested before giving up

  std::string preset_name;  // informational
};

// The stronger interlocutor: rarely misreads, confirms in a batch.
PolicyConfig robust_preset();
// The weaker one: frequent misreads, eager confirms, low patience.
PolicyConfig brittle_preset();
std::optional<PolicyConfig> preset_by_name(const std::string& name);

enum class Phase { Greet, Elicit, Confirm, Closed };

struct PolicyState {
  std::map<std::string, std::string> believed;
  std::set<std::string> confirmed;
  std::vector<std::pair<std::string, std::string>> pending_confirm;
  std::map<std::string, int> ask_counts;
  std::set<std::string> abandoned;  // re-ask budget exhausted
  Phase phase = Phase::Greet;
};

// One policy turn: ingest the user's informs (corrupting each arg with
// probability confusion_rate), request unfilled slots, confirm per strategy,
// close with the full believed slot-value set once every slot is confirmed
// or abandoned. user_turn is empty for the opening turn.
std::pair<acts::DialogueTurn, PolicyState> policy_respond(
    const PolicyState& state, const PolicyConfig& config, const acts::Schema& schema,
    const std::optional<acts::DialogueTurn>& user_turn, Rng& rng);

}  // namespace husim::policy
