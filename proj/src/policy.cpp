#include "husim/policy.hpp"

#include <algorithm>

namespace husim::policy {

using acts::ActArg;
using acts::DialogueAct;
using acts::DialogueTurn;
using acts::Speaker;

PolicyConfig robust_preset() {
  PolicyConfig c;
  c.confusion_rate = 0.02;
  c.confirm_strategy = ConfirmStrategy::Batch;
  c.max_reask = 4;
  c.preset_name = "robust";
  return c;
}

PolicyConfig brittle_preset() {
  PolicyConfig c;
  c.confusion_rate = 0.15;
  c.confirm_strategy = ConfirmStrategy::Eager;
  c.max_reask = 2;
  c.preset_name = "brittle";
  return c;
}

std::optional<PolicyConfig> preset_by_name(const std::string& name) {
  if (name == "robust") return robust_preset();
  if (name == "brittle") return brittle_preset();
  return std::nullopt;
}

namespace {

// Splits slot-value pairs across confirm/close acts of at most 5 args.
void push_chunked(std::vector<DialogueAct>& acts_out, const std::string& name,
                  const std::vector<ActArg>& args, std::size_t max_acts) {
  if (args.empty()) {
    acts_out.push_back({name, {}});
    return;
  }
  std::size_t emitted = 0;
  for (std::size_t i = 0; i < args.size() && emitted < max_acts; i += acts::kMaxArgsPerAct) {
    DialogueAct act{name, {}};
    for (std::size_t j = i; j < std::min(args.size(), i + acts::kMaxArgsPerAct); ++j)
      act.args.push_back(args[j]);
    acts_out.push_back(std::move(act));
    ++emitted;
  }
}

}  // namespace

std::pair<DialogueTurn, PolicyState> policy_respond(const PolicyState& state,
                                                    const PolicyConfig& config,
                                                    const acts::Schema& schema,
                                                    const std::optional<DialogueTurn>& user_turn,
                                                    Rng& rng) {
  if (state.phase == Phase::Closed) throw std::logic_error("policy_respond called after close");
  PolicyState next = state;

  DialogueTurn turn;
  turn.speaker = Speaker::System;

  if (next.phase == Phase::Greet) {
    next.phase = Phase::Elicit;
    turn.acts.push_back({"greeting", {}});
    return {std::move(turn), std::move(next)};
  }

  // ---- ingest user informs, each corrupted with probability confusion_rate.
  // Both draws happen for every arg so runs with different confusion rates
  // share one random stream (corruption sets are nested across rates).
  std::map<std::string, std::string> informs;
  if (user_turn) {
    for (const DialogueAct& act : user_turn->acts) {
      if (act.name != "inform") continue;
      for (const ActArg& arg : act.args) {
        if (!arg.value) continue;
        const acts::Slot* slot = schema.find_slot(arg.slot);
        if (slot == nullptr) continue;
        const double u = rng.uniform();
        std::vector<const std::string*> wrong;
        for (const std::string& v : slot->values)
          if (v != *arg.value) wrong.push_back(&v);
        const int pick = rng.uniform_int(0, std::max<int>(1, static_cast<int>(wrong.size())) - 1);
        std::string heard = *arg.value;
        if (u < config.confusion_rate && !wrong.empty())
          heard = *wrong[static_cast<std::size_t>(pick)];
        informs[arg.slot] = heard;
      }
    }
  }

  // confirmations stand unless this user turn re-informs a different value
  for (const auto& [slot, value] : next.pending_confirm) {
    const auto it = informs.find(slot);
    if (it == informs.end() || it->second == value) next.confirmed.insert(slot);
  }
  next.pending_confirm.clear();

  for (const auto& [slot, value] : informs) {
    const auto it = next.believed.find(slot);
    if (it == next.believed.end() || it->second != value) {
      next.believed[slot] = value;
      next.confirmed.erase(slot);
    }
    next.abandoned.erase(slot);
  }

  // ---- choose acts
  std::vector<ActArg> unconfirmed;
  for (const auto& [slot, value] : next.believed)
    if (!next.confirmed.count(slot)) unconfirmed.push_back({slot, value});

  std::string to_request;
  for (const acts::Slot& slot : schema.slots()) {
    if (next.believed.count(slot.name) || next.abandoned.count(slot.name)) continue;
    if (next.ask_counts[slot.name] >= config.max_reask) {
      next.abandoned.insert(slot.name);
      continue;
    }
    to_request = slot.name;
    break;
  }

  const bool eager = config.confirm_strategy == ConfirmStrategy::Eager;
  if (eager) {
    if (!unconfirmed.empty()) {
      const std::size_t room = acts::kMaxActsPerTurn - (to_request.empty() ? 0 : 1);
      push_chunked(turn.acts, "confirm", unconfirmed, room);
      for (const DialogueAct& act : turn.acts)
        if (act.name == "confirm")
          for (const ActArg& arg : act.args) next.pending_confirm.emplace_back(arg.slot, *arg.value);
    }
    if (!to_request.empty()) {
      ++next.ask_counts[to_request];
      turn.acts.push_back({"request", {{to_request, std::nullopt}}});
    }
  } else {
    if (!to_request.empty()) {
      ++next.ask_counts[to_request];
      turn.acts.push_back({"request", {{to_request, std::nullopt}}});
    } else if (!unconfirmed.empty()) {
      push_chunked(turn.acts, "confirm", unconfirmed, acts::kMaxActsPerTurn);
      for (const DialogueAct& act : turn.acts)
        if (act.name == "confirm")
          for (const ActArg& arg : act.args) next.pending_confirm.emplace_back(arg.slot, *arg.value);
    }
  }

  if (turn.acts.empty()) {
    // everything believed is confirmed and no slot is left to elicit
    std::vector<ActArg> summary;
    for (const auto& [slot, value] : next.believed) summary.push_back({slot, value});
    push_chunked(turn.acts, "close", summary, acts::kMaxActsPerTurn);
    next.phase = Phase::Closed;
    return {std::move(turn), std::move(next)};
  }

  next.phase = Phase::Elicit;
  return {std::move(turn), std::move(next)};
}

}  // namespace husim::policy
