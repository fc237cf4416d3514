#include "husim/arena.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "json_util.hpp"

namespace husim::arena {

using acts::ActArg;
using acts::CoarseTurn;
using acts::CoarseValue;
using acts::DialogueAct;
using acts::DialogueTurn;
using acts::Speaker;

namespace {

const std::array<std::string, 2> kTerminationNames = {"closed", "turn_cap"};

}  // namespace

const std::string& to_string(Termination t) { return kTerminationNames[static_cast<int>(t)]; }

std::string MetricsReport::to_json_text() const {
  nlohmann::json j;
  j["em_rate"] = em_rate;
  j["pm_rate"] = pm_rate;
  j["avg_length"] = avg_length;
  j["act_entropy_bits"] = act_entropy_bits;
  j["act_perplexity"] = act_perplexity;
  j["n_dialogues"] = n_dialogues;
  return j.dump();
}

namespace {

class NeuralUserSim : public UserSim {
public:
  NeuralUserSim(const sim::Model& model, const acts::Vocabulary& vocab,
                const acts::UserGoal& goal, std::uint64_t seed, int max_decode_len)
      : session_(&model, &vocab, goal, seed, max_decode_len) {}

  TokenSequence respond(const CoarseTurn& system_turn) override {
    return session_.respond(system_turn);
  }

private:
  sim::Session session_;
};

// Coarse-level cooperative user: the reference interlocutor.
class ScriptedUser : public UserSim {
public:
  ScriptedUser(const acts::Schema& schema, const acts::Vocabulary& vocab,
               const acts::UserGoal& goal)
      : schema_(&schema), vocab_(&vocab), goal_(goal) {
    for (const auto& [slot, entry] : goal_.constraints)
      if (!entry.is_flexible()) pending_.push_back(slot);
  }

  TokenSequence respond(const CoarseTurn& system_turn) override {
    std::vector<std::string> requested;
    std::vector<std::string> contradicted;
    for (const acts::CoarseAct& act : system_turn.acts) {
      if (act.name == "request") {
        for (const acts::CoarseArg& arg : act.args) requested.push_back(arg.slot);
      } else if (act.name == "confirm") {
        for (const acts::CoarseArg& arg : act.args)
          if (arg.value == CoarseValue::ValueContradictsGoal) contradicted.push_back(arg.slot);
      }
    }

    acts::CoarseAct inform{"inform", {}};
    const auto add = [&](const std::string& slot) {
      if (static_cast<int>(inform.args.size()) >= acts::kMaxArgsPerAct) return;
      const auto tag =
          goal_.is_flexible(slot) || !goal_.has(slot) ? CoarseValue::DontCare : CoarseValue::ValueInGoal;
      inform.args.push_back({slot, tag});
      drop_pending(slot);
    };
    for (const std::string& slot : contradicted)
      if (goal_.fixed_value(slot) != nullptr) add(slot);
    for (const std::string& slot : requested) add(slot);
    if (inform.args.empty() && !pending_.empty()) add(pending_.front());

    CoarseTurn reply;
    if (!inform.args.empty()) {
      reply.acts.push_back(std::move(inform));
    } else if (pending_.empty() && requested.empty()) {
      reply.acts.push_back({"bye", {}});
    } else {
      reply.acts.push_back({"affirm", {}});
    }
    return acts::linearize(reply, *vocab_);
  }

private:
  void drop_pending(const std::string& slot) {
    pending_.erase(std::remove(pending_.begin(), pending_.end(), slot), pending_.end());
  }

  const acts::Schema* schema_;
  const acts::Vocabulary* vocab_;
  acts::UserGoal goal_;
  std::vector<std::string> pending_;
};

}  // namespace

UserSimFactory neural_factory(const sim::Model& model, const acts::Vocabulary& vocab,
                              int max_decode_len) {
  return [&model, &vocab, max_decode_len](const acts::UserGoal& goal, std::uint64_t seed) {
    return std::make_unique<NeuralUserSim>(model, vocab, goal, seed, max_decode_len);
  };
}

UserSimFactory scripted_factory(const acts::Schema& schema, const acts::Vocabulary& vocab) {
  return [&schema, &vocab](const acts::UserGoal& goal, std::uint64_t) {
    return std::make_unique<ScriptedUser>(schema, vocab, goal);
  };
}

Transcript run_dialogue(const UserSimFactory& factory, const policy::PolicyConfig& policy_config,
                        const acts::UserGoal& goal, const acts::Schema& schema,
                        const acts::Vocabulary& vocab, std::uint64_t seed) {
  Transcript t;
  t.goal = goal;

  Rng policy_rng(derive_seed(seed, "policy"));
  Rng value_rng(derive_seed(seed, "values"));
  std::unique_ptr<UserSim> user = factory(goal, derive_seed(seed, "sim"));

  policy::PolicyState pstate;
  std::optional<DialogueTurn> last_user;

  while (true) {
    auto [system_turn, pnext] = policy::policy_respond(pstate, policy_config, schema, last_user,
                                                       policy_rng);
    pstate = std::move(pnext);
    t.turns.push_back(system_turn);
    if (pstate.phase == policy::Phase::Closed) {
      t.termination = Termination::Closed;
      for (const DialogueAct& act : system_turn.acts)
        if (act.name == "close")
          for (const ActArg& arg : act.args)
            if (arg.value) t.confirmed[arg.slot] = *arg.value;
      return t;
    }
    if (static_cast<int>(t.turns.size()) >= acts::kMaxDialogueTurns) {
      t.termination = Termination::TurnCap;
      return t;
    }

    const CoarseTurn coarse_system = acts::coarsen(system_turn, goal, schema);
    const TokenSequence tokens = user->respond(coarse_system);
    const CoarseTurn coarse_user = acts::parse_recover(tokens, vocab);
    const acts::DecoarsenResult grounded =
        acts::decoarsen_recover(coarse_user, goal, t.turns, schema, value_rng);
    if (coarse_user.malformed || grounded.dropped_args > 0) ++t.malformed_turn_count;

    t.coarse_user_turns.push_back(coarse_user);
    t.turns.push_back(grounded.turn);
    last_user = grounded.turn;
    if (static_cast<int>(t.turns.size()) >= acts::kMaxDialogueTurns) {
      t.termination = Termination::TurnCap;
      return t;
    }
  }
}

namespace {

// Per-slot correctness shared by EM and PM: fixed slots must carry the goal
// value, flexible (dontcare) slots any value.
bool slot_correct(const Transcript& t, const std::string& slot, const acts::GoalEntry& entry) {
  const auto it = t.confirmed.find(slot);
  if (it == t.confirmed.end()) return false;
  return entry.is_flexible() || entry.value() == it->second;
}

}  // namespace

int exact_match(const Transcript& t, const acts::Schema& schema) {
  if (t.termination != Termination::Closed) return 0;
  for (const auto& [slot, value] : t.confirmed)
    if (schema.find_slot(slot) == nullptr) return 0;
  for (const auto& [slot, entry] : t.goal.constraints)
    if (!slot_correct(t, slot, entry)) return 0;
  return 1;
}

double partial_match(const Transcript& t, const acts::Schema& schema) {
  int correct = 0;
  for (const auto& [slot, entry] : t.goal.constraints)
    if (slot_correct(t, slot, entry)) ++correct;
  return static_cast<double>(correct) / static_cast<double>(schema.slots().size());
}

double avg_dialogue_length(const std::vector<Transcript>& transcripts) {
  if (transcripts.empty()) throw std::invalid_argument("avg_dialogue_length: empty transcript set");
  double total = 0;
  for (const Transcript& t : transcripts) total += static_cast<double>(t.turns.size());
  return total / static_cast<double>(transcripts.size());
}

std::pair<double, double> act_diversity(const std::vector<Transcript>& transcripts) {
  if (transcripts.empty()) throw std::invalid_argument("act_diversity: empty transcript set");

  const auto label = [](const DialogueTurn& turn) {
    std::string out;
    for (const DialogueAct& act : turn.acts) {
      if (!out.empty()) out += "+";
      out += act.name;
    }
    return out;
  };

  std::map<std::string, std::map<std::string, long>> counts;
  long total = 0;
  for (const Transcript& t : transcripts) {
    for (std::size_t i = 0; i + 1 < t.turns.size(); i += 2) {
      ++counts[label(t.turns[i])][label(t.turns[i + 1])];
      ++total;
    }
  }
  if (total == 0) return {0.0, 1.0};

  double entropy = 0.0;
  for (const auto& [system_label, user_counts] : counts) {
    long n_s = 0;
    for (const auto& [user_label, n] : user_counts) n_s += n;
    double h_s = 0.0;
    for (const auto& [user_label, n] : user_counts) {
      const double p = static_cast<double>(n) / static_cast<double>(n_s);
      h_s -= p * std::log2(p);
    }
    entropy += (static_cast<double>(n_s) / static_cast<double>(total)) * h_s;
  }
  return {entropy, std::exp2(entropy)};
}

MetricsReport evaluate(const UserSimFactory& factory, const policy::PolicyConfig& policy_config,
                       const acts::Schema& schema, const acts::Vocabulary& vocab,
                       const EvaluateOptions& options, std::vector<Transcript>* transcripts_out) {
  if (options.n_goals < 1) throw std::invalid_argument("evaluate: n_goals must be >= 1");

  corpus::CorpusConfig goal_config;
  goal_config.dontcare_probability = options.dontcare_probability;
  Rng goal_rng(derive_seed(options.seed, "goals"));

  std::vector<Transcript> transcripts;
  transcripts.reserve(static_cast<std::size_t>(options.n_goals));
  for (int i = 0; i < options.n_goals; ++i) {
    const acts::UserGoal goal = corpus::sample_goal(schema, goal_config, goal_rng);
    transcripts.push_back(run_dialogue(factory, policy_config, goal, schema, vocab,
                                       derive_seed(options.seed, static_cast<std::uint64_t>(i))));
  }

  MetricsReport report;
  report.n_dialogues = options.n_goals;
  double em = 0, pm = 0;
  for (const Transcript& t : transcripts) {
    em += exact_match(t, schema);
    pm += partial_match(t, schema);
  }
  report.em_rate = em / static_cast<double>(options.n_goals);
  report.pm_rate = pm / static_cast<double>(options.n_goals);
  report.avg_length = avg_dialogue_length(transcripts);
  const auto [entropy, perplexity] = act_diversity(transcripts);
  report.act_entropy_bits = entropy;
  report.act_perplexity = perplexity;

  if (transcripts_out != nullptr) *transcripts_out = std::move(transcripts);
  return report;
}

std::string transcript_to_jsonl_line(const Transcript& t) {
  nlohmann::json j;
  j["goal"] = detail::goal_to_json(t.goal);
  j["personality"] = detail::personality_to_json(t.goal.personality);
  nlohmann::json turns = nlohmann::json::array();
  for (const DialogueTurn& turn : t.turns) turns.push_back(detail::turn_to_json(turn));
  j["turns"] = std::move(turns);
  j["termination"] = to_string(t.termination);
  j["confirmed"] = nlohmann::json::object();
  for (const auto& [slot, value] : t.confirmed) j["confirmed"][slot] = value;
  j["malformed_turn_count"] = t.malformed_turn_count;
  return j.dump();
}

void write_transcripts(const std::string& path, const std::vector<Transcript>& transcripts) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open transcript file '" + path + "' for writing");
  for (const Transcript& t : transcripts) out << transcript_to_jsonl_line(t) << "\n";
  if (!out) throw std::runtime_error("failed writing transcript file '" + path + "'");
}

}  // namespace husim::arena
