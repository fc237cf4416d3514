#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "husim/acts.hpp"
#include "husim/corpus.hpp"
#include "husim/policy.hpp"
#include "husim/simulator.hpp"

// Plays simulators against system policies over goal sets and computes task
// completion, dialogue length, and response-diversity metrics.
namespace husim::arena {

enum class Termination { Closed, TurnCap };

const std::string& to_string(Termination t);

struct Transcript {
  acts::UserGoal goal;
  std::vector<acts::DialogueTurn> turns;  // concrete, alternating from SYSTEM
  std::vector<acts::CoarseTurn> coarse_user_turns;  // as emitted by the simulator
  Termination termination = Termination::TurnCap;
  // slot-value map from the policy's close act; populated iff closed
  std::map<std::string, std::string> confirmed;
  int malformed_turn_count = 0;
};

struct MetricsReport {
  double em_rate = 0;
  double pm_rate = 0;
  double avg_length = 0;
  double act_entropy_bits = 0;
  double act_perplexity = 1;
  int n_dialogues = 0;

  std::string to_json_text() const;
};

// A simulated user as seen by the rollout loop: consumes one coarse system
// turn, produces the user's token reply.
class UserSim {
public:
  virtual ~UserSim() = default;
  virtual TokenSequence respond(const acts::CoarseTurn& system_turn) = 0;
};

using UserSimFactory =
    std::function<std::unique_ptr<UserSim>(const acts::UserGoal&, std::uint64_t seed)>;

// Trained-model sessions behind the UserSim interface.
UserSimFactory neural_factory(const sim::Model& model, const acts::Vocabulary& vocab,
                              int max_decode_len);

// Cooperative rule-based user operating directly at the coarse level:
// answers requests (ValueInGoal / DontCare), corrects contradicting
// confirmations, volunteers pending goal slots, says bye when done. Used as
// a deterministic reference interlocutor in tests and as a sanity baseline.
UserSimFactory scripted_factory(const acts::Schema& schema, const acts::Vocabulary& vocab);

// policy turn -> coarsen -> simulator tokens -> parse (with recovery) ->
// decoarsen (with recovery) -> policy, until close or the 20-turn cap.
Transcript run_dialogue(const UserSimFactory& factory, const policy::PolicyConfig& policy_config,
                        const acts::UserGoal& goal, const acts::Schema& schema,
                        const acts::Vocabulary& vocab, std::uint64_t seed);

// 1 iff the dialogue closed and every goal slot is satisfied: fixed slots
// confirmed with the goal value, flexible slots confirmed with some value,
// and nothing confirmed outside the schema.
int exact_match(const Transcript& t, const acts::Schema& schema);

// Correct-slot count (same per-slot rule) over the schema slot count.
double partial_match(const Transcript& t, const acts::Schema& schema);

double avg_dialogue_length(const std::vector<Transcript>& transcripts);

// Conditional entropy (bits) of the user's act-name label given the
// preceding system act-name label, and 2^entropy.
std::pair<double, double> act_diversity(const std::vector<Transcript>& transcripts);

struct EvaluateOptions {
  int n_goals = 1000;
  std::uint64_t seed = 0;
  double dontcare_probability = 0.25;
};

MetricsReport evaluate(const UserSimFactory& factory, const policy::PolicyConfig& policy_config,
                       const acts::Schema& schema, const acts::Vocabulary& vocab,
                       const EvaluateOptions& options,
                       std::vector<Transcript>* transcripts_out = nullptr);

// Transcript dump, one JSON object per line mirroring the corpus format
// plus `confirmed`, `termination` and `malformed_turn_count`.
std::string transcript_to_jsonl_line(const Transcript& t);
void write_transcripts(const std::string& path, const std::vector<Transcript>& transcripts);

}  // namespace husim::arena
