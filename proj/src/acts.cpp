#include "husim/acts.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace husim::acts {

namespace {

const std::array<std::string, 5> kCoarseNames = {
    "Requested", "DontCare", "ValueInGoal", "ValueContradictsGoal", "Other"};

}  // namespace

Schema::Schema(std::vector<Slot> slots, std::vector<std::string> act_names)
    : slots_(std::move(slots)), act_names_(std::move(act_names)) {
  std::sort(slots_.begin(), slots_.end(),
            [](const Slot& a, const Slot& b) { return a.name < b.name; });
  std::sort(act_names_.begin(), act_names_.end());

  if (slots_.empty()) throw std::invalid_argument("schema has no slots");
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    const Slot& s = slots_[i];
    if (s.name.empty()) throw std::invalid_argument("empty slot name");
    if (s.values.empty()) throw std::invalid_argument("slot '" + s.name + "' has empty value domain");
    if (!slot_index_.emplace(s.name, i).second)
      throw std::invalid_argument("duplicate slot name '" + s.name + "'");
  }
  for (std::size_t i = 1; i < act_names_.size(); ++i) {
    if (act_names_[i] == act_names_[i - 1])
      throw std::invalid_argument("duplicate act name '" + act_names_[i] + "'");
  }
}

const Slot* Schema::find_slot(const std::string& name) const {
  const auto it = slot_index_.find(name);
  return it == slot_index_.end() ? nullptr : &slots_[it->second];
}

const Slot& Schema::slot(const std::string& name) const {
  const Slot* s = find_slot(name);
  if (s == nullptr) throw std::invalid_argument("unknown slot '" + name + "'");
  return *s;
}

bool Schema::has_act(const std::string& name) const {
  return std::binary_search(act_names_.begin(), act_names_.end(), name);
}

Schema Schema::from_json_text(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  std::vector<Slot> slots;
  for (const auto& js : j.at("slots")) {
    Slot s;
    s.name = js.at("name").get<std::string>();
    s.values = js.at("values").get<std::vector<std::string>>();
    slots.push_back(std::move(s));
  }
  return Schema(std::move(slots), j.at("acts").get<std::vector<std::string>>());
}

Schema Schema::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open schema file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

std::string Schema::to_json_text() const {
  nlohmann::json j;
  j["slots"] = nlohmann::json::array();
  for (const Slot& s : slots_) j["slots"].push_back({{"name", s.name}, {"values", s.values}});
  j["acts"] = act_names_;
  return j.dump(2);
}

const std::string& GoalEntry::value() const {
  if (flexible_) throw std::logic_error("flexible goal entry has no value");
  return value_;
}

bool UserGoal::is_flexible(const std::string& slot) const {
  const auto it = constraints.find(slot);
  return it != constraints.end() && it->second.is_flexible();
}

const std::string* UserGoal::fixed_value(const std::string& slot) const {
  const auto it = constraints.find(slot);
  if (it == constraints.end() || it->second.is_flexible()) return nullptr;
  return &it->second.value();
}

void validate_goal(const UserGoal& goal, const Schema& schema) {
  for (const auto& [name, entry] : goal.constraints) {
    const Slot& s = schema.slot(name);
    if (!entry.is_flexible() &&
        std::find(s.values.begin(), s.values.end(), entry.value()) == s.values.end())
      throw std::invalid_argument("goal value '" + entry.value() + "' not in domain of slot '" + name + "'");
  }
  const auto& p = goal.personality;
  if (p.cooperativeness < 0.0 || p.cooperativeness > 1.0 || p.randomness < 0.0 || p.randomness > 1.0)
    throw std::invalid_argument("personality dials must lie in [0,1]");
}

bool DialogueTurn::has_act(const std::string& name) const { return find_act(name) != nullptr; }

const DialogueAct* DialogueTurn::find_act(const std::string& name) const {
  for (const DialogueAct& a : acts)
    if (a.name == name) return &a;
  return nullptr;
}

const std::string& to_string(CoarseValue v) { return kCoarseNames[static_cast<int>(v)]; }

std::optional<CoarseValue> coarse_value_from_string(const std::string& s) {
  for (std::size_t i = 0; i < kCoarseNames.size(); ++i)
    if (kCoarseNames[i] == s) return kCoarseValues[i];
  return std::nullopt;
}

void validate_turn(const DialogueTurn& turn) {
  if (turn.acts.empty() || turn.acts.size() > kMaxActsPerTurn)
    throw std::invalid_argument("turn must carry 1-3 acts, got " + std::to_string(turn.acts.size()));
  for (const DialogueAct& a : turn.acts) {
    if (a.name.empty()) throw std::invalid_argument("act with empty name");
    if (a.args.size() > kMaxArgsPerAct)
      throw std::invalid_argument("act '" + a.name + "' carries more than 5 slot-value pairs");
  }
}

void validate_coarse_turn(const CoarseTurn& turn) {
  if (turn.acts.empty() || turn.acts.size() > kMaxActsPerTurn)
    throw std::invalid_argument("coarse turn must carry 1-3 acts");
  for (const CoarseAct& a : turn.acts)
    if (a.args.size() > kMaxArgsPerAct)
      throw std::invalid_argument("coarse act '" + a.name + "' carries more than 5 args");
}

std::string composite_token(const std::string& slot, CoarseValue tag) {
  return slot + "=" + to_string(tag);
}

Vocabulary Vocabulary::build(const Schema& schema) {
  Vocabulary v;
  const auto add = [&v](const std::string& tok) {
    if (!v.index_.emplace(tok, static_cast<int>(v.tokens_.size())).second)
      throw std::invalid_argument("duplicate vocabulary token '" + tok + "'");
    v.tokens_.push_back(tok);
  };

  add("<sos>");
  add("<eos>");
  add("(");
  add(")");

  v.act_begin_ = static_cast<int>(v.tokens_.size());
  for (const std::string& a : schema.act_names()) add(a);
  v.act_end_ = static_cast<int>(v.tokens_.size());

  v.slot_begin_ = v.act_end_;
  for (const Slot& s : schema.slots()) add(s.name);
  v.slot_end_ = static_cast<int>(v.tokens_.size());

  for (const Slot& s : schema.slots()) {
    for (const CoarseValue tag : kCoarseValues) {
      v.composite_.emplace(static_cast<int>(v.tokens_.size()), std::make_pair(s.name, tag));
      add(composite_token(s.name, tag));
    }
  }
  return v;
}

Vocabulary build_vocabulary(const Schema& schema) { return Vocabulary::build(schema); }

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw std::out_of_range("token id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

int Vocabulary::id(const std::string& token) const {
  const auto it = index_.find(token);
  if (it == index_.end()) throw std::invalid_argument("token '" + token + "' absent from vocabulary");
  return it->second;
}

std::optional<int> Vocabulary::find(const std::string& token) const {
  const auto it = index_.find(token);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

bool Vocabulary::is_act_name(int id) const { return id >= act_begin_ && id < act_end_; }
bool Vocabulary::is_bare_slot(int id) const { return id >= slot_begin_ && id < slot_end_; }

std::optional<std::pair<std::string, CoarseValue>> Vocabulary::composite(int id) const {
  const auto it = composite_.find(id);
  if (it == composite_.end()) return std::nullopt;
  return it->second;
}

CoarseTurn coarsen(const DialogueTurn& turn, const UserGoal& goal, const Schema& schema) {
  validate_turn(turn);
  CoarseTurn out;
  for (const DialogueAct& act : turn.acts) {
    CoarseAct ca;
    ca.name = act.name;
    for (const ActArg& arg : act.args) {
      if (schema.find_slot(arg.slot) == nullptr)
        throw std::invalid_argument("slot '" + arg.slot + "' not in schema");
      CoarseArg c;
      c.slot = arg.slot;
      if (arg.value.has_value()) {
        if (goal.is_flexible(arg.slot)) {
          c.value = CoarseValue::DontCare;
        } else if (const std::string* gv = goal.fixed_value(arg.slot)) {
          c.value = (*gv == *arg.value) ? CoarseValue::ValueInGoal
                                        : CoarseValue::ValueContradictsGoal;
        } else {
          c.value = CoarseValue::Other;
        }
      }
      ca.args.push_back(std::move(c));
    }
    out.acts.push_back(std::move(ca));
  }
  return out;
}

std::vector<std::string> linearize_strings(const CoarseTurn& turn) {
  std::vector<std::string> out;
  for (const CoarseAct& act : turn.acts) {
    out.push_back(act.name);
    out.push_back("(");
    for (const CoarseArg& arg : act.args)
      out.push_back(arg.value ? composite_token(arg.slot, *arg.value) : arg.slot);
    out.push_back(")");
  }
  return out;
}

TokenSequence linearize(const CoarseTurn& turn, const Vocabulary& vocab) {
  TokenSequence out;
  for (const std::string& tok : linearize_strings(turn)) out.push_back(vocab.id(tok));
  return out;
}

std::vector<std::string> linearize_goal_strings(const UserGoal& goal) {
  std::vector<std::string> out;
  for (const auto& [slot, entry] : goal.constraints)
    out.push_back(composite_token(
        slot, entry.is_flexible() ? CoarseValue::DontCare : CoarseValue::ValueInGoal));
  return out;
}

TokenSequence linearize_goal(const UserGoal& goal, const Vocabulary& vocab) {
  TokenSequence out;
  for (const std::string& tok : linearize_goal_strings(goal)) out.push_back(vocab.id(tok));
  return out;
}

namespace {

// Shared by strict and recovering parsers. Returns the number of complete
// acts consumed before an error (strict mode throws instead).
CoarseTurn parse_impl(const TokenSequence& tokens, const Vocabulary& vocab, bool recover) {
  CoarseTurn out;
  std::size_t i = 0;
  const auto fail = [&](std::size_t pos, const std::string& msg) {
    if (!recover) throw ParseError(pos, msg + " at position " + std::to_string(pos));
    out.malformed = true;
    return out;  // discard everything from the offending act onward
  };

  while (i < tokens.size()) {
    const int id = tokens[i];
    if (id < 0 || id >= vocab.size()) return fail(i, "unknown token id");
    if (!vocab.is_act_name(id)) return fail(i, "expected act name, got '" + vocab.token(id) + "'");
    if (out.acts.size() == kMaxActsPerTurn) return fail(i, "more than 3 acts in turn");
    if (i + 1 >= tokens.size() || tokens[i + 1] != vocab.lparen_id())
      return fail(i + 1, "expected '(' after act name");

    CoarseAct act;
    act.name = vocab.token(id);
    i += 2;
    while (true) {
      if (i >= tokens.size()) return fail(i, "unterminated act, expected ')'");
      const int t = tokens[i];
      if (t == vocab.rparen_id()) {
        ++i;
        break;
      }
      if (act.args.size() == kMaxArgsPerAct) return fail(i, "more than 5 args in act");
      if (t >= 0 && t < vocab.size() && vocab.is_bare_slot(t)) {
        act.args.push_back(CoarseArg{vocab.token(t), std::nullopt});
      } else if (const auto comp = (t >= 0 && t < vocab.size()) ? vocab.composite(t) : std::nullopt) {
        act.args.push_back(CoarseArg{comp->first, comp->second});
      } else {
        return fail(i, "expected slot arg or ')'");
      }
      ++i;
    }
    out.acts.push_back(std::move(act));
  }
  return out;
}

}  // namespace

CoarseTurn parse(const TokenSequence& tokens, const Vocabulary& vocab) {
  return parse_impl(tokens, vocab, /*recover=*/false);
}

CoarseTurn parse_strings(const std::vector<std::string>& tokens, const Vocabulary& vocab) {
  TokenSequence ids;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto id = vocab.find(tokens[i]);
    if (!id) throw ParseError(i, "unknown token '" + tokens[i] + "' at position " + std::to_string(i));
    ids.push_back(*id);
  }
  return parse(ids, vocab);
}

CoarseTurn parse_recover(const TokenSequence& tokens, const Vocabulary& vocab) {
  return parse_impl(tokens, vocab, /*recover=*/true);
}

namespace {

std::optional<ActArg> decoarsen_arg(const CoarseArg& arg, const UserGoal& goal,
                                    const Schema& schema, Rng& rng, bool recover) {
  const Slot& slot = schema.slot(arg.slot);
  if (!arg.value || *arg.value == CoarseValue::Requested) return ActArg{arg.slot, std::nullopt};

  const auto fail = [&](const std::string& msg) -> std::optional<ActArg> {
    if (recover) return std::nullopt;
    throw std::runtime_error(msg);
  };

  switch (*arg.value) {
    case CoarseValue::ValueInGoal: {
      const std::string* gv = goal.fixed_value(arg.slot);
      if (gv == nullptr) return fail("ValueInGoal for slot '" + arg.slot + "' absent from goal");
      return ActArg{arg.slot, *gv};
    }
    case CoarseValue::ValueContradictsGoal: {
      const std::string* gv = goal.fixed_value(arg.slot);
      std::vector<const std::string*> eligible;
      for (const std::string& v : slot.values)
        if (gv == nullptr || v != *gv) eligible.push_back(&v);
      if (eligible.empty())
        return fail("no contradicting value available for slot '" + arg.slot + "'");
      return ActArg{arg.slot, *eligible[static_cast<std::size_t>(
                                  rng.uniform_int(0, static_cast<int>(eligible.size()) - 1))]};
    }
    case CoarseValue::DontCare:
    case CoarseValue::Other:
      return ActArg{arg.slot,
                    slot.values[static_cast<std::size_t>(
                        rng.uniform_int(0, static_cast<int>(slot.values.size()) - 1))]};
    default:
      return fail("unreachable coarse tag");
  }
}

DecoarsenResult decoarsen_impl(const CoarseTurn& turn, const UserGoal& goal,
                               const Schema& schema, Rng& rng, bool recover) {
  DecoarsenResult res;
  res.turn.speaker = Speaker::User;
  for (const CoarseAct& ca : turn.acts) {
    DialogueAct act;
    act.name = ca.name;
    for (const CoarseArg& arg : ca.args) {
      if (auto a = decoarsen_arg(arg, goal, schema, rng, recover))
        act.args.push_back(std::move(*a));
      else
        ++res.dropped_args;
    }
    res.turn.acts.push_back(std::move(act));
  }
  return res;
}

}  // namespace

DialogueTurn decoarsen(const CoarseTurn& turn, const UserGoal& goal,
                       const std::vector<DialogueTurn>& history, const Schema& schema,
                       Rng& rng) {
  (void)history;
  return decoarsen_impl(turn, goal, schema, rng, /*recover=*/false).turn;
}

DecoarsenResult decoarsen_recover(const CoarseTurn& turn, const UserGoal& goal,
                                  const std::vector<DialogueTurn>& history,
                                  const Schema& schema, Rng& rng) {
  (void)history;
  return decoarsen_impl(turn, goal, schema, rng, /*recover=*/true);
}

}  // namespace husim::acts
