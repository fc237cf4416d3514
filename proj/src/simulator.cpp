#include "husim/simulator.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace husim::sim {

namespace {

const std::array<std::string, 4> kVariantNames = {"hus", "vhus", "husreg", "vhusreg"};

}  // namespace

const std::string& to_string(Variant v) { return kVariantNames[static_cast<int>(v)]; }

std::optional<Variant> variant_from_string(const std::string& s) {
  for (std::size_t i = 0; i < kVariantNames.size(); ++i)
    if (kVariantNames[i] == s) return static_cast<Variant>(i);
  return std::nullopt;
}

int length_from_raw(double raw) {
  const int rounded = static_cast<int>(std::lround(raw));
  return std::min(acts::kMaxDialogueTurns, std::max(1, rounded));
}

int sample_dialogue_length(Rng& rng) { return length_from_raw(rng.gaussian(5.0, 2.0)); }

std::string TrainConfig::to_json_text() const {
  nlohmann::json j;
  j["embedding_dim"] = embedding_dim;
  j["state_dim"] = state_dim;
  j["latent_dim"] = latent_dim;
  j["lr"] = lr;
  j["dropout"] = dropout;
  j["batch_size"] = batch_size;
  j["epochs"] = epochs;
  j["alpha"] = alpha;
  j["max_decode_len"] = max_decode_len;
  j["clip_norm"] = clip_norm;
  j["validation_fraction"] = validation_fraction;
  j["seed"] = seed;
  return j.dump();
}

TrainConfig TrainConfig::from_json_text(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  TrainConfig c;
  c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
  c.state_dim = j.value("state_dim", c.state_dim);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.lr = j.value("lr", c.lr);
  c.dropout = j.value("dropout", c.dropout);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.alpha = j.value("alpha", c.alpha);
  c.max_decode_len = j.value("max_decode_len", c.max_decode_len);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.validation_fraction = j.value("validation_fraction", c.validation_fraction);
  c.seed = j.value("seed", c.seed);
  return c;
}

DialogueExample make_example(const corpus::Dialogue& dialogue, const acts::Vocabulary& vocab,
                             const acts::Schema& schema) {
  DialogueExample ex;
  ex.goal_tokens = acts::linearize_goal(dialogue.goal, vocab);
  ex.length_feature = length_feature(static_cast<int>(dialogue.turns.size()));
  for (std::size_t i = 0; i + 1 < dialogue.turns.size(); i += 2) {
    const acts::DialogueTurn& system_turn = dialogue.turns[i];
    const acts::DialogueTurn& user_turn = dialogue.turns[i + 1];
    if (system_turn.speaker != acts::Speaker::System ||
        user_turn.speaker != acts::Speaker::User)
      throw std::invalid_argument("make_example: turns do not alternate system/user");
    ex.system_turns.push_back(
        acts::linearize(acts::coarsen(system_turn, dialogue.goal, schema), vocab));
    ex.user_turns.push_back(
        acts::linearize(acts::coarsen(user_turn, dialogue.goal, schema), vocab));
  }
  if (ex.system_turns.empty())
    throw std::invalid_argument("make_example: dialogue has no system/user exchange");
  return ex;
}

std::vector<DialogueExample> make_examples(const std::vector<corpus::Dialogue>& dialogues,
                                           const acts::Vocabulary& vocab,
                                           const acts::Schema& schema) {
  std::vector<DialogueExample> out;
  out.reserve(dialogues.size());
  for (const corpus::Dialogue& d : dialogues) out.push_back(make_example(d, vocab, schema));
  return out;
}

std::string curves_to_csv(const std::vector<EpochStats>& curves) {
  std::ostringstream out;
  out << "epoch,train_loss,val_loss,val_token_acc\n";
  char buf[160];
  for (const EpochStats& e : curves) {
    std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f\n", e.epoch, e.train_loss, e.val_loss,
                  e.val_token_acc);
    out << buf;
  }
  return out.str();
}

namespace {

constexpr char kMagic[9] = "HUSIMCK1";

void write_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

void write_f64(std::ostream& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

double read_f64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

void save_checkpoint(const std::string& path, Model& model, const TrainConfig& config) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint file '" + path + "' for writing");

  const std::vector<nn::Param<Real>*> params = model.params();
  nlohmann::json header;
  header["format_version"] = 1;
  header["variant"] = to_string(model.variant);
  header["vocab_size"] = model.vocab_size;
  header["train_config"] = nlohmann::json::parse(config.to_json_text());
  nlohmann::json jparams = nlohmann::json::array();
  for (const nn::Param<Real>* p : params)
    jparams.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
  header["params"] = std::move(jparams);
  const std::string header_text = header.dump();

  out.write(kMagic, 8);
  write_u32(out, static_cast<std::uint32_t>(header_text.size()));
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (const nn::Param<Real>* p : params) {
    const Real* data = p->value.data();  // column-major
    for (Index i = 0; i < p->value.size(); ++i) write_f64(out, static_cast<double>(data[i]));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint file '" + path + "'");

  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("'" + path + "' is not a checkpoint file");
  const std::uint32_t header_len = read_u32(in);
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), header_len);
  const nlohmann::json header = nlohmann::json::parse(header_text);
  if (header.at("format_version").get<int>() != 1)
    throw std::runtime_error("unsupported checkpoint version in '" + path + "'");

  Checkpoint ck;
  ck.config = TrainConfig::from_json_text(header.at("train_config").dump());
  const auto variant = variant_from_string(header.at("variant").get<std::string>());
  if (!variant) throw std::runtime_error("unknown variant in checkpoint '" + path + "'");
  Rng dummy(0);
  ck.model =
      Model::create(*variant, header.at("vocab_size").get<int>(), ck.config, dummy);

  const std::vector<nn::Param<Real>*> params = ck.model.params();
  const auto& jparams = header.at("params");
  if (jparams.size() != params.size())
    throw std::runtime_error("checkpoint parameter list mismatch in '" + path + "'");
  for (std::size_t i = 0; i < params.size(); ++i) {
    nn::Param<Real>* p = params[i];
    const auto& jp = jparams[i];
    if (jp.at("name").get<std::string>() != p->name ||
        jp.at("rows").get<Index>() != p->value.rows() ||
        jp.at("cols").get<Index>() != p->value.cols())
      throw std::runtime_error("checkpoint tensor mismatch for '" + p->name + "' in '" + path +
                               "'");
    Real* data = p->value.data();
    for (Index k = 0; k < p->value.size(); ++k) data[k] = static_cast<Real>(read_f64(in));
  }
  if (!in) throw std::runtime_error("truncated checkpoint '" + path + "'");
  return ck;
}

}  // namespace husim::sim
