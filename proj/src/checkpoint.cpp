#include "rcadapt/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "rcadapt/errors.hpp"

namespace rcadapt {

using nlohmann::json;

json to_json(const EncoderConfig& c) {
  return {{"n_layers", c.n_layers},
          {"hidden_dim", c.hidden_dim},
          {"n_heads", c.n_heads},
          {"max_len", c.max_len},
          {"dropout_rate", c.dropout_rate},
          {"vocab_size", c.vocab_size},
          {"mode", c.mode == EncoderMode::toy_transformer ? "toy_transformer" : "external_pretrained"},
          {"ffn_dim", c.ffn_dim},
          {"batch_norm", c.batch_norm},
          {"init_std", c.init_std}};
}

EncoderConfig encoder_config_from_json(const json& j) {
  EncoderConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.max_len = j.value("max_len", c.max_len);
  c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  const auto mode = j.value("mode", std::string("toy_transformer"));
  if (mode == "toy_transformer") {
    c.mode = EncoderMode::toy_transformer;
  } else if (mode == "external_pretrained") {
    c.mode = EncoderMode::external_pretrained;
  } else {
    throw ConfigError("unknown encoder mode '" + mode + "'");
  }
  c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
  c.batch_norm = j.value("batch_norm", c.batch_norm);
  c.init_std = j.value("init_std", c.init_std);
  return c;
}

namespace {

// Batch-norm statistics are saved even when the layer is disabled.
std::vector<Matrix*> buffers(SpanModel& model) {
  return {&model.norm().running_mean, &model.norm().running_var};
}

void write_matrix(std::ostream& out, const Matrix& m) {
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
}

void read_matrix(std::istream& in, Matrix& m) {
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  if (!in) throw ParseError("checkpoint parameter blob is truncated");
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, SpanModel& model, const Vocabulary* vocab) {
  std::filesystem::create_directories(dir);
  const auto params = model.parameters();
  {
    std::ofstream out(dir / "params.bin", std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (dir / "params.bin").string());
    for (const auto* p : params) write_matrix(out, p->value);
    for (const auto* b : buffers(model)) write_matrix(out, *b);
  }
  json meta;
  meta["schema"] = kCheckpointSchema;
  meta["config"] = to_json(model.config());
  meta["step"] = model.step();
  meta["seed"] = model.seed();
  meta["rng_state"] = serialize_rng(model.rng());
  json shapes = json::array();
  for (const auto* p : params) shapes.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
  meta["parameters"] = std::move(shapes);
  std::ofstream(dir / "meta.json", std::ios::binary) << meta.dump(2) << '\n';
  if (vocab) vocab->save(dir / "vocab.txt");
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream meta_in(dir / "meta.json");
  if (!meta_in) throw ParseError("no checkpoint metadata in " + dir.string());
  json meta;
  try {
    meta = json::parse(meta_in);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("malformed checkpoint metadata: ") + e.what());
  }
  if (meta.value("schema", -1) != kCheckpointSchema) {
    throw ParseError("unsupported checkpoint schema in " + dir.string());
  }
  LoadedCheckpoint out;
  out.model = std::make_unique<SpanModel>(encoder_config_from_json(meta.at("config")),
                                          meta.at("seed").get<std::uint64_t>());
  auto& model = *out.model;
  const auto params = model.parameters();
  const auto& shapes = meta.at("parameters");
  if (shapes.size() != params.size()) throw ParseError("checkpoint parameter count mismatch");
  std::ifstream in(dir / "params.bin", std::ios::binary);
  if (!in) throw ParseError("no parameter blob in " + dir.string());
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto* p = params[i];
    if (shapes[i].at("name") != p->name || shapes[i].at("rows") != p->value.rows() ||
        shapes[i].at("cols") != p->value.cols()) {
      throw ParseError("checkpoint parameter '" + p->name + "' does not match the model layout");
    }
    read_matrix(in, p->value);
  }
  for (auto* b : buffers(model)) read_matrix(in, *b);
  if (in.peek() != std::char_traits<char>::eof()) throw ParseError("checkpoint parameter blob has trailing bytes");
  model.set_step(meta.at("step").get<std::int64_t>());
  model.rng() = deserialize_rng(meta.at("rng_state").get<std::string>());
  if (std::filesystem::exists(dir / "vocab.txt")) out.vocab = Vocabulary::load(dir / "vocab.txt");
  return out;
}

std::unique_ptr<SpanModel> clone_model(SpanModel& model) {
  auto copy = std::make_unique<SpanModel>(model.config(), model.seed());
  const auto from = model.parameters();
  const auto to = copy->parameters();
  for (std::size_t i = 0; i < from.size(); ++i) to[i]->value = from[i]->value;
  copy->norm().running_mean = model.norm().running_mean;
  copy->norm().running_var = model.norm().running_var;
  copy->set_step(model.step());
  copy->rng() = model.rng();
  return copy;
}

}  // namespace rcadapt
