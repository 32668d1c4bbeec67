#include "rcadapt/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <iostream>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>

#include "rcadapt/checkpoint.hpp"
#include "rcadapt/errors.hpp"

namespace rcadapt {

using nlohmann::json;

namespace {

constexpr std::uint64_t kMapStream = 0x6d6170;
constexpr std::uint64_t kDiscStream = 0x64697363;
constexpr std::uint64_t kBalanceStream = 0x62616c;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
  return splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index);
}

// [begin, end) index ranges of consecutive mini-batches. A trailing batch of a
// single window is merged into the previous one, since batch statistics need at
// least two windows.
std::vector<std::pair<std::size_t, std::size_t>> batch_bounds(std::size_t n, int batch_size) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  const auto b = static_cast<std::size_t>(batch_size);
  for (std::size_t start = 0; start < n; start += b) out.emplace_back(start, std::min(n, start + b));
  if (out.size() > 1 && out.back().second - out.back().first == 1) {
    out.pop_back();
    out.back().second = n;
  }
  return out;
}

struct PassStats {
  int steps = 0;
  double mean_loss = 0.0;
};

PassStats supervised_pass(SpanModel& model, const std::vector<EncodedWindow>& windows, Adam& optimizer,
                          Phase phase, int epoch, TrainingContext& context) {
  std::vector<std::size_t> order(windows.size());
  std::iota(order.begin(), order.end(), 0);
  auto rng = context.phase_rng(phase, epoch);
  std::shuffle(order.begin(), order.end(), rng);

  PassStats stats;
  double loss_sum = 0.0;
  std::vector<const EncodedWindow*> batch;
  for (const auto& [begin, end] : batch_bounds(order.size(), context.config().batch_size)) {
    batch.clear();
    for (auto k = begin; k < end; ++k) batch.push_back(&windows[order[k]]);
    optimizer.zero_grad();
    const auto tape = model.forward(batch, true);
    const auto n = batch.size();
    const double scale = 1.0 / static_cast<double>(n);
    std::vector<Vector> d_start(n);
    std::vector<Vector> d_end(n);
    double loss = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const auto& out = tape.outputs[b];
      const auto& label = *batch[b]->label;
      loss += span_loss(out.start_logits, out.end_logits, label.start, label.end, batch[b]->passage_mask) * scale;
      span_loss_grad(out.start_logits, out.end_logits, label.start, label.end, scale, d_start[b], d_end[b]);
    }
    model.backward(tape, {}, d_start, d_end);
    optimizer.step();
    model.set_step(model.step() + 1);
    ++stats.steps;
    loss_sum += loss;
    context.record_step(phase, epoch, stats.steps, {{"loss", loss}});
  }
  stats.mean_loss = stats.steps > 0 ? loss_sum / stats.steps : 0.0;
  return stats;
}

bool trainable(const std::vector<EncodedWindow>& windows, const SpanModel& model) {
  return model.config().batch_norm ? windows.size() >= 2 : !windows.empty();
}

std::vector<const EncodedWindow*> pointers(const std::vector<EncodedWindow>& windows) {
  std::vector<const EncodedWindow*> out;
  out.reserve(windows.size());
  for (const auto& w : windows) out.push_back(&w);
  return out;
}

}  // namespace

Ablations parse_ablations(std::string_view list) {
  Ablations a;
  std::size_t pos = 0;
  while (pos <= list.size()) {
    const auto comma = std::min(list.find(',', pos), list.size());
    const auto name = list.substr(pos, comma - pos);
    if (name == "no_conditioning") {
      a.no_conditioning = true;
    } else if (name == "no_adversarial") {
      a.no_adversarial = true;
    } else if (name == "no_selftrain") {
      a.no_selftrain = true;
    } else if (name == "no_batchnorm") {
      a.no_batchnorm = true;
    } else if (!name.empty()) {
      throw ConfigError("unknown ablation '" + std::string(name) + "'");
    }
    pos = comma + 1;
  }
  return a;
}

void PipelineConfig::validate() const {
  if (!(lr_pretrain > 0.0 && lr_selftrain > 0.0 && lr_adversarial > 0.0)) {
    throw ConfigError("learning rates must be positive");
  }
  if (N_pre < (skip_pretrain ? 0 : 1)) throw ConfigError("N_pre must be >= 1 unless skip_pretrain is set");
  if (N_da < 1) throw ConfigError("N_da must be >= 1");
  if (!(T_prob >= 0.0 && T_prob <= 1.0)) throw ConfigError("T_prob must lie in [0, 1]");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (n_best < 1) throw ConfigError("n_best must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
  if (d_R < 1 || discriminator_hidden < 1) throw ConfigError("discriminator sizes must be positive");
  if (max_span_len < 1 || stride < 1 || max_query_len < 1) throw ConfigError("window settings must be positive");
  if (max_len <= kReservedPositions + 1) throw ConfigError("max_len too small for a window");
}

EncoderConfig PipelineConfig::encoder_config(int vocab_size) const {
  EncoderConfig c;
  c.n_layers = n_layers;
  c.hidden_dim = hidden_dim;
  c.n_heads = n_heads;
  c.max_len = max_len;
  c.dropout_rate = dropout;
  c.vocab_size = vocab_size;
  c.batch_norm = !ablations.no_batchnorm;
  c.init_std = init_std;
  c.validate();
  return c;
}

WindowOptions PipelineConfig::window_options() const { return {max_len, stride, max_query_len}; }

DecodeOptions PipelineConfig::decode_options() const {
  DecodeOptions d;
  d.windows = window_options();
  d.n_best = n_best;
  d.max_span_len = max_span_len;
  return d;
}

json to_json(const PipelineConfig& c) {
  return {{"N_pre", c.N_pre},
          {"N_da", c.N_da},
          {"lr_pretrain", c.lr_pretrain},
          {"lr_selftrain", c.lr_selftrain},
          {"lr_adversarial", c.lr_adversarial},
          {"batch_size", c.batch_size},
          {"T_prob", c.T_prob},
          {"n_best", c.n_best},
          {"dropout", c.dropout},
          {"use_entropy", c.use_entropy},
          {"lambda", c.lambda},
          {"seed", c.seed},
          {"ablations",
           {{"no_conditioning", c.ablations.no_conditioning},
            {"no_adversarial", c.ablations.no_adversarial},
            {"no_selftrain", c.ablations.no_selftrain},
            {"no_batchnorm", c.ablations.no_batchnorm}}},
          {"skip_pretrain", c.skip_pretrain},
          {"d_R", c.d_R},
          {"discriminator_hidden", c.discriminator_hidden},
          {"max_span_len", c.max_span_len},
          {"stride", c.stride},
          {"max_query_len", c.max_query_len},
          {"n_layers", c.n_layers},
          {"hidden_dim", c.hidden_dim},
          {"n_heads", c.n_heads},
          {"max_len", c.max_len},
          {"init_std", c.init_std}};
}

namespace {

template <typename T>
void read_field(const json& j, const char* key, T& field) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config field '") + key + "' has the wrong type");
  }
}

}  // namespace

PipelineConfig pipeline_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const auto defaults = to_json(PipelineConfig{});
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw ConfigError("unknown config field '" + key + "'");
  }
  PipelineConfig c;
  read_field(j, "N_pre", c.N_pre);
  read_field(j, "N_da", c.N_da);
  read_field(j, "lr_pretrain", c.lr_pretrain);
  read_field(j, "lr_selftrain", c.lr_selftrain);
  read_field(j, "lr_adversarial", c.lr_adversarial);
  read_field(j, "batch_size", c.batch_size);
  read_field(j, "T_prob", c.T_prob);
  read_field(j, "n_best", c.n_best);
  read_field(j, "dropout", c.dropout);
  read_field(j, "use_entropy", c.use_entropy);
  read_field(j, "lambda", c.lambda);
  read_field(j, "seed", c.seed);
  if (j.contains("ablations")) {
    const auto& a = j.at("ablations");
    if (!a.is_object()) throw ConfigError("ablations must be an object");
    for (const auto& [key, value] : a.items()) {
      if (!defaults.at("ablations").contains(key)) throw ConfigError("unknown ablation '" + key + "'");
    }
    read_field(a, "no_conditioning", c.ablations.no_conditioning);
    read_field(a, "no_adversarial", c.ablations.no_adversarial);
    read_field(a, "no_selftrain", c.ablations.no_selftrain);
    read_field(a, "no_batchnorm", c.ablations.no_batchnorm);
  }
  read_field(j, "skip_pretrain", c.skip_pretrain);
  read_field(j, "d_R", c.d_R);
  read_field(j, "discriminator_hidden", c.discriminator_hidden);
  read_field(j, "max_span_len", c.max_span_len);
  read_field(j, "stride", c.stride);
  read_field(j, "max_query_len", c.max_query_len);
  read_field(j, "n_layers", c.n_layers);
  read_field(j, "hidden_dim", c.hidden_dim);
  read_field(j, "n_heads", c.n_heads);
  read_field(j, "max_len", c.max_len);
  read_field(j, "init_std", c.init_std);
  c.validate();
  return c;
}

std::string_view to_string(Phase phase) {
  switch (phase) {
    case Phase::pretrain:
      return "pretrain";
    case Phase::self_train:
      return "self_train";
    case Phase::adversarial:
      return "adversarial";
  }
  return "unknown";
}

json to_json(const EpochLog& log) {
  json j{{"type", "epoch"},
         {"phase", to_string(log.phase)},
         {"epoch", log.epoch},
         {"skipped", log.skipped},
         {"steps", log.steps},
         {"mean_loss", log.mean_loss}};
  if (log.phase == Phase::self_train) j["pseudo_label_count"] = log.pseudo_label_count;
  if (log.phase == Phase::adversarial) {
    j["mean_pred_source"] = log.mean_pred_source;
    j["mean_pred_target"] = log.mean_pred_target;
    j["mean_weight"] = log.mean_weight;
    j["discriminator_accuracy"] = log.discriminator_accuracy;
    j["n_source"] = log.n_source;
    j["n_target"] = log.n_target;
  }
  if (log.eval) {
    j["eval"] = {{"em", log.eval->exact_match}, {"f1", log.eval->f1}, {"n_examples", log.eval->n_examples}};
  }
  return j;
}

TrainingContext::TrainingContext(const PipelineConfig& config, const Vocabulary& vocab,
                                 std::filesystem::path run_dir, const std::vector<RCExample>* eval_examples)
    : config_(config), vocab_(vocab), run_dir_(std::move(run_dir)), eval_examples_(eval_examples) {
  config_.validate();
  if (run_dir_.empty()) return;
  std::filesystem::create_directories(run_dir_ / "checkpoints");
  std::ofstream(run_dir_ / "config.json") << to_json(config_).dump(2) << '\n';
  metrics_.open(run_dir_ / "metrics.jsonl", std::ios::binary | std::ios::trunc);
  timings_.open(run_dir_ / "timings.jsonl", std::ios::binary | std::ios::trunc);
  if (!metrics_ || !timings_) throw std::runtime_error("cannot write run artifacts in " + run_dir_.string());
}

Adam& TrainingContext::optimizer(Phase phase, SpanModel& model, Discriminator* disc) {
  auto& slot = optimizers_[static_cast<int>(phase)];
  if (!slot) {
    auto params = model.parameters();
    double lr = config_.lr_pretrain;
    if (phase == Phase::self_train) lr = config_.lr_selftrain;
    if (phase == Phase::adversarial) {
      lr = config_.lr_adversarial;
      if (!disc) throw std::invalid_argument("adversarial optimizer needs the discriminator");
      for (auto* p : disc->parameters()) params.push_back(p);
    }
    slot = std::make_unique<Adam>(std::move(params), lr);
  }
  return *slot;
}

void TrainingContext::record_step(Phase phase, int epoch, int step, const json& values) {
  if (!metrics_.is_open()) return;
  json j{{"type", "step"}, {"phase", to_string(phase)}, {"epoch", epoch}, {"step", step}};
  for (const auto& [key, value] : values.items()) j[key] = value;
  metrics_ << j.dump() << '\n';
}

void TrainingContext::finish_epoch(EpochLog entry, SpanModel& model) {
  if (eval_examples_ && !eval_examples_->empty()) {
    entry.eval = evaluate(model, vocab_, *eval_examples_, config_.decode_options());
  }
  ++checkpoint_index_;
  if (metrics_.is_open()) {
    metrics_ << to_json(entry).dump() << '\n';
    metrics_.flush();
    timings_ << json{{"phase", to_string(entry.phase)}, {"epoch", entry.epoch}, {"wall_seconds", entry.wall_seconds}}
                    .dump()
             << '\n';
    timings_.flush();
    save_checkpoint(run_dir_ / "checkpoints" / ("epoch_" + std::to_string(checkpoint_index_)), model, &vocab_);
  }
  log_.push_back(std::move(entry));
}

void TrainingContext::write_pseudo_labels(const PseudoLabeledSet& set) {
  if (run_dir_.empty()) return;
  std::ofstream out(run_dir_ / ("pseudo_labels_epoch_" + std::to_string(set.epoch) + ".jsonl"), std::ios::binary);
  write_pseudo_labels_jsonl(out, set);
}

void TrainingContext::warn(const std::string& message) {
  std::cerr << "warning: " << message << '\n';
  if (metrics_.is_open()) metrics_ << json{{"type", "warning"}, {"message", message}}.dump() << '\n';
}

Rng TrainingContext::phase_rng(Phase phase, int epoch) const {
  return Rng(derive_seed(config_.seed, static_cast<std::uint64_t>(phase) + 1, static_cast<std::uint64_t>(epoch)));
}

std::vector<EpochLog> pretrain_source(SpanModel& model, const std::vector<EncodedWindow>& source_windows,
                                      TrainingContext& context) {
  if (source_windows.empty()) throw ConfigError("source set has no trainable windows");
  if (!trainable(source_windows, model)) throw ConfigError("batch normalization needs at least two source windows");
  std::vector<EpochLog> out;
  for (int epoch = 1; epoch <= context.config().N_pre; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    auto& optimizer = context.optimizer(Phase::pretrain, model);
    const auto stats = supervised_pass(model, source_windows, optimizer, Phase::pretrain, epoch, context);
    EpochLog entry;
    entry.epoch = epoch;
    entry.phase = Phase::pretrain;
    entry.steps = stats.steps;
    entry.mean_loss = stats.mean_loss;
    entry.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    context.finish_epoch(entry, model);
    out.push_back(context.log().back());
  }
  return out;
}

PseudoLabeledSet self_train_epoch(SpanModel& model, const std::vector<RCExample>& target, int epoch,
                                  TrainingContext& context) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& config = context.config();
  const auto predictions = predict_examples(model, context.vocab(), target, config.decode_options());
  auto set = filter_pseudo_labels(predictions, target, config.T_prob);
  set.epoch = epoch;
  context.write_pseudo_labels(set);

  EpochLog entry;
  entry.epoch = epoch;
  entry.phase = Phase::self_train;
  entry.pseudo_label_count = static_cast<int>(set.size());
  const auto windows = window_dataset(set.examples, context.vocab(), config.window_options(), true);
  if (!trainable(windows, model)) {
    context.warn("self-training epoch " + std::to_string(epoch) + " skipped: " + std::to_string(set.size()) +
                 " pseudo-labelled examples");
    entry.skipped = true;
  } else {
    auto& optimizer = context.optimizer(Phase::self_train, model);
    const auto stats = supervised_pass(model, windows, optimizer, Phase::self_train, epoch, context);
    entry.steps = stats.steps;
    entry.mean_loss = stats.mean_loss;
  }
  entry.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  context.finish_epoch(entry, model);
  return set;
}

DomainBatch balance_domains(const std::vector<const EncodedWindow*>& source,
                            const std::vector<const EncodedWindow*>& target, std::uint64_t seed) {
  if (source.empty() || target.empty()) throw std::invalid_argument("domain balancing needs both domains");
  Rng rng(seed);
  const auto n = std::min(source.size(), target.size());
  auto subsample = [&](const std::vector<const EncodedWindow*>& side) {
    if (side.size() == n) return side;
    std::vector<std::size_t> idx(side.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(n);
    std::sort(idx.begin(), idx.end());
    std::vector<const EncodedWindow*> kept;
    kept.reserve(n);
    for (auto i : idx) kept.push_back(side[i]);
    return kept;
  };
  const auto s = subsample(source);
  const auto t = subsample(target);
  std::vector<std::pair<const EncodedWindow*, int>> pool;
  pool.reserve(2 * n);
  for (const auto* w : s) pool.emplace_back(w, 0);
  for (const auto* w : t) pool.emplace_back(w, 1);
  std::shuffle(pool.begin(), pool.end(), rng);
  DomainBatch merged;
  for (const auto& [w, y] : pool) {
    merged.windows.push_back(w);
    merged.domain_labels.push_back(y);
  }
  return merged;
}

EpochLog adversarial_epoch(SpanModel& model, Discriminator& disc, const RandomizedMap& map,
                           const DomainBatch& merged, int epoch, TrainingContext& context) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& config = context.config();
  AdversarialOptions options;
  options.use_entropy = config.use_entropy;
  options.lambda = config.lambda;
  options.conditioning = !config.ablations.no_conditioning;
  auto& optimizer = context.optimizer(Phase::adversarial, model, &disc);

  EpochLog entry;
  entry.epoch = epoch;
  entry.phase = Phase::adversarial;
  double loss_sum = 0.0;
  double pred_source = 0.0;
  double pred_target = 0.0;
  double weight_sum = 0.0;
  double correct = 0.0;
  DomainBatch batch;
  for (const auto& [begin, end] : batch_bounds(merged.windows.size(), config.batch_size)) {
    batch.windows.assign(merged.windows.begin() + static_cast<std::ptrdiff_t>(begin),
                         merged.windows.begin() + static_cast<std::ptrdiff_t>(end));
    batch.domain_labels.assign(merged.domain_labels.begin() + static_cast<std::ptrdiff_t>(begin),
                               merged.domain_labels.begin() + static_cast<std::ptrdiff_t>(end));
    const auto stats = adversarial_step(batch, model, map, disc, options, optimizer);
    model.set_step(model.step() + 1);
    ++entry.steps;
    const auto n = static_cast<double>(end - begin);
    loss_sum += stats.loss;
    pred_source += stats.mean_pred_source * stats.n_source;
    pred_target += stats.mean_pred_target * stats.n_target;
    weight_sum += stats.mean_weight * n;
    correct += stats.accuracy * n;
    entry.n_source += stats.n_source;
    entry.n_target += stats.n_target;
    context.record_step(Phase::adversarial, epoch, entry.steps,
                        {{"loss", stats.loss},
                         {"mean_pred_source", stats.mean_pred_source},
                         {"mean_pred_target", stats.mean_pred_target},
                         {"mean_weight", stats.mean_weight}});
  }
  const double total = static_cast<double>(entry.n_source + entry.n_target);
  if (entry.steps > 0) entry.mean_loss = loss_sum / entry.steps;
  if (entry.n_source > 0) entry.mean_pred_source = pred_source / entry.n_source;
  if (entry.n_target > 0) entry.mean_pred_target = pred_target / entry.n_target;
  if (total > 0) {
    entry.mean_weight = weight_sum / total;
    entry.discriminator_accuracy = correct / total;
  }
  entry.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  context.finish_epoch(entry, model);
  return context.log().back();
}

Vocabulary build_run_vocabulary(const RunInputs& inputs) {
  return Vocabulary::build({&inputs.source, &inputs.target, &inputs.eval});
}

void adapt(SpanModel& model, const RunInputs& inputs, TrainingContext& context) {
  const auto& config = context.config();
  if (inputs.target.empty()) throw ConfigError("target set is empty");
  const auto windows = config.window_options();
  const auto map = init_randomized_map(config.d_R, config.max_len, derive_seed(config.seed, kMapStream));
  DiscriminatorConfig dc;
  dc.input_dim = config.d_R;
  dc.hidden_dim = config.discriminator_hidden;
  dc.dropout_rate = config.dropout;
  dc.reversal_coefficient = config.lambda;
  Discriminator disc(dc, derive_seed(config.seed, kDiscStream));

  // Target answers, if any were loaded, never reach training.
  std::vector<RCExample> target = inputs.target;
  for (auto& ex : target) {
    ex.answer.reset();
    ex.answer_text.reset();
  }
  const bool adversarial = !config.ablations.no_adversarial && config.N_da > 1;
  std::vector<EncodedWindow> source_windows;
  std::vector<EncodedWindow> target_windows;
  if (adversarial) {
    source_windows = window_dataset(inputs.source, context.vocab(), windows, false);
    target_windows = window_dataset(target, context.vocab(), windows, false);
  }
  for (int j = 1; j <= config.N_da; ++j) {
    if (!config.ablations.no_selftrain) self_train_epoch(model, target, j, context);
    if (adversarial && j < config.N_da) {
      const auto merged = balance_domains(pointers(source_windows), pointers(target_windows),
                                          derive_seed(config.seed, kBalanceStream, static_cast<std::uint64_t>(j)));
      adversarial_epoch(model, disc, map, merged, j, context);
    }
  }
}

RunResult run_case(const RunInputs& inputs, const PipelineConfig& config, const std::filesystem::path& run_dir) {
  config.validate();
  if (inputs.source.empty()) throw ConfigError("source set is empty");
  if (inputs.target.empty()) throw ConfigError("target set is empty");
  RunResult result;
  result.vocab = build_run_vocabulary(inputs);
  TrainingContext context(config, result.vocab, run_dir, inputs.eval.empty() ? nullptr : &inputs.eval);
  result.model = std::make_unique<SpanModel>(config.encoder_config(result.vocab.size()), config.seed);
  if (config.N_pre > 0) {
    pretrain_source(*result.model, window_dataset(inputs.source, result.vocab, config.window_options(), true),
                    context);
  }
  adapt(*result.model, inputs, context);
  result.log = context.log();
  return result;
}

RunResult run_case(const std::filesystem::path& source_path, DatasetFormat source_format,
                   const std::filesystem::path& target_path, DatasetFormat target_format,
                   const PipelineConfig& config, const std::filesystem::path& run_dir) {
  RunInputs inputs;
  inputs.source = load_dataset(source_path, source_format, Domain::source);
  inputs.target = load_dataset(target_path, target_format, Domain::target);
  return run_case(inputs, config, run_dir);
}

}  // namespace rcadapt
