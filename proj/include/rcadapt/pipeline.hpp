#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "rcadapt/adversary.hpp"
#include "rcadapt/corpus.hpp"
#include "rcadapt/encoder.hpp"
#include "rcadapt/metrics.hpp"
#include "rcadapt/optimizer.hpp"
#include "rcadapt/pseudo_label.hpp"

namespace rcadapt {

struct Ablations {
  bool no_conditioning = false;  // discriminator sees R_f avg_hidden(f) only
  bool no_adversarial = false;
  bool no_selftrain = false;
  bool no_batchnorm = false;

  bool operator==(const Ablations&) const = default;
};

// Comma-separated toggle names; throws ConfigError on an unknown name.
Ablations parse_ablations(std::string_view list);

struct PipelineConfig {
  int N_pre = 3;
  int N_da = 4;
  double lr_pretrain = 3e-5;
  double lr_selftrain = 2e-5;
  double lr_adversarial = 1e-5;
  int batch_size = 12;
  double T_prob = 0.4;
  int n_best = 20;
  double dropout = 0.2;
  bool use_entropy = false;
  double lambda = 1.0;
  std::uint64_t seed = 0;
  Ablations ablations;

  // Permits N_pre = 0 (no source pre-training).
  bool skip_pretrain = false;
  int d_R = 768;
  int discriminator_hidden = 512;
  int max_span_len = 30;
  int stride = 128;
  int max_query_len = 40;
  int n_layers = 2;
  int hidden_dim = 32;
  int n_heads = 4;
  int max_len = 64;
  double init_std = 0.02;  // 0 selects fan-in scaled init

  void validate() const;
  EncoderConfig encoder_config(int vocab_size) const;
  WindowOptions window_options() const;
  DecodeOptions decode_options() const;
};

nlohmann::json to_json(const PipelineConfig& config);
// Missing keys keep their defaults; unknown keys raise ConfigError.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);

enum class Phase { pretrain, self_train, adversarial };

std::string_view to_string(Phase phase);

struct EpochLog {
  int epoch = 0;  // 1-based within its phase kind
  Phase phase = Phase::pretrain;
  bool skipped = false;
  int pseudo_label_count = 0;
  int steps = 0;
  double mean_loss = 0.0;
  double mean_pred_source = 0.0;
  double mean_pred_target = 0.0;
  double mean_weight = 1.0;
  double discriminator_accuracy = 0.0;
  int n_source = 0;
  int n_target = 0;
  double wall_seconds = 0.0;
  std::optional<EvalResult> eval;
};

// Wall time is left out so identical runs serialize identically.
nlohmann::json to_json(const EpochLog& log);

// Mutable state of one training run: optimizers, log, and run-directory
// artifacts (config.json, metrics.jsonl, timings.jsonl, checkpoints/epoch_<n>/,
// pseudo_labels_epoch_<n>.jsonl). An empty run_dir disables artifacts.
class TrainingContext {
 public:
  TrainingContext(const PipelineConfig& config, const Vocabulary& vocab, std::filesystem::path run_dir = {},
                  const std::vector<RCExample>* eval_examples = nullptr);

  const PipelineConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  const std::vector<EpochLog>& log() const { return log_; }
  const std::filesystem::path& run_dir() const { return run_dir_; }

  // Lazily created, one optimizer per phase kind, kept for the whole run.
  Adam& optimizer(Phase phase, SpanModel& model, Discriminator* disc = nullptr);

  void record_step(Phase phase, int epoch, int step, const nlohmann::json& values);
  // Evaluates (when an eval set is attached), logs, and checkpoints.
  void finish_epoch(EpochLog entry, SpanModel& model);
  void write_pseudo_labels(const PseudoLabeledSet& set);
  void warn(const std::string& message);

  // Deterministic stream for one phase/epoch pair.
  Rng phase_rng(Phase phase, int epoch) const;

 private:
  PipelineConfig config_;
  const Vocabulary& vocab_;
  std::filesystem::path run_dir_;
  const std::vector<RCExample>* eval_examples_;
  std::ofstream metrics_;
  std::ofstream timings_;
  std::vector<EpochLog> log_;
  std::unique_ptr<Adam> optimizers_[3];
  int checkpoint_index_ = 0;
};

// N_pre epochs of span-loss training on labelled source windows.
std::vector<EpochLog> pretrain_source(SpanModel& model, const std::vector<EncodedWindow>& source_windows,
                                      TrainingContext& context);

// Regenerates the pseudo-labelled set from the current model and trains on it.
// An empty set skips the phase with a warning.
PseudoLabeledSet self_train_epoch(SpanModel& model, const std::vector<RCExample>& target, int epoch,
                                  TrainingContext& context);

// Subsamples the larger side to the smaller side's size and shuffles the union.
DomainBatch balance_domains(const std::vector<const EncodedWindow*>& source,
                            const std::vector<const EncodedWindow*>& target, std::uint64_t seed);

// One pass of adversarial_step over the merged pool in mini-batches.
EpochLog adversarial_epoch(SpanModel& model, Discriminator& disc, const RandomizedMap& map,
                           const DomainBatch& merged, int epoch, TrainingContext& context);

struct RunInputs {
  std::vector<RCExample> source;
  std::vector<RCExample> target;
  // Labelled target examples scored after every epoch (optional).
  std::vector<RCExample> eval;
};

struct RunResult {
  std::unique_ptr<SpanModel> model;
  Vocabulary vocab;
  std::vector<EpochLog> log;
};

// Vocabulary over every text the run may see.
Vocabulary build_run_vocabulary(const RunInputs& inputs);

// Self-training and adversarial epochs on an already pre-trained model.
void adapt(SpanModel& model, const RunInputs& inputs, TrainingContext& context);

// Source pre-training followed by the adaptation loop.
RunResult run_case(const RunInputs& inputs, const PipelineConfig& config,
                   const std::filesystem::path& run_dir = {});

RunResult run_case(const std::filesystem::path& source_path, DatasetFormat source_format,
                   const std::filesystem::path& target_path, DatasetFormat target_format,
                   const PipelineConfig& config, const std::filesystem::path& run_dir = {});

}  // namespace rcadapt
