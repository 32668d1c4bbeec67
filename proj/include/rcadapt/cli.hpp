#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "rcadapt/experiments.hpp"
#include "rcadapt/pipeline.hpp"
#include "rcadapt/synthetic.hpp"

namespace rcadapt {

// A config file is a PipelineConfig JSON object plus an optional "data" block:
//   {"synthetic": {...SyntheticTaskSpec fields..., "n_eval": 200}}
// or file-based inputs
//   {"source": path, "source_format": name, "target": path, "target_format": name,
//    "eval": path, "eval_format": name,
//    "datasets": [{"name", "train", "dev", "format", "corpus", "qform"}]}
// Relative paths resolve against the config file's directory.
struct DataConfig {
  std::optional<SyntheticTaskSpec> synthetic;
  int synthetic_eval = 0;
  std::filesystem::path source, target, eval;
  DatasetFormat source_format = DatasetFormat::span_json;
  DatasetFormat target_format = DatasetFormat::span_json;
  DatasetFormat eval_format = DatasetFormat::span_json;
  struct Named {
    std::string name;
    std::filesystem::path train, dev;
    DatasetFormat format = DatasetFormat::span_json;
    std::string corpus, qform;
  };
  std::vector<Named> datasets;
};

struct ExperimentConfig {
  PipelineConfig pipeline;
  DataConfig data;
};

ExperimentConfig experiment_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

// Synthetic pairs give labelled source, unlabelled target and a labelled target
// evaluation split drawn with a different seed.
RunInputs load_run_inputs(const DataConfig& data);

nlohmann::json to_json(const SyntheticTaskSpec& spec);
SyntheticTaskSpec synthetic_spec_from_json(const nlohmann::json& j);

// EvalResult with percentages rounded to two decimals.
nlohmann::json eval_json(const EvalResult& result);

// Subcommands: preprocess, pretrain, adapt, evaluate, zero-shot-matrix, graph,
// probe. Returns 0 on success, 2 on a usage error, 1 on any other failure.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace rcadapt
