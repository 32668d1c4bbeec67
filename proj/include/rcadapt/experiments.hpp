#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "rcadapt/pipeline.hpp"
#include "rcadapt/transfer.hpp"

namespace rcadapt {

struct NamedDataset {
  std::string name;
  std::vector<RCExample> train;
  std::vector<RCExample> dev;
};

// Source-only model per dataset, scored on every dataset's dev split. The
// diagonal holds each model's score on its own dev split.
TransferMatrix zero_shot_matrix(const std::vector<NamedDataset>& datasets, const PipelineConfig& config);

struct ProbeRow {
  double T_prob = 0.0;
  std::vector<int> pseudo_label_counts;  // one per self-training epoch
  std::optional<EvalResult> final_eval;
};

// One adaptation run per threshold. Pre-training is shared, which matches
// separate runs exactly because every run starts from the same seeded model.
std::vector<ProbeRow> probe_threshold(const RunInputs& inputs, const PipelineConfig& config,
                                      const std::vector<double>& grid);

nlohmann::json to_json(const std::vector<ProbeRow>& rows);

}  // namespace rcadapt
