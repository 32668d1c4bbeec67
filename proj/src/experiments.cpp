#include "rcadapt/experiments.hpp"

#include <stdexcept>

#include "rcadapt/checkpoint.hpp"
#include "rcadapt/errors.hpp"

namespace rcadapt {

using nlohmann::json;

TransferMatrix zero_shot_matrix(const std::vector<NamedDataset>& datasets, const PipelineConfig& config) {
  if (datasets.empty()) throw ConfigError("zero-shot matrix needs at least one dataset");
  std::vector<const std::vector<RCExample>*> all;
  for (const auto& d : datasets) {
    all.push_back(&d.train);
    all.push_back(&d.dev);
  }
  const auto vocab = Vocabulary::build(all);
  TransferMatrix m;
  const auto n = datasets.size();
  for (const auto& d : datasets) m.datasets.push_back(d.name);
  m.cells.assign(n, std::vector<std::optional<EvalResult>>(n));
  m.diagonal.assign(n, std::nullopt);
  for (std::size_t i = 0; i < n; ++i) {
    TrainingContext context(config, vocab);
    SpanModel model(config.encoder_config(vocab.size()), config.seed);
    pretrain_source(model, window_dataset(datasets[i].train, vocab, config.window_options(), true), context);
    for (std::size_t j = 0; j < n; ++j) {
      m.cells[i][j] = evaluate(model, vocab, datasets[j].dev, config.decode_options());
    }
    m.diagonal[i] = m.cells[i][i];
  }
  return m;
}

std::vector<ProbeRow> probe_threshold(const RunInputs& inputs, const PipelineConfig& config,
                                      const std::vector<double>& grid) {
  config.validate();
  if (inputs.source.empty() || inputs.target.empty()) throw ConfigError("probe needs source and target data");
  const auto vocab = build_run_vocabulary(inputs);
  SpanModel pretrained(config.encoder_config(vocab.size()), config.seed);
  if (config.N_pre > 0) {
    TrainingContext context(config, vocab);
    pretrain_source(pretrained, window_dataset(inputs.source, vocab, config.window_options(), true), context);
  }
  std::vector<ProbeRow> rows;
  for (double t : grid) {
    auto run_config = config;
    run_config.T_prob = t;
    auto model = clone_model(pretrained);
    TrainingContext context(run_config, vocab);
    adapt(*model, inputs, context);
    ProbeRow row;
    row.T_prob = t;
    for (const auto& e : context.log()) {
      if (e.phase == Phase::self_train) row.pseudo_label_counts.push_back(e.pseudo_label_count);
    }
    if (!inputs.eval.empty()) row.final_eval = evaluate(*model, vocab, inputs.eval, run_config.decode_options());
    rows.push_back(std::move(row));
  }
  return rows;
}

json to_json(const std::vector<ProbeRow>& rows) {
  json out = json::array();
  for (const auto& r : rows) {
    json j{{"T_prob", r.T_prob}, {"pseudo_label_counts", r.pseudo_label_counts}};
    if (r.final_eval) {
      j["em"] = r.final_eval->exact_match;
      j["f1"] = r.final_eval->f1;
    } else {
      j["em"] = nullptr;
      j["f1"] = nullptr;
    }
    out.push_back(std::move(j));
  }
  return out;
}

}  // namespace rcadapt
