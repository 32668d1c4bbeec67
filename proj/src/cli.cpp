#include "rcadapt/cli.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "rcadapt/checkpoint.hpp"
#include "rcadapt/errors.hpp"

namespace rcadapt {

using nlohmann::json;

namespace {

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

double round2(double v) { return std::round(v * 100.0) / 100.0; }

std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> grid;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) throw ConfigError("bad grid value '" + item + "'");
    grid.push_back(v);
  }
  if (grid.empty()) throw ConfigError("empty grid");
  return grid;
}

std::vector<NamedDataset> load_named_datasets(const DataConfig& data, std::vector<DatasetMeta>& meta) {
  std::vector<NamedDataset> out;
  if (data.synthetic) {
    const auto pair = generate_synthetic_domain_pair(*data.synthetic);
    auto dev_spec = *data.synthetic;
    dev_spec.seed = data.synthetic->seed + 1;
    dev_spec.n_examples = data.synthetic_eval > 0 ? data.synthetic_eval : data.synthetic->n_examples;
    const auto dev = generate_synthetic_domain_pair(dev_spec);
    out.push_back({"source", pair.source, dev.source});
    out.push_back({"target", pair.target, dev.target});
    for (const auto& d : out) meta.push_back({d.name, static_cast<int>(d.train.size()), "synthetic", "template"});
    return out;
  }
  if (data.datasets.empty()) throw ConfigError("config data block lists no datasets");
  for (const auto& d : data.datasets) {
    out.push_back({d.name, load_dataset(d.train, d.format), load_dataset(d.dev, d.format)});
    meta.push_back({d.name, static_cast<int>(out.back().train.size()), d.corpus, d.qform});
  }
  return out;
}

ExperimentConfig config_with_overrides(const std::string& config_path, const std::optional<std::uint64_t>& seed,
                                       const std::string& ablate) {
  ExperimentConfig config = config_path.empty() ? ExperimentConfig{} : load_experiment_config(config_path);
  if (seed) config.pipeline.seed = *seed;
  if (!ablate.empty()) {
    const auto a = parse_ablations(ablate);
    auto& t = config.pipeline.ablations;
    t.no_conditioning |= a.no_conditioning;
    t.no_adversarial |= a.no_adversarial;
    t.no_selftrain |= a.no_selftrain;
    t.no_batchnorm |= a.no_batchnorm;
  }
  config.pipeline.validate();
  return config;
}

json summary(const std::vector<EpochLog>& log) {
  json entries = json::array();
  for (const auto& e : log) {
    json j{{"phase", to_string(e.phase)}, {"epoch", e.epoch}, {"mean_loss", e.mean_loss}};
    if (e.phase == Phase::self_train) j["pseudo_label_count"] = e.pseudo_label_count;
    if (e.eval) j["eval"] = eval_json(*e.eval);
    entries.push_back(std::move(j));
  }
  return entries;
}

}  // namespace

nlohmann::json to_json(const SyntheticTaskSpec& s) {
  return {{"vocab_size", s.vocab_size},
          {"passage_length_range", {s.passage_length_range.first, s.passage_length_range.second}},
          {"style_shift",
           {{"entity_swap", s.style_shift.entity_swap},
            {"filler_swap", s.style_shift.filler_swap},
            {"source_filler_swap", s.style_shift.source_filler_swap},
            {"question_rephrase", s.style_shift.question_rephrase},
            {"length_shift", s.style_shift.length_shift}}},
          {"n_examples", s.n_examples},
          {"seed", s.seed},
          {"n_categories", s.n_categories},
          {"modifier_rate", s.modifier_rate},
          {"max_group_size", s.max_group_size}};
}

SyntheticTaskSpec synthetic_spec_from_json(const json& j) {
  SyntheticTaskSpec s;
  try {
    s.vocab_size = j.value("vocab_size", s.vocab_size);
    if (j.contains("passage_length_range")) {
      const auto r = j.at("passage_length_range").get<std::vector<int>>();
      if (r.size() != 2) throw ConfigError("passage_length_range needs two values");
      s.passage_length_range = {r[0], r[1]};
    }
    if (j.contains("style_shift")) {
      const auto& st = j.at("style_shift");
      s.style_shift.entity_swap = st.value("entity_swap", 0.0);
      s.style_shift.filler_swap = st.value("filler_swap", 0.0);
      s.style_shift.source_filler_swap = st.value("source_filler_swap", 0.0);
      s.style_shift.question_rephrase = st.value("question_rephrase", 0.0);
      s.style_shift.length_shift = st.value("length_shift", 0);
    }
    s.n_examples = j.value("n_examples", s.n_examples);
    s.seed = j.value("seed", s.seed);
    s.n_categories = j.value("n_categories", s.n_categories);
    s.modifier_rate = j.value("modifier_rate", s.modifier_rate);
    s.max_group_size = j.value("max_group_size", s.max_group_size);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad synthetic spec: ") + e.what());
  }
  return s;
}

ExperimentConfig experiment_config_from_json(const json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig config;
  auto pipeline = j;
  pipeline.erase("data");
  config.pipeline = pipeline_config_from_json(pipeline);
  if (!j.contains("data")) return config;
  const auto& d = j.at("data");
  auto& data = config.data;
  try {
    if (d.contains("synthetic")) {
      data.synthetic = synthetic_spec_from_json(d.at("synthetic"));
      data.synthetic_eval = d.at("synthetic").value("n_eval", 0);
    }
    auto path_field = [&](const char* key, std::filesystem::path& path, const char* format_key,
                          DatasetFormat& format) {
      if (d.contains(key)) path = resolve(base_dir, d.at(key).get<std::string>());
      if (d.contains(format_key)) format = parse_dataset_format(d.at(format_key).get<std::string>());
    };
    path_field("source", data.source, "source_format", data.source_format);
    path_field("target", data.target, "target_format", data.target_format);
    path_field("eval", data.eval, "eval_format", data.eval_format);
    if (d.contains("datasets")) {
      for (const auto& item : d.at("datasets")) {
        DataConfig::Named n;
        n.name = item.at("name").get<std::string>();
        n.train = resolve(base_dir, item.at("train").get<std::string>());
        n.dev = resolve(base_dir, item.at("dev").get<std::string>());
        n.format = parse_dataset_format(item.value("format", std::string("span_json")));
        n.corpus = item.value("corpus", std::string());
        n.qform = item.value("qform", std::string());
        data.datasets.push_back(std::move(n));
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad data block: ") + e.what());
  }
  return config;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  return experiment_config_from_json(read_json_file(path), path.parent_path());
}

RunInputs load_run_inputs(const DataConfig& data) {
  RunInputs inputs;
  if (data.synthetic) {
    auto pair = generate_synthetic_domain_pair(*data.synthetic);
    inputs.source = std::move(pair.source);
    inputs.target = std::move(pair.target);
    if (data.synthetic_eval > 0) {
      auto eval_spec = *data.synthetic;
      eval_spec.seed = data.synthetic->seed + 1;
      eval_spec.n_examples = data.synthetic_eval;
      inputs.eval = generate_synthetic_domain_pair(eval_spec).target;
    }
    return inputs;
  }
  if (data.source.empty() || data.target.empty()) throw ConfigError("config data block needs source and target");
  inputs.source = load_dataset(data.source, data.source_format, Domain::source);
  inputs.target = load_dataset(data.target, data.target_format, Domain::target);
  if (!data.eval.empty()) inputs.eval = load_dataset(data.eval, data.eval_format, Domain::target);
  return inputs;
}

nlohmann::json eval_json(const EvalResult& r) {
  return {{"exact_match", round2(r.exact_match)}, {"f1", round2(r.f1)}, {"n_examples", r.n_examples}};
}

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Reading-comprehension domain adaptation toolkit", "rcadapt"};
  app.require_subcommand(1);

  std::string config_path, out_path, checkpoint_path, data_path, grid_text, ablate, format_name, matrix_path;
  std::optional<std::uint64_t> seed;

  auto* preprocess = app.add_subcommand("preprocess", "Encode a dataset into windows and a vocabulary");
  preprocess->add_option("--data", data_path, "Dataset file")->required();
  preprocess->add_option("--format", format_name, "span_json, cloze_json or conversational_json");
  preprocess->add_option("--config", config_path, "Config file");
  preprocess->add_option("--out", out_path, "Output directory")->required();

  auto* pretrain = app.add_subcommand("pretrain", "Train on the labelled source set only");
  auto* adapt_cmd = app.add_subcommand("adapt", "Pre-train, then adapt to the target set");
  for (auto* sub : {pretrain, adapt_cmd}) {
    sub->add_option("--config", config_path, "Config file")->required();
    sub->add_option("--seed", seed, "Override the config seed");
    sub->add_option("--out", out_path, "Run directory")->required();
    sub->add_option("--ablate", ablate, "Comma list of ablation toggles");
  }

  auto* evaluate_cmd = app.add_subcommand("evaluate", "Score a checkpoint on a labelled dataset");
  evaluate_cmd->add_option("--checkpoint", checkpoint_path, "Checkpoint directory")->required();
  evaluate_cmd->add_option("--data", data_path, "Dataset file")->required();
  evaluate_cmd->add_option("--format", format_name, "Dataset format");
  evaluate_cmd->add_option("--config", config_path, "Config file (decoding settings)");

  auto* matrix_cmd = app.add_subcommand("zero-shot-matrix", "Source-only transfer matrix");
  matrix_cmd->add_option("--config", config_path, "Config file")->required();
  matrix_cmd->add_option("--seed", seed, "Override the config seed");
  matrix_cmd->add_option("--out", out_path, "Matrix file")->required();

  auto* graph_cmd = app.add_subcommand("graph", "Force graph from a transfer matrix");
  graph_cmd->add_option("--matrix", matrix_path, "Matrix file")->required();
  graph_cmd->add_option("--seed", seed, "Layout seed");
  graph_cmd->add_option("--out", out_path, "Graph file")->required();

  auto* probe_cmd = app.add_subcommand("probe", "Sweep the confidence threshold");
  probe_cmd->add_option("--config", config_path, "Config file")->required();
  probe_cmd->add_option("--grid", grid_text, "Comma-separated thresholds")->required();
  probe_cmd->add_option("--seed", seed, "Override the config seed");
  probe_cmd->add_option("--ablate", ablate, "Comma list of ablation toggles");
  probe_cmd->add_option("--out", out_path, "Output file (standard output when absent)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (preprocess->parsed()) {
      const auto config = config_with_overrides(config_path, std::nullopt, "");
      const auto format = format_name.empty() ? DatasetFormat::span_json : parse_dataset_format(format_name);
      const auto examples = load_dataset(data_path, format);
      const auto vocab = Vocabulary::build({&examples});
      const auto windows = window_dataset(examples, vocab, config.pipeline.window_options(), false);
      std::filesystem::create_directories(out_path);
      std::ofstream w(std::filesystem::path(out_path) / "windows.jsonl", std::ios::binary);
      write_windows_jsonl(w, windows);
      vocab.save(std::filesystem::path(out_path) / "vocab.txt");
      out << json{{"examples", examples.size()}, {"windows", windows.size()}, {"vocab_size", vocab.size()}}.dump()
          << '\n';
    } else if (pretrain->parsed()) {
      auto config = config_with_overrides(config_path, seed, ablate);
      const auto inputs = load_run_inputs(config.data);
      if (inputs.source.empty()) throw ConfigError("source set is empty");
      const auto vocab = build_run_vocabulary(inputs);
      TrainingContext context(config.pipeline, vocab, out_path, inputs.eval.empty() ? nullptr : &inputs.eval);
      SpanModel model(config.pipeline.encoder_config(vocab.size()), config.pipeline.seed);
      pretrain_source(model, window_dataset(inputs.source, vocab, config.pipeline.window_options(), true), context);
      out << json{{"run_dir", out_path}, {"epochs", summary(context.log())}}.dump(2) << '\n';
    } else if (adapt_cmd->parsed()) {
      const auto config = config_with_overrides(config_path, seed, ablate);
      const auto inputs = load_run_inputs(config.data);
      const auto result = run_case(inputs, config.pipeline, out_path);
      out << json{{"run_dir", out_path}, {"epochs", summary(result.log)}}.dump(2) << '\n';
    } else if (evaluate_cmd->parsed()) {
      const auto loaded = load_checkpoint(checkpoint_path);
      if (!loaded.vocab) throw ConfigError("checkpoint has no vocabulary");
      auto config = config_with_overrides(config_path, std::nullopt, "");
      config.pipeline.max_len = loaded.model->config().max_len;
      const auto format = format_name.empty() ? DatasetFormat::span_json : parse_dataset_format(format_name);
      const auto examples = load_dataset(data_path, format, Domain::target);
      const auto result = evaluate(*loaded.model, *loaded.vocab, examples, config.pipeline.decode_options());
      out << eval_json(result).dump() << '\n';
    } else if (matrix_cmd->parsed()) {
      const auto config = config_with_overrides(config_path, seed, "");
      std::vector<DatasetMeta> meta;
      const auto datasets = load_named_datasets(config.data, meta);
      auto j = to_json(zero_shot_matrix(datasets, config.pipeline));
      json m = json::array();
      for (const auto& d : meta) m.push_back({{"name", d.name}, {"size", d.size}, {"corpus", d.corpus}, {"qform", d.qform}});
      j["metadata"] = std::move(m);
      write_json_file(out_path, j);
      out << j.dump(2) << '\n';
    } else if (graph_cmd->parsed()) {
      const auto j = read_json_file(matrix_path);
      const auto matrix = transfer_matrix_from_json(j);
      std::vector<DatasetMeta> meta;
      if (j.contains("metadata")) {
        for (const auto& item : j.at("metadata")) {
          meta.push_back({item.at("name").get<std::string>(), item.value("size", 1), item.value("corpus", std::string()),
                          item.value("qform", std::string())});
        }
      }
      const auto graph = emit_graph(matrix, meta, seed.value_or(0));
      write_json_file(out_path, to_json(graph));
      out << json{{"nodes", graph.nodes.size()}, {"edges", graph.edges.size()}}.dump() << '\n';
    } else if (probe_cmd->parsed()) {
      const auto config = config_with_overrides(config_path, seed, ablate);
      const auto rows = probe_threshold(load_run_inputs(config.data), config.pipeline, parse_grid(grid_text));
      auto j = to_json(rows);
      for (auto& row : j) {
        for (const char* key : {"em", "f1"}) {
          if (!row[key].is_null()) row[key] = round2(row[key].get<double>());
        }
      }
      if (!out_path.empty()) write_json_file(out_path, j);
      out << j.dump(2) << '\n';
    }
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace rcadapt
