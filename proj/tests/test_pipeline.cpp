#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"

#include "json.hpp"

#include "rcadapt/checkpoint.hpp"
#include "rcadapt/errors.hpp"
#include "rcadapt/pipeline.hpp"
#include "rcadapt/synthetic.hpp"

using namespace rcadapt;
namespace fs = std::filesystem;

namespace {

PipelineConfig tiny_config() {
  PipelineConfig c;
  c.N_pre = 2;
  c.N_da = 3;
  c.lr_pretrain = 3e-3;
  c.lr_selftrain = 1e-3;
  c.lr_adversarial = 1e-4;
  c.batch_size = 8;
  c.hidden_dim = 8;
  c.n_heads = 2;
  c.n_layers = 1;
  c.max_len = 32;
  c.max_query_len = 6;
  c.d_R = 16;
  c.discriminator_hidden = 8;
  c.T_prob = 0.0;
  c.seed = 5;
  return c;
}

RunInputs tiny_inputs(int n = 24) {
  SyntheticTaskSpec spec;
  spec.n_examples = n;
  spec.seed = 2;
  spec.style_shift.filler_swap = 1.0;
  auto pair = generate_synthetic_domain_pair(spec);
  RunInputs in;
  in.source = pair.source;
  in.target = pair.target;
  spec.seed = 3;
  spec.n_examples = 10;
  in.eval = generate_synthetic_domain_pair(spec).target;
  return in;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<nlohmann::json> jsonl(const fs::path& path) {
  std::vector<nlohmann::json> out;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) out.push_back(nlohmann::json::parse(line));
  return out;
}

int count_phase(const std::vector<EpochLog>& log, Phase phase) {
  return static_cast<int>(std::count_if(log.begin(), log.end(), [&](const EpochLog& e) { return e.phase == phase; }));
}

fs::path fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("rcadapt_" + name);
  fs::remove_all(dir);
  return dir;
}

std::vector<const EncodedWindow*> pointers_to(const std::vector<EncodedWindow>& windows, std::size_t n) {
  std::vector<const EncodedWindow*> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(&windows[i % windows.size()]);
  return out;
}

}  // namespace

TEST_CASE("pipeline config validation") {
  auto c = PipelineConfig{};
  CHECK_NOTHROW(c.validate());
  c.lr_selftrain = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = PipelineConfig{};
  c.N_da = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = PipelineConfig{};
  c.T_prob = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = PipelineConfig{};
  c.N_pre = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.skip_pretrain = true;
  CHECK_NOTHROW(c.validate());
  c = PipelineConfig{};
  c.lambda = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("pipeline config defaults") {
  const PipelineConfig c;
  CHECK(c.N_pre == 3);
  CHECK(c.N_da == 4);
  CHECK(c.lr_pretrain == 3e-5);
  CHECK(c.lr_selftrain == 2e-5);
  CHECK(c.lr_adversarial == 1e-5);
  CHECK(c.batch_size == 12);
  CHECK(c.T_prob == 0.4);
  CHECK(c.n_best == 20);
  CHECK(c.d_R == 768);
  CHECK(c.discriminator_hidden == 512);
  CHECK(c.dropout == 0.2);
}

TEST_CASE("pipeline config JSON round trip") {
  auto c = tiny_config();
  c.use_entropy = true;
  c.ablations.no_conditioning = true;
  const auto j = to_json(c);
  const auto back = pipeline_config_from_json(j);
  CHECK(to_json(back) == j);
  CHECK(back.ablations == c.ablations);
  auto partial = pipeline_config_from_json(nlohmann::json{{"T_prob", 0.7}});
  CHECK(partial.T_prob == 0.7);
  CHECK(partial.N_da == 4);
  CHECK_THROWS_AS(pipeline_config_from_json(nlohmann::json{{"T_porb", 0.7}}), ConfigError);
  CHECK_THROWS_AS(pipeline_config_from_json(nlohmann::json{{"N_da", "four"}}), ConfigError);
}

TEST_CASE("ablation toggles parse from a comma list") {
  const auto a = parse_ablations("no_selftrain,no_batchnorm");
  CHECK(a.no_selftrain);
  CHECK(a.no_batchnorm);
  CHECK_FALSE(a.no_adversarial);
  CHECK(parse_ablations("") == Ablations{});
  CHECK_THROWS_AS(parse_ablations("no_magic"), ConfigError);
}

TEST_CASE("pretraining rejects an empty source set") {
  const auto in = tiny_inputs();
  const auto vocab = build_run_vocabulary(in);
  const auto config = tiny_config();
  SpanModel model(config.encoder_config(vocab.size()), 1);
  TrainingContext context(config, vocab);
  CHECK_THROWS_AS(pretrain_source(model, {}, context), ConfigError);
}

TEST_CASE("loss on a fixed tiny batch decreases over 50 steps") {
  const auto in = tiny_inputs(4);
  const auto vocab = build_run_vocabulary(in);
  auto config = tiny_config();
  config.N_pre = 50;
  config.batch_size = 4;
  config.dropout = 0.0;
  const auto windows = window_dataset(in.source, vocab, config.window_options(), true);
  REQUIRE(windows.size() == 4);
  SpanModel model(config.encoder_config(vocab.size()), 1);
  TrainingContext context(config, vocab);
  const auto log = pretrain_source(model, windows, context);
  REQUIRE(log.size() == 50);
  for (std::size_t i = 1; i < log.size(); ++i) CHECK(log[i].mean_loss < log[i - 1].mean_loss);
  CHECK(log.back().mean_loss < 0.5 * log.front().mean_loss);
}

TEST_CASE("pretraining is deterministic for a fixed seed") {
  const auto in = tiny_inputs();
  const auto vocab = build_run_vocabulary(in);
  const auto config = tiny_config();
  const auto windows = window_dataset(in.source, vocab, config.window_options(), true);
  SpanModel a(config.encoder_config(vocab.size()), 4);
  SpanModel b(config.encoder_config(vocab.size()), 4);
  TrainingContext ca(config, vocab);
  TrainingContext cb(config, vocab);
  pretrain_source(a, windows, ca);
  pretrain_source(b, windows, cb);
  auto pa = a.parameters();
  auto pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);
  CHECK(ca.log()[1].mean_loss == cb.log()[1].mean_loss);
  CHECK(ca.log()[1].steps == 3);
}

TEST_CASE("self-training with the maximum threshold on an untrained model is skipped") {
  const auto in = tiny_inputs();
  const auto vocab = build_run_vocabulary(in);
  auto config = tiny_config();
  config.T_prob = 1.0;
  // Whole passages per window; a window holding a single passage token is trivially certain.
  config.max_len = 64;
  SpanModel model(config.encoder_config(vocab.size()), 1);
  std::vector<Matrix> before;
  for (auto* p : model.parameters()) before.push_back(p->value);
  TrainingContext context(config, vocab);
  const auto set = self_train_epoch(model, in.target, 1, context);
  CHECK(set.size() == 0);
  REQUIRE(context.log().size() == 1);
  CHECK(context.log()[0].skipped);
  CHECK(context.log()[0].steps == 0);
  auto after = model.parameters();
  for (std::size_t i = 0; i < after.size(); ++i) CHECK(after[i]->value == before[i]);
}

TEST_CASE("self-training with threshold zero labels every target example once") {
  const auto in = tiny_inputs();
  const auto vocab = build_run_vocabulary(in);
  const auto config = tiny_config();
  SpanModel model(config.encoder_config(vocab.size()), 1);
  const auto dir = fresh_dir("selftrain");
  TrainingContext context(config, vocab, dir);
  const auto set = self_train_epoch(model, in.target, 1, context);
  REQUIRE(set.size() == in.target.size());
  std::set<std::string> ids;
  for (const auto& ex : set.examples) ids.insert(ex.id);
  CHECK(ids.size() == in.target.size());
  const auto dump = jsonl(dir / "pseudo_labels_epoch_1.jsonl");
  CHECK(dump.size() == set.size());
  CHECK(context.log()[0].pseudo_label_count == static_cast<int>(dump.size()));
  CHECK_FALSE(context.log()[0].skipped);
  fs::remove_all(dir);
}

TEST_CASE("balance_domains subsamples the larger side") {
  const auto in = tiny_inputs();
  const auto vocab = build_run_vocabulary(in);
  const auto windows = window_dataset(in.source, vocab, tiny_config().window_options(), false);
  const auto source = pointers_to(windows, 100);
  std::vector<EncodedWindow> target_store(60, windows[0]);
  std::vector<const EncodedWindow*> target;
  for (const auto& w : target_store) target.push_back(&w);

  const auto merged = balance_domains(source, target, 11);
  REQUIRE(merged.windows.size() == 120);
  CHECK(std::count(merged.domain_labels.begin(), merged.domain_labels.end(), 0) == 60);
  CHECK(std::count(merged.domain_labels.begin(), merged.domain_labels.end(), 1) == 60);
  for (std::size_t i = 0; i < merged.windows.size(); ++i) {
    const bool from_target = merged.windows[i] >= &target_store.front() && merged.windows[i] <= &target_store.back();
    CHECK(from_target == (merged.domain_labels[i] == 1));
  }

  const auto again = balance_domains(source, target, 11);
  CHECK(again.windows == merged.windows);
  const auto other = balance_domains(source, target, 12);
  CHECK(other.windows != merged.windows);

  const auto even = balance_domains(pointers_to(windows, 40), target, 1);
  CHECK(even.windows.size() == 80);
  const auto equal = balance_domains(target, target, 1);
  CHECK(equal.windows.size() == 120);
  CHECK_THROWS(balance_domains({}, target, 1));
  CHECK_THROWS(balance_domains(source, {}, 1));
}

TEST_CASE("adversarial epoch covers the balanced pool and leaves the map fixed") {
  const auto in = tiny_inputs();
  const auto vocab = build_run_vocabulary(in);
  auto config = tiny_config();
  config.batch_size = 4;
  const auto source = window_dataset(in.source, vocab, config.window_options(), false);
  const auto target = window_dataset(in.target, vocab, config.window_options(), false);
  std::vector<const EncodedWindow*> s, t;
  for (const auto& w : source) s.push_back(&w);
  for (std::size_t i = 0; i < 15; ++i) t.push_back(&target[i]);
  const auto merged = balance_domains(s, t, 3);
  REQUIRE(merged.windows.size() == 30);

  SpanModel model(config.encoder_config(vocab.size()), 1);
  const auto map = init_randomized_map(config.d_R, config.max_len, 8);
  const auto map_copy = map;
  Discriminator disc({config.d_R, config.discriminator_hidden, 0.2, 1.0}, 2);
  TrainingContext context(config, vocab);
  const auto entry = adversarial_epoch(model, disc, map, merged, 1, context);
  CHECK(entry.steps == (30 + 4 - 1) / 4);
  CHECK(entry.n_source == 15);
  CHECK(entry.n_target == 15);
  CHECK(entry.phase == Phase::adversarial);
  CHECK(entry.mean_pred_source > 0.0);
  CHECK(entry.mean_pred_target < 1.0);
  CHECK(map.r_f == map_copy.r_f);
  CHECK(map.r_g == map_copy.r_g);

  // A trailing single window joins the previous batch.
  config.batch_size = 29;
  TrainingContext folded(config, vocab);
  CHECK(adversarial_epoch(model, disc, map, merged, 1, folded).steps == 1);
}

TEST_CASE("run_case phase schedule") {
  const auto in = tiny_inputs();
  auto config = tiny_config();
  config.N_da = 4;
  const auto full = run_case(in, config);
  CHECK(count_phase(full.log, Phase::pretrain) == config.N_pre);
  CHECK(count_phase(full.log, Phase::self_train) == 4);
  CHECK(count_phase(full.log, Phase::adversarial) == 3);
  // Pretraining first, then self-training and adversarial epochs alternate.
  std::vector<Phase> order;
  for (const auto& e : full.log) order.push_back(e.phase);
  const std::vector<Phase> expected{Phase::pretrain,   Phase::pretrain,    Phase::self_train, Phase::adversarial,
                                    Phase::self_train, Phase::adversarial, Phase::self_train, Phase::adversarial,
                                    Phase::self_train};
  CHECK(order == expected);
  for (const auto& e : full.log) CHECK(e.eval.has_value());

  config.N_da = 1;
  const auto one = run_case(in, config);
  CHECK(count_phase(one.log, Phase::self_train) == 1);
  CHECK(count_phase(one.log, Phase::adversarial) == 0);

  config.N_da = 3;
  config.ablations = parse_ablations("no_adversarial");
  const auto no_adv = run_case(in, config);
  CHECK(count_phase(no_adv.log, Phase::self_train) == 3);
  CHECK(count_phase(no_adv.log, Phase::adversarial) == 0);

  config.ablations = parse_ablations("no_selftrain");
  const auto no_st = run_case(in, config);
  CHECK(count_phase(no_st.log, Phase::self_train) == 0);
  CHECK(count_phase(no_st.log, Phase::adversarial) == 2);
}

TEST_CASE("with every phase ablated the run is the zero-shot model") {
  const auto in = tiny_inputs();
  auto config = tiny_config();
  config.ablations = parse_ablations("no_adversarial,no_selftrain");
  const auto ablated = run_case(in, config);
  CHECK(ablated.log.size() == static_cast<std::size_t>(config.N_pre));

  const auto vocab = build_run_vocabulary(in);
  SpanModel zero_shot(config.encoder_config(vocab.size()), config.seed);
  TrainingContext context(config, vocab);
  pretrain_source(zero_shot, window_dataset(in.source, vocab, config.window_options(), true), context);
  auto a = ablated.model->parameters();
  auto b = zero_shot.parameters();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value == b[i]->value);
}

TEST_CASE("without batch normalization the span model has no normalization parameters") {
  const auto in = tiny_inputs();
  auto config = tiny_config();
  config.ablations.no_batchnorm = true;
  const auto result = run_case(in, config);
  for (auto* p : result.model->parameters()) CHECK(p->name.rfind("norm", 0) != 0);
  CHECK(count_phase(result.log, Phase::adversarial) == 2);
}

TEST_CASE("a run directory holds every artifact and is reproducible") {
  const auto in = tiny_inputs();
  auto config = tiny_config();
  config.use_entropy = true;
  const auto dir_a = fresh_dir("run_a");
  const auto dir_b = fresh_dir("run_b");
  const auto a = run_case(in, config, dir_a);
  run_case(in, config, dir_b);

  CHECK(fs::exists(dir_a / "config.json"));
  CHECK(pipeline_config_from_json(nlohmann::json::parse(read_file(dir_a / "config.json"))).seed == config.seed);
  for (std::size_t n = 1; n <= a.log.size(); ++n) {
    CHECK(fs::exists(dir_a / "checkpoints" / ("epoch_" + std::to_string(n)) / "params.bin"));
  }
  CHECK_FALSE(fs::exists(dir_a / "checkpoints" / ("epoch_" + std::to_string(a.log.size() + 1))));
  for (int j = 1; j <= config.N_da; ++j) {
    CHECK(fs::exists(dir_a / ("pseudo_labels_epoch_" + std::to_string(j) + ".jsonl")));
  }
  CHECK(jsonl(dir_a / "timings.jsonl").size() == a.log.size());

  const auto records = jsonl(dir_a / "metrics.jsonl");
  int epochs = 0, steps = 0;
  for (const auto& r : records) {
    if (r.at("type") == "epoch") ++epochs;
    if (r.at("type") == "step") ++steps;
  }
  CHECK(epochs == static_cast<int>(a.log.size()));
  CHECK(steps > epochs);
  CHECK(read_file(dir_a / "metrics.jsonl") == read_file(dir_b / "metrics.jsonl"));
  CHECK(read_file(dir_a / "checkpoints" / "epoch_7" / "params.bin") ==
        read_file(dir_b / "checkpoints" / "epoch_7" / "params.bin"));

  const auto last = load_checkpoint(dir_a / "checkpoints" / ("epoch_" + std::to_string(a.log.size())));
  auto p = last.model->parameters();
  auto q = a.model->parameters();
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(p[i]->value == q[i]->value);
  fs::remove_all(dir_a);
  fs::remove_all(dir_b);
}

TEST_CASE("target answers never reach training") {
  auto in = tiny_inputs();
  auto config = tiny_config();
  config.ablations.no_adversarial = true;
  const auto labelled = run_case(in, config);
  for (auto& ex : in.target) {
    // Gold spans pointing elsewhere must not change anything.
    ex.answer = AnswerSpan{0, 0};
    ex.answer_text = "bogus";
  }
  const auto relabelled = run_case(in, config);
  auto a = labelled.model->parameters();
  auto b = relabelled.model->parameters();
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->value == b[i]->value);
}

TEST_CASE("an untrained encoder scores near chance on both domains") {
  SyntheticTaskSpec spec;
  spec.n_examples = 1000;
  spec.seed = 1;
  spec.style_shift.filler_swap = 1.0;
  const auto pair = generate_synthetic_domain_pair(spec);
  RunInputs in{pair.source, pair.target, {}};
  const auto vocab = build_run_vocabulary(in);
  PipelineConfig config;
  config.init_std = 0.0;
  SpanModel model(config.encoder_config(vocab.size()), 3);
  for (const auto* side : {&pair.source, &pair.target}) {
    const auto result = evaluate(model, vocab, *side, config.decode_options());
    MESSAGE("untrained EM " << result.exact_match);
    CHECK(result.exact_match < 10.0);
  }
}
