#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iterator>
#include <random>
#include <sstream>
#include <string>

#include "helpers.hpp"

#include "json.hpp"

#include "rcadapt/adversary.hpp"
#include "rcadapt/checkpoint.hpp"
#include "rcadapt/cli.hpp"
#include "rcadapt/metrics.hpp"
#include "rcadapt/pipeline.hpp"
#include "rcadapt/pseudo_label.hpp"
#include "rcadapt/synthetic.hpp"
#include "rcadapt/transfer.hpp"

using namespace rcadapt;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int criterion, const Verdict& v) {
  std::cout << "criterion " << criterion << ": " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail << std::endl;
  if (!v.pass) ++failures;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int count_phase(const std::vector<EpochLog>& log, Phase phase) {
  int n = 0;
  for (const auto& e : log) n += e.phase == phase;
  return n;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct SyntheticRuns {
  Verdict adaptation;
  Verdict schedule;
  Verdict determinism;
};

SyntheticRuns synthetic_runs(const fs::path& config_path, const fs::path& work) {
  const auto experiment = load_experiment_config(config_path);
  const auto& config = experiment.pipeline;
  const auto inputs = load_run_inputs(experiment.data);
  auto dev_spec = *experiment.data.synthetic;
  dev_spec.seed += 1;
  dev_spec.n_examples = experiment.data.synthetic_eval;
  const auto source_dev = generate_synthetic_domain_pair(dev_spec).source;

  const auto t0 = std::chrono::steady_clock::now();
  const auto full = run_case(inputs, config, work / "full_a");
  const double runtime = seconds_since(t0);
  run_case(inputs, config, work / "full_b");
  auto ablated_config = config;
  ablated_config.ablations.no_selftrain = true;
  const auto ablated = run_case(inputs, ablated_config);

  const auto pretrained = load_checkpoint(work / "full_a" / "checkpoints" / ("epoch_" + std::to_string(config.N_pre)));
  const double self_em = evaluate(*pretrained.model, full.vocab, source_dev, config.decode_options()).exact_match;
  const double zero_shot = full.log[static_cast<std::size_t>(config.N_pre - 1)].eval->exact_match;
  const double full_em = full.log.back().eval->exact_match;
  const double ablated_em = ablated.log.back().eval->exact_match;
  const double gain = full_em - zero_shot;
  const double ablated_gain = ablated_em - zero_shot;
  const bool a = self_em - zero_shot >= 10.0;
  const bool b = gain >= 10.0;
  const bool c = ablated_gain < 0.5 * gain;
  const bool fast = runtime <= 600.0;

  SyntheticRuns out;
  std::ostringstream d;
  d.setf(std::ios::fixed);
  d.precision(2);
  d << "(a) " << (a ? "pass" : "fail") << " source self EM " << self_em << " vs zero-shot target EM " << zero_shot
    << "; (b) " << (b ? "pass" : "fail") << " full EM " << full_em << ", gain " << gain << "; (c) "
    << (c ? "pass" : "fail") << " no_selftrain EM " << ablated_em << ", gain " << ablated_gain << "; runtime "
    << runtime << " s";
  out.adaptation = {a && b && c && fast, d.str()};

  std::ostringstream no_adv_out, no_adv_err;
  const int code = cli_main({"adapt", "--config", config_path.string(), "--out", (work / "no_adv").string(), "--ablate",
                             "no_adversarial"},
                            no_adv_out, no_adv_err);
  int no_adv_adversarial = -1;
  if (code == 0) {
    no_adv_adversarial = 0;
    for (const auto& e : nlohmann::json::parse(no_adv_out.str()).at("epochs")) {
      no_adv_adversarial += e.at("phase") == "adversarial";
    }
  }
  const int pre = count_phase(full.log, Phase::pretrain);
  const int st = count_phase(full.log, Phase::self_train);
  const int adv = count_phase(full.log, Phase::adversarial);
  out.schedule = {pre == 3 && st == 4 && adv == 3 && no_adv_adversarial == 0,
                  "default run " + std::to_string(pre) + " pretrain / " + std::to_string(st) + " self-train / " +
                      std::to_string(adv) + " adversarial; no_adversarial run " +
                      std::to_string(no_adv_adversarial) + " adversarial"};

  const auto metrics_a = read_file(work / "full_a" / "metrics.jsonl");
  const auto metrics_b = read_file(work / "full_b" / "metrics.jsonl");
  out.determinism = {!metrics_a.empty() && metrics_a == metrics_b,
                     "metrics.jsonl " + std::to_string(metrics_a.size()) + " and " +
                         std::to_string(metrics_b.size()) + " bytes, " +
                         (metrics_a == metrics_b ? "identical" : "different")};
  return out;
}

Verdict pseudo_label_oracle() {
  std::mt19937_64 rng(2024);
  double worst = 0.0;
  int span_mismatches = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int m = std::uniform_int_distribution<int>(1, 16)(rng);
    const auto s = testing::random_vector(m, rng, 2.0);
    const auto e = testing::random_vector(m, rng, 2.0);
    std::vector<bool> mask(static_cast<std::size_t>(m));
    for (auto&& bit : mask) bit = std::bernoulli_distribution(0.75)(rng);
    mask[static_cast<std::size_t>(std::uniform_int_distribution<int>(0, m - 1)(rng))] = true;

    double top = -1e300;
    AnswerSpan best;
    std::vector<double> scores;
    for (int i = 0; i < m; ++i) {
      for (int j = i; j < m; ++j) {
        if (!mask[static_cast<std::size_t>(i)] || !mask[static_cast<std::size_t>(j)]) continue;
        scores.push_back(s[i] + e[j]);
        if (scores.back() > top) top = scores.back(), best = {i, j};
      }
    }
    double z = 0.0;
    for (double x : scores) z += std::exp(x - top);
    const auto pred = generating_probability(n_best_spans(s, e, mask, static_cast<int>(scores.size()), m));
    span_mismatches += !(pred.span == best);
    worst = std::max(worst, std::abs(pred.p_g - 1.0 / z));
  }
  std::ostringstream d;
  d << "200 cases, span mismatches " << span_mismatches << ", max |p_g error| " << worst;
  return {span_mismatches == 0 && worst <= 1e-9, d.str()};
}

Verdict multilinear_unbiasedness() {
  std::mt19937_64 rng(77);
  const int m = 8, d = 4, d_r = 64, draws = 2000;
  double worst = 0.0;
  for (int tuple = 0; tuple < 10; ++tuple) {
    const auto f = testing::random_matrix(m, d, rng);
    const auto g = testing::random_vector(2 * m, rng);
    const Matrix f2 = f + 0.5 * testing::random_matrix(m, d, rng);
    const Vector g2 = g + 0.5 * testing::random_vector(2 * m, rng);
    double a = 0.0;
    for (int i = 0; i < m; ++i) a += f.row(i).mean() * f2.row(i).mean();
    const double exact = a * g.dot(g2);
    double sum = 0.0;
    for (int k = 0; k < draws; ++k) {
      const auto map = init_randomized_map(d_r, m, 50000u + 1000u * static_cast<unsigned>(tuple) +
                                                       static_cast<unsigned>(k));
      sum += multilinear_embed(f, g.head(m), g.tail(m), map).dot(multilinear_embed(f2, g2.head(m), g2.tail(m), map));
    }
    worst = std::max(worst, std::abs(sum / draws - exact) / std::abs(exact));
  }
  std::ostringstream out;
  out << "10 tuples x 2000 draws, max relative error " << worst;
  return {worst < 0.05, out.str()};
}

double oracle_probability(const Matrix& f, const Vector& s, const Vector& e, const std::vector<bool>& mask,
                          const RandomizedMap& map, Discriminator& disc) {
  Vector avg(f.rows());
  for (Eigen::Index i = 0; i < f.rows(); ++i) avg[i] = f.row(i).mean();
  const auto m = s.size();
  Vector g(2 * m);
  for (Eigen::Index i = 0; i < m; ++i) {
    g[i] = mask[static_cast<std::size_t>(i)] ? s[i] : 0.0;
    g[m + i] = mask[static_cast<std::size_t>(i)] ? e[i] : 0.0;
  }
  const Vector z = (map.r_f * avg).cwiseProduct(map.r_g * g) / std::sqrt(static_cast<double>(map.d_r));
  Eigen::RowVectorXd h1 = (z.transpose() * disc.w1.value + disc.b1.value).cwiseMax(0.0);
  Eigen::RowVectorXd h2 = (h1 * disc.w2.value + disc.b2.value).cwiseMax(0.0);
  return 1.0 / (1.0 + std::exp(-((h2 * disc.w3.value)(0, 0) + disc.b3.value(0, 0))));
}

Verdict gradient_checks() {
  std::vector<RCExample> examples{
      testing::make_example("s1", "what kind0 ?", "w1 ( ent0 ) w2", 2, 2),
      testing::make_example("s2", "what kind1 ?", "( ent1 ) w3 w0", 1, 1),
      testing::make_example("t1", "what kind0 ?", "zw1 ( ent3 ) zw2 zw0", 2, 2),
      testing::make_example("t2", "what kind2 ?", "zw4 zw4 ( ent2 )", 3, 3)};
  WindowOptions options;
  options.max_len = 12;
  options.max_query_len = 3;
  options.stride = 12;
  const auto vocab = Vocabulary::build({&examples});
  const auto windows = window_dataset(examples, vocab, options, true);
  DomainBatch batch;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    batch.windows.push_back(&windows[i]);
    batch.domain_labels.push_back(i < 2 ? 0 : 1);
  }
  EncoderConfig config;
  config.n_layers = 1;
  config.hidden_dim = 4;
  config.n_heads = 2;
  config.max_len = options.max_len;
  config.dropout_rate = 0.0;
  config.vocab_size = vocab.size();
  config.init_std = 0.4;
  SpanModel model(config, 3);
  const double n = static_cast<double>(windows.size());

  double span_worst = 0.0;
  {
    auto loss = [&] {
      auto tape = model.forward(batch.windows, true);
      double total = 0.0;
      for (std::size_t b = 0; b < windows.size(); ++b) {
        const auto& o = tape.outputs[b];
        total += span_loss(o.start_logits, o.end_logits, windows[b].label->start, windows[b].label->end,
                           windows[b].passage_mask);
      }
      return total / n;
    };
    zero_grads(model.parameters());
    auto tape = model.forward(batch.windows, true);
    std::vector<Vector> d_start(windows.size()), d_end(windows.size());
    for (std::size_t b = 0; b < windows.size(); ++b) {
      span_loss_grad(tape.outputs[b].start_logits, tape.outputs[b].end_logits, windows[b].label->start,
                     windows[b].label->end, 1.0 / n, d_start[b], d_end[b]);
    }
    model.backward(tape, {}, d_start, d_end);
    for (auto* p : model.parameters()) {
      for (Eigen::Index k = 0; k < p->value.size(); ++k) {
        const double numeric = testing::central_difference(p->value.data() + k, loss, 1e-4);
        if (std::abs(p->grad.data()[k]) < 1e-9 && std::abs(numeric) < 1e-9) continue;
        span_worst = std::max(span_worst, testing::relative_error(p->grad.data()[k], numeric));
      }
    }
  }

  const auto map = init_randomized_map(10, config.max_len, 9);
  Discriminator disc({10, 5, 0.0, 1.0}, 2);
  Rng init(102);
  for (auto* p : disc.parameters()) {
    p->value = testing::random_matrix(static_cast<int>(p->value.rows()), static_cast<int>(p->value.cols()), init, 0.5);
  }
  const double lambda = 1.3;
  double adv_worst[2] = {0.0, 0.0};
  bool reversed = true;
  for (bool use_entropy : {false, true}) {
    std::vector<double> weights;
    {
      auto tape = model.forward(batch.windows, true);
      for (std::size_t b = 0; b < windows.size(); ++b) {
        const auto& o = tape.outputs[b];
        weights.push_back(use_entropy ? entropy_weight(sample_entropy(o.start_logits, o.end_logits,
                                                                      windows[b].passage_mask))
                                      : 1.0);
      }
    }
    auto loss = [&] {
      auto tape = model.forward(batch.windows, true);
      double total = 0.0;
      for (std::size_t b = 0; b < windows.size(); ++b) {
        const auto& o = tape.outputs[b];
        const double p = oracle_probability(o.features, o.start_logits, o.end_logits, windows[b].passage_mask, map,
                                            disc);
        total += weights[b] * -std::log(batch.domain_labels[b] == 1 ? p : 1.0 - p);
      }
      return total / n;
    };
    zero_grads(model.parameters());
    zero_grads(disc.parameters());
    auto tape = model.forward(batch.windows, true);
    std::vector<Matrix> d_features;
    std::vector<Vector> d_start, d_end;
    adversarial_objective(tape.outputs, batch, map, disc, {use_entropy, lambda, true}, false, &d_features, &d_start,
                          &d_end);
    model.backward(tape, d_features, d_start, d_end);
    auto& worst = adv_worst[use_entropy ? 1 : 0];
    for (auto* p : disc.parameters()) {
      for (Eigen::Index k = 0; k < p->value.size(); ++k) {
        const double numeric = testing::central_difference(p->value.data() + k, loss, 1e-6);
        worst = std::max(worst, testing::relative_error(p->grad.data()[k], numeric));
      }
    }
    for (auto* p : model.parameters()) {
      for (Eigen::Index k = 0; k < p->value.size(); ++k) {
        const double numeric = testing::central_difference(p->value.data() + k, loss, 1e-4);
        const double analytic = p->grad.data()[k];
        if (std::abs(analytic) < 1e-9 && std::abs(numeric) < 1e-9) continue;
        worst = std::max(worst, testing::relative_error(analytic, -lambda * numeric));
        if (std::abs(numeric) > 1e-6 && analytic * numeric > 0.0) reversed = false;
      }
    }
  }
  std::ostringstream d;
  d << "max relative error: span loss " << span_worst << ", BCE " << adv_worst[0] << ", entropy-weighted BCE "
    << adv_worst[1] << "; encoder and head receive -" << lambda << " x gradient: " << (reversed ? "yes" : "no");
  return {span_worst < 1e-4 && adv_worst[0] < 1e-4 && adv_worst[1] < 1e-4 && reversed, d.str()};
}

Verdict closed_forms() {
  const double w0 = entropy_weight(0.0);
  const double w512 = entropy_weight(2.0 * std::log(512.0));
  const Vector zero = Vector::Zero(6);
  std::vector<bool> mask(6, false);
  for (int i = 1; i <= 4; ++i) mask[static_cast<std::size_t>(i)] = true;
  Vector masked = zero;
  masked[0] = masked[5] = kMaskValue;
  const double uniform = span_loss(masked, masked, 1, 3, mask);
  const double force =
      compute_force((40.03 + 57.42) / 2.0, (64.80 + 78.32) / 2.0, (79.85 + 87.46) / 2.0, (52.05 + 67.41) / 2.0);
  const bool pass = w0 == 2.0 && std::abs(w512 - 1.0000038) <= 1e-6 && std::abs(uniform - std::log(4.0)) <= 1e-6 &&
                    std::abs(force - 1.6712) <= 0.0005;
  std::ostringstream d;
  d.precision(8);
  d << "w(0) " << w0 << ", w(2 ln 512) " << w512 << ", uniform span loss " << uniform << ", force " << force;
  return {pass, d.str()};
}

Verdict metric_vectors() {
  const bool examples = exact_match("The Cat", "cat") == 1 && exact_match("red cat", "cat sat") == 0 &&
                        exact_match("", "") == 1 && f1_score("same words", "same words") == 1.0 &&
                        f1_score("red cat", "cat sat") == 0.5 && f1_score("x b c", "b") == 0.5 &&
                        std::abs(f1_score("a b c", "b") - 2.0 / 3.0) < 1e-12 && f1_score("", "") == 1.0;
  const std::vector<std::string> words{"the", "a", "cat", "Cat", "dog", "red", "sat,", "mat", "an", "blue."};
  std::mt19937_64 rng(3);
  auto phrase = [&] {
    std::string out;
    for (int k = std::uniform_int_distribution<int>(0, 5)(rng); k > 0; --k) {
      out += (out.empty() ? "" : " ") + words[std::uniform_int_distribution<std::size_t>(0, words.size() - 1)(rng)];
    }
    return out;
  };
  int violations = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto p = phrase();
    const auto g = phrase();
    violations += static_cast<double>(exact_match(p, g)) > f1_score(p, g);
  }
  return {examples && violations == 0, std::string("EM/F1 examples ") + (examples ? "match" : "differ") +
                                           ", EM > F1 in " + std::to_string(violations) + " of 1000 random pairs"};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path config_path = argc > 1 ? fs::path(argv[1]) : fs::path(RCADAPT_SOURCE_DIR) / "configs" / "synthetic_case.json";
  const auto work = fs::temp_directory_path() / "rcadapt_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);

  const auto runs = synthetic_runs(config_path, work);
  report(1, runs.adaptation);
  report(2, pseudo_label_oracle());
  report(3, multilinear_unbiasedness());
  report(4, gradient_checks());
  report(5, runs.schedule);
  report(6, closed_forms());
  report(7, metric_vectors());
  report(8, runs.determinism);
  fs::remove_all(work);
  return failures == 0 ? 0 : 1;
}
