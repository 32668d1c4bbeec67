#include "rcadapt/adversary.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "rcadapt/errors.hpp"

namespace rcadapt {

RandomizedMap init_randomized_map(int d_r, int m, std::uint64_t seed) {
  if (d_r < 1) throw ConfigError("d_R must be >= 1");
  if (m < 1) throw ConfigError("max_len must be >= 1");
  RandomizedMap map;
  map.d_r = d_r;
  map.seed = seed;
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  map.r_f.resize(d_r, m);
  map.r_g.resize(d_r, 2 * m);
  for (Eigen::Index i = 0; i < map.r_f.size(); ++i) map.r_f.data()[i] = normal(rng);
  for (Eigen::Index i = 0; i < map.r_g.size(); ++i) map.r_g.data()[i] = normal(rng);
  return map;
}

Vector average_hidden(const Matrix& features) { return features.rowwise().mean(); }

Vector conditioning_logits(const Vector& start_logits, const Vector& end_logits,
                           const std::vector<bool>& passage_mask) {
  const auto m = start_logits.size();
  Vector g(2 * m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const bool valid = passage_mask[static_cast<std::size_t>(i)];
    g[i] = valid ? start_logits[i] : 0.0;
    g[m + i] = valid ? end_logits[i] : 0.0;
  }
  return g;
}

namespace {

void check_shapes(const Matrix& features, Eigen::Index logit_size, const RandomizedMap& map) {
  if (features.rows() != map.r_f.cols() || logit_size != map.r_g.cols()) {
    throw ShapeError("multilinear embedding: input shapes do not match the randomized map");
  }
}

}  // namespace

Vector multilinear_embed(const Matrix& features, const Vector& start_logits, const Vector& end_logits,
                         const RandomizedMap& map) {
  Vector g(start_logits.size() + end_logits.size());
  g << start_logits, end_logits;
  check_shapes(features, g.size(), map);
  const Vector u = map.r_f * average_hidden(features);
  const Vector v = map.r_g * g;
  return u.cwiseProduct(v) / std::sqrt(static_cast<double>(map.d_r));
}

void multilinear_embed_backward(const Matrix& features, const Vector& logits, const RandomizedMap& map,
                                const Vector& d_embedding, Matrix& d_features, Vector& d_logits) {
  check_shapes(features, logits.size(), map);
  const double s = 1.0 / std::sqrt(static_cast<double>(map.d_r));
  const Vector u = map.r_f * average_hidden(features);
  const Vector v = map.r_g * logits;
  const Vector d_avg = map.r_f.transpose() * (d_embedding.cwiseProduct(v) * s);
  d_logits = map.r_g.transpose() * (d_embedding.cwiseProduct(u) * s);
  const auto d = static_cast<double>(features.cols());
  d_features = (d_avg / d).replicate(1, features.cols());
}

Discriminator::Discriminator(const DiscriminatorConfig& config, std::uint64_t seed)
    : w1("disc.w1", config.input_dim, config.hidden_dim),
      b1("disc.b1", 1, config.hidden_dim),
      w2("disc.w2", config.hidden_dim, config.hidden_dim),
      b2("disc.b2", 1, config.hidden_dim),
      w3("disc.w3", config.hidden_dim, 1),
      b3("disc.b3", 1, 1),
      config_(config),
      rng_(seed) {
  if (config.input_dim < 1 || config.hidden_dim < 1) throw ConfigError("discriminator dimensions must be positive");
  if (config.dropout_rate < 0.0 || config.dropout_rate >= 1.0) throw ConfigError("dropout_rate must lie in [0, 1)");
  if (config.reversal_coefficient < 0.0) throw ConfigError("reversal coefficient must be non-negative");
  for (auto* w : {&w1, &w2, &w3}) truncated_normal_(w->value, 0.02, rng_);
}

Vector Discriminator::forward(const Matrix& embeddings, bool train, Tape& tape) {
  if (embeddings.cols() != config_.input_dim) throw ShapeError("discriminator input width mismatch");
  const auto n = embeddings.rows();
  tape.input = embeddings;
  tape.h1_pre = embeddings * w1.value;
  tape.h1_pre.rowwise() += b1.value.row(0);
  tape.mask1 = dropout_mask(n, config_.hidden_dim, config_.dropout_rate, train, rng_);
  tape.h1 = apply_mask(tape.h1_pre.cwiseMax(0.0), tape.mask1);
  tape.h2_pre = tape.h1 * w2.value;
  tape.h2_pre.rowwise() += b2.value.row(0);
  tape.mask2 = dropout_mask(n, config_.hidden_dim, config_.dropout_rate, train, rng_);
  tape.h2 = apply_mask(tape.h2_pre.cwiseMax(0.0), tape.mask2);
  tape.logits = (tape.h2 * w3.value).col(0).array() + b3.value(0, 0);
  tape.probs = (1.0 + (-tape.logits.array()).exp()).inverse();
  return tape.probs;
}

double Discriminator::discriminate(const Vector& embedding, bool train) {
  Tape tape;
  return forward(embedding.transpose(), train, tape)[0];
}

Matrix Discriminator::backward(const Tape& tape, const Vector& d_logits) {
  w3.grad.noalias() += tape.h2.transpose() * d_logits;
  b3.grad(0, 0) += d_logits.sum();
  Matrix d_h2 = d_logits * w3.value.transpose();
  d_h2 = apply_mask(d_h2, tape.mask2).cwiseProduct((tape.h2_pre.array() > 0.0).cast<double>().matrix());
  w2.grad.noalias() += tape.h1.transpose() * d_h2;
  b2.grad.row(0) += d_h2.colwise().sum();
  Matrix d_h1 = d_h2 * w2.value.transpose();
  d_h1 = apply_mask(d_h1, tape.mask1).cwiseProduct((tape.h1_pre.array() > 0.0).cast<double>().matrix());
  w1.grad.noalias() += tape.input.transpose() * d_h1;
  b1.grad.row(0) += d_h1.colwise().sum();
  return d_h1 * w1.value.transpose();
}

double adversarial_loss(double prediction, int domain_label) {
  const double p = std::clamp(prediction, kProbabilityClamp, 1.0 - kProbabilityClamp);
  return domain_label == 1 ? -std::log(p) : -std::log(1.0 - p);
}

double sample_entropy(const Vector& start_logits, const Vector& end_logits, const std::vector<bool>& passage_mask) {
  std::vector<Eigen::Index> valid;
  for (Eigen::Index i = 0; i < start_logits.size(); ++i) {
    if (passage_mask[static_cast<std::size_t>(i)]) valid.push_back(i);
  }
  if (valid.empty()) throw std::invalid_argument("entropy needs at least one passage position");
  double entropy = 0.0;
  for (const Vector* logits : {&start_logits, &end_logits}) {
    Vector v(static_cast<Eigen::Index>(valid.size()));
    for (std::size_t k = 0; k < valid.size(); ++k) v[static_cast<Eigen::Index>(k)] = (*logits)[valid[k]];
    const Vector logp = log_softmax(v);
    entropy -= (logp.array().exp() * logp.array()).sum();
  }
  return std::max(entropy, 0.0);
}

double entropy_weight(double entropy) {
  if (entropy < 0.0) throw std::invalid_argument("entropy must be non-negative");
  return 1.0 + std::exp(-entropy);
}

Vector discriminator_input(const ModelOutput& output, const std::vector<bool>& passage_mask,
                           const RandomizedMap& map, bool conditioning) {
  if (!conditioning) {
    if (output.features.rows() != map.r_f.cols()) throw ShapeError("feature rows do not match the randomized map");
    return map.r_f * average_hidden(output.features);
  }
  const Vector g = conditioning_logits(output.start_logits, output.end_logits, passage_mask);
  const auto m = output.start_logits.size();
  return multilinear_embed(output.features, g.head(m), g.tail(m), map);
}

AdversarialStats adversarial_objective(const std::vector<ModelOutput>& outputs, const DomainBatch& batch,
                                       const RandomizedMap& map, Discriminator& disc,
                                       const AdversarialOptions& options, bool train,
                                       std::vector<Matrix>* d_features, std::vector<Vector>* d_start,
                                       std::vector<Vector>* d_end) {
  if (options.lambda < 0.0) throw ConfigError("reversal coefficient must be non-negative");
  const auto n = outputs.size();
  if (n == 0 || batch.windows.size() != n || batch.domain_labels.size() != n) {
    throw std::invalid_argument("adversarial batch: outputs, windows and labels must align");
  }
  Matrix inputs(static_cast<Eigen::Index>(n), map.d_r);
  std::vector<Vector> logits(n);
  std::vector<double> weights(n, 1.0);
  for (std::size_t b = 0; b < n; ++b) {
    const auto& mask = batch.windows[b]->passage_mask;
    if (options.conditioning) {
      logits[b] = conditioning_logits(outputs[b].start_logits, outputs[b].end_logits, mask);
    }
    inputs.row(static_cast<Eigen::Index>(b)) = discriminator_input(outputs[b], mask, map, options.conditioning);
    if (options.use_entropy) {
      weights[b] = entropy_weight(sample_entropy(outputs[b].start_logits, outputs[b].end_logits, mask));
    }
  }
  Discriminator::Tape tape;
  const Vector probs = disc.forward(inputs, train, tape);

  AdversarialStats stats;
  Vector d_logit(static_cast<Eigen::Index>(n));
  double weight_sum = 0.0;
  int correct = 0;
  for (std::size_t b = 0; b < n; ++b) {
    const auto i = static_cast<Eigen::Index>(b);
    const int y = batch.domain_labels[b];
    stats.loss += weights[b] * adversarial_loss(probs[i], y) / static_cast<double>(n);
    d_logit[i] = weights[b] * (probs[i] - y) / static_cast<double>(n);
    weight_sum += weights[b];
    correct += (probs[i] > 0.5) == (y == 1) ? 1 : 0;
    if (y == 1) {
      stats.mean_pred_target += probs[i];
      ++stats.n_target;
    } else {
      stats.mean_pred_source += probs[i];
      ++stats.n_source;
    }
  }
  if (stats.n_source > 0) stats.mean_pred_source /= stats.n_source;
  if (stats.n_target > 0) stats.mean_pred_target /= stats.n_target;
  stats.mean_weight = weight_sum / static_cast<double>(n);
  stats.accuracy = static_cast<double>(correct) / static_cast<double>(n);

  const Matrix d_inputs = disc.backward(tape, d_logit);
  if (!d_features) return stats;

  // Gradient reversal: the feature and output networks see -lambda times the
  // true derivative.
  const double reversal = -options.lambda;
  d_features->assign(n, Matrix());
  d_start->assign(n, Vector());
  d_end->assign(n, Vector());
  for (std::size_t b = 0; b < n; ++b) {
    const Vector dz = d_inputs.row(static_cast<Eigen::Index>(b)).transpose();
    const auto& f = outputs[b].features;
    const auto m = f.rows();
    Matrix df;
    Vector dg = Vector::Zero(2 * m);
    if (options.conditioning) {
      multilinear_embed_backward(f, logits[b], map, dz, df, dg);
      const auto& mask = batch.windows[b]->passage_mask;
      for (Eigen::Index i = 0; i < m; ++i) {
        if (!mask[static_cast<std::size_t>(i)]) {
          dg[i] = 0.0;
          dg[m + i] = 0.0;
        }
      }
    } else {
      const Vector d_avg = map.r_f.transpose() * dz;
      df = (d_avg / static_cast<double>(f.cols())).replicate(1, f.cols());
    }
    (*d_features)[b] = reversal * df;
    (*d_start)[b] = reversal * dg.head(m);
    (*d_end)[b] = reversal * dg.tail(m);
  }
  return stats;
}

AdversarialStats adversarial_step(const DomainBatch& batch, SpanModel& model, const RandomizedMap& map,
                                  Discriminator& disc, const AdversarialOptions& options, Adam& optimizer) {
  if (options.lambda < 0.0) throw ConfigError("reversal coefficient must be non-negative");
  optimizer.zero_grad();
  auto tape = model.forward(batch.windows, true);
  std::vector<Matrix> d_features;
  std::vector<Vector> d_start;
  std::vector<Vector> d_end;
  const auto stats = adversarial_objective(tape.outputs, batch, map, disc, options, true, &d_features,
                                           &d_start, &d_end);
  model.backward(tape, d_features, d_start, d_end);
  optimizer.step();
  return stats;
}

}  // namespace rcadapt
