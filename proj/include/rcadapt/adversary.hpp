#pragma once

#include <cstdint>
#include <vector>

#include "rcadapt/corpus.hpp"
#include "rcadapt/encoder.hpp"
#include "rcadapt/optimizer.hpp"

namespace rcadapt {

// Fixed random projections for the randomized multilinear embedding. Never
// trained.
struct RandomizedMap {
  Matrix r_f;  // d_R x m
  Matrix r_g;  // d_R x 2m
  int d_r = 0;
  std::uint64_t seed = 0;

  int max_len() const { return static_cast<int>(r_f.cols()); }
};

RandomizedMap init_randomized_map(int d_r, int m, std::uint64_t seed);

// Mean of f over its hidden channels, one value per position.
Vector average_hidden(const Matrix& features);

// g^s ++ g^e with every non-passage entry zeroed, so the constant logit mask
// does not leak into the embedding.
Vector conditioning_logits(const Vector& start_logits, const Vector& end_logits,
                           const std::vector<bool>& passage_mask);

// (1/sqrt(d_R)) (R_f avg_hidden(f)) * (R_g (g^s ++ g^e)), element-wise.
Vector multilinear_embed(const Matrix& features, const Vector& start_logits, const Vector& end_logits,
                         const RandomizedMap& map);

// Gradients of <d_embedding, multilinear_embed(f, g)> w.r.t. f and g = g^s ++ g^e.
void multilinear_embed_backward(const Matrix& features, const Vector& logits, const RandomizedMap& map,
                                const Vector& d_embedding, Matrix& d_features, Vector& d_logits);

struct DiscriminatorConfig {
  int input_dim = 768;  // d_R
  int hidden_dim = 512;
  double dropout_rate = 0.2;
  double reversal_coefficient = 1.0;  // lambda
};

// linear -> ReLU -> dropout -> linear -> ReLU -> dropout -> linear -> sigmoid.
class Discriminator {
 public:
  Discriminator(const DiscriminatorConfig& config, std::uint64_t seed);

  struct Tape {
    Matrix input;
    Matrix h1_pre, h1, mask1;
    Matrix h2_pre, h2, mask2;
    Vector logits;
    Vector probs;
  };

  // One probability per row of `embeddings` (batch x d_R).
  Vector forward(const Matrix& embeddings, bool train, Tape& tape);
  double discriminate(const Vector& embedding, bool train);
  // Accumulates parameter gradients given dL/d(logit) and returns dL/d(input).
  Matrix backward(const Tape& tape, const Vector& d_logits);

  ParameterList parameters() { return {&w1, &b1, &w2, &b2, &w3, &b3}; }
  const DiscriminatorConfig& config() const { return config_; }

  Parameter w1, b1, w2, b2, w3, b3;

 private:
  DiscriminatorConfig config_;
  Rng rng_;
};

inline constexpr double kProbabilityClamp = 1e-7;

// -[y ln p + (1 - y) ln(1 - p)] with p clamped to [1e-7, 1 - 1e-7].
double adversarial_loss(double prediction, int domain_label);

// Entropy of the start and end distributions over passage positions.
double sample_entropy(const Vector& start_logits, const Vector& end_logits, const std::vector<bool>& passage_mask);

// 1 + e^{-E}; treated as a constant by the backward pass.
double entropy_weight(double entropy);

struct DomainBatch {
  std::vector<const EncodedWindow*> windows;
  std::vector<int> domain_labels;  // 0 = source, 1 = target
};

struct AdversarialOptions {
  bool use_entropy = false;
  double lambda = 1.0;
  bool conditioning = true;
};

struct AdversarialStats {
  double loss = 0.0;
  double mean_pred_source = 0.0;
  double mean_pred_target = 0.0;
  double mean_weight = 1.0;
  double accuracy = 0.0;
  int n_source = 0;
  int n_target = 0;
};

// Discriminator input for one window.
Vector discriminator_input(const ModelOutput& output, const std::vector<bool>& passage_mask,
                           const RandomizedMap& map, bool conditioning);

// Mean (optionally entropy-weighted) domain loss over the batch. Accumulates
// discriminator gradients and, when the out-pointers are given, writes the
// reversed gradients (-lambda * dL/d.) that F and G receive.
AdversarialStats adversarial_objective(const std::vector<ModelOutput>& outputs, const DomainBatch& batch,
                                       const RandomizedMap& map, Discriminator& disc,
                                       const AdversarialOptions& options, bool train,
                                       std::vector<Matrix>* d_features, std::vector<Vector>* d_start,
                                       std::vector<Vector>* d_end);

// One joint update of F, G and D on a domain-labelled batch.
AdversarialStats adversarial_step(const DomainBatch& batch, SpanModel& model, const RandomizedMap& map,
                                  Discriminator& disc, const AdversarialOptions& options, Adam& optimizer);

}  // namespace rcadapt
