#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rcadapt/corpus.hpp"
#include "rcadapt/tensor.hpp"

namespace rcadapt {

enum class EncoderMode { toy_transformer, external_pretrained };

struct EncoderConfig {
  int n_layers = 2;
  int hidden_dim = 32;  // d
  int n_heads = 4;
  int max_len = 64;  // m
  double dropout_rate = 0.2;
  int vocab_size = 0;
  EncoderMode mode = EncoderMode::toy_transformer;
  int ffn_dim = 0;  // 0 means 4 * hidden_dim
  bool batch_norm = true;
  // Standard deviation of the truncated-normal weight init; 0 scales it as
  // 1/sqrt(fan_in) per matrix (embeddings use 1/sqrt(hidden_dim)).
  double init_std = 0.02;

  int ffn_width() const { return ffn_dim > 0 ? ffn_dim : 4 * hidden_dim; }
  double init_scale(int fan_in) const;
  void validate() const;
};

// Additive mask that stands in for -inf at invalid logit positions.
inline constexpr double kMaskValue = -1e4;
inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kLayerNormEps = 1e-12;

// Saved activations of one window's trip through a FeatureEncoder.
struct EncoderTape {
  virtual ~EncoderTape() = default;
  // m x d pre-normalization features; rows past the valid length are zero.
  Matrix features;
  int valid_length = 0;
};

// Token ids -> m x d features. The toy transformer is the desk-scale
// implementation; a pretrained encoder can be plugged in through this contract.
class FeatureEncoder {
 public:
  virtual ~FeatureEncoder() = default;
  virtual std::unique_ptr<EncoderTape> forward(const EncodedWindow& window, bool train, Rng& rng) const = 0;
  // Accumulates parameter gradients given dL/d(features).
  virtual void backward(const EncoderTape& tape, const Matrix& d_features) = 0;
  virtual ParameterList parameters() = 0;
};

// Post-LN transformer encoder with learned position and segment embeddings.
class ToyTransformer final : public FeatureEncoder {
 public:
  ToyTransformer(const EncoderConfig& config, Rng& init_rng);

  std::unique_ptr<EncoderTape> forward(const EncodedWindow& window, bool train, Rng& rng) const override;
  void backward(const EncoderTape& tape, const Matrix& d_features) override;
  ParameterList parameters() override;

 private:
  struct Layer {
    Parameter wq, bq, wk, bk, wv, bv, wo, bo;
    Parameter ln1_gamma, ln1_beta;
    Parameter w1, b1, w2, b2;
    Parameter ln2_gamma, ln2_beta;
  };
  struct Tape;

  EncoderConfig config_;
  Parameter token_embedding_;
  Parameter position_embedding_;
  Parameter segment_embedding_;
  Parameter embedding_ln_gamma_;
  Parameter embedding_ln_beta_;
  std::vector<Layer> layers_;
};

// Per-channel normalization over every valid position of every window in a batch.
class BatchNorm {
 public:
  explicit BatchNorm(int channels);

  struct Tape {
    Matrix xhat;  // stacked valid rows
    Vector inv_std;
    std::vector<int> lengths;
    bool train = false;
  };

  std::vector<Matrix> forward(const std::vector<const Matrix*>& inputs, const std::vector<int>& lengths,
                              bool train, Tape& tape);
  std::vector<Matrix> backward(const std::vector<Matrix>& d_outputs, const Tape& tape);

  ParameterList parameters() { return {&gamma, &beta}; }

  Parameter gamma;
  Parameter beta;
  Matrix running_mean;
  Matrix running_var;
};

struct ModelOutput {
  Matrix features;  // f: m x d after normalization, zero rows at padding
  Vector start_logits;  // g^s, masked
  Vector end_logits;    // g^e, masked
};

// Linear d -> 2 span scorer with passage masking.
class SpanHead {
 public:
  SpanHead(int hidden_dim, double init_stddev, Rng& init_rng);

  void forward(const Matrix& features, const std::vector<bool>& passage_mask, Vector& start,
               Vector& end) const;
  // Returns dL/d(features) and accumulates weight gradients.
  Matrix backward(const Matrix& features, const Vector& d_start, const Vector& d_end);

  ParameterList parameters() { return {&weight, &bias}; }

  Parameter weight;  // d x 2
  Parameter bias;    // 1 x 2
};

// Everything a backward pass needs from a batched forward pass.
struct BatchTape {
  std::vector<std::unique_ptr<EncoderTape>> encoder;
  BatchNorm::Tape norm;
  std::vector<ModelOutput> outputs;
};

// Feature network F, batch normalization, and output network G.
class SpanModel {
 public:
  SpanModel(const EncoderConfig& config, std::uint64_t seed);
  SpanModel(const EncoderConfig& config, std::uint64_t seed, std::unique_ptr<FeatureEncoder> encoder);

  // Pre-norm features for every window of the batch.
  std::vector<std::unique_ptr<EncoderTape>> encode(std::span<const EncodedWindow* const> batch, bool train);
  // f = BN(f_bar); throws in train mode for a batch of size 1.
  std::vector<Matrix> batch_normalize(const std::vector<std::unique_ptr<EncoderTape>>& pre, bool train,
                                      BatchNorm::Tape& tape);
  void span_logits(const Matrix& features, const std::vector<bool>& passage_mask, Vector& start,
                   Vector& end) const;

  BatchTape forward(std::span<const EncodedWindow* const> batch, bool train);
  // Backpropagates per-window gradients on f, g^s and g^e. d_features may be empty.
  void backward(const BatchTape& tape, const std::vector<Matrix>& d_features,
                const std::vector<Vector>& d_start, const std::vector<Vector>& d_end);

  ParameterList parameters();
  const EncoderConfig& config() const { return config_; }
  BatchNorm& norm() { return norm_; }
  const BatchNorm& norm() const { return norm_; }
  SpanHead& head() { return head_; }

  Rng& rng() { return rng_; }
  const Rng& rng() const { return rng_; }
  std::uint64_t seed() const { return seed_; }
  std::int64_t step() const { return step_; }
  void set_step(std::int64_t s) { step_ = s; }

 private:
  EncoderConfig config_;
  std::uint64_t seed_;
  Rng rng_;
  std::unique_ptr<FeatureEncoder> encoder_;
  BatchNorm norm_;
  SpanHead head_;
  std::int64_t step_ = 0;
};

// 1/2 (CE(softmax(g^s), a^s) + CE(softmax(g^e), a^e)). Throws when a label sits
// at a masked position.
double span_loss(const Vector& start_logits, const Vector& end_logits, int answer_start, int answer_end,
                 const std::vector<bool>& passage_mask);

// Gradient of span_loss scaled by `scale` (e.g. 1/batch for a mean).
void span_loss_grad(const Vector& start_logits, const Vector& end_logits, int answer_start,
                    int answer_end, double scale, Vector& d_start, Vector& d_end);

}  // namespace rcadapt
