#include "rcadapt/encoder.hpp"

#include <cmath>
#include <stdexcept>

#include "rcadapt/errors.hpp"

namespace rcadapt {

void EncoderConfig::validate() const {
  if (n_layers < 0) throw ConfigError("n_layers must be non-negative");
  if (hidden_dim < 1 || n_heads < 1 || hidden_dim % n_heads != 0) {
    throw ConfigError("hidden_dim must be a positive multiple of n_heads");
  }
  if (max_len < 2) throw ConfigError("max_len must be >= 2");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("dropout_rate must lie in [0, 1)");
  if (vocab_size < 1) throw ConfigError("vocab_size must be positive");
  if (init_std < 0.0) throw ConfigError("init_std must be non-negative");
}

double EncoderConfig::init_scale(int fan_in) const {
  return init_std > 0.0 ? init_std : 1.0 / std::sqrt(static_cast<double>(fan_in));
}

namespace {

struct NormCache {
  Matrix xhat;
  Vector inv_std;
};

// Row-wise layer normalization.
Matrix layer_norm(const Matrix& x, const Parameter& gamma, const Parameter& beta, NormCache& cache) {
  const auto n = static_cast<double>(x.cols());
  const Vector mean = x.rowwise().mean();
  Matrix centered = x.colwise() - mean;
  const Vector var = centered.array().square().rowwise().sum() / n;
  cache.inv_std = (var.array() + kLayerNormEps).rsqrt();
  cache.xhat = centered.array().colwise() * cache.inv_std.array();
  Matrix y = cache.xhat.array().rowwise() * gamma.value.row(0).array();
  y.rowwise() += beta.value.row(0);
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const NormCache& cache, Parameter& gamma, Parameter& beta) {
  const auto n = static_cast<double>(dy.cols());
  gamma.grad.row(0) += dy.cwiseProduct(cache.xhat).colwise().sum();
  beta.grad.row(0) += dy.colwise().sum();
  const Matrix dxhat = dy.array().rowwise() * gamma.value.row(0).array();
  const Vector sum_d = dxhat.rowwise().sum();
  const Vector sum_dx = dxhat.cwiseProduct(cache.xhat).rowwise().sum();
  Matrix dx = (dxhat * n).colwise() - sum_d;
  dx -= (cache.xhat.array().colwise() * sum_dx.array()).matrix();
  return dx.array().colwise() * (cache.inv_std.array() / n);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

Matrix gelu(const Matrix& x) {
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + 0.044715 * v * v * v))); });
}

Matrix gelu_grad(const Matrix& x) {
  return x.unaryExpr([](double v) {
    const double t = std::tanh(kGeluC * (v + 0.044715 * v * v * v));
    return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
  });
}

Matrix affine(const Matrix& x, const Parameter& w, const Parameter& b) {
  Matrix y = x * w.value;
  y.rowwise() += b.value.row(0);
  return y;
}

// Accumulates weight/bias gradients of y = x w + b and returns dL/dx.
Matrix affine_backward(const Matrix& x, const Matrix& dy, Parameter& w, Parameter& b) {
  w.grad.noalias() += x.transpose() * dy;
  b.grad.row(0) += dy.colwise().sum();
  return dy * w.value.transpose();
}

Parameter weight(const std::string& name, int rows, int cols, double stddev, Rng& rng) {
  Parameter p(name, rows, cols);
  truncated_normal_(p.value, stddev, rng);
  return p;
}

Parameter ones(const std::string& name, int cols) {
  Parameter p(name, 1, cols);
  p.value.setOnes();
  return p;
}

}  // namespace

struct ToyTransformer::Tape final : EncoderTape {
  struct LayerTape {
    Matrix input;
    Matrix q, k, v;
    std::vector<Matrix> probs;
    Matrix context;
    Matrix attn_mask;
    NormCache ln1;
    Matrix mid;  // LN1 output
    Matrix hidden_pre;
    Matrix hidden;
    Matrix ffn_mask;
    NormCache ln2;
  };
  std::vector<int> ids;
  std::vector<int> segments;
  NormCache embedding_ln;
  Matrix embedding_mask;
  std::vector<LayerTape> layers;
};

ToyTransformer::ToyTransformer(const EncoderConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const int d = config.hidden_dim;
  const int ff = config.ffn_width();
  const double sd = config.init_scale(d);
  const double sd_ff = config.init_scale(ff);
  token_embedding_ = weight("embedding.token", config.vocab_size, d, sd, rng);
  position_embedding_ = weight("embedding.position", config.max_len, d, sd, rng);
  segment_embedding_ = weight("embedding.segment", 2, d, sd, rng);
  embedding_ln_gamma_ = ones("embedding.ln.gamma", d);
  embedding_ln_beta_ = Parameter("embedding.ln.beta", 1, d);
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    Layer layer{weight(p + "attn.wq", d, d, sd, rng), Parameter(p + "attn.bq", 1, d),
                weight(p + "attn.wk", d, d, sd, rng), Parameter(p + "attn.bk", 1, d),
                weight(p + "attn.wv", d, d, sd, rng), Parameter(p + "attn.bv", 1, d),
                weight(p + "attn.wo", d, d, sd, rng), Parameter(p + "attn.bo", 1, d),
                ones(p + "ln1.gamma", d),         Parameter(p + "ln1.beta", 1, d),
                weight(p + "ffn.w1", d, ff, sd, rng), Parameter(p + "ffn.b1", 1, ff),
                weight(p + "ffn.w2", ff, d, sd_ff, rng), Parameter(p + "ffn.b2", 1, d),
                ones(p + "ln2.gamma", d),         Parameter(p + "ln2.beta", 1, d)};
    layers_.push_back(std::move(layer));
  }
}

ParameterList ToyTransformer::parameters() {
  ParameterList out{&token_embedding_, &position_embedding_, &segment_embedding_, &embedding_ln_gamma_,
                    &embedding_ln_beta_};
  for (auto& l : layers_) {
    for (auto* p : {&l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo, &l.ln1_gamma, &l.ln1_beta,
                    &l.w1, &l.b1, &l.w2, &l.b2, &l.ln2_gamma, &l.ln2_beta}) {
      out.push_back(p);
    }
  }
  return out;
}

std::unique_ptr<EncoderTape> ToyTransformer::forward(const EncodedWindow& window, bool train, Rng& rng) const {
  const int m = config_.max_len;
  const int d = config_.hidden_dim;
  if (window.length() != m) {
    throw ShapeError("window length " + std::to_string(window.length()) + " != max_len " + std::to_string(m));
  }
  auto tape = std::make_unique<Tape>();
  const int L = window.valid_length();
  tape->valid_length = L;
  tape->ids.assign(window.token_ids.begin(), window.token_ids.begin() + L);
  tape->segments.resize(static_cast<std::size_t>(L));

  Matrix x(L, d);
  for (int i = 0; i < L; ++i) {
    const int id = tape->ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= config_.vocab_size) throw ShapeError("token id out of vocabulary range");
    const int seg = window.passage_mask[static_cast<std::size_t>(i)] ? 1 : 0;
    tape->segments[static_cast<std::size_t>(i)] = seg;
    x.row(i) = token_embedding_.value.row(id) + position_embedding_.value.row(i) +
               segment_embedding_.value.row(seg);
  }
  x = layer_norm(x, embedding_ln_gamma_, embedding_ln_beta_, tape->embedding_ln);
  tape->embedding_mask = dropout_mask(L, d, config_.dropout_rate, train, rng);
  x = apply_mask(x, tape->embedding_mask);

  const int heads = config_.n_heads;
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (const auto& layer : layers_) {
    Tape::LayerTape lt;
    lt.input = x;
    lt.q = affine(x, layer.wq, layer.bq);
    lt.k = affine(x, layer.wk, layer.bk);
    lt.v = affine(x, layer.wv, layer.bv);
    lt.context.resize(L, d);
    for (int h = 0; h < heads; ++h) {
      Matrix scores = lt.q.middleCols(h * dh, dh) * lt.k.middleCols(h * dh, dh).transpose() * scale;
      const Vector row_max = scores.rowwise().maxCoeff();
      scores = (scores.colwise() - row_max).array().exp();
      const Vector row_sum = scores.rowwise().sum();
      scores = scores.array().colwise() / row_sum.array();
      lt.context.middleCols(h * dh, dh) = scores * lt.v.middleCols(h * dh, dh);
      lt.probs.push_back(std::move(scores));
    }
    lt.attn_mask = dropout_mask(L, d, config_.dropout_rate, train, rng);
    const Matrix attn_out = apply_mask(affine(lt.context, layer.wo, layer.bo), lt.attn_mask);
    lt.mid = layer_norm(x + attn_out, layer.ln1_gamma, layer.ln1_beta, lt.ln1);
    lt.hidden_pre = affine(lt.mid, layer.w1, layer.b1);
    lt.hidden = gelu(lt.hidden_pre);
    lt.ffn_mask = dropout_mask(L, d, config_.dropout_rate, train, rng);
    const Matrix ffn_out = apply_mask(affine(lt.hidden, layer.w2, layer.b2), lt.ffn_mask);
    x = layer_norm(lt.mid + ffn_out, layer.ln2_gamma, layer.ln2_beta, lt.ln2);
    tape->layers.push_back(std::move(lt));
  }
  tape->features = Matrix::Zero(m, d);
  tape->features.topRows(L) = x;
  return tape;
}

void ToyTransformer::backward(const EncoderTape& base, const Matrix& d_features) {
  const auto& tape = dynamic_cast<const Tape&>(base);
  const int L = tape.valid_length;
  const int d = config_.hidden_dim;
  const int heads = config_.n_heads;
  const int dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix dx = d_features.topRows(L);
  for (int l = config_.n_layers - 1; l >= 0; --l) {
    auto& layer = layers_[static_cast<std::size_t>(l)];
    const auto& lt = tape.layers[static_cast<std::size_t>(l)];
    const Matrix d_sum2 = layer_norm_backward(dx, lt.ln2, layer.ln2_gamma, layer.ln2_beta);
    const Matrix d_ffn = apply_mask(d_sum2, lt.ffn_mask);
    const Matrix d_hidden = affine_backward(lt.hidden, d_ffn, layer.w2, layer.b2);
    const Matrix d_hidden_pre = d_hidden.cwiseProduct(gelu_grad(lt.hidden_pre));
    Matrix d_mid = d_sum2 + affine_backward(lt.mid, d_hidden_pre, layer.w1, layer.b1);
    const Matrix d_sum1 = layer_norm_backward(d_mid, lt.ln1, layer.ln1_gamma, layer.ln1_beta);
    const Matrix d_attn = apply_mask(d_sum1, lt.attn_mask);
    const Matrix d_context = affine_backward(lt.context, d_attn, layer.wo, layer.bo);
    Matrix dq(L, d), dk(L, d), dv(L, d);
    for (int h = 0; h < heads; ++h) {
      const Matrix& probs = lt.probs[static_cast<std::size_t>(h)];
      const auto dc = d_context.middleCols(h * dh, dh);
      const Matrix d_probs = dc * lt.v.middleCols(h * dh, dh).transpose();
      dv.middleCols(h * dh, dh) = probs.transpose() * dc;
      const Vector row_dot = d_probs.cwiseProduct(probs).rowwise().sum();
      const Matrix d_scores = probs.cwiseProduct((d_probs.colwise() - row_dot)) * scale;
      dq.middleCols(h * dh, dh) = d_scores * lt.k.middleCols(h * dh, dh);
      dk.middleCols(h * dh, dh) = d_scores.transpose() * lt.q.middleCols(h * dh, dh);
    }
    dx = d_sum1;
    dx += affine_backward(lt.input, dq, layer.wq, layer.bq);
    dx += affine_backward(lt.input, dk, layer.wk, layer.bk);
    dx += affine_backward(lt.input, dv, layer.wv, layer.bv);
  }
  const Matrix d_emb_out = apply_mask(dx, tape.embedding_mask);
  const Matrix d_emb = layer_norm_backward(d_emb_out, tape.embedding_ln, embedding_ln_gamma_, embedding_ln_beta_);
  for (int i = 0; i < L; ++i) {
    token_embedding_.grad.row(tape.ids[static_cast<std::size_t>(i)]) += d_emb.row(i);
    position_embedding_.grad.row(i) += d_emb.row(i);
    segment_embedding_.grad.row(tape.segments[static_cast<std::size_t>(i)]) += d_emb.row(i);
  }
}

BatchNorm::BatchNorm(int channels)
    : gamma("norm.gamma", 1, channels),
      beta("norm.beta", 1, channels),
      running_mean(Matrix::Zero(1, channels)),
      running_var(Matrix::Ones(1, channels)) {
  gamma.value.setOnes();
}

std::vector<Matrix> BatchNorm::forward(const std::vector<const Matrix*>& inputs,
                                       const std::vector<int>& lengths, bool train, Tape& tape) {
  if (train && inputs.size() < 2) {
    throw std::invalid_argument("batch normalization in train mode needs a batch of at least 2");
  }
  const auto channels = gamma.value.cols();
  int total = 0;
  for (int n : lengths) total += n;
  Matrix stacked(total, channels);
  int row = 0;
  for (std::size_t b = 0; b < inputs.size(); ++b) {
    stacked.middleRows(row, lengths[b]) = inputs[b]->topRows(lengths[b]);
    row += lengths[b];
  }
  tape.lengths = lengths;
  tape.train = train;
  Matrix mean;
  Matrix var;
  if (train) {
    mean = stacked.colwise().mean();
    var = (stacked.rowwise() - mean.row(0)).array().square().colwise().mean();
    const double unbiased = total > 1 ? static_cast<double>(total) / (total - 1) : 1.0;
    running_mean = (1.0 - kBatchNormMomentum) * running_mean + kBatchNormMomentum * mean;
    running_var = (1.0 - kBatchNormMomentum) * running_var + kBatchNormMomentum * unbiased * var;
  } else {
    mean = running_mean;
    var = running_var;
  }
  tape.inv_std = (var.row(0).array() + kBatchNormEps).rsqrt().transpose();
  tape.xhat = (stacked.rowwise() - mean.row(0)).array().rowwise() * tape.inv_std.transpose().array();

  std::vector<Matrix> out;
  out.reserve(inputs.size());
  row = 0;
  for (std::size_t b = 0; b < inputs.size(); ++b) {
    Matrix y = Matrix::Zero(inputs[b]->rows(), channels);
    y.topRows(lengths[b]) =
        (tape.xhat.middleRows(row, lengths[b]).array().rowwise() * gamma.value.row(0).array()).rowwise() +
        beta.value.row(0).array();
    row += lengths[b];
    out.push_back(std::move(y));
  }
  return out;
}

std::vector<Matrix> BatchNorm::backward(const std::vector<Matrix>& d_outputs, const Tape& tape) {
  const auto channels = gamma.value.cols();
  const auto total = tape.xhat.rows();
  Matrix dy(total, channels);
  Eigen::Index row = 0;
  for (std::size_t b = 0; b < d_outputs.size(); ++b) {
    dy.middleRows(row, tape.lengths[b]) = d_outputs[b].topRows(tape.lengths[b]);
    row += tape.lengths[b];
  }
  gamma.grad.row(0) += dy.cwiseProduct(tape.xhat).colwise().sum();
  beta.grad.row(0) += dy.colwise().sum();
  const Matrix dxhat = dy.array().rowwise() * gamma.value.row(0).array();
  Matrix dx;
  if (tape.train) {
    const auto n = static_cast<double>(total);
    const Matrix sum_d = dxhat.colwise().sum();
    const Matrix sum_dx = dxhat.cwiseProduct(tape.xhat).colwise().sum();
    dx = (dxhat * n).rowwise() - sum_d.row(0);
    dx -= (tape.xhat.array().rowwise() * sum_dx.row(0).array()).matrix();
    dx = dx.array().rowwise() * (tape.inv_std.transpose().array() / n);
  } else {
    dx = dxhat.array().rowwise() * tape.inv_std.transpose().array();
  }
  std::vector<Matrix> out;
  row = 0;
  for (std::size_t b = 0; b < d_outputs.size(); ++b) {
    Matrix g = Matrix::Zero(d_outputs[b].rows(), channels);
    g.topRows(tape.lengths[b]) = dx.middleRows(row, tape.lengths[b]);
    row += tape.lengths[b];
    out.push_back(std::move(g));
  }
  return out;
}

SpanHead::SpanHead(int hidden_dim, double stddev, Rng& rng)
    : weight("head.weight", hidden_dim, 2), bias("head.bias", 1, 2) {
  truncated_normal_(weight.value, stddev, rng);
}

void SpanHead::forward(const Matrix& features, const std::vector<bool>& passage_mask, Vector& start,
                       Vector& end) const {
  Matrix logits = features * weight.value;
  logits.rowwise() += bias.value.row(0);
  start = logits.col(0);
  end = logits.col(1);
  for (Eigen::Index i = 0; i < start.size(); ++i) {
    if (!passage_mask[static_cast<std::size_t>(i)]) {
      start[i] += kMaskValue;
      end[i] += kMaskValue;
    }
  }
}

Matrix SpanHead::backward(const Matrix& features, const Vector& d_start, const Vector& d_end) {
  Matrix d_logits(d_start.size(), 2);
  d_logits.col(0) = d_start;
  d_logits.col(1) = d_end;
  weight.grad.noalias() += features.transpose() * d_logits;
  bias.grad.row(0) += d_logits.colwise().sum();
  return d_logits * weight.value.transpose();
}

SpanModel::SpanModel(const EncoderConfig& config, std::uint64_t seed) : SpanModel(config, seed, nullptr) {}

SpanModel::SpanModel(const EncoderConfig& config, std::uint64_t seed, std::unique_ptr<FeatureEncoder> encoder)
    : config_(config),
      seed_(seed),
      rng_(seed),
      encoder_(std::move(encoder)),
      norm_(config.hidden_dim),
      head_(config.hidden_dim, config.init_scale(config.hidden_dim), rng_) {
  config_.validate();
  if (!encoder_) {
    if (config_.mode == EncoderMode::external_pretrained) {
      throw ConfigError("external_pretrained mode requires an encoder implementation to be supplied");
    }
    encoder_ = std::make_unique<ToyTransformer>(config_, rng_);
  }
}

ParameterList SpanModel::parameters() {
  auto out = encoder_->parameters();
  if (config_.batch_norm) {
    for (auto* p : norm_.parameters()) out.push_back(p);
  }
  for (auto* p : head_.parameters()) out.push_back(p);
  return out;
}

std::vector<std::unique_ptr<EncoderTape>> SpanModel::encode(std::span<const EncodedWindow* const> batch,
                                                            bool train) {
  std::vector<std::unique_ptr<EncoderTape>> out;
  out.reserve(batch.size());
  for (const auto* w : batch) out.push_back(encoder_->forward(*w, train, rng_));
  return out;
}

std::vector<Matrix> SpanModel::batch_normalize(const std::vector<std::unique_ptr<EncoderTape>>& pre,
                                               bool train, BatchNorm::Tape& tape) {
  if (!config_.batch_norm) {
    std::vector<Matrix> out;
    for (const auto& t : pre) out.push_back(t->features);
    return out;
  }
  std::vector<const Matrix*> inputs;
  std::vector<int> lengths;
  for (const auto& t : pre) {
    inputs.push_back(&t->features);
    lengths.push_back(t->valid_length);
  }
  return norm_.forward(inputs, lengths, train, tape);
}

void SpanModel::span_logits(const Matrix& features, const std::vector<bool>& passage_mask, Vector& start,
                            Vector& end) const {
  head_.forward(features, passage_mask, start, end);
}

BatchTape SpanModel::forward(std::span<const EncodedWindow* const> batch, bool train) {
  BatchTape tape;
  tape.encoder = encode(batch, train);
  auto features = batch_normalize(tape.encoder, train, tape.norm);
  tape.outputs.resize(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    auto& out = tape.outputs[b];
    out.features = std::move(features[b]);
    span_logits(out.features, batch[b]->passage_mask, out.start_logits, out.end_logits);
  }
  return tape;
}

void SpanModel::backward(const BatchTape& tape, const std::vector<Matrix>& d_features,
                         const std::vector<Vector>& d_start, const std::vector<Vector>& d_end) {
  const auto n = tape.outputs.size();
  std::vector<Matrix> d_f(n);
  for (std::size_t b = 0; b < n; ++b) {
    const auto& out = tape.outputs[b];
    d_f[b] = head_.backward(out.features, d_start[b], d_end[b]);
    if (!d_features.empty()) d_f[b] += d_features[b];
    // Padding rows of f are constant zero.
    const int L = tape.encoder[b]->valid_length;
    d_f[b].bottomRows(d_f[b].rows() - L).setZero();
  }
  if (config_.batch_norm) d_f = norm_.backward(d_f, tape.norm);
  for (std::size_t b = 0; b < n; ++b) encoder_->backward(*tape.encoder[b], d_f[b]);
}

double span_loss(const Vector& start_logits, const Vector& end_logits, int answer_start, int answer_end,
                 const std::vector<bool>& passage_mask) {
  const auto m = static_cast<int>(start_logits.size());
  for (int label : {answer_start, answer_end}) {
    if (label < 0 || label >= m || !passage_mask[static_cast<std::size_t>(label)]) {
      throw std::invalid_argument("span label at a masked position");
    }
  }
  return -0.5 * (log_softmax(start_logits)[answer_start] + log_softmax(end_logits)[answer_end]);
}

void span_loss_grad(const Vector& start_logits, const Vector& end_logits, int answer_start, int answer_end,
                    double scale, Vector& d_start, Vector& d_end) {
  d_start = softmax(start_logits) * (0.5 * scale);
  d_start[answer_start] -= 0.5 * scale;
  d_end = softmax(end_logits) * (0.5 * scale);
  d_end[answer_end] -= 0.5 * scale;
}

}  // namespace rcadapt
