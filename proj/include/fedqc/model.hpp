#pragma once

// Fixed-window causal language model with a frozen base and a trainable
// low-rank adapter on the output projection.
//
//   x      = [E[t-k]; ...; E[t-1]]           (k*d, left-padded with <pad>)
//   hidden = tanh(W_in^T x + b)              (h)
//   logits = (W0 + A B)^T hidden             (V)
//
// All tensors are row-major doubles. Fine-tuning only ever touches A and B.

#include <Eigen/Dense>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fedqc/corpus.hpp"
#include "fedqc/error.hpp"
#include "fedqc/rng.hpp"

namespace fedqc {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct ModelConfig {
  std::size_t vocab_size = 200;
  std::size_t embed_dim = 16;
  std::size_t context_window = 8;
  std::size_t hidden_dim = 64;
  std::size_t adapter_rank = 4;
  std::uint64_t seed = 0;

  void validate() const {
    if (vocab_size < Vocab::kNumReserved + 1)
      throw ConfigError("model", "config", "vocab_size must be >= 5 (model.vocab_size)");
    if (embed_dim < 1 || hidden_dim < 1)
      throw ConfigError("model", "config", "embed_dim and hidden_dim must be >= 1");
    if (context_window < 1) throw ConfigError("model", "config", "context_window must be >= 1 (model.context_window)");
    if (adapter_rank < 1 || adapter_rank > std::min(hidden_dim, vocab_size))
      throw ConfigError("model", "config", "adapter_rank must lie in [1, min(hidden_dim, vocab_size)]");
  }

  std::size_t adapter_dim() const { return hidden_dim * adapter_rank + adapter_rank * vocab_size; }

  bool operator==(const ModelConfig&) const = default;
};

struct ModelParams {
  ModelConfig config;
  Matrix embedding;   // V x d
  Matrix input_proj;  // (k*d) x h
  Vector bias;        // h
  Matrix base_out;    // h x V
  Matrix adapter_a;   // h x r
  Matrix adapter_b;   // r x V
  bool base_frozen = false;

  Matrix effective_output() const { return base_out + adapter_a * adapter_b; }

  bool all_finite() const {
    return embedding.allFinite() && input_proj.allFinite() && bias.allFinite() && base_out.allFinite() &&
           adapter_a.allFinite() && adapter_b.allFinite();
  }

  bool operator==(const ModelParams& o) const {
    return config == o.config && base_frozen == o.base_frozen && embedding == o.embedding &&
           input_proj == o.input_proj && bias == o.bias && base_out == o.base_out && adapter_a == o.adapter_a &&
           adapter_b == o.adapter_b;
  }
};

/// Adapter parameters flattened as A (row-major) followed by B (row-major).
struct AdapterVector {
  Vector values;

  std::size_t size() const { return static_cast<std::size_t>(values.size()); }
  bool operator==(const AdapterVector& o) const { return values == o.values; }
};

inline AdapterVector flatten_adapter(const Matrix& a, const Matrix& b) {
  AdapterVector v;
  v.values.resize(a.size() + b.size());
  std::copy(a.data(), a.data() + a.size(), v.values.data());
  std::copy(b.data(), b.data() + b.size(), v.values.data() + a.size());
  return v;
}

inline AdapterVector flatten_adapter(const ModelParams& p) { return flatten_adapter(p.adapter_a, p.adapter_b); }

inline void unflatten_adapter(const AdapterVector& v, Matrix& a, Matrix& b) {
  if (v.size() != static_cast<std::size_t>(a.size() + b.size()))
    throw DataError("model", "unflatten_adapter",
                    "adapter vector has " + std::to_string(v.size()) + " entries, expected " +
                        std::to_string(a.size() + b.size()));
  std::copy(v.values.data(), v.values.data() + a.size(), a.data());
  std::copy(v.values.data() + a.size(), v.values.data() + v.values.size(), b.data());
}

inline ModelParams with_adapter(ModelParams p, const AdapterVector& v) {
  unflatten_adapter(v, p.adapter_a, p.adapter_b);
  return p;
}

namespace detail {

inline void fill_normal(Matrix& m, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
}

inline void reset_adapter(ModelParams& p) {
  const auto& c = p.config;
  Rng rng = make_stream(c.seed, "init", {1});
  p.adapter_a.resize(static_cast<Eigen::Index>(c.hidden_dim), static_cast<Eigen::Index>(c.adapter_rank));
  fill_normal(p.adapter_a, rng, 1.0 / std::sqrt(static_cast<double>(c.hidden_dim)));
  p.adapter_b = Matrix::Zero(static_cast<Eigen::Index>(c.adapter_rank), static_cast<Eigen::Index>(c.vocab_size));
}

}  // namespace detail

/// Random base weights (std 1/sqrt(fan_in); embeddings are lookups with fan-in
/// 1), zero bias, random A and zero B so the adapter starts as a no-op.
inline ModelParams init_params(const ModelConfig& config) {
  config.validate();
  const auto V = static_cast<Eigen::Index>(config.vocab_size);
  const auto d = static_cast<Eigen::Index>(config.embed_dim);
  const auto k = static_cast<Eigen::Index>(config.context_window);
  const auto h = static_cast<Eigen::Index>(config.hidden_dim);
  ModelParams p;
  p.config = config;
  Rng rng = make_stream(config.seed, "init");
  p.embedding.resize(V, d);
  detail::fill_normal(p.embedding, rng, 1.0);
  p.input_proj.resize(k * d, h);
  detail::fill_normal(p.input_proj, rng, 1.0 / std::sqrt(static_cast<double>(k * d)));
  p.bias = Vector::Zero(h);
  p.base_out.resize(h, V);
  detail::fill_normal(p.base_out, rng, 1.0 / std::sqrt(static_cast<double>(h)));
  detail::reset_adapter(p);
  return p;
}

/// All-zero parameters: every next-token distribution is uniform.
inline ModelParams uniform_params(const ModelConfig& config) {
  ModelParams p = init_params(config);
  p.embedding.setZero();
  p.input_proj.setZero();
  p.base_out.setZero();
  p.adapter_b.setZero();
  return p;
}

namespace detail {

/// Forward pass bound to one parameter snapshot. Caches W0 + A B.
class Forward {
 public:
  explicit Forward(const ModelParams& p) : p_(p), weff_(p.effective_output()) {}

  const ModelParams& params() const { return p_; }
  const Matrix& weff() const { return weff_; }

  void check_tokens(std::span<const TokenId> tokens, std::string_view op) const {
    const auto V = static_cast<TokenId>(p_.config.vocab_size);
    for (TokenId t : tokens)
      if (t < 0 || t >= V)
        throw DataError("model", op,
                        "token id " + std::to_string(t) + " outside vocabulary of size " + std::to_string(V));
  }

  /// Input and hidden activation for predicting tokens[pos] from tokens[0..pos).
  void hidden(std::span<const TokenId> tokens, std::size_t pos, Vector& x, Vector& hid) const {
    const auto d = static_cast<Eigen::Index>(p_.config.embed_dim);
    const std::size_t k = p_.config.context_window;
    x.resize(static_cast<Eigen::Index>(k) * d);
    for (std::size_t j = 0; j < k; ++j) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(pos) - static_cast<std::ptrdiff_t>(k) +
                                 static_cast<std::ptrdiff_t>(j);
      const TokenId t = src < 0 ? Vocab::kPad : tokens[static_cast<std::size_t>(src)];
      x.segment(static_cast<Eigen::Index>(j) * d, d) = p_.embedding.row(t).transpose();
    }
    hid.noalias() = p_.input_proj.transpose() * x;
    hid += p_.bias;
    hid = hid.array().tanh().matrix();
  }

  void logprobs(const Vector& hid, Vector& out) const {
    out.noalias() = weff_.transpose() * hid;
    const double m = out.maxCoeff();
    const double lse = m + std::log((out.array() - m).exp().sum());
    out.array() -= lse;
  }

 private:
  const ModelParams& p_;
  Matrix weff_;
};

/// Gradient of the base tensors (embedding, input projection, bias, W0).
struct BaseGradient {
  Matrix embedding, input_proj, base_out;
  Vector bias;

  explicit BaseGradient(const ModelParams& p)
      : embedding(Matrix::Zero(p.embedding.rows(), p.embedding.cols())),
        input_proj(Matrix::Zero(p.input_proj.rows(), p.input_proj.cols())),
        base_out(Matrix::Zero(p.base_out.rows(), p.base_out.cols())),
        bias(Vector::Zero(p.bias.size())) {}
};

/// Adds `weight` * d(mean NLL over [begin, end))/d(A, B) into (ga, gb) and
/// returns the mean NLL.
inline double accumulate_adapter_gradient(const Forward& fwd, std::span<const TokenId> tokens, std::size_t begin,
                                          std::size_t end, double weight, Matrix& ga, Matrix& gb) {
  const ModelParams& p = fwd.params();
  const double inv_t = 1.0 / static_cast<double>(end - begin);
  Vector x, hid, lp, g, u, bg;
  double loss = 0.0;
  for (std::size_t pos = begin; pos < end; ++pos) {
    fwd.hidden(tokens, pos, x, hid);
    fwd.logprobs(hid, lp);
    const auto target = static_cast<Eigen::Index>(tokens[pos]);
    loss -= lp[target];
    g = lp.array().exp().matrix();
    g[target] -= 1.0;
    g *= weight * inv_t;
    u.noalias() = p.adapter_a.transpose() * hid;  // r
    gb.noalias() += u * g.transpose();
    bg.noalias() = p.adapter_b * g;  // r
    ga.noalias() += hid * bg.transpose();
  }
  return loss * inv_t;
}

inline double accumulate_base_gradient(const Forward& fwd, std::span<const TokenId> tokens, std::size_t begin,
                                       std::size_t end, double weight, BaseGradient& grad) {
  const ModelParams& p = fwd.params();
  const auto d = static_cast<Eigen::Index>(p.config.embed_dim);
  const std::size_t k = p.config.context_window;
  const double inv_t = 1.0 / static_cast<double>(end - begin);
  Vector x, hid, lp, g, dz, dx;
  double loss = 0.0;
  for (std::size_t pos = begin; pos < end; ++pos) {
    fwd.hidden(tokens, pos, x, hid);
    fwd.logprobs(hid, lp);
    const auto target = static_cast<Eigen::Index>(tokens[pos]);
    loss -= lp[target];
    g = lp.array().exp().matrix();
    g[target] -= 1.0;
    g *= weight * inv_t;
    grad.base_out.noalias() += hid * g.transpose();
    dz.noalias() = fwd.weff() * g;
    dz = (dz.array() * (1.0 - hid.array().square())).matrix();
    grad.bias += dz;
    grad.input_proj.noalias() += x * dz.transpose();
    dx.noalias() = p.input_proj * dz;
    for (std::size_t j = 0; j < k; ++j) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(pos) - static_cast<std::ptrdiff_t>(k) +
                                 static_cast<std::ptrdiff_t>(j);
      const TokenId t = src < 0 ? Vocab::kPad : tokens[static_cast<std::size_t>(src)];
      grad.embedding.row(t) += dx.segment(static_cast<Eigen::Index>(j) * d, d).transpose();
    }
  }
  return loss * inv_t;
}

inline void check_span(std::span<const TokenId> tokens, std::size_t begin, std::size_t end, std::string_view op) {
  if (begin >= end) throw DataError("model", op, "scored span is empty");
  if (begin < 1) throw DataError("model", op, "the first scored position needs a nonempty context");
  if (end > tokens.size()) throw DataError("model", op, "scored span exceeds the sequence");
}

}  // namespace detail

/// Log-probabilities of the next token after `context` (last k tokens used).
inline Vector next_token_logprobs(const ModelParams& params, std::span<const TokenId> context) {
  if (context.empty()) throw DataError("model", "next_token_logprobs", "context is empty");
  detail::Forward fwd(params);
  fwd.check_tokens(context, "next_token_logprobs");
  // Position context.size() of a sequence whose prefix is `context`.
  Vector x, hid, lp;
  fwd.hidden(context, context.size(), x, hid);
  fwd.logprobs(hid, lp);
  return lp;
}

struct SequenceLogProb {
  double mean = 0.0;  // average log-probability over the scored span
  std::vector<double> per_token;
};

/// Log-probability of tokens[i] given tokens[0..i) for i in [begin, end).
/// Tokens outside the span only serve as context.
inline SequenceLogProb sequence_logprob(const ModelParams& params, std::span<const TokenId> tokens,
                                        std::size_t begin, std::size_t end) {
  detail::check_span(tokens, begin, end, "sequence_logprob");
  detail::Forward fwd(params);
  fwd.check_tokens(tokens, "sequence_logprob");
  SequenceLogProb out;
  out.per_token.reserve(end - begin);
  Vector x, hid, lp;
  double sum = 0.0;
  for (std::size_t pos = begin; pos < end; ++pos) {
    fwd.hidden(tokens, pos, x, hid);
    fwd.logprobs(hid, lp);
    const double v = lp[static_cast<Eigen::Index>(tokens[pos])];
    out.per_token.push_back(v);
    sum += v;
  }
  out.mean = sum / static_cast<double>(end - begin);
  return out;
}

/// Instruction-tuning loss: mean NLL of the answer tokens and <eos>, with the
/// question as context only.
inline double sample_loss(const ModelParams& params, const Sample& sample) {
  const auto seq = render(sample);
  return -sequence_logprob(params, seq.tokens, seq.answer_begin, seq.tokens.size()).mean;
}

/// Exact gradient of sample_loss with respect to (A, B).
inline AdapterVector adapter_grad(const ModelParams& params, const Sample& sample) {
  const auto seq = render(sample);
  detail::check_span(seq.tokens, seq.answer_begin, seq.tokens.size(), "adapter_grad");
  detail::Forward fwd(params);
  fwd.check_tokens(seq.tokens, "adapter_grad");
  Matrix ga = Matrix::Zero(params.adapter_a.rows(), params.adapter_a.cols());
  Matrix gb = Matrix::Zero(params.adapter_b.rows(), params.adapter_b.cols());
  detail::accumulate_adapter_gradient(fwd, seq.tokens, seq.answer_begin, seq.tokens.size(), 1.0, ga, gb);
  return flatten_adapter(ga, gb);
}

namespace detail {

/// Epoch-wise sampling without replacement; the last batch of an epoch may be
/// short.
class BatchSchedule {
 public:
  BatchSchedule(std::size_t n, std::size_t batch_size, Rng rng)
      : order_(n), batch_(std::min(batch_size, n)), rng_(std::move(rng)) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    cursor_ = n;
  }

  std::span<const std::size_t> next() {
    if (cursor_ >= order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
    }
    const std::size_t len = std::min(batch_, order_.size() - cursor_);
    std::span<const std::size_t> out(order_.data() + cursor_, len);
    cursor_ += len;
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_;
  Rng rng_;
  std::size_t cursor_ = 0;
};

}  // namespace detail

/// `steps` minibatch gradient-descent updates of the adapter on the batch-mean
/// instruction loss. Batches come from the "batch" stream seeded by `seed`.
inline ModelParams local_train(const ModelParams& params, std::span<const Sample> data, std::size_t steps,
                               std::size_t batch_size, double lr, std::uint64_t seed) {
  if (data.empty()) throw DataError("model", "local_train", "training data is empty");
  if (steps < 1 || batch_size < 1) throw ConfigError("model", "local_train", "steps and batch_size must be >= 1");

  std::vector<RenderedSequence> seqs;
  seqs.reserve(data.size());
  for (const auto& s : data) seqs.push_back(render(s));

  ModelParams out = params;
  detail::BatchSchedule schedule(data.size(), batch_size, make_stream(seed, "batch"));
  Matrix ga(out.adapter_a.rows(), out.adapter_a.cols());
  Matrix gb(out.adapter_b.rows(), out.adapter_b.cols());
  for (std::size_t step = 0; step < steps; ++step) {
    const auto batch = schedule.next();
    const double w = 1.0 / static_cast<double>(batch.size());
    ga.setZero();
    gb.setZero();
    double loss = 0.0;
    {
      detail::Forward fwd(out);
      for (std::size_t i : batch) {
        const auto& seq = seqs[i];
        fwd.check_tokens(seq.tokens, "local_train");
        loss += w * detail::accumulate_adapter_gradient(fwd, seq.tokens, seq.answer_begin, seq.tokens.size(), w,
                                                        ga, gb);
      }
    }
    if (!std::isfinite(loss) || !ga.allFinite() || !gb.allFinite())
      throw NumericalError("model", "local_train", "non-finite loss at step " + std::to_string(step), step);
    out.adapter_a -= lr * ga;
    out.adapter_b -= lr * gb;
  }
  return out;
}

struct PretrainOptions {
  std::size_t epochs = 8;
  double lr = 0.5;
  std::size_t batch_size = 16;
};

/// Trains every base tensor on the full-sequence language-modeling loss over
/// a clean public corpus, then freezes the base and resets the adapter.
inline ModelParams pretrain_base(const ModelConfig& config, std::span<const Sample> corpus,
                                 const PretrainOptions& options, std::uint64_t seed) {
  if (corpus.empty()) throw DataError("model", "pretrain_base", "pretraining corpus is empty");
  ModelParams p = init_params(config);
  std::vector<RenderedSequence> seqs;
  seqs.reserve(corpus.size());
  for (const auto& s : corpus) seqs.push_back(render(s));

  detail::BatchSchedule schedule(corpus.size(), options.batch_size, make_stream(seed, "pretrain"));
  const std::size_t per_epoch = (corpus.size() + std::min(options.batch_size, corpus.size()) - 1) /
                                std::min(options.batch_size, corpus.size());
  const std::size_t steps = options.epochs * per_epoch;
  for (std::size_t step = 0; step < steps; ++step) {
    const auto batch = schedule.next();
    const double w = 1.0 / static_cast<double>(batch.size());
    detail::BaseGradient grad(p);
    double loss = 0.0;
    {
      detail::Forward fwd(p);
      for (std::size_t i : batch) {
        const auto& seq = seqs[i];
        fwd.check_tokens(seq.tokens, "pretrain_base");
        loss += w * detail::accumulate_base_gradient(fwd, seq.tokens, 1, seq.tokens.size(), w, grad);
      }
    }
    if (!std::isfinite(loss))
      throw NumericalError("model", "pretrain_base", "non-finite loss at step " + std::to_string(step), step);
    p.embedding -= options.lr * grad.embedding;
    p.input_proj -= options.lr * grad.input_proj;
    p.bias -= options.lr * grad.bias;
    p.base_out -= options.lr * grad.base_out;
  }
  p.base_frozen = true;
  detail::reset_adapter(p);
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoint file
//
//   bytes 0..7    magic "FEDQCKPT"
//   u32           format version (1)
//   u64 x 6       vocab_size, embed_dim, context_window, hidden_dim, adapter_rank, seed
//   u8            base_frozen
//   f64 ...       E, W_in, b, W0, A, B in that order, each row-major
//
// All integers and floats are little-endian.

inline constexpr char kCheckpointMagic[8] = {'F', 'E', 'D', 'Q', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put_le(std::ostream& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
  U u = std::bit_cast<U>(value);
  char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((u >> (8 * i)) & 0xff);
  out.write(buf, sizeof(U));
}

template <typename T>
T get_le(std::istream& in) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
  unsigned char buf[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(U)))
    throw DataError("model", "read_checkpoint", "truncated checkpoint");
  U u = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) u |= static_cast<U>(static_cast<U>(buf[i]) << (8 * i));
  return std::bit_cast<T>(u);
}

template <typename M>
void put_tensor(std::ostream& out, const M& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) put_le<double>(out, m.data()[i]);
}

template <typename M>
void get_tensor(std::istream& in, M& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = get_le<double>(in);
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const ModelParams& p) {
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  const auto& c = p.config;
  for (std::uint64_t v : {std::uint64_t{c.vocab_size}, std::uint64_t{c.embed_dim}, std::uint64_t{c.context_window},
                          std::uint64_t{c.hidden_dim}, std::uint64_t{c.adapter_rank}, c.seed})
    detail::put_le<std::uint64_t>(out, v);
  detail::put_le<std::uint8_t>(out, p.base_frozen ? 1 : 0);
  detail::put_tensor(out, p.embedding);
  detail::put_tensor(out, p.input_proj);
  detail::put_tensor(out, p.bias);
  detail::put_tensor(out, p.base_out);
  detail::put_tensor(out, p.adapter_a);
  detail::put_tensor(out, p.adapter_b);
}

inline ModelParams read_checkpoint(std::istream& in) {
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw DataError("model", "read_checkpoint", "not a checkpoint file");
  const auto version = detail::get_le<std::uint32_t>(in);
  if (version != kCheckpointVersion)
    throw DataError("model", "read_checkpoint", "unsupported checkpoint version " + std::to_string(version));
  ModelConfig c;
  c.vocab_size = detail::get_le<std::uint64_t>(in);
  c.embed_dim = detail::get_le<std::uint64_t>(in);
  c.context_window = detail::get_le<std::uint64_t>(in);
  c.hidden_dim = detail::get_le<std::uint64_t>(in);
  c.adapter_rank = detail::get_le<std::uint64_t>(in);
  c.seed = detail::get_le<std::uint64_t>(in);
  c.validate();
  ModelParams p = init_params(c);
  p.base_frozen = detail::get_le<std::uint8_t>(in) != 0;
  detail::get_tensor(in, p.embedding);
  detail::get_tensor(in, p.input_proj);
  detail::get_tensor(in, p.bias);
  detail::get_tensor(in, p.base_out);
  detail::get_tensor(in, p.adapter_a);
  detail::get_tensor(in, p.adapter_b);
  if (!p.all_finite()) throw DataError("model", "read_checkpoint", "checkpoint contains non-finite values");
  return p;
}

}  // namespace fedqc
