#pragma once

// Per-sample quality scores. Every method reports the untransformed `raw`
// value of its formula and an orientation-normalized `quality` (higher is
// better); selection only ever looks at `quality`.

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <sstream>
#include <unordered_map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedqc/corpus.hpp"
#include "fedqc/error.hpp"
#include "fedqc/model.hpp"
#include "fedqc/rng.hpp"

namespace fedqc {

enum class ScoringMethod : std::uint8_t { kPpl, kConProb, kInfluence, kIcl };

inline std::string_view to_string(ScoringMethod m) {
  switch (m) {
    case ScoringMethod::kPpl: return "ppl";
    case ScoringMethod::kConProb: return "conprob";
    case ScoringMethod::kInfluence: return "influence";
    case ScoringMethod::kIcl: return "icl";
  }
  return "unknown";
}

inline std::optional<ScoringMethod> parse_scoring_method(std::string_view s) {
  for (auto m : {ScoringMethod::kPpl, ScoringMethod::kConProb, ScoringMethod::kInfluence, ScoringMethod::kIcl})
    if (to_string(m) == s) return m;
  return std::nullopt;
}

enum class InfluenceBackend : std::uint8_t { kExact, kApproximate };

inline std::string_view to_string(InfluenceBackend b) {
  return b == InfluenceBackend::kExact ? "exact" : "approximate";
}

struct InfluenceOptions {
  /// Damping added to the Gauss-Newton matrix. Unset: 0.1 * trace(H) / dim.
  std::optional<double> damping;
  InfluenceBackend backend = InfluenceBackend::kExact;
};

struct ScoringConfig {
  ScoringMethod method = ScoringMethod::kConProb;
  InfluenceOptions influence;
  std::size_t influence_warmup_steps = 50;
  std::size_t influence_warmup_batch = 16;
  double influence_warmup_lr = 0.5;
  std::size_t icl_demonstrations = 1;
  std::size_t icl_max_prompt = 512;

  void validate() const {
    if (influence.damping && !(*influence.damping > 0.0))
      throw ConfigError("scoring", "config", "influence damping must be > 0 (scoring.influence_damping)");
    if (icl_demonstrations < 1)
      throw ConfigError("scoring", "config", "ICL needs at least one demonstration (scoring.icl_demonstrations)");
  }
};

struct ScoreRecord {
  SampleId sample_id = 0;
  ScoringMethod method = ScoringMethod::kPpl;
  double raw = 0.0;
  double quality = 0.0;

  bool operator==(const ScoreRecord&) const = default;
};

/// Orientation transforms, raw -> quality:
///   ppl        -ln(raw)   lower perplexity is better (decreasing)
///   conprob    1 - raw    a smaller Prob(A|Q)/Prob(A) ratio means the question
///                         explains the answer (decreasing)
///   influence  raw        alignment with validation gradients (increasing)
///   icl        -raw       raw is an answer loss (decreasing)
inline double quality_from_raw(ScoringMethod method, double raw) {
  switch (method) {
    case ScoringMethod::kPpl: return -std::log(raw);
    case ScoringMethod::kConProb: return 1.0 - raw;
    case ScoringMethod::kInfluence: return raw;
    case ScoringMethod::kIcl: return -raw;
  }
  return raw;
}

inline bool quality_increases_with_raw(ScoringMethod method) { return method == ScoringMethod::kInfluence; }

namespace detail {

inline ScoreRecord make_record(const Sample& s, ScoringMethod m, double raw, std::string_view op) {
  if (!std::isfinite(raw))
    throw NumericalError("scoring", op, "non-finite score for sample " + std::to_string(s.id));
  return {s.id, m, raw, quality_from_raw(m, raw)};
}

}  // namespace detail

/// Perplexity of the full rendered sequence; every position after <q> is scored.
inline ScoreRecord score_ppl(const ModelParams& model, const Sample& sample) {
  const auto seq = render(sample);
  const double mean = sequence_logprob(model, seq.tokens, 1, seq.tokens.size()).mean;
  return detail::make_record(sample, ScoringMethod::kPpl, std::exp(-mean), "score_ppl");
}

inline constexpr double kConProbEpsilon = 1e-8;

/// Prob(A|Q) / Prob(A), each the mean answer log-probability. The
/// unconditional rendering replaces the question tokens with <pad>.
inline ScoreRecord score_conprob(const ModelParams& model, const Sample& sample) {
  const auto cond = render(sample);
  const std::vector<TokenId> blank(sample.question.size(), Vocab::kPad);
  const auto uncond = render(blank, sample.answer);
  const double p_cond = sequence_logprob(model, cond.tokens, cond.answer_begin, cond.tokens.size()).mean;
  const double p_uncond = sequence_logprob(model, uncond.tokens, uncond.answer_begin, uncond.tokens.size()).mean;
  if (std::abs(p_uncond) < kConProbEpsilon)
    throw NumericalError("scoring", "score_conprob",
                         "unconditional answer probability is degenerate for sample " + std::to_string(sample.id));
  return detail::make_record(sample, ScoringMethod::kConProb, p_cond / p_uncond, "score_conprob");
}

/// Answer loss given demonstrations followed by the sample's question.
inline ScoreRecord score_icl(const ModelParams& model, const Sample& sample, std::span<const Sample> demonstrations,
                             std::size_t max_prompt = 512) {
  if (demonstrations.empty()) throw DataError("scoring", "score_icl", "at least one demonstration is required");
  std::vector<TokenId> prompt;
  for (const auto& d : demonstrations) {
    if (d.id == sample.id) throw DataError("scoring", "score_icl", "a demonstration equals the scored sample");
    const auto r = render(d);
    prompt.insert(prompt.end(), r.tokens.begin(), r.tokens.end());
  }
  const auto target = render(sample);
  const std::size_t answer_begin = prompt.size() + target.answer_begin;
  prompt.insert(prompt.end(), target.tokens.begin(), target.tokens.end());
  if (prompt.size() > max_prompt)
    throw DataError("scoring", "score_icl",
                    "prompt of " + std::to_string(prompt.size()) + " tokens exceeds the maximum of " +
                        std::to_string(max_prompt));
  const double loss = -sequence_logprob(model, prompt, answer_begin, prompt.size()).mean;
  return detail::make_record(sample, ScoringMethod::kIcl, loss, "score_icl");
}

/// Deterministic demonstration draw ("icl" stream indexed by sample id) from
/// a pool, never including the sample itself.
inline std::vector<Sample> draw_demonstrations(std::span<const Sample> pool, const Sample& sample, std::size_t count,
                                               std::uint64_t seed) {
  std::vector<std::size_t> eligible;
  for (std::size_t i = 0; i < pool.size(); ++i)
    if (pool[i].id != sample.id) eligible.push_back(i);
  if (eligible.size() < count)
    throw DataError("scoring", "draw_demonstrations",
                    "demonstration pool has " + std::to_string(eligible.size()) + " eligible samples, need " +
                        std::to_string(count));
  Rng rng = make_stream(seed, "icl", {static_cast<std::uint64_t>(sample.id)});
  std::shuffle(eligible.begin(), eligible.end(), rng);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(pool[eligible[i]]);
  return out;
}

// ---------------------------------------------------------------------------
// Influence

/// Per-sample adapter gradients stacked as rows.
inline Matrix gradient_matrix(const ModelParams& model, std::span<const Sample> samples) {
  Matrix g(static_cast<Eigen::Index>(samples.size()), static_cast<Eigen::Index>(model.config.adapter_dim()));
  for (std::size_t i = 0; i < samples.size(); ++i)
    g.row(static_cast<Eigen::Index>(i)) = adapter_grad(model, samples[i]).values.transpose();
  return g;
}

struct InfluenceSystem {
  Matrix train_grads;   // n x D
  Vector val_grad_sum;  // D
  double damping = 0.0;
};

inline double default_damping(const Matrix& train_grads) {
  const double n = static_cast<double>(train_grads.rows());
  const double dim = static_cast<double>(train_grads.cols());
  const double trace = train_grads.squaredNorm() / n;
  return trace > 0.0 ? 0.1 * trace / dim : 1.0;
}

inline InfluenceSystem influence_system(const ModelParams& model, std::span<const Sample> train,
                                        std::span<const Sample> val, const InfluenceOptions& options) {
  if (train.empty() || val.empty())
    throw DataError("scoring", "score_influence", "train and validation sets must be nonempty");
  InfluenceSystem sys;
  sys.train_grads = gradient_matrix(model, train);
  sys.val_grad_sum = gradient_matrix(model, val).colwise().sum().transpose();
  sys.damping = options.damping.value_or(default_damping(sys.train_grads));
  if (!(sys.damping > 0.0)) throw ConfigError("scoring", "score_influence", "damping must be > 0");
  return sys;
}

/// (H + lambda I)^{-1} v with H = G^T G / n, by Cholesky.
inline Vector solve_damped_exact(const InfluenceSystem& sys) {
  const auto dim = sys.train_grads.cols();
  const double n = static_cast<double>(sys.train_grads.rows());
  Matrix h = (sys.train_grads.transpose() * sys.train_grads) / n;
  h.diagonal().array() += sys.damping;
  Eigen::LLT<Matrix> llt(h);
  if (llt.info() != Eigen::Success)
    throw NumericalError("scoring", "score_influence",
                         "damped Gauss-Newton system is not positive definite (lambda = " +
                             std::to_string(sys.damping) + ", dim = " + std::to_string(dim) + ")");
  Vector s = llt.solve(sys.val_grad_sum);
  if (!s.allFinite())
    throw NumericalError("scoring", "score_influence",
                         "linear solve produced non-finite values (lambda = " + std::to_string(sys.damping) + ")");
  return s;
}

/// Replaces the inverse of the averaged damped matrix by the average of the
/// per-sample inverses, each closed-form by Sherman-Morrison:
///   (lambda I + g g^T)^{-1} v = (v - g (g.v) / (lambda + g.g)) / lambda
inline Vector solve_damped_approximate(const InfluenceSystem& sys) {
  const double lambda = sys.damping;
  const auto n = sys.train_grads.rows();
  const Vector& v = sys.val_grad_sum;
  Vector acc = Vector::Zero(v.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto g = sys.train_grads.row(i).transpose();
    acc += v - g * (g.dot(v) / (lambda + g.squaredNorm()));
  }
  return acc / (static_cast<double>(n) * lambda);
}

/// raw_i = sum_j g(val_j)^T (H + lambda I)^{-1} g(train_i), records in train order.
inline std::vector<ScoreRecord> score_influence(const ModelParams& model, std::span<const Sample> train,
                                                std::span<const Sample> val, const InfluenceOptions& options = {}) {
  const InfluenceSystem sys = influence_system(model, train, val, options);
  const Vector s = options.backend == InfluenceBackend::kExact ? solve_damped_exact(sys) : solve_damped_approximate(sys);
  const Vector raw = sys.train_grads * s;
  std::vector<ScoreRecord> out;
  out.reserve(train.size());
  for (std::size_t i = 0; i < train.size(); ++i)
    out.push_back(detail::make_record(train[i], ScoringMethod::kInfluence, raw[static_cast<Eigen::Index>(i)],
                                      "score_influence"));
  return out;
}

/// The trained model used for influence scoring: a short adapter warmup of
/// the initial model on the server's clean validation split.
inline ModelParams influence_reference_model(const ModelParams& initial, std::span<const Sample> val,
                                             const ScoringConfig& config, std::uint64_t seed) {
  if (config.influence_warmup_steps == 0) return initial;
  return local_train(initial, val, config.influence_warmup_steps, config.influence_warmup_batch,
                     config.influence_warmup_lr, stream_seed(seed, "warmup"));
}

// ---------------------------------------------------------------------------
// Batch scoring

/// Everything a party needs to score samples under one method. `model` is
/// the initial global model; for influence, `reference` is the warmed-up one.
struct ScoringContext {
  const ModelParams* model = nullptr;
  const ModelParams* reference = nullptr;
  std::span<const Sample> validation;
  std::span<const Sample> demonstration_pool;
  ScoringConfig config;
  std::uint64_t seed = 0;
};

/// Scores every sample; records come back ordered by sample id.
inline std::vector<ScoreRecord> score_samples(const ScoringContext& ctx, std::span<const Sample> samples) {
  ctx.config.validate();
  std::vector<ScoreRecord> out;
  out.reserve(samples.size());
  switch (ctx.config.method) {
    case ScoringMethod::kPpl:
      for (const auto& s : samples) out.push_back(score_ppl(*ctx.model, s));
      break;
    case ScoringMethod::kConProb:
      for (const auto& s : samples) out.push_back(score_conprob(*ctx.model, s));
      break;
    case ScoringMethod::kIcl:
      for (const auto& s : samples)
        out.push_back(score_icl(*ctx.model, s,
                                draw_demonstrations(ctx.demonstration_pool, s, ctx.config.icl_demonstrations, ctx.seed),
                                ctx.config.icl_max_prompt));
      break;
    case ScoringMethod::kInfluence: {
      const ModelParams& ref = ctx.reference ? *ctx.reference : *ctx.model;
      if (!samples.empty()) out = score_influence(ref, samples, ctx.validation, ctx.config.influence);
      break;
    }
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const ScoreRecord& a, const ScoreRecord& b) { return a.sample_id < b.sample_id; });
  return out;
}

inline double mean_quality(std::span<const ScoreRecord> records) {
  double sum = 0.0;
  for (const auto& r : records) sum += r.quality;
  return sum / static_cast<double>(records.size());
}

/// Mean anchor quality. Influence treats the anchors as the training set
/// scored against the validation set.
inline double compute_anchor_threshold(const ScoringContext& ctx, std::span<const Sample> anchors) {
  if (anchors.empty()) throw DataError("scoring", "compute_anchor_threshold", "anchor set is empty");
  for (const auto& a : anchors)
    if (!a.is_clean())
      throw DataError("scoring", "compute_anchor_threshold", "anchor " + std::to_string(a.id) + " is not clean");
  const auto records = score_samples(ctx, anchors);
  return mean_quality(records);
}

// ---------------------------------------------------------------------------
// Score dump: CSV with header sample_id,method,raw,quality,provenance.

inline void write_score_dump(std::ostream& out, std::span<const ScoreRecord> records,
                             std::span<const Sample> samples) {
  std::unordered_map<SampleId, Provenance> prov;
  for (const auto& s : samples) prov.emplace(s.id, s.provenance);
  out << "sample_id,method,raw,quality,provenance\n";
  char buf[128];
  for (const auto& r : records) {
    auto it = prov.find(r.sample_id);
    if (it == prov.end())
      throw DataError("scoring", "write_score_dump", "no sample with id " + std::to_string(r.sample_id));
    std::snprintf(buf, sizeof buf, "%lld,%s,%.17g,%.17g,", static_cast<long long>(r.sample_id),
                  std::string(to_string(r.method)).c_str(), r.raw, r.quality);
    out << buf << to_string(it->second) << '\n';
  }
}

struct ScoreDumpRow {
  ScoreRecord record;
  Provenance provenance = Provenance::kClean;
};

inline std::vector<ScoreDumpRow> read_score_dump(std::istream& in) {
  std::vector<ScoreDumpRow> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 || line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 5) throw DataError("scoring", "read_score_dump", "line " + std::to_string(lineno) + ": expected 5 fields");
    auto m = parse_scoring_method(f[1]);
    if (!m) throw DataError("scoring", "read_score_dump", "line " + std::to_string(lineno) + ": unknown method " + f[1]);
    try {
      rows.push_back({{std::stoll(f[0]), *m, std::stod(f[2]), std::stod(f[3])}, parse_provenance(f[4])});
    } catch (const std::logic_error&) {
      throw DataError("scoring", "read_score_dump", "line " + std::to_string(lineno) + ": malformed number");
    }
  }
  return rows;
}

}  // namespace fedqc
