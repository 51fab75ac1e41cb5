#pragma once

// Ground-truth-aware measurements: validation perplexity, filter confusion
// counts and score distributions per provenance class.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "fedqc/corpus.hpp"
#include "fedqc/error.hpp"
#include "fedqc/model.hpp"
#include "fedqc/scoring.hpp"

namespace fedqc {

/// exp of the token-weighted mean answer NLL (answer tokens and <eos>).
inline double validation_perplexity(const ModelParams& model, std::span<const Sample> val) {
  if (val.empty()) throw DataError("evaluation", "validation_perplexity", "validation set is empty");
  detail::Forward fwd(model);
  Vector x, hid, lp;
  double nll = 0.0;
  std::size_t tokens = 0;
  for (const auto& s : val) {
    const auto seq = render(s);
    fwd.check_tokens(seq.tokens, "validation_perplexity");
    for (std::size_t pos = seq.answer_begin; pos < seq.tokens.size(); ++pos) {
      fwd.hidden(seq.tokens, pos, x, hid);
      fwd.logprobs(hid, lp);
      nll -= lp[static_cast<Eigen::Index>(seq.tokens[pos])];
      ++tokens;
    }
  }
  return std::exp(nll / static_cast<double>(tokens));
}

/// A ratio that keeps its numerator and denominator; undefined when the
/// denominator is zero.
struct Ratio {
  std::size_t numerator = 0;
  std::size_t denominator = 0;

  std::optional<double> value() const {
    if (denominator == 0) return std::nullopt;
    return static_cast<double>(numerator) / static_cast<double>(denominator);
  }
};

struct FilterConfusion {
  std::size_t kept_clean = 0;
  std::size_t kept_corrupt = 0;
  std::size_t dropped_clean = 0;
  std::size_t dropped_corrupt = 0;

  std::size_t total() const { return kept_clean + kept_corrupt + dropped_clean + dropped_corrupt; }
  std::size_t kept() const { return kept_clean + kept_corrupt; }
  std::size_t dropped() const { return dropped_clean + dropped_corrupt; }

  Ratio precision() const { return {kept_clean, kept_clean + kept_corrupt}; }
  Ratio recall() const { return {kept_clean, kept_clean + dropped_clean}; }
  Ratio kept_low_quality() const { return {kept_corrupt, kept_clean + kept_corrupt}; }

  FilterConfusion& operator+=(const FilterConfusion& o) {
    kept_clean += o.kept_clean;
    kept_corrupt += o.kept_corrupt;
    dropped_clean += o.dropped_clean;
    dropped_corrupt += o.dropped_corrupt;
    return *this;
  }
  bool operator==(const FilterConfusion&) const = default;
};

inline FilterConfusion filter_confusion(std::span<const Sample> dataset, std::span<const SampleId> kept) {
  std::unordered_set<SampleId> ids;
  for (const auto& s : dataset) ids.insert(s.id);
  std::unordered_set<SampleId> keep;
  for (SampleId id : kept) {
    if (!ids.contains(id))
      throw DataError("evaluation", "filter_confusion", "kept id " + std::to_string(id) + " is not in the dataset");
    keep.insert(id);
  }
  FilterConfusion c;
  for (const auto& s : dataset) {
    const bool k = keep.contains(s.id);
    if (s.is_clean())
      ++(k ? c.kept_clean : c.dropped_clean);
    else
      ++(k ? c.kept_corrupt : c.dropped_corrupt);
  }
  return c;
}

struct ScoreSummary {
  std::size_t count = 0;
  double mean = 0.0;
  double stddev = 0.0;
  double min = 0.0;
  double max = 0.0;
};

/// Quality distribution per provenance class (indexed by Provenance).
inline std::array<ScoreSummary, 4> summarize_scores(std::span<const ScoreRecord> records,
                                                    std::span<const Sample> samples) {
  std::unordered_map<SampleId, Provenance> prov;
  for (const auto& s : samples) prov.emplace(s.id, s.provenance);
  std::array<std::vector<double>, 4> by_class;
  for (const auto& r : records) {
    auto it = prov.find(r.sample_id);
    if (it == prov.end())
      throw DataError("evaluation", "summarize_scores", "no sample with id " + std::to_string(r.sample_id));
    by_class[static_cast<std::size_t>(it->second)].push_back(r.quality);
  }
  std::array<ScoreSummary, 4> out{};
  for (std::size_t c = 0; c < 4; ++c) {
    const auto& v = by_class[c];
    if (v.empty()) continue;
    ScoreSummary& s = out[c];
    s.count = v.size();
    double sum = 0.0;
    for (double x : v) sum += x;
    s.mean = sum / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.stddev = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    s.min = *std::min_element(v.begin(), v.end());
    s.max = *std::max_element(v.begin(), v.end());
  }
  return out;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw DataError("evaluation", "median", "no values");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace fedqc
