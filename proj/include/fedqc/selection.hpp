#pragma once

// Selection principles: which scored samples a client keeps. Ties at a
// threshold are always kept.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedqc/error.hpp"
#include "fedqc/scoring.hpp"

namespace fedqc {

enum class SelectionPrinciple : std::uint8_t {
  kNone,             // keep everything (low-quality baseline)
  kByProportion,     // drop the floor(q * |D_k|) lowest locally
  kGlobalQuantile,   // server pools all scores, keeps >= pooled q-quantile
  kAnchorThreshold,  // keep >= mean anchor quality
  kOracle,           // keep ground-truth clean samples (evaluation baseline)
};

inline std::string_view to_string(SelectionPrinciple p) {
  switch (p) {
    case SelectionPrinciple::kNone: return "none";
    case SelectionPrinciple::kByProportion: return "proportion";
    case SelectionPrinciple::kGlobalQuantile: return "quantile";
    case SelectionPrinciple::kAnchorThreshold: return "anchor";
    case SelectionPrinciple::kOracle: return "oracle";
  }
  return "unknown";
}

inline std::optional<SelectionPrinciple> parse_selection_principle(std::string_view s) {
  for (auto p : {SelectionPrinciple::kNone, SelectionPrinciple::kByProportion, SelectionPrinciple::kGlobalQuantile,
                 SelectionPrinciple::kAnchorThreshold, SelectionPrinciple::kOracle})
    if (to_string(p) == s) return p;
  return std::nullopt;
}

/// Kept sample ids, ascending.
using KeptSet = std::vector<SampleId>;

namespace detail {

inline void check_proportion(double q, std::string_view op) {
  if (!(q >= 0.0 && q < 1.0))
    throw ConfigError("selection", op, "proportion q must lie in [0, 1) (selection.proportion)");
}

inline KeptSet keep_at_least(std::span<const ScoreRecord> scores, double threshold) {
  KeptSet kept;
  for (const auto& r : scores)
    if (r.quality >= threshold) kept.push_back(r.sample_id);
  std::sort(kept.begin(), kept.end());
  return kept;
}

}  // namespace detail

/// Sorts by quality (descending, ties by ascending id) and drops the
/// floor(q * n) lowest.
inline KeptSet select_by_proportion(std::span<const ScoreRecord> scores, double q) {
  detail::check_proportion(q, "select_by_proportion");
  if (scores.empty()) throw DataError("selection", "select_by_proportion", "no scores");
  std::vector<ScoreRecord> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end(), [](const ScoreRecord& a, const ScoreRecord& b) {
    return a.quality != b.quality ? a.quality > b.quality : a.sample_id < b.sample_id;
  });
  const auto drop = static_cast<std::size_t>(std::floor(q * static_cast<double>(sorted.size()) + 1e-9));
  KeptSet kept;
  for (std::size_t i = 0; i + drop < sorted.size(); ++i) kept.push_back(sorted[i].sample_id);
  std::sort(kept.begin(), kept.end());
  return kept;
}

/// q-quantile with lower interpolation: sorted[floor(q * (n - 1))].
inline double lower_quantile(std::vector<double> values, double q) {
  detail::check_proportion(q, "lower_quantile");
  if (values.empty()) throw DataError("selection", "lower_quantile", "no values");
  std::sort(values.begin(), values.end());
  const auto idx = static_cast<std::size_t>(std::floor(q * static_cast<double>(values.size() - 1) + 1e-9));
  return values[idx];
}

/// Pooled-quality threshold shared by every client.
inline double global_quantile_threshold(std::span<const std::vector<ScoreRecord>> all_scores, double q) {
  std::vector<double> pooled;
  for (const auto& client : all_scores)
    for (const auto& r : client) pooled.push_back(r.quality);
  if (pooled.empty()) throw DataError("selection", "select_by_global_quantile", "no scores from any client");
  return lower_quantile(std::move(pooled), q);
}

inline std::vector<KeptSet> select_by_global_quantile(std::span<const std::vector<ScoreRecord>> all_scores, double q) {
  const double threshold = global_quantile_threshold(all_scores, q);
  std::vector<KeptSet> out;
  for (const auto& client : all_scores) out.push_back(detail::keep_at_least(client, threshold));
  return out;
}

inline KeptSet select_by_anchor(std::span<const ScoreRecord> scores, double tau) {
  return detail::keep_at_least(scores, tau);
}

}  // namespace fedqc
