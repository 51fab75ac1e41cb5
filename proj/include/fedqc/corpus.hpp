#pragma once

// Synthetic question-answer corpus over a seeded fact world, with the three
// low-quality corruption patterns (cut, delete, exchange) and labeled mixtures.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

#include "fedqc/error.hpp"
#include "fedqc/rng.hpp"

namespace fedqc {

using TokenId = std::int32_t;
using SampleId = std::int64_t;

/// Upper bound on entities x attributes.
inline constexpr std::size_t kMaxFacts = 1'000'000;

/// Corrupted samples get id = source id + kDerivedIdOffset, so clean ids must
/// stay below it.
inline constexpr SampleId kDerivedIdOffset = 1'000'000'000;

enum class Provenance : std::uint8_t { kClean = 0, kCut = 1, kDelete = 2, kExchange = 3 };

inline constexpr std::array<Provenance, 4> kAllProvenances = {
    Provenance::kClean, Provenance::kCut, Provenance::kDelete, Provenance::kExchange};

inline std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::kClean: return "clean";
    case Provenance::kCut: return "cut";
    case Provenance::kDelete: return "delete";
    case Provenance::kExchange: return "exchange";
  }
  return "unknown";
}

inline Provenance parse_provenance(std::string_view s) {
  for (Provenance p : kAllProvenances)
    if (to_string(p) == s) return p;
  throw DataError("corpus", "parse_provenance", "unknown provenance '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// World

struct World {
  std::uint64_t seed = 0;
  std::vector<std::string> entities;
  std::vector<std::string> attributes;
  std::vector<std::string> values;  // value-token pool
  // facts[e * attributes.size() + a] indexes into `values`.
  std::vector<std::uint32_t> facts;

  std::size_t num_facts() const { return facts.size(); }
  const std::string& fact(std::size_t entity, std::size_t attribute) const {
    return values[facts[entity * attributes.size() + attribute]];
  }

  bool operator==(const World&) const = default;
};

namespace detail {

inline const std::vector<std::string>& attribute_names() {
  static const std::vector<std::string> names = {
      "color", "size",  "shape", "weight", "age",   "origin", "height", "speed", "taste",   "texture",
      "sound", "smell", "owner", "price",  "rank",  "mood",   "diet",   "range", "habitat", "material"};
  return names;
}

}  // namespace detail

inline constexpr std::size_t kDefaultValuePool = 150;

/// Builds a total fact table. Values are drawn uniformly from a pool of
/// `value_pool` tokens by the "world" stream.
inline World generate_world(std::uint64_t seed, std::size_t num_entities, std::size_t num_attributes,
                            std::size_t value_pool = kDefaultValuePool) {
  if (num_entities < 1 || num_attributes < 1 || value_pool < 1)
    throw ConfigError("corpus", "generate_world", "entities, attributes and value pool must be >= 1");
  if (num_entities > kMaxFacts / num_attributes)
    throw ConfigError("corpus", "generate_world",
                      "entities x attributes = " + std::to_string(num_entities * num_attributes) +
                          " exceeds the corpus cap of " + std::to_string(kMaxFacts) + " facts");
  World w;
  w.seed = seed;
  for (std::size_t e = 0; e < num_entities; ++e) w.entities.push_back("E" + std::to_string(e));
  const auto& names = detail::attribute_names();
  for (std::size_t a = 0; a < num_attributes; ++a)
    w.attributes.push_back(a < names.size() ? names[a] : "attr" + std::to_string(a));
  for (std::size_t v = 0; v < value_pool; ++v) w.values.push_back("v" + std::to_string(v));

  Rng rng = make_stream(seed, "world");
  std::uniform_int_distribution<std::uint32_t> pick(0, static_cast<std::uint32_t>(value_pool - 1));
  w.facts.resize(num_entities * num_attributes);
  for (auto& f : w.facts) f = pick(rng);
  return w;
}

// ---------------------------------------------------------------------------
// Vocabulary

/// Closed whitespace vocabulary. Ids 0..3 are the reserved markers.
class Vocab {
 public:
  static constexpr TokenId kQuestionStart = 0;
  static constexpr TokenId kAnswerStart = 1;
  static constexpr TokenId kEnd = 2;
  static constexpr TokenId kPad = 3;
  static constexpr std::size_t kNumReserved = 4;

  static const std::array<std::string_view, 4>& reserved() {
    static const std::array<std::string_view, 4> markers = {"<q>", "<a>", "<eos>", "<pad>"};
    return markers;
  }

  static const std::array<std::string_view, 6>& template_words() {
    static const std::array<std::string_view, 6> words = {"what", "is", "of", "?", "the", "."};
    return words;
  }

  Vocab() = default;

  static Vocab from_tokens(std::vector<std::string> tokens) {
    if (tokens.size() < kNumReserved)
      throw DataError("corpus", "vocab", "vocabulary is missing the reserved markers");
    for (std::size_t i = 0; i < kNumReserved; ++i)
      if (tokens[i] != reserved()[i])
        throw DataError("corpus", "vocab",
                        "line " + std::to_string(i) + " must be '" + std::string(reserved()[i]) + "'");
    Vocab v;
    v.tokens_ = std::move(tokens);
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
      const std::string& t = v.tokens_[i];
      if (t.empty() || t.find_first_of(" \t\r\n") != std::string::npos)
        throw DataError("corpus", "vocab", "invalid token at line " + std::to_string(i));
      if (!v.index_.emplace(t, static_cast<TokenId>(i)).second)
        throw DataError("corpus", "vocab", "duplicate token '" + t + "'");
    }
    return v;
  }

  static Vocab for_world(const World& world) {
    std::vector<std::string> tokens;
    for (auto m : reserved()) tokens.emplace_back(m);
    for (auto w : template_words()) tokens.emplace_back(w);
    tokens.insert(tokens.end(), world.entities.begin(), world.entities.end());
    tokens.insert(tokens.end(), world.attributes.begin(), world.attributes.end());
    tokens.insert(tokens.end(), world.values.begin(), world.values.end());
    return from_tokens(std::move(tokens));
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool contains(std::string_view token) const { return index_.contains(std::string(token)); }

  TokenId id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end())
      throw DataError("corpus", "tokenize", "token '" + std::string(token) + "' is not in the vocabulary");
    return it->second;
  }

  const std::string& token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw DataError("corpus", "detokenize", "token id " + std::to_string(id) + " out of range");
    return tokens_[static_cast<std::size_t>(id)];
  }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> out;
    std::istringstream in{std::string(text)};
    std::string word;
    while (in >> word) out.push_back(id(word));
    return out;
  }

  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId t : ids) {
      if (!out.empty()) out += ' ';
      out += token(t);
    }
    return out;
  }

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

inline void write_vocab(std::ostream& out, const Vocab& vocab) {
  for (const auto& t : vocab.tokens()) out << t << '\n';
}

inline Vocab read_vocab(std::istream& in) {
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return Vocab::from_tokens(std::move(tokens));
}

// ---------------------------------------------------------------------------
// Samples

struct Sample {
  SampleId id = 0;
  std::vector<TokenId> question;
  std::vector<TokenId> answer;
  Provenance provenance = Provenance::kClean;
  SampleId origin_id = 0;

  bool is_clean() const { return provenance == Provenance::kClean; }
  bool operator==(const Sample&) const = default;
};

/// Id of the sample derived from `source` by a corruption.
constexpr SampleId derived_id(SampleId source) { return source + kDerivedIdOffset; }

/// Id of the clean sample whose question a (possibly corrupted) sample carries.
constexpr SampleId question_source_id(SampleId id) { return id >= kDerivedIdOffset ? id - kDerivedIdOffset : id; }

/// Full model input for a sample: <q> question <a> answer <eos>.
struct RenderedSequence {
  std::vector<TokenId> tokens;
  std::size_t answer_begin = 0;  // first answer token; the scored span runs to the end (incl. <eos>)
};

inline RenderedSequence render(std::span<const TokenId> question, std::span<const TokenId> answer) {
  RenderedSequence r;
  r.tokens.reserve(question.size() + answer.size() + 3);
  r.tokens.push_back(Vocab::kQuestionStart);
  r.tokens.insert(r.tokens.end(), question.begin(), question.end());
  r.tokens.push_back(Vocab::kAnswerStart);
  r.answer_begin = r.tokens.size();
  r.tokens.insert(r.tokens.end(), answer.begin(), answer.end());
  r.tokens.push_back(Vocab::kEnd);
  return r;
}

inline RenderedSequence render(const Sample& s) { return render(s.question, s.answer); }

inline std::vector<TokenId> question_template(const Vocab& vocab, std::string_view attribute,
                                              std::string_view entity) {
  return {vocab.id("what"), vocab.id("is"), vocab.id(attribute), vocab.id("of"), vocab.id(entity), vocab.id("?")};
}

inline std::vector<TokenId> answer_template(const Vocab& vocab, std::string_view attribute, std::string_view entity,
                                            std::string_view value) {
  return {vocab.id("the"), vocab.id(attribute), vocab.id("of"), vocab.id(entity),
          vocab.id("is"),  vocab.id(value),     vocab.id(".")};
}

/// The world's answer to a templated question, or nothing if the question
/// does not follow the template.
inline std::optional<std::vector<TokenId>> lookup_answer(const World& world, const Vocab& vocab,
                                                         std::span<const TokenId> question) {
  if (question.size() != 6) return std::nullopt;
  const std::string& attr = vocab.token(question[2]);
  const std::string& ent = vocab.token(question[4]);
  auto a = std::find(world.attributes.begin(), world.attributes.end(), attr);
  auto e = std::find(world.entities.begin(), world.entities.end(), ent);
  if (a == world.attributes.end() || e == world.entities.end()) return std::nullopt;
  const auto ai = static_cast<std::size_t>(a - world.attributes.begin());
  const auto ei = static_cast<std::size_t>(e - world.entities.begin());
  return answer_template(vocab, attr, ent, world.fact(ei, ai));
}

/// Clean templated samples with ids first_id, first_id + 1, ...; (entity,
/// attribute) pairs are drawn with replacement by the "qa" stream.
inline std::vector<Sample> synthesize_samples(const World& world, const Vocab& vocab, std::size_t count,
                                              std::uint64_t seed, SampleId first_id = 0) {
  if (count < 1) throw DataError("corpus", "synthesize_samples", "count must be >= 1");
  if (first_id < 0 || first_id + static_cast<SampleId>(count) > kDerivedIdOffset)
    throw DataError("corpus", "synthesize_samples", "clean sample ids must lie in [0, 1e9)");
  Rng rng = make_stream(seed, "qa");
  std::uniform_int_distribution<std::size_t> pick(0, world.num_facts() - 1);
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t f = pick(rng);
    const std::size_t e = f / world.attributes.size();
    const std::size_t a = f % world.attributes.size();
    Sample s;
    s.id = first_id + static_cast<SampleId>(i);
    s.origin_id = s.id;
    s.question = question_template(vocab, world.attributes[a], world.entities[e]);
    s.answer = answer_template(vocab, world.attributes[a], world.entities[e], world.fact(e, a));
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<Sample> synthesize_samples(const World& world, std::size_t count, std::uint64_t seed,
                                              SampleId first_id = 0) {
  return synthesize_samples(world, Vocab::for_world(world), count, seed, first_id);
}

// ---------------------------------------------------------------------------
// Corruptions

namespace detail {

inline void require_clean(const Sample& s, std::string_view op) {
  if (!s.is_clean())
    throw DataError("corpus", op, "sample " + std::to_string(s.id) + " is not clean");
  if (s.id >= kDerivedIdOffset)
    throw DataError("corpus", op, "sample id " + std::to_string(s.id) + " is in the derived id range");
}

}  // namespace detail

/// Truncates the answer to its first `limit` tokens. Without an explicit limit
/// the answer is halved (rounding up). Returns nothing when the answer would
/// not be strictly shortened; such samples do not belong in the cut pool.
inline std::optional<Sample> corrupt_cut(const Sample& sample, std::optional<std::size_t> limit = std::nullopt) {
  detail::require_clean(sample, "corrupt_cut");
  const std::size_t len = sample.answer.size();
  const std::size_t keep = limit.value_or((len + 1) / 2);
  if (keep >= len || keep == 0) return std::nullopt;
  Sample out = sample;
  out.answer.resize(keep);
  out.provenance = Provenance::kCut;
  out.id = derived_id(sample.id);
  out.origin_id = sample.id;
  return out;
}

/// Removes ceil(fraction * |answer|) answer tokens at positions drawn by the
/// "delete" stream (indexed by sample id); survivors keep their order.
inline Sample corrupt_delete(const Sample& sample, double fraction, std::uint64_t seed) {
  detail::require_clean(sample, "corrupt_delete");
  if (!(fraction > 0.0 && fraction < 1.0))
    throw DataError("corpus", "corrupt_delete", "fraction must lie in (0, 1)");
  const std::size_t len = sample.answer.size();
  const auto removed = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(len) - 1e-9));
  if (removed >= len)
    throw DataError("corpus", "corrupt_delete",
                    "deleting " + std::to_string(removed) + " of " + std::to_string(len) +
                        " answer tokens would leave the answer empty");
  Rng rng = make_stream(seed, "delete", {static_cast<std::uint64_t>(sample.id)});
  std::vector<std::size_t> positions(len);
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  std::shuffle(positions.begin(), positions.end(), rng);
  std::vector<bool> drop(len, false);
  for (std::size_t i = 0; i < removed; ++i) drop[positions[i]] = true;

  Sample out = sample;
  out.answer.clear();
  for (std::size_t i = 0; i < len; ++i)
    if (!drop[i]) out.answer.push_back(sample.answer[i]);
  out.provenance = Provenance::kDelete;
  out.id = derived_id(sample.id);
  out.origin_id = sample.id;
  return out;
}

/// Reassigns answers by a random derangement ("exchange" stream). Beyond having
/// no fixed point, no sample may receive an answer identical to its own, so
/// duplicated facts cannot produce an accidentally correct pair.
inline std::vector<Sample> corrupt_exchange(std::span<const Sample> samples, std::uint64_t seed) {
  const std::size_t n = samples.size();
  if (n < 2) throw DataError("corpus", "corrupt_exchange", "exchange needs at least 2 samples");
  for (const auto& s : samples) detail::require_clean(s, "corrupt_exchange");

  Rng rng = make_stream(seed, "exchange");
  std::vector<std::size_t> donor(n);
  std::iota(donor.begin(), donor.end(), std::size_t{0});
  std::shuffle(donor.begin(), donor.end(), rng);

  auto ok = [&](std::size_t i, std::size_t d) { return samples[i].answer != samples[d].answer; };
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::size_t budget = 64 * n + 64;
  for (std::size_t i = 0; i < n; ++i) {
    while (!ok(i, donor[i])) {
      if (budget-- == 0)
        throw DataError("corpus", "corrupt_exchange", "could not find a mismatching answer assignment");
      const std::size_t j = pick(rng);
      if (ok(i, donor[j]) && ok(j, donor[i])) std::swap(donor[i], donor[j]);
    }
  }

  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Sample s = samples[i];
    s.answer = samples[donor[i]].answer;
    s.provenance = Provenance::kExchange;
    s.id = derived_id(samples[i].id);
    s.origin_id = samples[donor[i]].id;
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mixtures

struct MixtureFractions {
  double cut = 0.10;
  double del = 0.15;
  double exchange = 0.15;

  double total() const { return cut + del + exchange; }

  /// The default 10/15/15 split rescaled to a total low-quality proportion.
  static MixtureFractions scaled_to(double proportion) {
    const MixtureFractions base;
    const double s = proportion / base.total();
    return {base.cut * s, base.del * s, base.exchange * s};
  }
};

struct CorruptionOptions {
  std::optional<std::size_t> cut_limit;  // nullopt: halve the answer
  double delete_fraction = 0.4;
};

/// Per-class sample counts, indexed by Provenance.
using ClassCounts = std::array<std::size_t, 4>;

struct LabeledDataset {
  std::vector<Sample> samples;
  ClassCounts counts{};

  std::size_t size() const { return samples.size(); }
  double fraction(Provenance p) const {
    return samples.empty() ? 0.0
                           : static_cast<double>(counts[static_cast<std::size_t>(p)]) /
                                 static_cast<double>(samples.size());
  }
  std::size_t low_quality_count() const { return samples.size() - counts[0]; }
};

inline ClassCounts count_classes(std::span<const Sample> samples) {
  ClassCounts c{};
  for (const auto& s : samples) ++c[static_cast<std::size_t>(s.provenance)];
  return c;
}

inline LabeledDataset make_dataset(std::vector<Sample> samples) {
  LabeledDataset d;
  d.counts = count_classes(samples);
  d.samples = std::move(samples);
  return d;
}

/// Integer class sizes for N samples by largest remainder. Order of the
/// result is (cut, delete, exchange, clean); ties go to the earlier class.
inline std::array<std::size_t, 4> largest_remainder_counts(std::size_t n, const MixtureFractions& f) {
  const std::array<double, 4> shares = {f.cut, f.del, f.exchange, std::max(0.0, 1.0 - f.total())};
  std::array<std::size_t, 4> counts{};
  std::array<double, 4> rem{};
  std::size_t assigned = 0;
  for (std::size_t c = 0; c < 4; ++c) {
    const double exact = shares[c] * static_cast<double>(n);
    counts[c] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[c] = exact - static_cast<double>(counts[c]);
    assigned += counts[c];
  }
  std::array<std::size_t, 4> order = {0, 1, 2, 3};
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t i = 0; assigned < n; i = (i + 1) % 4, ++assigned) ++counts[order[i]];
  while (assigned > n) {  // only reachable through the 1e-9 guard
    for (std::size_t c = 4; c-- > 0 && assigned > n;)
      if (counts[c] > 0) --counts[c], --assigned;
  }
  return counts;
}

/// Corrupts disjoint subsets of clean `samples` chosen by the "mixture"
/// stream; sample positions are preserved.
inline LabeledDataset build_mixture(std::span<const Sample> samples, const MixtureFractions& fractions,
                                    std::uint64_t seed, const CorruptionOptions& options = {}) {
  if (fractions.cut < 0 || fractions.del < 0 || fractions.exchange < 0)
    throw ConfigError("corpus", "build_mixture", "mixture fractions must be non-negative (corpus.mixture)");
  if (fractions.total() > 1.0 + 1e-12)
    throw ConfigError("corpus", "build_mixture",
                      "mixture fractions sum to " + std::to_string(fractions.total()) + " > 1 (corpus.mixture)");
  for (const auto& s : samples) detail::require_clean(s, "build_mixture");

  const std::size_t n = samples.size();
  const auto [n_cut, n_del, n_ex, n_clean] = largest_remainder_counts(n, fractions);
  (void)n_clean;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_stream(seed, "mixture");
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<Sample> out(samples.begin(), samples.end());
  std::vector<std::size_t> rest;
  rest.reserve(n);
  std::size_t cut_done = 0;
  for (std::size_t pos : order) {
    if (cut_done < n_cut) {
      if (auto c = corrupt_cut(samples[pos], options.cut_limit)) {
        out[pos] = std::move(*c);
        ++cut_done;
        continue;
      }
    }
    rest.push_back(pos);
  }
  if (cut_done < n_cut)
    throw DataError("corpus", "build_mixture",
                    "only " + std::to_string(cut_done) + " of " + std::to_string(n_cut) +
                        " requested samples have answers longer than the cut limit");

  for (std::size_t i = 0; i < n_del; ++i)
    out[rest[i]] = corrupt_delete(samples[rest[i]], options.delete_fraction, seed);

  if (n_ex > 0) {
    std::vector<Sample> pool;
    for (std::size_t i = n_del; i < n_del + n_ex; ++i) pool.push_back(samples[rest[i]]);
    auto exchanged = corrupt_exchange(pool, seed);
    for (std::size_t i = 0; i < n_ex; ++i) out[rest[n_del + i]] = std::move(exchanged[i]);
  }
  return make_dataset(std::move(out));
}

// ---------------------------------------------------------------------------
// Dataset file: one flat JSON object per line.

inline void write_dataset(std::ostream& out, std::span<const Sample> samples, const Vocab& vocab) {
  for (const auto& s : samples) {
    nlohmann::ordered_json j;
    j["id"] = s.id;
    j["question"] = vocab.decode(s.question);
    j["answer"] = vocab.decode(s.answer);
    j["provenance"] = std::string(to_string(s.provenance));
    j["origin_id"] = s.origin_id;
    out << j.dump() << '\n';
  }
}

inline LabeledDataset read_dataset(std::istream& in, const Vocab& vocab) {
  std::vector<Sample> samples;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      Sample s;
      s.id = j.at("id").get<SampleId>();
      s.question = vocab.encode(j.at("question").get<std::string>());
      s.answer = vocab.encode(j.at("answer").get<std::string>());
      s.provenance = parse_provenance(j.at("provenance").get<std::string>());
      s.origin_id = j.at("origin_id").get<SampleId>();
      if (s.question.empty() || s.answer.empty())
        throw DataError("corpus", "read_dataset", "empty question or answer");
      samples.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("corpus", "read_dataset", "line " + std::to_string(lineno) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("corpus", "read_dataset", "line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return make_dataset(std::move(samples));
}

}  // namespace fedqc
