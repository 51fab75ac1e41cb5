#pragma once

// Versioned experiment configuration. Parsing is strict: unknown keys and
// wrongly typed values are errors that name the offending path.

#include <cstdint>
#include <istream>
#include <optional>
#include <set>
#include <string>
#include <string_view>

#include "json.hpp"

#include "fedqc/corpus.hpp"
#include "fedqc/error.hpp"
#include "fedqc/federation.hpp"
#include "fedqc/model.hpp"
#include "fedqc/scoring.hpp"
#include "fedqc/selection.hpp"

namespace fedqc {

inline constexpr int kConfigVersion = 1;

struct CorpusSection {
  std::size_t entities = 30;
  std::size_t attributes = 10;
  std::size_t value_pool = kDefaultValuePool;
  std::size_t train_samples = 16000;
  std::size_t pretrain_samples = 4000;
  std::size_t validation_samples = 200;
  MixtureFractions mixture;
  CorruptionOptions corruption;
};

struct ModelSection {
  std::size_t embed_dim = 16;
  std::size_t context_window = 8;
  std::size_t hidden_dim = 64;
  std::size_t adapter_rank = 4;
  PretrainOptions pretrain;
};

struct FederationSection {
  std::size_t clients = 8;
  std::size_t rounds = 50;
  std::size_t local_steps = 10;
  std::size_t batch_size = 16;
  double learning_rate = 0.5;
  double participation = 1.0;
  PartitionScheme partition = PartitionScheme::kIid;
  double beta = 1.0;
  std::optional<std::size_t> niid2_client_size;  // unset: largest feasible
};

struct SelectionSection {
  SelectionPrinciple principle = SelectionPrinciple::kAnchorThreshold;
  std::size_t anchors = 10;
  std::optional<double> proportion;  // unset: the realized global low-quality fraction
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  CorpusSection corpus;
  ModelSection model;
  ScoringConfig scoring;
  FederationSection federation;
  SelectionSection selection;
  std::string output_dir = "out";
};

namespace detail {

/// Walks one JSON object, remembering which keys were read.
class SectionReader {
 public:
  SectionReader(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config", "parse", "'" + path_ + "' must be an object");
  }

  ~SectionReader() = default;

  template <typename T>
  void read(std::string_view key, T& out) {
    seen_.insert(std::string(key));
    auto it = j_.find(std::string(key));
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
        if (!it->is_number_unsigned()) throw ConfigError("config", "parse", "'" + full(key) + "' must be a non-negative integer");
      } else if constexpr (std::is_same_v<T, double>) {
        if (!it->is_number()) throw ConfigError("config", "parse", "'" + full(key) + "' must be a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw ConfigError("config", "parse", "'" + full(key) + "' must be a string");
      }
      out = it->get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config", "parse", "'" + full(key) + "': " + e.what());
    }
  }

  template <typename T>
  void read_optional(std::string_view key, std::optional<T>& out) {
    seen_.insert(std::string(key));
    auto it = j_.find(std::string(key));
    if (it == j_.end() || it->is_null()) return;
    T v{};
    seen_.erase(std::string(key));
    read(key, v);
    out = v;
  }

  const nlohmann::json* child(std::string_view key) {
    seen_.insert(std::string(key));
    auto it = j_.find(std::string(key));
    return it == j_.end() ? nullptr : &*it;
  }

  std::string full(std::string_view key) const { return path_.empty() ? std::string(key) : path_ + "." + std::string(key); }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.contains(it.key())) throw ConfigError("config", "parse", "unknown key '" + full(it.key()) + "'");
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename E, typename Parse>
E read_enum(SectionReader& r, std::string_view key, E current, Parse parse, std::string_view choices) {
  std::string name(to_string(current));
  r.read(key, name);
  auto v = parse(name);
  if (!v) throw ConfigError("config", "parse", "'" + r.full(key) + "' must be one of " + std::string(choices));
  return *v;
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  using detail::SectionReader;
  ExperimentConfig c;
  SectionReader top(j, "");
  int version = kConfigVersion;
  top.read("version", version);
  if (version != kConfigVersion)
    throw ConfigError("config", "parse", "unsupported config version " + std::to_string(version) + " (version)");
  top.read("seed", c.seed);

  if (const auto* s = top.child("corpus")) {
    SectionReader r(*s, "corpus");
    r.read("entities", c.corpus.entities);
    r.read("attributes", c.corpus.attributes);
    r.read("value_pool", c.corpus.value_pool);
    r.read("train_samples", c.corpus.train_samples);
    r.read("pretrain_samples", c.corpus.pretrain_samples);
    r.read("validation_samples", c.corpus.validation_samples);
    r.read_optional("cut_limit", c.corpus.corruption.cut_limit);
    r.read("delete_fraction", c.corpus.corruption.delete_fraction);
    if (const auto* m = r.child("mixture")) {
      SectionReader mr(*m, "corpus.mixture");
      mr.read("cut", c.corpus.mixture.cut);
      mr.read("delete", c.corpus.mixture.del);
      mr.read("exchange", c.corpus.mixture.exchange);
      mr.finish();
    }
    r.finish();
  }
  if (const auto* s = top.child("model")) {
    SectionReader r(*s, "model");
    r.read("embed_dim", c.model.embed_dim);
    r.read("context_window", c.model.context_window);
    r.read("hidden_dim", c.model.hidden_dim);
    r.read("adapter_rank", c.model.adapter_rank);
    r.read("pretrain_epochs", c.model.pretrain.epochs);
    r.read("pretrain_lr", c.model.pretrain.lr);
    r.read("pretrain_batch_size", c.model.pretrain.batch_size);
    r.finish();
  }
  if (const auto* s = top.child("scoring")) {
    SectionReader r(*s, "scoring");
    c.scoring.method = detail::read_enum(r, "method", c.scoring.method, parse_scoring_method, "ppl, conprob, influence, icl");
    r.read_optional("influence_damping", c.scoring.influence.damping);
    c.scoring.influence.backend = detail::read_enum(
        r, "influence_backend", c.scoring.influence.backend,
        [](std::string_view v) -> std::optional<InfluenceBackend> {
          if (v == "exact") return InfluenceBackend::kExact;
          if (v == "approximate") return InfluenceBackend::kApproximate;
          return std::nullopt;
        },
        "exact, approximate");
    r.read("influence_warmup_steps", c.scoring.influence_warmup_steps);
    r.read("influence_warmup_batch_size", c.scoring.influence_warmup_batch);
    r.read("influence_warmup_lr", c.scoring.influence_warmup_lr);
    r.read("icl_demonstrations", c.scoring.icl_demonstrations);
    r.read("icl_max_prompt", c.scoring.icl_max_prompt);
    r.finish();
  }
  if (const auto* s = top.child("federation")) {
    SectionReader r(*s, "federation");
    r.read("clients", c.federation.clients);
    r.read("rounds", c.federation.rounds);
    r.read("local_steps", c.federation.local_steps);
    r.read("batch_size", c.federation.batch_size);
    r.read("learning_rate", c.federation.learning_rate);
    r.read("participation", c.federation.participation);
    c.federation.partition =
        detail::read_enum(r, "partition", c.federation.partition, parse_partition_scheme, "iid, niid1, niid2");
    r.read("beta", c.federation.beta);
    r.read_optional("niid2_client_size", c.federation.niid2_client_size);
    r.finish();
  }
  if (const auto* s = top.child("selection")) {
    SectionReader r(*s, "selection");
    c.selection.principle = detail::read_enum(r, "principle", c.selection.principle, parse_selection_principle,
                                              "none, proportion, quantile, anchor, oracle");
    r.read("anchors", c.selection.anchors);
    r.read_optional("proportion", c.selection.proportion);
    r.finish();
  }
  if (const auto* s = top.child("paths")) {
    SectionReader r(*s, "paths");
    r.read("output", c.output_dir);
    r.finish();
  }
  top.finish();
  return c;
}

inline ExperimentConfig parse_config(std::istream& in) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config", "parse", std::string("malformed JSON: ") + e.what());
  }
  return parse_config(j);
}

inline nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  auto opt = [](const auto& o) { return o ? nlohmann::ordered_json(*o) : nlohmann::ordered_json(nullptr); };
  nlohmann::ordered_json j;
  j["version"] = kConfigVersion;
  j["seed"] = c.seed;
  j["corpus"] = {{"entities", c.corpus.entities},
                 {"attributes", c.corpus.attributes},
                 {"value_pool", c.corpus.value_pool},
                 {"train_samples", c.corpus.train_samples},
                 {"pretrain_samples", c.corpus.pretrain_samples},
                 {"validation_samples", c.corpus.validation_samples},
                 {"mixture",
                  {{"cut", c.corpus.mixture.cut}, {"delete", c.corpus.mixture.del}, {"exchange", c.corpus.mixture.exchange}}},
                 {"cut_limit", opt(c.corpus.corruption.cut_limit)},
                 {"delete_fraction", c.corpus.corruption.delete_fraction}};
  j["model"] = {{"embed_dim", c.model.embed_dim},
                {"context_window", c.model.context_window},
                {"hidden_dim", c.model.hidden_dim},
                {"adapter_rank", c.model.adapter_rank},
                {"pretrain_epochs", c.model.pretrain.epochs},
                {"pretrain_lr", c.model.pretrain.lr},
                {"pretrain_batch_size", c.model.pretrain.batch_size}};
  j["scoring"] = {{"method", to_string(c.scoring.method)},
                  {"influence_damping", opt(c.scoring.influence.damping)},
                  {"influence_backend", to_string(c.scoring.influence.backend)},
                  {"influence_warmup_steps", c.scoring.influence_warmup_steps},
                  {"influence_warmup_batch_size", c.scoring.influence_warmup_batch},
                  {"influence_warmup_lr", c.scoring.influence_warmup_lr},
                  {"icl_demonstrations", c.scoring.icl_demonstrations},
                  {"icl_max_prompt", c.scoring.icl_max_prompt}};
  j["federation"] = {{"clients", c.federation.clients},
                     {"rounds", c.federation.rounds},
                     {"local_steps", c.federation.local_steps},
                     {"batch_size", c.federation.batch_size},
                     {"learning_rate", c.federation.learning_rate},
                     {"participation", c.federation.participation},
                     {"partition", to_string(c.federation.partition)},
                     {"beta", c.federation.beta},
                     {"niid2_client_size", opt(c.federation.niid2_client_size)}};
  j["selection"] = {{"principle", to_string(c.selection.principle)},
                    {"anchors", c.selection.anchors},
                    {"proportion", opt(c.selection.proportion)}};
  j["paths"] = {{"output", c.output_dir}};
  return j;
}

}  // namespace fedqc
