#pragma once

// Two-phase federated protocol as a deterministic simulation.
//
// Phase I:  the server ships the initial model and the public validation set,
//           every client scores its local samples, the server derives a
//           threshold (anchor mode: from its own anchor set) and broadcasts it.
// Phase II: clients filter locally and run FedAvg over the adapter only.
//
// Every logical transfer goes through a MessageTrace so tests can check that
// no client sample ever reaches the server.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "fedqc/corpus.hpp"
#include "fedqc/error.hpp"
#include "fedqc/evaluation.hpp"
#include "fedqc/model.hpp"
#include "fedqc/rng.hpp"
#include "fedqc/scoring.hpp"
#include "fedqc/selection.hpp"

namespace fedqc {

// ---------------------------------------------------------------------------
// Partitioning

enum class PartitionScheme : std::uint8_t { kIid, kNiid1, kNiid2 };

inline std::string_view to_string(PartitionScheme s) {
  switch (s) {
    case PartitionScheme::kIid: return "iid";
    case PartitionScheme::kNiid1: return "niid1";
    case PartitionScheme::kNiid2: return "niid2";
  }
  return "unknown";
}

inline std::optional<PartitionScheme> parse_partition_scheme(std::string_view s) {
  for (auto p : {PartitionScheme::kIid, PartitionScheme::kNiid1, PartitionScheme::kNiid2})
    if (to_string(p) == s) return p;
  return std::nullopt;
}

struct PartitionPlan {
  PartitionScheme scheme = PartitionScheme::kIid;
  double beta = 0.0;                         // NIID-1 only
  std::vector<double> proportions;           // NIID-1 Dirichlet draw
  std::vector<std::vector<SampleId>> clients;  // ascending ids per client

  std::size_t num_clients() const { return clients.size(); }
};

/// Low-quality share of the two NIID-2 client groups.
inline constexpr double kNiid2FirstHalf = 0.7;
inline constexpr double kNiid2SecondHalf = 0.9;

namespace detail {

inline void check_clients(std::size_t n, std::size_t pool, std::string_view op) {
  if (n < 1) throw ConfigError("federation", op, "need at least one client (federation.clients)");
  if (n > pool)
    throw ConfigError("federation", op,
                      std::to_string(n) + " clients but only " + std::to_string(pool) +
                          " samples (federation.clients)");
}

inline std::vector<std::size_t> equal_sizes(std::size_t total, std::size_t n) {
  std::vector<std::size_t> sizes(n, total / n);
  for (std::size_t k = 0; k < total % n; ++k) ++sizes[k];
  return sizes;
}

inline void split_by_quality(const LabeledDataset& d, std::vector<SampleId>& low, std::vector<SampleId>& clean) {
  for (const auto& s : d.samples) (s.is_clean() ? clean : low).push_back(s.id);
}

inline void finish(PartitionPlan& plan) {
  for (auto& c : plan.clients) std::sort(c.begin(), c.end());
}

inline std::pair<std::size_t, std::size_t> niid2_demand(std::size_t n, std::size_t size) {
  const auto first = static_cast<std::size_t>(std::llround(kNiid2FirstHalf * static_cast<double>(size)));
  const auto second = static_cast<std::size_t>(std::llround(kNiid2SecondHalf * static_cast<double>(size)));
  const std::size_t low = (n / 2) * (first + second);
  return {low, n * size - low};
}

}  // namespace detail

/// Shuffle ("partition" stream) then deal round-robin.
inline PartitionPlan partition_iid(const LabeledDataset& dataset, std::size_t n, std::uint64_t seed) {
  detail::check_clients(n, dataset.size(), "partition_iid");
  std::vector<SampleId> ids;
  for (const auto& s : dataset.samples) ids.push_back(s.id);
  Rng rng = make_stream(seed, "partition");
  std::shuffle(ids.begin(), ids.end(), rng);
  PartitionPlan plan;
  plan.scheme = PartitionScheme::kIid;
  plan.clients.resize(n);
  for (std::size_t i = 0; i < ids.size(); ++i) plan.clients[i % n].push_back(ids[i]);
  detail::finish(plan);
  return plan;
}

/// Low-quality shares q ~ Dirichlet(beta) ("dirichlet" stream), equal client
/// sizes topped up with clean samples. A client whose share exceeds its size
/// is capped and the overflow goes to the clients with the largest shares
/// that still have room.
inline PartitionPlan partition_niid1(const LabeledDataset& dataset, std::size_t n, double beta, std::uint64_t seed) {
  detail::check_clients(n, dataset.size(), "partition_niid1");
  if (!(beta > 0.0)) throw ConfigError("federation", "partition_niid1", "beta must be > 0 (federation.beta)");
  std::vector<SampleId> low, clean;
  detail::split_by_quality(dataset, low, clean);
  Rng shuffle_rng = make_stream(seed, "partition");
  std::shuffle(low.begin(), low.end(), shuffle_rng);
  std::shuffle(clean.begin(), clean.end(), shuffle_rng);

  PartitionPlan plan;
  plan.scheme = PartitionScheme::kNiid1;
  plan.beta = beta;
  plan.proportions.resize(n);
  Rng rng = make_stream(seed, "dirichlet");
  std::gamma_distribution<double> gamma(beta, 1.0);
  double sum = 0.0;
  for (auto& q : plan.proportions) sum += (q = gamma(rng));
  if (sum > 0.0)
    for (auto& q : plan.proportions) q /= sum;
  else
    std::fill(plan.proportions.begin(), plan.proportions.end(), 1.0 / static_cast<double>(n));

  const auto sizes = detail::equal_sizes(dataset.size(), n);
  const double total_low = static_cast<double>(low.size());
  std::vector<std::size_t> count(n);
  std::vector<double> rem(n);
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double exact = plan.proportions[k] * total_low;
    count[k] = static_cast<std::size_t>(std::floor(exact));
    rem[k] = exact - static_cast<double>(count[k]);
    assigned += count[k];
  }
  std::vector<std::size_t> by_rem(n), by_share(n);
  std::iota(by_rem.begin(), by_rem.end(), std::size_t{0});
  by_share = by_rem;
  std::stable_sort(by_rem.begin(), by_rem.end(), [&](auto a, auto b) { return rem[a] > rem[b]; });
  for (std::size_t i = 0; assigned < low.size(); i = (i + 1) % n, ++assigned) ++count[by_rem[i]];

  std::stable_sort(by_share.begin(), by_share.end(),
                   [&](auto a, auto b) { return plan.proportions[a] > plan.proportions[b]; });
  std::size_t overflow = 0;
  for (std::size_t k = 0; k < n; ++k)
    if (count[k] > sizes[k]) overflow += count[k] - sizes[k], count[k] = sizes[k];
  while (overflow > 0) {
    bool placed = false;
    for (std::size_t k : by_share)
      if (overflow > 0 && count[k] < sizes[k]) ++count[k], --overflow, placed = true;
    if (!placed) break;
  }
  std::size_t clean_needed = 0;
  for (std::size_t k = 0; k < n; ++k) clean_needed += sizes[k] - count[k];
  if (overflow > 0 || clean_needed > clean.size())
    throw ConfigError("federation", "partition_niid1",
                      "insufficient clean samples to equalize client sizes: deficit of " +
                          std::to_string(clean_needed > clean.size() ? clean_needed - clean.size() : overflow));

  plan.clients.resize(n);
  std::size_t li = 0, ci = 0;
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t j = 0; j < count[k]; ++j) plan.clients[k].push_back(low[li++]);
    for (std::size_t j = count[k]; j < sizes[k]; ++j) plan.clients[k].push_back(clean[ci++]);
  }
  detail::finish(plan);
  return plan;
}

/// Largest equal client size for which the NIID-2 demand can be met.
inline std::size_t max_feasible_niid2_size(const LabeledDataset& dataset, std::size_t n) {
  if (n < 2 || n % 2 != 0) throw ConfigError("federation", "partition_niid2", "NIID-2 needs an even number of clients");
  const std::size_t low = dataset.low_quality_count();
  const std::size_t clean = dataset.size() - low;
  for (std::size_t size = dataset.size() / n; size > 0; --size) {
    const auto [need_low, need_clean] = detail::niid2_demand(n, size);
    if (need_low <= low && need_clean <= clean) return size;
  }
  throw ConfigError("federation", "partition_niid2", "dataset cannot supply any NIID-2 client");
}

/// First half of the clients holds 70% low-quality local data, second half
/// 90%, all with `client_size` samples (default: |dataset| / n). Samples that
/// are not needed stay unassigned.
inline PartitionPlan partition_niid2(const LabeledDataset& dataset, std::size_t n, std::uint64_t seed,
                                     std::optional<std::size_t> client_size = std::nullopt) {
  if (n < 2 || n % 2 != 0)
    throw ConfigError("federation", "partition_niid2", "NIID-2 needs an even number of clients (federation.clients)");
  detail::check_clients(n, dataset.size(), "partition_niid2");
  const std::size_t size = client_size.value_or(dataset.size() / n);
  if (size < 1) throw ConfigError("federation", "partition_niid2", "client size must be >= 1");
  std::vector<SampleId> low, clean;
  detail::split_by_quality(dataset, low, clean);
  const auto [need_low, need_clean] = detail::niid2_demand(n, size);
  if (need_low > low.size())
    throw ConfigError("federation", "partition_niid2",
                      "mixture cannot supply the demanded low-quality volume: need " + std::to_string(need_low) +
                          ", have " + std::to_string(low.size()));
  if (need_clean > clean.size())
    throw ConfigError("federation", "partition_niid2",
                      "mixture cannot supply the demanded clean volume: need " + std::to_string(need_clean) +
                          ", have " + std::to_string(clean.size()));
  Rng rng = make_stream(seed, "niid2");
  std::shuffle(low.begin(), low.end(), rng);
  std::shuffle(clean.begin(), clean.end(), rng);

  PartitionPlan plan;
  plan.scheme = PartitionScheme::kNiid2;
  plan.clients.resize(n);
  std::size_t li = 0, ci = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double share = k < n / 2 ? kNiid2FirstHalf : kNiid2SecondHalf;
    const auto nl = static_cast<std::size_t>(std::llround(share * static_cast<double>(size)));
    for (std::size_t j = 0; j < nl; ++j) plan.clients[k].push_back(low[li++]);
    for (std::size_t j = nl; j < size; ++j) plan.clients[k].push_back(clean[ci++]);
  }
  detail::finish(plan);
  return plan;
}

// ---------------------------------------------------------------------------
// Message trace

enum class Direction : std::uint8_t { kServerToClient, kClientToServer };

enum class PayloadKind : std::uint8_t {
  kBaseModel,       // frozen base + initial adapter, sent once
  kValidationSet,   // public validation samples (server-owned)
  kAdapter,         // adapter parameters, either direction
  kThreshold,       // global quality threshold
  kSelectionParams, // known low-quality proportion for proportion-based selection
  kScores,          // per-sample quality scores
  kClientSamples,   // raw client data; the protocol never produces this
  kMetadata,        // counts and flags
};

inline std::string_view to_string(Direction d) { return d == Direction::kServerToClient ? "server->client" : "client->server"; }

inline std::string_view to_string(PayloadKind k) {
  switch (k) {
    case PayloadKind::kBaseModel: return "base_model";
    case PayloadKind::kValidationSet: return "validation_set";
    case PayloadKind::kAdapter: return "adapter";
    case PayloadKind::kThreshold: return "threshold";
    case PayloadKind::kSelectionParams: return "selection_params";
    case PayloadKind::kScores: return "scores";
    case PayloadKind::kClientSamples: return "client_samples";
    case PayloadKind::kMetadata: return "metadata";
  }
  return "unknown";
}

struct Message {
  std::size_t round = 0;  // 0 for Phase I
  Direction direction = Direction::kServerToClient;
  std::size_t client = 0;
  PayloadKind kind = PayloadKind::kMetadata;
  std::size_t bytes = 0;
};

class MessageTrace {
 public:
  void record(const Message& m) { messages_.push_back(m); }
  const std::vector<Message>& messages() const { return messages_; }

  std::size_t count(PayloadKind kind, std::optional<Direction> dir = std::nullopt) const {
    return static_cast<std::size_t>(std::count_if(messages_.begin(), messages_.end(), [&](const Message& m) {
      return m.kind == kind && (!dir || m.direction == *dir);
    }));
  }

  void write(std::ostream& out) const {
    out << "seq,round,direction,client,payload,bytes\n";
    for (std::size_t i = 0; i < messages_.size(); ++i) {
      const auto& m = messages_[i];
      out << i << ',' << m.round << ',' << to_string(m.direction) << ',' << m.client << ',' << to_string(m.kind)
          << ',' << m.bytes << '\n';
    }
  }

 private:
  std::vector<Message> messages_;
};

inline std::size_t payload_bytes(std::span<const Sample> samples) {
  std::size_t b = 0;
  for (const auto& s : samples) b += 8 + sizeof(TokenId) * (s.question.size() + s.answer.size());
  return b;
}

inline std::size_t payload_bytes(const ModelParams& p) {
  return 8 * static_cast<std::size_t>(p.embedding.size() + p.input_proj.size() + p.bias.size() + p.base_out.size() +
                                      p.adapter_a.size() + p.adapter_b.size());
}

// ---------------------------------------------------------------------------
// Protocol state

struct FLConfig {
  std::size_t num_clients = 8;
  std::size_t rounds = 50;
  std::size_t local_steps = 10;
  std::size_t batch_size = 16;
  double learning_rate = 0.5;
  double participation = 1.0;
  ScoringConfig scoring;
  SelectionPrinciple selection = SelectionPrinciple::kAnchorThreshold;
  std::optional<double> selection_proportion;  // q for proportion/quantile selection
  std::size_t anchors = 10;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_clients < 1) throw ConfigError("federation", "config", "clients must be >= 1 (federation.clients)");
    if (rounds < 1) throw ConfigError("federation", "config", "rounds must be >= 1 (federation.rounds)");
    if (local_steps < 1) throw ConfigError("federation", "config", "local_steps must be >= 1 (federation.local_steps)");
    if (batch_size < 1) throw ConfigError("federation", "config", "batch_size must be >= 1 (federation.batch_size)");
    if (!(participation > 0.0 && participation <= 1.0))
      throw ConfigError("federation", "config", "participation must lie in (0, 1] (federation.participation)");
    if (anchors < 1) throw ConfigError("federation", "config", "anchor count must be >= 1 (selection.anchors)");
    scoring.validate();
  }
};

struct ClientState {
  std::size_t id = 0;
  std::vector<Sample> data;      // D_k
  std::vector<Sample> filtered;  // D'_k, subset of D_k
  bool filter_done = false;
  bool excluded = false;  // nothing survived filtering
  AdapterVector adapter;
};

struct ServerState {
  ModelParams global;
  std::vector<Sample> validation;
  std::vector<Sample> anchors;
  std::optional<double> threshold;
  std::size_t round = 0;
};

struct RoundRecord {
  std::size_t round = 0;
  std::vector<std::size_t> participants;
  std::vector<double> weights;
  double validation_perplexity = 0.0;
  std::size_t kept = 0;     // cumulative over rounds, summed over participants
  std::size_t dropped = 0;  // idem
  double wall_seconds = 0.0;
};

inline std::vector<ClientState> make_clients(const LabeledDataset& dataset, const PartitionPlan& plan) {
  std::unordered_map<SampleId, const Sample*> by_id;
  for (const auto& s : dataset.samples) by_id.emplace(s.id, &s);
  std::vector<ClientState> clients(plan.num_clients());
  for (std::size_t k = 0; k < plan.num_clients(); ++k) {
    clients[k].id = k;
    for (SampleId id : plan.clients[k]) {
      auto it = by_id.find(id);
      if (it == by_id.end())
        throw DataError("federation", "make_clients", "partition refers to unknown sample " + std::to_string(id));
      clients[k].data.push_back(*it->second);
    }
  }
  return clients;
}

// ---------------------------------------------------------------------------
// Phase I

struct PhaseOneResult {
  std::optional<double> threshold;                // anchor threshold
  std::vector<std::vector<ScoreRecord>> scores;   // per client, ordered by sample id
  std::optional<ModelParams> reference;           // influence-scoring model
};

namespace detail {

inline void check_anchor_isolation(const ServerState& server, std::span<const ClientState> clients) {
  std::unordered_set<SampleId> anchor_ids;
  for (const auto& a : server.anchors) anchor_ids.insert(a.id);
  for (const auto& c : clients)
    for (const auto& s : c.data)
      if (anchor_ids.contains(s.id) || anchor_ids.contains(question_source_id(s.id)))
        throw ProtocolError("federation", "phase1_quality_control",
                            "anchor sample " + std::to_string(s.id) + " also held by client " + std::to_string(c.id));
}

}  // namespace detail

/// Every client scores its local data with the initial global model; the
/// server averages its anchor scores into the global threshold and
/// broadcasts it. Clients never upload anything here.
inline PhaseOneResult phase1_quality_control(ServerState& server, std::span<ClientState> clients,
                                             const ScoringConfig& scoring, std::uint64_t seed, MessageTrace& trace) {
  if (server.anchors.empty()) throw ProtocolError("federation", "phase1_quality_control", "server holds no anchors");
  detail::check_anchor_isolation(server, clients);

  PhaseOneResult out;
  const std::size_t model_bytes = payload_bytes(server.global);
  const std::size_t val_bytes = payload_bytes(server.validation);
  for (const auto& c : clients) {
    trace.record({0, Direction::kServerToClient, c.id, PayloadKind::kBaseModel, model_bytes});
    trace.record({0, Direction::kServerToClient, c.id, PayloadKind::kValidationSet, val_bytes});
  }
  if (scoring.method == ScoringMethod::kInfluence) {
    out.reference = influence_reference_model(server.global, server.validation, scoring, seed);
    for (const auto& c : clients)
      trace.record({0, Direction::kServerToClient, c.id, PayloadKind::kAdapter, 8 * server.global.config.adapter_dim()});
  }

  // Clients draw ICL demonstrations from the public validation set, which
  // the server shares with them.
  ScoringContext ctx;
  ctx.model = &server.global;
  ctx.reference = out.reference ? &*out.reference : nullptr;
  ctx.validation = server.validation;
  ctx.demonstration_pool = server.validation;
  ctx.config = scoring;
  ctx.seed = seed;

  for (const auto& c : clients) {
    try {
      out.scores.push_back(score_samples(ctx, c.data));
    } catch (const Error& e) {
      rethrow_with_context(e, "federation", "phase1_quality_control", "client " + std::to_string(c.id));
    }
  }

  out.threshold = compute_anchor_threshold(ctx, server.anchors);
  server.threshold = out.threshold;
  for (const auto& c : clients) trace.record({0, Direction::kServerToClient, c.id, PayloadKind::kThreshold, 8});
  return out;
}

/// D'_k = {z in D_k : quality(z) >= tau}. Ties are kept.
inline ClientState filter_local(ClientState client, double tau, std::span<const ScoreRecord> scores) {
  std::unordered_map<SampleId, double> quality;
  for (const auto& r : scores) quality.emplace(r.sample_id, r.quality);
  client.filtered.clear();
  for (const auto& s : client.data) {
    auto it = quality.find(s.id);
    if (it == quality.end())
      throw ProtocolError("federation", "filter_local",
                          "client " + std::to_string(client.id) + " has no score for sample " + std::to_string(s.id));
    if (it->second >= tau) client.filtered.push_back(s);
  }
  client.filter_done = true;
  client.excluded = client.filtered.empty();
  return client;
}

namespace detail {

inline void keep_ids(ClientState& c, const KeptSet& kept) {
  std::unordered_set<SampleId> keep(kept.begin(), kept.end());
  c.filtered.clear();
  for (const auto& s : c.data)
    if (keep.contains(s.id)) c.filtered.push_back(s);
  c.filter_done = true;
  c.excluded = c.filtered.empty();
}

}  // namespace detail

/// Applies a selection principle to every client given Phase I results.
/// Only the global-quantile principle uploads scores to the server.
inline void apply_selection(SelectionPrinciple principle, std::span<ClientState> clients, const PhaseOneResult& phase1,
                            std::optional<double> proportion, MessageTrace& trace) {
  auto need_q = [&]() {
    if (!proportion)
      throw ConfigError("selection", "apply_selection",
                        std::string(to_string(principle)) + " selection needs a known proportion (selection.proportion)");
    return *proportion;
  };
  auto need_scores = [&]() {
    if (phase1.scores.size() != clients.size())
      throw ProtocolError("selection", "apply_selection", "Phase I scores missing for some clients");
  };
  switch (principle) {
    case SelectionPrinciple::kNone:
      for (auto& c : clients) {
        c.filtered = c.data;
        c.filter_done = true;
        c.excluded = c.filtered.empty();
      }
      break;
    case SelectionPrinciple::kOracle:
      for (auto& c : clients) {
        c.filtered.clear();
        for (const auto& s : c.data)
          if (s.is_clean()) c.filtered.push_back(s);
        c.filter_done = true;
        c.excluded = c.filtered.empty();
      }
      break;
    case SelectionPrinciple::kAnchorThreshold:
      need_scores();
      if (!phase1.threshold) throw ProtocolError("selection", "apply_selection", "no anchor threshold");
      for (std::size_t k = 0; k < clients.size(); ++k)
        clients[k] = filter_local(std::move(clients[k]), *phase1.threshold, phase1.scores[k]);
      break;
    case SelectionPrinciple::kByProportion: {
      need_scores();
      const double q = need_q();
      for (std::size_t k = 0; k < clients.size(); ++k) {
        trace.record({0, Direction::kServerToClient, clients[k].id, PayloadKind::kSelectionParams, 8});
        detail::keep_ids(clients[k], select_by_proportion(phase1.scores[k], q));
      }
      break;
    }
    case SelectionPrinciple::kGlobalQuantile: {
      need_scores();
      const double q = need_q();
      for (std::size_t k = 0; k < clients.size(); ++k)
        trace.record({0, Direction::kClientToServer, clients[k].id, PayloadKind::kScores,
                      16 * phase1.scores[k].size()});
      const double threshold = global_quantile_threshold(phase1.scores, q);
      for (std::size_t k = 0; k < clients.size(); ++k) {
        trace.record({0, Direction::kServerToClient, clients[k].id, PayloadKind::kThreshold, 8});
        detail::keep_ids(clients[k], select_by_anchor(phase1.scores[k], threshold));
      }
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// Phase II

/// theta = sum_k p_k theta_k, reduced in the given (client-id) order.
inline AdapterVector aggregate(std::span<const AdapterVector> adapters, std::span<const double> weights) {
  if (adapters.empty()) throw ProtocolError("federation", "aggregate", "no adapters to aggregate");
  if (adapters.size() != weights.size())
    throw ProtocolError("federation", "aggregate", "adapter and weight counts differ");
  double sum = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw ProtocolError("federation", "aggregate", "weights must be non-negative");
    sum += w;
  }
  if (std::abs(sum - 1.0) > 1e-12)
    throw ProtocolError("federation", "aggregate", "weights sum to " + std::to_string(sum) + ", not 1");
  const std::size_t dim = adapters.front().size();
  AdapterVector out;
  out.values = Vector::Zero(static_cast<Eigen::Index>(dim));
  for (std::size_t k = 0; k < adapters.size(); ++k) {
    if (adapters[k].size() != dim) throw ProtocolError("federation", "aggregate", "adapter dimensions differ");
    out.values += weights[k] * adapters[k].values;
  }
  return out;
}

/// Seed of a client's local training call in a given round.
inline std::uint64_t local_seed(std::uint64_t seed, std::size_t round, std::size_t client) {
  return stream_seed(seed, "local", {round, client});
}

inline std::vector<std::size_t> select_participants(std::span<const ClientState> clients, double participation,
                                                    std::size_t round, std::uint64_t seed) {
  std::vector<std::size_t> eligible;
  for (std::size_t k = 0; k < clients.size(); ++k)
    if (!clients[k].excluded) eligible.push_back(k);
  const auto want = static_cast<std::size_t>(std::ceil(participation * static_cast<double>(clients.size()) - 1e-9));
  if (want >= eligible.size()) return eligible;
  Rng rng = make_stream(seed, "rounds", {round});
  std::shuffle(eligible.begin(), eligible.end(), rng);
  eligible.resize(std::max<std::size_t>(want, 1));
  std::sort(eligible.begin(), eligible.end());
  return eligible;
}

struct FederatedResult {
  std::vector<RoundRecord> rounds;
  ModelParams final_model;
};

/// FedAvg over the adapter with p_k proportional to |D'_k| among the round's
/// participants. Clients must have completed filtering (or explicitly taken
/// their full data).
inline FederatedResult run_federated(const FLConfig& config, ServerState& server, std::vector<ClientState>& clients,
                                     MessageTrace& trace) {
  config.validate();
  if (clients.empty()) throw ProtocolError("federation", "run_federated", "no clients");
  for (const auto& c : clients)
    if (!c.filter_done)
      throw ProtocolError("federation", "run_federated", "client " + std::to_string(c.id) + " has not filtered its data");
  if (std::all_of(clients.begin(), clients.end(), [](const ClientState& c) { return c.excluded; }))
    throw ProtocolError("federation", "run_federated", "every client is empty after filtering");

  FederatedResult result;
  const std::size_t adapter_bytes = 8 * server.global.config.adapter_dim();
  std::size_t kept_total = 0, dropped_total = 0;
  for (std::size_t r = 1; r <= config.rounds; ++r) {
    const auto start = std::chrono::steady_clock::now();
    server.round = r;
    const auto participants = select_participants(clients, config.participation, r, config.seed);
    const AdapterVector global_adapter = flatten_adapter(server.global);

    std::vector<AdapterVector> updates;
    std::vector<double> weights;
    double total = 0.0;
    for (std::size_t k : participants) {
      ClientState& c = clients[k];
      trace.record({r, Direction::kServerToClient, c.id, PayloadKind::kAdapter, adapter_bytes});
      c.adapter = global_adapter;
      ModelParams local;
      try {
        local = local_train(with_adapter(server.global, c.adapter), c.filtered, config.local_steps, config.batch_size,
                            config.learning_rate, local_seed(config.seed, r, c.id));
      } catch (const NumericalError& e) {
        throw NumericalError("federation", "run_federated",
                             "round " + std::to_string(r) + ", client " + std::to_string(c.id) + ": " + e.what(),
                             e.step());
      }
      c.adapter = flatten_adapter(local);
      trace.record({r, Direction::kClientToServer, c.id, PayloadKind::kAdapter, adapter_bytes});
      trace.record({r, Direction::kClientToServer, c.id, PayloadKind::kMetadata, 8});
      updates.push_back(c.adapter);
      weights.push_back(static_cast<double>(c.filtered.size()));
      total += static_cast<double>(c.filtered.size());
      kept_total += c.filtered.size();
      dropped_total += c.data.size() - c.filtered.size();
    }
    for (double& w : weights) w /= total;
    server.global = with_adapter(std::move(server.global), aggregate(updates, weights));

    RoundRecord rec;
    rec.round = r;
    for (std::size_t k : participants) rec.participants.push_back(clients[k].id);
    rec.weights = weights;
    rec.validation_perplexity = validation_perplexity(server.global, server.validation);
    rec.kept = kept_total;
    rec.dropped = dropped_total;
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.rounds.push_back(std::move(rec));
  }
  result.final_model = server.global;
  return result;
}

}  // namespace fedqc
