#pragma once

// End-to-end experiments composed from one ExperimentConfig: corpus, base
// model, partition, Phase I scoring, selection, FedAvg, and the reports.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedqc/config.hpp"
#include "fedqc/corpus.hpp"
#include "fedqc/evaluation.hpp"
#include "fedqc/federation.hpp"
#include "fedqc/model.hpp"
#include "fedqc/scoring.hpp"
#include "fedqc/selection.hpp"

namespace fedqc {

inline constexpr int kReportVersion = 1;

// Disjoint id ranges of the sample pools (all below kDerivedIdOffset).
inline constexpr SampleId kTrainIdBase = 0;
inline constexpr SampleId kValidationIdBase = 100'000'000;
inline constexpr SampleId kAnchorIdBase = 200'000'000;
inline constexpr SampleId kPretrainIdBase = 300'000'000;

struct Corpus {
  World world;
  Vocab vocab;
  std::vector<Sample> clean_train;  // before corruption
  LabeledDataset train;
  std::vector<Sample> validation;
  std::vector<Sample> anchors;
  std::vector<Sample> pretrain;
};

inline Corpus build_corpus(const ExperimentConfig& cfg) {
  const auto& cc = cfg.corpus;
  Corpus c;
  c.world = generate_world(cfg.seed, cc.entities, cc.attributes, cc.value_pool);
  c.vocab = Vocab::for_world(c.world);
  const auto pool_seed = [&](std::uint64_t k) { return stream_seed(cfg.seed, "pool", {k}); };
  c.clean_train = synthesize_samples(c.world, c.vocab, cc.train_samples, pool_seed(0), kTrainIdBase);
  c.validation = synthesize_samples(c.world, c.vocab, cc.validation_samples, pool_seed(1), kValidationIdBase);
  c.anchors = synthesize_samples(c.world, c.vocab, cfg.selection.anchors, pool_seed(2), kAnchorIdBase);
  c.pretrain = synthesize_samples(c.world, c.vocab, cc.pretrain_samples, pool_seed(3), kPretrainIdBase);
  c.train = build_mixture(c.clean_train, cc.mixture, cfg.seed, cc.corruption);
  return c;
}

inline ModelConfig model_config(const ExperimentConfig& cfg, const Vocab& vocab) {
  ModelConfig m;
  m.vocab_size = vocab.size();
  m.embed_dim = cfg.model.embed_dim;
  m.context_window = cfg.model.context_window;
  m.hidden_dim = cfg.model.hidden_dim;
  m.adapter_rank = cfg.model.adapter_rank;
  m.seed = cfg.seed;
  return m;
}

inline ModelParams build_base_model(const ExperimentConfig& cfg, const Corpus& corpus) {
  return pretrain_base(model_config(cfg, corpus.vocab), corpus.pretrain, cfg.model.pretrain, cfg.seed);
}

inline FLConfig fl_config(const ExperimentConfig& cfg) {
  FLConfig f;
  f.num_clients = cfg.federation.clients;
  f.rounds = cfg.federation.rounds;
  f.local_steps = cfg.federation.local_steps;
  f.batch_size = cfg.federation.batch_size;
  f.learning_rate = cfg.federation.learning_rate;
  f.participation = cfg.federation.participation;
  f.scoring = cfg.scoring;
  f.selection = cfg.selection.principle;
  f.selection_proportion = cfg.selection.proportion;
  f.anchors = cfg.selection.anchors;
  f.seed = cfg.seed;
  return f;
}

inline PartitionPlan make_partition(const ExperimentConfig& cfg, const LabeledDataset& data) {
  const auto& f = cfg.federation;
  switch (f.partition) {
    case PartitionScheme::kIid: return partition_iid(data, f.clients, cfg.seed);
    case PartitionScheme::kNiid1: return partition_niid1(data, f.clients, f.beta, cfg.seed);
    case PartitionScheme::kNiid2:
      return partition_niid2(data, f.clients, cfg.seed,
                             f.niid2_client_size ? *f.niid2_client_size : max_feasible_niid2_size(data, f.clients));
  }
  throw ConfigError("pipeline", "make_partition", "unknown partition scheme (federation.partition)");
}

inline bool needs_scores(SelectionPrinciple p) {
  return p == SelectionPrinciple::kAnchorThreshold || p == SelectionPrinciple::kByProportion ||
         p == SelectionPrinciple::kGlobalQuantile;
}

struct ClientSelection {
  std::size_t client = 0;
  std::size_t size = 0;
  FilterConfusion confusion;
  bool excluded = false;
};

struct RunOutcome {
  PartitionPlan plan;
  PhaseOneResult phase1;
  std::optional<double> selection_proportion;
  std::vector<ClientSelection> selection;
  FilterConfusion confusion;  // summed over clients
  double initial_perplexity = 0.0;
  FederatedResult federated;
  MessageTrace trace;
};

/// Partition, score, select and train. Selection-only runs (`train` false)
/// stop after filtering.
inline RunOutcome run_pipeline(const ExperimentConfig& cfg, const Corpus& corpus, const ModelParams& base,
                               bool train = true) {
  RunOutcome out;
  const FLConfig fl = fl_config(cfg);
  fl.validate();
  out.plan = make_partition(cfg, corpus.train);
  auto clients = make_clients(corpus.train, out.plan);

  ServerState server;
  server.global = base;
  server.validation = corpus.validation;
  server.anchors = corpus.anchors;

  const SelectionPrinciple principle = cfg.selection.principle;
  if (needs_scores(principle)) out.phase1 = phase1_quality_control(server, clients, cfg.scoring, cfg.seed, out.trace);
  out.selection_proportion = cfg.selection.proportion;
  if (!out.selection_proportion && (principle == SelectionPrinciple::kByProportion ||
                                    principle == SelectionPrinciple::kGlobalQuantile))
    out.selection_proportion = static_cast<double>(corpus.train.low_quality_count()) /
                               static_cast<double>(corpus.train.size());
  apply_selection(principle, clients, out.phase1, out.selection_proportion, out.trace);

  for (const auto& c : clients) {
    KeptSet kept;
    for (const auto& s : c.filtered) kept.push_back(s.id);
    ClientSelection sel{c.id, c.data.size(), filter_confusion(c.data, kept), c.excluded};
    out.confusion += sel.confusion;
    out.selection.push_back(sel);
  }

  out.initial_perplexity = validation_perplexity(base, corpus.validation);
  if (train) out.federated = run_federated(fl, server, clients, out.trace);
  return out;
}

// ---------------------------------------------------------------------------
// Reports

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// Round log: one CSV line per round.
inline std::string round_log_csv(const FederatedResult& fed) {
  std::ostringstream out;
  out << "round,participants,weights,validation_perplexity,cumulative_kept,cumulative_dropped\n";
  for (const auto& r : fed.rounds) {
    out << r.round << ',';
    for (std::size_t i = 0; i < r.participants.size(); ++i) out << (i ? ";" : "") << r.participants[i];
    out << ',';
    for (std::size_t i = 0; i < r.weights.size(); ++i) out << (i ? ";" : "") << format_double(r.weights[i]);
    out << ',' << format_double(r.validation_perplexity) << ',' << r.kept << ',' << r.dropped << '\n';
  }
  return out.str();
}

inline nlohmann::ordered_json ratio_json(const Ratio& r) {
  const auto v = r.value();
  return {{"numerator", r.numerator},
          {"denominator", r.denominator},
          {"value", v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr)}};
}

inline nlohmann::ordered_json confusion_json(const FilterConfusion& c) {
  return {{"kept_clean", c.kept_clean},
          {"kept_corrupt", c.kept_corrupt},
          {"dropped_clean", c.dropped_clean},
          {"dropped_corrupt", c.dropped_corrupt},
          {"precision", ratio_json(c.precision())},
          {"recall", ratio_json(c.recall())},
          {"kept_low_quality_proportion", ratio_json(c.kept_low_quality())}};
}

inline nlohmann::ordered_json score_summary_json(std::span<const std::vector<ScoreRecord>> scores,
                                                 std::span<const Sample> samples) {
  std::vector<ScoreRecord> all;
  for (const auto& c : scores) all.insert(all.end(), c.begin(), c.end());
  const auto summary = summarize_scores(all, samples);
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (Provenance p : kAllProvenances) {
    const auto& s = summary[static_cast<std::size_t>(p)];
    j[std::string(to_string(p))] = {
        {"count", s.count}, {"mean", s.mean}, {"stddev", s.stddev}, {"min", s.min}, {"max", s.max}};
  }
  return j;
}

/// Structured report. Contains no timings or output paths, so identical
/// configs give identical bytes wherever they are written.
inline nlohmann::ordered_json run_report(const ExperimentConfig& cfg, const Corpus& corpus, const RunOutcome& run) {
  nlohmann::ordered_json j;
  j["report_version"] = kReportVersion;
  j["config"] = to_json(cfg);
  j["config"].erase("paths");
  j["seed"] = cfg.seed;
  j["dataset"] = {{"size", corpus.train.size()},
                  {"clean", corpus.train.counts[0]},
                  {"cut", corpus.train.counts[1]},
                  {"delete", corpus.train.counts[2]},
                  {"exchange", corpus.train.counts[3]}};
  j["threshold"] = run.phase1.threshold ? nlohmann::ordered_json(*run.phase1.threshold) : nlohmann::ordered_json(nullptr);
  j["selection_proportion"] =
      run.selection_proportion ? nlohmann::ordered_json(*run.selection_proportion) : nlohmann::ordered_json(nullptr);
  auto clients = nlohmann::ordered_json::array();
  for (const auto& s : run.selection)
    clients.push_back({{"client", s.client},
                       {"size", s.size},
                       {"kept", s.confusion.kept()},
                       {"dropped", s.confusion.dropped()},
                       {"excluded", s.excluded},
                       {"kept_low_quality_proportion", ratio_json(s.confusion.kept_low_quality())}});
  j["selection"] = {{"principle", std::string(to_string(cfg.selection.principle))},
                    {"clients", clients},
                    {"confusion", confusion_json(run.confusion)}};
  if (!run.phase1.scores.empty()) {
    j["score_distributions"] = {{"method", std::string(to_string(cfg.scoring.method))},
                                {"by_provenance", score_summary_json(run.phase1.scores, corpus.train.samples)}};
  }
  auto rounds = nlohmann::ordered_json::array();
  for (const auto& r : run.federated.rounds)
    rounds.push_back({{"round", r.round},
                      {"participants", r.participants},
                      {"weights", r.weights},
                      {"validation_perplexity", r.validation_perplexity}});
  j["initial_perplexity"] = run.initial_perplexity;
  j["rounds"] = rounds;
  j["final_perplexity"] = run.federated.rounds.empty() ? nlohmann::ordered_json(nullptr)
                                                        : nlohmann::ordered_json(run.federated.rounds.back().validation_perplexity);
  return j;
}

/// One-row CSV summary of a run.
inline std::string run_summary_csv(const ExperimentConfig& cfg, const RunOutcome& run) {
  std::ostringstream out;
  out << "report_version,seed,partition,method,principle,threshold,kept,dropped,kept_low_quality,"
         "initial_perplexity,final_perplexity\n";
  const auto& c = run.confusion;
  out << kReportVersion << ',' << cfg.seed << ',' << to_string(cfg.federation.partition) << ','
      << to_string(cfg.scoring.method) << ',' << to_string(cfg.selection.principle) << ','
      << (run.phase1.threshold ? format_double(*run.phase1.threshold) : "") << ',' << c.kept() << ',' << c.dropped()
      << ',' << c.kept_corrupt << ',' << format_double(run.initial_perplexity) << ','
      << (run.federated.rounds.empty() ? "" : format_double(run.federated.rounds.back().validation_perplexity))
      << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Sweeps and ablations

struct SweepRow {
  double proportion = 0.0;
  std::uint64_t seed = 0;
  double final_perplexity = 0.0;
};

/// Unfiltered federated runs over corruption proportions (the 10/15/15
/// split rescaled). The base model depends only on the seed and is shared.
inline std::vector<SweepRow> corruption_sweep(const ExperimentConfig& base_cfg, std::span<const double> proportions,
                                              std::span<const std::uint64_t> seeds) {
  for (double p : proportions)
    if (!(p >= 0.0 && p < 1.0)) throw ConfigError("evaluation", "corruption_sweep", "proportions must lie in [0, 1)");
  std::vector<SweepRow> rows;
  for (std::uint64_t seed : seeds) {
    ExperimentConfig cfg = base_cfg;
    cfg.seed = seed;
    cfg.selection.principle = SelectionPrinciple::kNone;
    std::optional<ModelParams> base;
    for (double p : proportions) {
      cfg.corpus.mixture = MixtureFractions::scaled_to(p);
      const Corpus corpus = build_corpus(cfg);
      if (!base) base = build_base_model(cfg, corpus);
      const auto run = run_pipeline(cfg, corpus, *base);
      rows.push_back({p, seed, run.federated.rounds.back().validation_perplexity});
    }
  }
  return rows;
}

inline std::string sweep_csv(std::span<const SweepRow> rows) {
  std::ostringstream out;
  out << "report_version,proportion,seed,final_perplexity\n";
  for (const auto& r : rows)
    out << kReportVersion << ',' << format_double(r.proportion) << ',' << r.seed << ','
        << format_double(r.final_perplexity) << '\n';
  return out.str();
}

struct AblationRow {
  ScoringMethod method = ScoringMethod::kConProb;
  std::uint64_t seed = 0;
  SelectionPrinciple principle = SelectionPrinciple::kAnchorThreshold;
  FilterConfusion confusion;
};

inline constexpr std::array<SelectionPrinciple, 3> kAblationPrinciples = {
    SelectionPrinciple::kByProportion, SelectionPrinciple::kGlobalQuantile, SelectionPrinciple::kAnchorThreshold};

/// Kept-set composition of the three selection principles per (method, seed).
inline std::vector<AblationRow> ablate_selection(const ExperimentConfig& base_cfg, std::span<const ScoringMethod> methods,
                                                 std::span<const std::uint64_t> seeds) {
  std::vector<AblationRow> rows;
  for (std::uint64_t seed : seeds) {
    ExperimentConfig cfg = base_cfg;
    cfg.seed = seed;
    const Corpus corpus = build_corpus(cfg);
    const ModelParams base = build_base_model(cfg, corpus);
    for (ScoringMethod m : methods) {
      cfg.scoring.method = m;
      for (SelectionPrinciple p : kAblationPrinciples) {
        cfg.selection.principle = p;
        const auto run = run_pipeline(cfg, corpus, base, /*train=*/false);
        rows.push_back({m, seed, p, run.confusion});
      }
    }
  }
  return rows;
}

inline std::string ablation_csv(std::span<const AblationRow> rows) {
  std::ostringstream out;
  out << "report_version,method,seed,principle,kept,dropped,kept_low_quality,kept_low_quality_proportion\n";
  for (const auto& r : rows) {
    const auto p = r.confusion.kept_low_quality().value();
    out << kReportVersion << ',' << to_string(r.method) << ',' << r.seed << ',' << to_string(r.principle) << ','
        << r.confusion.kept() << ',' << r.confusion.dropped() << ',' << r.confusion.kept_corrupt << ','
        << (p ? format_double(*p) : "") << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Output

/// Writes through a temporary file and renames it into place, so a reader
/// never sees a partially written file.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("pipeline", "write_file_atomic", "cannot open " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw DataError("pipeline", "write_file_atomic", "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace fedqc
