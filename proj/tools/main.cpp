// fedqc: command line harness for the federated data quality pipeline.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fedqc/pipeline.hpp"

namespace fs = std::filesystem;
using namespace fedqc;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool quiet = false;
};

class Log {
 public:
  explicit Log(bool quiet) : quiet_(quiet) {}
  template <typename... Args>
  void operator()(const char* fmt, Args... args) const {
    if (quiet_) return;
    std::fprintf(stderr, fmt, args...);
    std::fputc('\n', stderr);
  }

 private:
  bool quiet_;
};

ExperimentConfig load_config(const Globals& g) {
  ExperimentConfig cfg;
  if (!g.config_path.empty()) {
    std::ifstream in(g.config_path);
    if (!in) throw ConfigError("cli", "load_config", "cannot open config file " + g.config_path);
    cfg = parse_config(in);
  }
  if (g.seed) cfg.seed = *g.seed;
  if (g.out) cfg.output_dir = *g.out;
  return cfg;
}

std::ifstream open_input(const std::string& path, std::string_view what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cli", "open", "cannot open " + std::string(what) + " " + path);
  return in;
}

std::string dataset_text(std::span<const Sample> samples, const Vocab& vocab) {
  std::ostringstream out;
  write_dataset(out, samples, vocab);
  return out.str();
}

std::string vocab_text(const Vocab& vocab) {
  std::ostringstream out;
  write_vocab(out, vocab);
  return out.str();
}

std::string checkpoint_bytes(const ModelParams& p) {
  std::ostringstream out(std::ios::binary);
  write_checkpoint(out, p);
  return out.str();
}

ModelParams load_or_pretrain(const std::string& checkpoint, const ExperimentConfig& cfg, const Corpus& corpus,
                             const Log& log) {
  if (!checkpoint.empty()) {
    auto in = open_input(checkpoint, "checkpoint");
    ModelParams p = read_checkpoint(in);
    if (p.config.vocab_size != corpus.vocab.size())
      throw DataError("cli", "load_checkpoint",
                      "checkpoint vocabulary size " + std::to_string(p.config.vocab_size) +
                          " does not match the corpus (" + std::to_string(corpus.vocab.size()) + ")");
    return p;
  }
  log("pretraining base model on %zu samples", corpus.pretrain.size());
  return build_base_model(cfg, corpus);
}

LabeledDataset load_dataset(const std::string& path, const Vocab& vocab) {
  auto in = open_input(path, "dataset");
  return read_dataset(in, vocab);
}

template <typename T, typename Parse>
std::vector<T> parse_list(const std::vector<std::string>& items, Parse parse, std::string_view what) {
  std::vector<T> out;
  for (const auto& s : items) {
    auto v = parse(s);
    if (!v) throw ConfigError("cli", "arguments", "invalid " + std::string(what) + " '" + s + "'");
    out.push_back(*v);
  }
  return out;
}

void print_json(const nlohmann::ordered_json& j, bool quiet) {
  if (!quiet) std::cout << j.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated data quality control: synthetic corpora, scoring, filtering and FedAvg runs"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "Experiment config (JSON)");
  app.add_option("--seed", g.seed, "Override the experiment seed");
  app.add_option("--out", g.out, "Output directory (overrides paths.output)");
  app.add_flag("--quiet", g.quiet, "Suppress progress and summaries");
  app.fallthrough();

  auto* gen = app.add_subcommand("gen-data", "Generate the world, vocabulary and sample pools");

  auto* corrupt = app.add_subcommand("corrupt", "Apply the configured corruption mixture to a clean dataset");
  std::string corrupt_input, corrupt_vocab;
  corrupt->add_option("--input", corrupt_input, "Clean dataset (JSON lines)")->required();
  corrupt->add_option("--vocab", corrupt_vocab, "Vocabulary file")->required();

  auto* pretrain = app.add_subcommand("pretrain", "Pretrain and freeze the base model");

  auto* score = app.add_subcommand("score", "Score samples with the initial model");
  std::string score_ckpt, score_data, score_method;
  score->add_option("--checkpoint", score_ckpt, "Base model checkpoint (default: pretrain from config)");
  score->add_option("--data", score_data, "Dataset to score (default: the configured training mixture)");
  score->add_option("--method", score_method, "ppl, conprob, influence or icl (overrides scoring.method)");

  auto* filter = app.add_subcommand("filter", "Select samples from a score dump");
  std::string filter_scores, filter_principle = "anchor", filter_ckpt;
  std::optional<double> filter_threshold, filter_q;
  filter->add_option("--scores", filter_scores, "Score dump (CSV)")->required();
  filter->add_option("--principle", filter_principle, "anchor, proportion or quantile");
  filter->add_option("--threshold", filter_threshold, "Anchor threshold (default: computed from the anchors)");
  filter->add_option("--proportion", filter_q, "Known low-quality proportion for proportion/quantile");
  filter->add_option("--checkpoint", filter_ckpt, "Base model checkpoint for the anchor threshold");

  auto* run = app.add_subcommand("run", "Full pipeline: partition, score, filter, FedAvg");
  std::string run_ckpt;
  run->add_option("--checkpoint", run_ckpt, "Base model checkpoint (default: pretrain from config)");

  auto* ablate = app.add_subcommand("ablate-selection", "Kept-set composition of the selection principles");
  std::vector<std::string> ablate_methods = {"ppl", "conprob", "icl"};
  std::vector<std::uint64_t> ablate_seeds = {1, 2, 3, 4, 5};
  ablate->add_option("--methods", ablate_methods, "Scoring methods")->delimiter(',');
  ablate->add_option("--seeds", ablate_seeds, "Seeds")->delimiter(',');

  auto* sweep = app.add_subcommand("sweep", "Unfiltered runs over corruption proportions");
  std::vector<double> sweep_props = {0.0, 0.2, 0.4};
  std::vector<std::uint64_t> sweep_seeds = {1, 2, 3};
  sweep->add_option("--proportions", sweep_props, "Low-quality proportions")->delimiter(',');
  sweep->add_option("--seeds", sweep_seeds, "Seeds")->delimiter(',');

  auto* evaluate = app.add_subcommand("evaluate", "Validation perplexity of a checkpoint, score distributions");
  std::string eval_ckpt, eval_scores, eval_data;
  evaluate->add_option("--checkpoint", eval_ckpt, "Model checkpoint");
  evaluate->add_option("--scores", eval_scores, "Score dump to summarize per provenance");
  evaluate->add_option("--data", eval_data, "Evaluation set (default: the configured validation split)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return static_cast<int>(ExitCode::kConfig);
  }

  const Log log(g.quiet);
  try {
    const ExperimentConfig cfg = load_config(g);
    const fs::path out = cfg.output_dir;

    if (*gen) {
      const Corpus corpus = build_corpus(cfg);
      write_file_atomic(out / "vocab.txt", vocab_text(corpus.vocab));
      write_file_atomic(out / "clean_train.jsonl", dataset_text(corpus.clean_train, corpus.vocab));
      write_file_atomic(out / "dataset.jsonl", dataset_text(corpus.train.samples, corpus.vocab));
      write_file_atomic(out / "validation.jsonl", dataset_text(corpus.validation, corpus.vocab));
      write_file_atomic(out / "anchors.jsonl", dataset_text(corpus.anchors, corpus.vocab));
      write_file_atomic(out / "pretrain.jsonl", dataset_text(corpus.pretrain, corpus.vocab));
      const auto& c = corpus.train.counts;
      print_json({{"samples", corpus.train.size()},
                  {"clean", c[0]},
                  {"cut", c[1]},
                  {"delete", c[2]},
                  {"exchange", c[3]},
                  {"vocab_size", corpus.vocab.size()}},
                 g.quiet);
    } else if (*corrupt) {
      auto vin = open_input(corrupt_vocab, "vocabulary");
      const Vocab vocab = read_vocab(vin);
      const auto clean = load_dataset(corrupt_input, vocab);
      const auto mixed = build_mixture(clean.samples, cfg.corpus.mixture, cfg.seed, cfg.corpus.corruption);
      write_file_atomic(out / "dataset.jsonl", dataset_text(mixed.samples, vocab));
      print_json({{"samples", mixed.size()}, {"low_quality", mixed.low_quality_count()}}, g.quiet);
    } else if (*pretrain) {
      const Corpus corpus = build_corpus(cfg);
      log("pretraining base model on %zu samples", corpus.pretrain.size());
      const ModelParams base = build_base_model(cfg, corpus);
      write_file_atomic(out / "base.ckpt", checkpoint_bytes(base));
      write_file_atomic(out / "vocab.txt", vocab_text(corpus.vocab));
      print_json({{"validation_perplexity", validation_perplexity(base, corpus.validation)}}, g.quiet);
    } else if (*score) {
      ExperimentConfig c = cfg;
      if (!score_method.empty()) {
        auto m = parse_scoring_method(score_method);
        if (!m) throw ConfigError("cli", "score", "unknown scoring method '" + score_method + "'");
        c.scoring.method = *m;
      }
      const Corpus corpus = build_corpus(c);
      const ModelParams base = load_or_pretrain(score_ckpt, c, corpus, log);
      const LabeledDataset data = score_data.empty() ? corpus.train : load_dataset(score_data, corpus.vocab);
      std::optional<ModelParams> ref;
      if (c.scoring.method == ScoringMethod::kInfluence)
        ref = influence_reference_model(base, corpus.validation, c.scoring, c.seed);
      ScoringContext ctx{&base, ref ? &*ref : nullptr, corpus.validation, corpus.validation, c.scoring, c.seed};
      log("scoring %zu samples with %s", data.size(), std::string(to_string(c.scoring.method)).c_str());
      const auto records = score_samples(ctx, data.samples);
      std::ostringstream dump;
      write_score_dump(dump, records, data.samples);
      write_file_atomic(out / "scores.csv", dump.str());
      const std::vector<std::vector<ScoreRecord>> one = {records};
      print_json({{"method", std::string(to_string(c.scoring.method))},
                  {"anchor_threshold", compute_anchor_threshold(ctx, corpus.anchors)},
                  {"by_provenance", score_summary_json(one, data.samples)}},
                 g.quiet);
    } else if (*filter) {
      auto in = open_input(filter_scores, "score dump");
      const auto rows = read_score_dump(in);
      if (rows.empty()) throw DataError("cli", "filter", "score dump is empty");
      std::vector<ScoreRecord> records;
      std::vector<Sample> labels;
      for (const auto& r : rows) {
        records.push_back(r.record);
        Sample s;
        s.id = r.record.sample_id;
        s.provenance = r.provenance;
        labels.push_back(s);
      }
      const auto principle = parse_selection_principle(filter_principle);
      KeptSet kept;
      nlohmann::ordered_json info;
      if (principle == SelectionPrinciple::kAnchorThreshold) {
        double tau;
        if (filter_threshold) {
          tau = *filter_threshold;
        } else {
          ExperimentConfig c = cfg;
          c.scoring.method = rows.front().record.method;
          const Corpus corpus = build_corpus(c);
          const ModelParams base = load_or_pretrain(filter_ckpt, c, corpus, log);
          std::optional<ModelParams> ref;
          if (c.scoring.method == ScoringMethod::kInfluence)
            ref = influence_reference_model(base, corpus.validation, c.scoring, c.seed);
          ScoringContext ctx{&base, ref ? &*ref : nullptr, corpus.validation, corpus.validation, c.scoring, c.seed};
          tau = compute_anchor_threshold(ctx, corpus.anchors);
        }
        kept = select_by_anchor(records, tau);
        info["threshold"] = tau;
      } else if (principle == SelectionPrinciple::kByProportion || principle == SelectionPrinciple::kGlobalQuantile) {
        if (!filter_q) throw ConfigError("cli", "filter", "--proportion is required for " + filter_principle);
        if (principle == SelectionPrinciple::kByProportion) {
          kept = select_by_proportion(records, *filter_q);
        } else {
          const std::vector<std::vector<ScoreRecord>> one = {records};
          kept = select_by_global_quantile(one, *filter_q).front();
        }
        info["proportion"] = *filter_q;
      } else {
        throw ConfigError("cli", "filter", "principle must be anchor, proportion or quantile");
      }
      std::ostringstream ids;
      ids << "sample_id\n";
      for (SampleId id : kept) ids << id << '\n';
      write_file_atomic(out / "kept.csv", ids.str());
      info["principle"] = filter_principle;
      info["confusion"] = confusion_json(filter_confusion(labels, kept));
      print_json(info, g.quiet);
    } else if (*run) {
      const Corpus corpus = build_corpus(cfg);
      const ModelParams base = load_or_pretrain(run_ckpt, cfg, corpus, log);
      log("running %zu rounds with %zu clients (%s, %s/%s)", cfg.federation.rounds, cfg.federation.clients,
          std::string(to_string(cfg.federation.partition)).c_str(),
          std::string(to_string(cfg.selection.principle)).c_str(), std::string(to_string(cfg.scoring.method)).c_str());
      const RunOutcome result = run_pipeline(cfg, corpus, base);
      std::ostringstream trace;
      result.trace.write(trace);
      const auto report = run_report(cfg, corpus, result);
      write_file_atomic(out / "round_log.csv", round_log_csv(result.federated));
      write_file_atomic(out / "report.json", report.dump(2) + "\n");
      write_file_atomic(out / "summary.csv", run_summary_csv(cfg, result));
      write_file_atomic(out / "message_trace.csv", trace.str());
      write_file_atomic(out / "final_adapter.ckpt", checkpoint_bytes(result.federated.final_model));
      if (!g.quiet) std::cout << run_summary_csv(cfg, result);
    } else if (*ablate) {
      const auto methods = parse_list<ScoringMethod>(ablate_methods, parse_scoring_method, "scoring method");
      log("ablating selection over %zu methods and %zu seeds", methods.size(), ablate_seeds.size());
      const auto rows = ablate_selection(cfg, methods, ablate_seeds);
      const std::string csv = ablation_csv(rows);
      write_file_atomic(out / "ablation.csv", csv);
      if (!g.quiet) std::cout << csv;
    } else if (*sweep) {
      log("sweeping %zu proportions over %zu seeds", sweep_props.size(), sweep_seeds.size());
      const auto rows = corruption_sweep(cfg, sweep_props, sweep_seeds);
      const std::string csv = sweep_csv(rows);
      write_file_atomic(out / "sweep.csv", csv);
      if (!g.quiet) std::cout << csv;
    } else if (*evaluate) {
      const Corpus corpus = build_corpus(cfg);
      nlohmann::ordered_json j;
      if (!eval_ckpt.empty()) {
        const ModelParams model = load_or_pretrain(eval_ckpt, cfg, corpus, log);
        const auto data = eval_data.empty() ? corpus.validation : load_dataset(eval_data, corpus.vocab).samples;
        j["validation_perplexity"] = validation_perplexity(model, data);
      }
      if (!eval_scores.empty()) {
        auto in = open_input(eval_scores, "score dump");
        const auto rows = read_score_dump(in);
        std::vector<ScoreRecord> records;
        std::vector<Sample> labels;
        for (const auto& r : rows) {
          records.push_back(r.record);
          Sample s;
          s.id = r.record.sample_id;
          s.provenance = r.provenance;
          labels.push_back(s);
        }
        const std::vector<std::vector<ScoreRecord>> one = {records};
        j["score_distributions"] = score_summary_json(one, labels);
      }
      if (j.empty()) throw ConfigError("cli", "evaluate", "pass --checkpoint and/or --scores");
      write_file_atomic(out / "evaluation.json", j.dump(2) + "\n");
      print_json(j, g.quiet);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kData);
  }
  return static_cast<int>(ExitCode::kOk);
}
