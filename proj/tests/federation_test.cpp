#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "fedqc/evaluation.hpp"
#include "fedqc/federation.hpp"
#include "test_support.hpp"

namespace fedqc {
namespace {

using testing::tiny_config;

LabeledDataset mixture(std::size_t n, std::uint64_t seed = 3, double total = 0.4) {
  const auto w = generate_world(seed, 8, 4, 30);
  const auto clean = synthesize_samples(w, n, seed);
  return build_mixture(clean, MixtureFractions::scaled_to(total), seed);
}

std::size_t low_count(const LabeledDataset& d, const std::vector<SampleId>& ids) {
  std::set<SampleId> s(ids.begin(), ids.end());
  std::size_t c = 0;
  for (const auto& x : d.samples)
    if (s.contains(x.id) && !x.is_clean()) ++c;
  return c;
}

void expect_disjoint(const PartitionPlan& plan) {
  std::set<SampleId> all;
  std::size_t total = 0;
  for (const auto& c : plan.clients) {
    EXPECT_TRUE(std::is_sorted(c.begin(), c.end()));
    all.insert(c.begin(), c.end());
    total += c.size();
  }
  EXPECT_EQ(all.size(), total);
}

void expect_equal_sizes(const PartitionPlan& plan) {
  std::size_t lo = SIZE_MAX, hi = 0;
  for (const auto& c : plan.clients) lo = std::min(lo, c.size()), hi = std::max(hi, c.size());
  EXPECT_LE(hi - lo, 1u);
}

TEST(Partition, IidCoversDataset) {
  const auto d = mixture(103);
  const auto plan = partition_iid(d, 4, 1);
  expect_disjoint(plan);
  expect_equal_sizes(plan);
  std::size_t total = 0;
  for (const auto& c : plan.clients) total += c.size();
  EXPECT_EQ(total, 103u);
  EXPECT_THROW(partition_iid(d, 0, 1), ConfigError);
  EXPECT_THROW(partition_iid(d, 200, 1), ConfigError);
}

TEST(Partition, Niid1LargeBetaIsNearUniform) {
  const auto d = mixture(1000);
  const auto plan = partition_niid1(d, 10, 1e6, 4);
  expect_disjoint(plan);
  expect_equal_sizes(plan);
  for (const auto& c : plan.clients) EXPECT_NEAR(static_cast<double>(low_count(d, c)), 40.0, 2.0);
}

TEST(Partition, Niid1SingleClientHoldsEverything) {
  const auto d = mixture(200);
  const auto plan = partition_niid1(d, 1, 1.0, 4);
  EXPECT_EQ(plan.clients[0].size(), 200u);
  EXPECT_DOUBLE_EQ(plan.proportions[0], 1.0);
}

TEST(Partition, Niid1DirichletMean) {
  const auto d = mixture(800);
  const std::size_t n = 8;
  std::vector<double> sum(n, 0.0), sumsq(n, 0.0);
  const int seeds = 20;
  for (int s = 0; s < seeds; ++s) {
    const auto plan = partition_niid1(d, n, 1.0, static_cast<std::uint64_t>(s));
    expect_equal_sizes(plan);
    EXPECT_NEAR(std::accumulate(plan.proportions.begin(), plan.proportions.end(), 0.0), 1.0, 1e-12);
    for (std::size_t k = 0; k < n; ++k) sum[k] += plan.proportions[k], sumsq[k] += plan.proportions[k] * plan.proportions[k];
  }
  for (std::size_t k = 0; k < n; ++k) {
    const double mean = sum[k] / seeds;
    const double sd = std::sqrt((sumsq[k] - seeds * mean * mean) / (seeds - 1));
    EXPECT_LE(std::abs(mean - 1.0 / n), 3.0 * sd / std::sqrt(seeds)) << "client " << k;
  }
  EXPECT_THROW(partition_niid1(d, n, 0.0, 1), ConfigError);
}

TEST(Partition, Niid2LocalShares) {
  LabeledDataset d = mixture(1000, 3, 0.8);
  const auto plan = partition_niid2(d, 4, 2, 200);
  expect_disjoint(plan);
  ASSERT_EQ(plan.clients.size(), 4u);
  EXPECT_EQ(low_count(d, plan.clients[0]), 140u);
  EXPECT_EQ(low_count(d, plan.clients[1]), 140u);
  EXPECT_EQ(low_count(d, plan.clients[2]), 180u);
  EXPECT_EQ(low_count(d, plan.clients[3]), 180u);
  EXPECT_THROW(partition_niid2(d, 3, 2), ConfigError);
}

TEST(Partition, Niid2FeasibleSizeOnDefaultMixture) {
  const auto d = mixture(4000);
  const std::size_t size = max_feasible_niid2_size(d, 8);
  const auto plan = partition_niid2(d, 8, 2, size);
  expect_equal_sizes(plan);
  for (std::size_t k = 0; k < 8; ++k) {
    const double share = k < 4 ? 0.7 : 0.9;
    EXPECT_LE(std::abs(static_cast<double>(low_count(d, plan.clients[k])) - share * static_cast<double>(size)), 1.0);
  }
  EXPECT_THROW(partition_niid2(d, 8, 2, size + 1), ConfigError);
}

TEST(Filter, Examples) {
  ClientState c;
  c.id = 3;
  std::vector<ScoreRecord> scores;
  const std::vector<double> q = {0.1, 0.3, 0.3, 0.9};
  for (std::size_t i = 0; i < q.size(); ++i) {
    Sample s;
    s.id = static_cast<SampleId>(i);
    c.data.push_back(s);
    scores.push_back({s.id, ScoringMethod::kConProb, 1 - q[i], q[i]});
  }
  EXPECT_EQ(filter_local(c, 0.3, scores).filtered.size(), 3u);
  const auto all = filter_local(c, -std::numeric_limits<double>::infinity(), scores);
  EXPECT_EQ(all.filtered, all.data);
  const auto none = filter_local(c, std::numeric_limits<double>::infinity(), scores);
  EXPECT_TRUE(none.filtered.empty());
  EXPECT_TRUE(none.excluded);
  EXPECT_EQ(none.data.size(), 4u);
  scores.pop_back();
  EXPECT_THROW(filter_local(c, 0.3, scores), ProtocolError);
}

TEST(Aggregate, Examples) {
  AdapterVector a;
  a.values = Vector::LinSpaced(6, -1.0, 2.0);
  const std::vector<AdapterVector> same = {a, a, a};
  const std::vector<double> w = {0.2, 0.5, 0.3};
  EXPECT_LE((aggregate(same, w).values - a.values).cwiseAbs().maxCoeff(), 1e-15);

  std::vector<double> sizes = {3.0, 1.0};
  const double total = sizes[0] + sizes[1];
  for (auto& s : sizes) s /= total;
  EXPECT_EQ(sizes, (std::vector<double>{0.75, 0.25}));

  const std::vector<double> bad = {0.5, 0.6};
  const std::vector<AdapterVector> two = {a, a};
  EXPECT_THROW(aggregate(two, bad), ProtocolError);
  AdapterVector shorter;
  shorter.values = Vector::Zero(3);
  const std::vector<AdapterVector> mismatch = {a, shorter};
  const std::vector<double> half = {0.5, 0.5};
  EXPECT_THROW(aggregate(mismatch, half), ProtocolError);
}

TEST(Aggregate, PermutationInvariant) {
  Rng rng(8);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 2 + rng() % 8;
    std::vector<AdapterVector> ad(k);
    std::vector<double> w(k);
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      ad[i].values = Vector::NullaryExpr(20, [&]() { return n(rng); });
      sum += (w[i] = 1.0 + static_cast<double>(rng() % 100));
    }
    for (auto& x : w) x /= sum;
    std::vector<std::size_t> perm(k);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<AdapterVector> ad2;
    std::vector<double> w2;
    for (std::size_t i : perm) ad2.push_back(ad[i]), w2.push_back(w[i]);
    EXPECT_LE((aggregate(ad, w).values - aggregate(ad2, w2).values).cwiseAbs().maxCoeff(), 1e-12);
  }
}

class ProtocolTest : public ::testing::Test {
 protected:
  void SetUp() override {
    world = generate_world(2, 6, 4, 20);
    vocab = Vocab::for_world(world);
    const auto clean = synthesize_samples(world, vocab, 240, 1);
    data = build_mixture(clean, {}, 1);
    server.global = init_params(tiny_config(vocab.size()));
    server.validation = synthesize_samples(world, vocab, 20, 2, 100'000'000);
    server.anchors = synthesize_samples(world, vocab, 10, 3, 200'000'000);
    fl.num_clients = 4;
    fl.rounds = 3;
    fl.local_steps = 4;
    fl.batch_size = 8;
    fl.seed = 5;
  }

  std::vector<ClientState> clients(std::size_t n) { return make_clients(data, partition_iid(data, n, 1)); }

  World world;
  Vocab vocab;
  LabeledDataset data;
  ServerState server;
  FLConfig fl;
};

TEST_F(ProtocolTest, PhaseOneScoresEverySampleWithoutUploads) {
  auto cs = clients(4);
  MessageTrace trace;
  for (auto m : {ScoringMethod::kPpl, ScoringMethod::kConProb, ScoringMethod::kIcl, ScoringMethod::kInfluence}) {
    ScoringConfig sc;
    sc.method = m;
    sc.influence_warmup_steps = 5;
    const auto r = phase1_quality_control(server, cs, sc, 1, trace);
    std::size_t total = 0;
    for (const auto& s : r.scores) total += s.size();
    EXPECT_EQ(total, data.size());
    ScoringContext ctx;
    ctx.model = &server.global;
    ctx.reference = r.reference ? &*r.reference : nullptr;
    ctx.validation = server.validation;
    ctx.demonstration_pool = server.validation;
    ctx.config = sc;
    ctx.seed = 1;
    EXPECT_EQ(*r.threshold, compute_anchor_threshold(ctx, server.anchors));
  }
  apply_selection(SelectionPrinciple::kAnchorThreshold, cs,
                  phase1_quality_control(server, cs, {}, 1, trace), std::nullopt, trace);
  EXPECT_EQ(trace.count(PayloadKind::kClientSamples), 0u);
  EXPECT_EQ(trace.count(PayloadKind::kScores), 0u);
  for (const auto& m : trace.messages())
    if (m.direction == Direction::kClientToServer) ADD_FAILURE() << "upload during Phase I";
}

TEST_F(ProtocolTest, QuantileSelectionUploadsScoresOnly) {
  auto cs = clients(4);
  MessageTrace trace;
  const auto r = phase1_quality_control(server, cs, {}, 1, trace);
  apply_selection(SelectionPrinciple::kGlobalQuantile, cs, r, 0.4, trace);
  EXPECT_EQ(trace.count(PayloadKind::kScores, Direction::kClientToServer), 4u);
  EXPECT_EQ(trace.count(PayloadKind::kClientSamples), 0u);
  EXPECT_THROW(apply_selection(SelectionPrinciple::kByProportion, cs, r, std::nullopt, trace), ConfigError);
}

TEST_F(ProtocolTest, AnchorLeakIsRejected) {
  auto cs = clients(2);
  cs[0].data.push_back(server.anchors[0]);
  MessageTrace trace;
  EXPECT_THROW(phase1_quality_control(server, cs, {}, 1, trace), ProtocolError);
  server.anchors.clear();
  EXPECT_THROW(phase1_quality_control(server, cs, {}, 1, trace), ProtocolError);
}

TEST_F(ProtocolTest, ScoringErrorsNameTheClient) {
  auto cs = clients(2);
  cs[1].data[0].answer.push_back(static_cast<TokenId>(vocab.size() + 5));
  MessageTrace trace;
  try {
    phase1_quality_control(server, cs, {}, 1, trace);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("client 1"), std::string::npos);
  }
}

TEST_F(ProtocolTest, SingleClientEqualsCentralizedTraining) {
  auto cs = clients(1);
  MessageTrace trace;
  apply_selection(SelectionPrinciple::kNone, cs, {}, std::nullopt, trace);
  fl.num_clients = 1;
  fl.rounds = 1;
  const ModelParams start = server.global;
  const auto fed = run_federated(fl, server, cs, trace);
  const auto central = local_train(start, cs[0].filtered, fl.local_steps, fl.batch_size, fl.learning_rate,
                                   local_seed(fl.seed, 1, 0));
  EXPECT_LE((flatten_adapter(fed.final_model).values - flatten_adapter(central).values).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_EQ(fed.rounds[0].weights, std::vector<double>{1.0});
}

TEST_F(ProtocolTest, RoundsAreDeterministicAndNormalized) {
  auto run = [&]() {
    auto cs = clients(4);
    ServerState s = server;
    MessageTrace trace;
    apply_selection(SelectionPrinciple::kNone, cs, {}, std::nullopt, trace);
    return run_federated(fl, s, cs, trace);
  };
  const auto a = run();
  const auto b = run();
  ASSERT_EQ(a.rounds.size(), 3u);
  for (std::size_t r = 0; r < a.rounds.size(); ++r) {
    EXPECT_EQ(a.rounds[r].participants, (std::vector<std::size_t>{0, 1, 2, 3}));
    EXPECT_EQ(a.rounds[r].weights, b.rounds[r].weights);
    EXPECT_EQ(a.rounds[r].validation_perplexity, b.rounds[r].validation_perplexity);
    EXPECT_NEAR(std::accumulate(a.rounds[r].weights.begin(), a.rounds[r].weights.end(), 0.0), 1.0, 1e-12);
  }
  EXPECT_TRUE(a.final_model == b.final_model);
  EXPECT_TRUE(a.final_model.input_proj == server.global.input_proj);
}

TEST_F(ProtocolTest, PartialParticipationAndExclusion) {
  auto cs = clients(4);
  MessageTrace trace;
  apply_selection(SelectionPrinciple::kNone, cs, {}, std::nullopt, trace);
  cs[2].filtered.clear();
  cs[2].excluded = true;
  fl.participation = 0.5;
  const auto fed = run_federated(fl, server, cs, trace);
  for (const auto& r : fed.rounds) {
    EXPECT_EQ(r.participants.size(), 2u);
    EXPECT_EQ(std::count(r.participants.begin(), r.participants.end(), 2u), 0);
  }
}

TEST_F(ProtocolTest, AllClientsEmptyIsAProtocolError) {
  auto cs = clients(2);
  for (auto& c : cs) c.filter_done = true, c.excluded = true;
  MessageTrace trace;
  EXPECT_THROW(run_federated(fl, server, cs, trace), ProtocolError);
  auto unfiltered = clients(2);
  EXPECT_THROW(run_federated(fl, server, unfiltered, trace), ProtocolError);
}

TEST_F(ProtocolTest, DivergenceCarriesRoundAndClient) {
  auto cs = clients(2);
  MessageTrace trace;
  apply_selection(SelectionPrinciple::kNone, cs, {}, std::nullopt, trace);
  server.global = testing::random_params(server.global.config, 3);
  fl.learning_rate = 1e300;
  try {
    run_federated(fl, server, cs, trace);
    FAIL();
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("round 1, client 0"), std::string::npos);
  }
}

TEST(MessageTraceFile, WritesHeaderAndRows) {
  MessageTrace t;
  t.record({0, Direction::kServerToClient, 2, PayloadKind::kThreshold, 8});
  t.record({1, Direction::kClientToServer, 2, PayloadKind::kAdapter, 64});
  std::ostringstream out;
  t.write(out);
  EXPECT_EQ(out.str(),
            "seq,round,direction,client,payload,bytes\n"
            "0,0,server->client,2,threshold,8\n"
            "1,1,client->server,2,adapter,64\n");
}

}  // namespace
}  // namespace fedqc
