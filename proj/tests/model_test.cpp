#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "fedqc/evaluation.hpp"
#include "fedqc/model.hpp"
#include "test_support.hpp"

namespace fedqc {
namespace {

using testing::random_params;
using testing::tiny_config;
using testing::tiny_setup;

// Central finite difference of sample_loss along one adapter coordinate.
double fd_coordinate(const ModelParams& p, const Sample& s, std::size_t i, double h) {
  AdapterVector v = flatten_adapter(p);
  const double x0 = v.values[static_cast<Eigen::Index>(i)];
  v.values[static_cast<Eigen::Index>(i)] = x0 + h;
  const double up = sample_loss(with_adapter(p, v), s);
  v.values[static_cast<Eigen::Index>(i)] = x0 - h;
  const double down = sample_loss(with_adapter(p, v), s);
  return (up - down) / (2.0 * h);
}

TEST(ModelInit, AdapterStartsAsNoOp) {
  const auto t = tiny_setup();
  const auto p = init_params(tiny_config(t.vocab.size()));
  EXPECT_TRUE(p.adapter_b.isZero(0.0));
  EXPECT_EQ(p.effective_output(), p.base_out);
  EXPECT_EQ(p.bias, Vector::Zero(p.bias.size()));
}

TEST(ModelInit, Deterministic) {
  const auto c = tiny_config(50);
  EXPECT_TRUE(init_params(c) == init_params(c));
  auto c2 = c;
  c2.seed = c.seed + 1;
  EXPECT_FALSE(init_params(c) == init_params(c2));
}

TEST(ModelInit, InputProjectionFanInScale) {
  ModelConfig c;
  c.vocab_size = 40;
  c.embed_dim = 16;
  c.context_window = 8;
  c.hidden_dim = 64;
  c.adapter_rank = 4;
  const auto p = init_params(c);
  const double n = static_cast<double>(p.input_proj.size());
  const double mean = p.input_proj.sum() / n;
  const double var = (p.input_proj.array() - mean).square().sum() / (n - 1);
  const double expected = 1.0 / std::sqrt(16.0 * 8.0);
  EXPECT_NEAR(std::sqrt(var), expected, 0.2 * expected);
}

TEST(ModelConfig, RejectsInvalid) {
  ModelConfig c = tiny_config(4);
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config(50);
  c.adapter_rank = c.hidden_dim + 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny_config(50);
  c.context_window = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(NextToken, UniformModel) {
  const auto p = uniform_params(tiny_config(37));
  const std::vector<TokenId> ctx = {0, 5, 9};
  const Vector lp = next_token_logprobs(p, ctx);
  for (Eigen::Index i = 0; i < lp.size(); ++i) EXPECT_NEAR(lp[i], -std::log(37.0), 1e-15);
}

TEST(NextToken, NormalizedForRandomParams) {
  const auto c = tiny_config(30);
  Rng rng(11);
  std::uniform_int_distribution<TokenId> tok(0, 29);
  std::uniform_int_distribution<std::size_t> len(1, 9);
  for (int draw = 0; draw < 50; ++draw) {
    const auto p = random_params(c, 100 + static_cast<std::uint64_t>(draw), 2.0);
    std::vector<TokenId> ctx(len(rng));
    for (auto& t : ctx) t = tok(rng);
    const Vector lp = next_token_logprobs(p, ctx);
    EXPECT_NEAR(lp.array().exp().sum(), 1.0, 1e-9);
  }
}

TEST(NextToken, ShortContextEqualsExplicitPadding) {
  const auto c = tiny_config(30);
  const auto p = random_params(c, 5);
  const std::vector<TokenId> short_ctx = {7, 8};
  const std::vector<TokenId> padded = {Vocab::kPad, Vocab::kPad, 7, 8};
  EXPECT_EQ(next_token_logprobs(p, short_ctx), next_token_logprobs(p, padded));
}

TEST(NextToken, UsesOnlyLastWindow) {
  const auto c = tiny_config(30);
  const auto p = random_params(c, 5);
  const std::vector<TokenId> a = {1, 2, 10, 11, 12, 13};
  const std::vector<TokenId> b = {20, 21, 10, 11, 12, 13};
  EXPECT_EQ(next_token_logprobs(p, a), next_token_logprobs(p, b));
}

TEST(NextToken, Errors) {
  const auto p = uniform_params(tiny_config(30));
  const std::vector<TokenId> bad = {1, 30};
  EXPECT_THROW(next_token_logprobs(p, bad), DataError);
  EXPECT_THROW(next_token_logprobs(p, std::span<const TokenId>{}), DataError);
}

TEST(SequenceLogprob, UniformMean) {
  const auto p = uniform_params(tiny_config(30));
  const std::vector<TokenId> seq = {0, 4, 5, 6, 1, 8, 2};
  const auto r = sequence_logprob(p, seq, 2, 7);
  EXPECT_NEAR(r.mean, -std::log(30.0), 1e-14);
  EXPECT_EQ(r.per_token.size(), 5u);
}

TEST(SequenceLogprob, ComposesFromNextToken) {
  const auto p = random_params(tiny_config(30), 9);
  const std::vector<TokenId> seq = {0, 4, 5, 6, 1, 8, 9, 2};
  const auto r = sequence_logprob(p, seq, 1, seq.size());
  double sum = 0.0;
  for (std::size_t i = 1; i < seq.size(); ++i) {
    const std::span<const TokenId> ctx(seq.data(), i);
    const double v = next_token_logprobs(p, ctx)[seq[i]];
    EXPECT_EQ(r.per_token[i - 1], v);
    sum += v;
  }
  EXPECT_NEAR(r.mean, sum / static_cast<double>(seq.size() - 1), 1e-15);
}

TEST(SequenceLogprob, ApproachesZeroForDeterministicModel) {
  // Constant hidden state with the output column of token 5 scaled up.
  auto p = uniform_params(tiny_config(30));
  p.bias.setConstant(1.0);
  const std::vector<TokenId> seq = {5, 5, 5, 5, 5};
  double prev = -std::numeric_limits<double>::infinity();
  for (double scale : {0.5, 1.0, 2.0, 3.0}) {
    p.base_out.col(5).setConstant(scale);
    const double m = sequence_logprob(p, seq, 1, seq.size()).mean;
    EXPECT_LT(m, 0.0);
    EXPECT_GT(m, prev);
    prev = m;
  }
  EXPECT_GT(prev, -1e-6);
}

TEST(SequenceLogprob, SpanErrors) {
  const auto p = uniform_params(tiny_config(30));
  const std::vector<TokenId> seq = {0, 4, 5};
  EXPECT_THROW(sequence_logprob(p, seq, 2, 2), DataError);
  EXPECT_THROW(sequence_logprob(p, seq, 1, 4), DataError);
  EXPECT_THROW(sequence_logprob(p, seq, 0, 2), DataError);
}

TEST(SampleLoss, UniformIsLogV) {
  const auto t = tiny_setup();
  const auto p = uniform_params(tiny_config(t.vocab.size()));
  EXPECT_NEAR(sample_loss(p, t.samples[0]), std::log(static_cast<double>(t.vocab.size())), 1e-14);
}

TEST(SampleLoss, MatchesAnswerSpanLogprob) {
  const auto t = tiny_setup();
  const auto p = random_params(tiny_config(t.vocab.size()), 4);
  for (int i = 0; i < 5; ++i) {
    const auto& s = t.samples[static_cast<std::size_t>(i)];
    const auto seq = render(s);
    const double lp = sequence_logprob(p, seq.tokens, seq.answer_begin, seq.tokens.size()).mean;
    EXPECT_EQ(sample_loss(p, s), -lp);
    EXPECT_GE(sample_loss(p, s), 0.0);
  }
}

TEST(AdapterGrad, ZeroBKillsAPath) {
  const auto t = tiny_setup();
  const auto p = init_params(tiny_config(t.vocab.size()));
  const auto g = adapter_grad(p, t.samples[0]);
  const auto na = p.adapter_a.size();
  EXPECT_TRUE(g.values.head(na).isZero(0.0));
  EXPECT_GT(g.values.tail(p.adapter_b.size()).norm(), 0.0);
}

TEST(AdapterGrad, MatchesFiniteDifferences) {
  const auto t = tiny_setup();
  const auto c = tiny_config(t.vocab.size());
  for (std::uint64_t trial = 0; trial < 4; ++trial) {
    const auto p = random_params(c, 40 + trial);
    const auto& s = t.samples[trial];
    const auto g = adapter_grad(p, s);
    for (std::size_t i = 0; i < g.size(); i += 7) {
      const double fd = fd_coordinate(p, s, i, 1e-4);
      const double a = g.values[static_cast<Eigen::Index>(i)];
      EXPECT_LE(std::abs(a - fd), 1e-4 * std::max(1.0, std::abs(fd))) << "coordinate " << i;
    }
  }
}

TEST(AdapterGrad, DuplicateSampleSameGradient) {
  const auto t = tiny_setup();
  const auto p = random_params(tiny_config(t.vocab.size()), 2);
  Sample dup = t.samples[0];
  dup.id = 999;
  EXPECT_EQ(adapter_grad(p, t.samples[0]).values, adapter_grad(p, dup).values);
}

TEST(Adapter, FlattenRoundTrip) {
  const auto p = random_params(tiny_config(30), 12);
  const auto v = flatten_adapter(p);
  EXPECT_EQ(v.size(), p.config.adapter_dim());
  Matrix a(p.adapter_a.rows(), p.adapter_a.cols()), b(p.adapter_b.rows(), p.adapter_b.cols());
  unflatten_adapter(v, a, b);
  EXPECT_EQ(a, p.adapter_a);
  EXPECT_EQ(b, p.adapter_b);
  // Row-major A first.
  EXPECT_EQ(v.values[1], p.adapter_a(0, 1));
  EXPECT_EQ(v.values[p.adapter_a.size()], p.adapter_b(0, 0));
}

TEST(LocalTrain, ZeroLearningRateIsIdentity) {
  const auto t = tiny_setup();
  const auto p = random_params(tiny_config(t.vocab.size()), 1);
  EXPECT_TRUE(local_train(p, t.samples, 5, 8, 0.0, 3) == p);
}

TEST(LocalTrain, SingleFullBatchStepMatchesMeanGradient) {
  const auto t = tiny_setup(7, 12);
  const auto p = random_params(tiny_config(t.vocab.size()), 1);
  const double lr = 0.3;
  Vector mean = Vector::Zero(static_cast<Eigen::Index>(p.config.adapter_dim()));
  for (const auto& s : t.samples) mean += adapter_grad(p, s).values;
  mean /= static_cast<double>(t.samples.size());
  const Vector expected = flatten_adapter(p).values - lr * mean;
  const auto got = flatten_adapter(local_train(p, t.samples, 1, t.samples.size(), lr, 9)).values;
  EXPECT_LE((got - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(LocalTrain, FrozenTensorsUntouched) {
  const auto t = tiny_setup();
  const auto p = random_params(tiny_config(t.vocab.size()), 1, 0.3);
  const auto q = local_train(p, t.samples, 100, 8, 0.2, 4);
  EXPECT_EQ(q.embedding, p.embedding);
  EXPECT_EQ(q.input_proj, p.input_proj);
  EXPECT_EQ(q.bias, p.bias);
  EXPECT_EQ(q.base_out, p.base_out);
  EXPECT_NE(q.adapter_b, p.adapter_b);
  EXPECT_TRUE(local_train(p, t.samples, 20, 8, 0.2, 4) == local_train(p, t.samples, 20, 8, 0.2, 4));
}

TEST(LocalTrain, LowersTrainingLoss) {
  const auto t = tiny_setup();
  const auto p = init_params(tiny_config(t.vocab.size()));
  double before = 0.0, after = 0.0;
  const auto q = local_train(p, t.samples, 200, 16, 0.5, 4);
  for (const auto& s : t.samples) {
    before += sample_loss(p, s);
    after += sample_loss(q, s);
  }
  EXPECT_LT(after, before);
}

TEST(LocalTrain, DivergenceReportsStep) {
  const auto t = tiny_setup();
  const auto p = random_params(tiny_config(t.vocab.size()), 1);
  try {
    local_train(p, t.samples, 50, 8, 1e300, 4);
    FAIL() << "expected divergence";
  } catch (const NumericalError& e) {
    EXPECT_GE(e.step(), 1u);
    EXPECT_EQ(e.code(), ExitCode::kDivergence);
  }
}

TEST(LocalTrain, RejectsEmptyData) {
  const auto p = init_params(tiny_config(30));
  EXPECT_THROW(local_train(p, {}, 1, 1, 0.1, 0), DataError);
}

TEST(Pretrain, BeatsUniformAndResetsAdapter) {
  const auto t = tiny_setup(7, 400);
  const auto c = tiny_config(t.vocab.size());
  PretrainOptions o;
  o.epochs = 3;
  const auto p = pretrain_base(c, std::span(t.samples).subspan(0, 300), o, 1);
  EXPECT_TRUE(p.base_frozen);
  EXPECT_EQ(p.effective_output(), p.base_out);
  const double ppl = validation_perplexity(p, std::span(t.samples).subspan(300));
  EXPECT_LT(ppl, static_cast<double>(c.vocab_size));
  EXPECT_TRUE(pretrain_base(c, std::span(t.samples).subspan(0, 300), o, 1) == p);
}

TEST(Checkpoint, RoundTripIsByteExact) {
  auto p = random_params(tiny_config(30), 8);
  p.base_frozen = true;
  std::stringstream a;
  write_checkpoint(a, p);
  const auto q = read_checkpoint(a);
  EXPECT_TRUE(q == p);
  std::stringstream b;
  write_checkpoint(b, q);
  EXPECT_EQ(a.str(), b.str());
}

TEST(Checkpoint, RejectsCorruptFiles) {
  std::stringstream bad("NOTACKPTxxxxxxxxxxxx");
  EXPECT_THROW(read_checkpoint(bad), DataError);
  std::stringstream full;
  write_checkpoint(full, init_params(tiny_config(30)));
  const std::string truncated = full.str().substr(0, full.str().size() - 5);
  std::stringstream t(truncated);
  EXPECT_THROW(read_checkpoint(t), DataError);
}

}  // namespace
}  // namespace fedqc
