#include <gtest/gtest.h>

#include <map>
#include <set>
#include <sstream>

#include "fedqc/corpus.hpp"

namespace fedqc {
namespace {

Sample make_sample(SampleId id, std::size_t answer_len) {
  Sample s;
  s.id = id;
  s.origin_id = id;
  s.question = {10, 11, 12};
  for (std::size_t i = 0; i < answer_len; ++i) s.answer.push_back(static_cast<TokenId>(100 + i));
  return s;
}

TEST(World, SmallWorldIsTotal) {
  const auto w = generate_world(7, 2, 2);
  EXPECT_EQ(w.num_facts(), 4u);
  for (std::size_t e = 0; e < 2; ++e)
    for (std::size_t a = 0; a < 2; ++a) EXPECT_FALSE(w.fact(e, a).empty());
  EXPECT_EQ(w, generate_world(7, 2, 2));
}

TEST(World, ValueHistogramMatchesRegeneration) {
  const auto w = generate_world(7, 30, 10);
  ASSERT_EQ(w.num_facts(), 300u);
  // Independent regeneration of the draws from the "world" stream.
  Rng rng = make_stream(7, "world");
  std::uniform_int_distribution<std::uint32_t> pick(0, static_cast<std::uint32_t>(kDefaultValuePool - 1));
  std::map<std::uint32_t, int> expected, got;
  for (std::size_t i = 0; i < 300; ++i) ++expected[pick(rng)];
  for (auto f : w.facts) ++got[f];
  EXPECT_EQ(got, expected);
  int most = 0;
  for (const auto& [v, c] : got) most = std::max(most, c);
  EXPECT_EQ(got.size(), 132u);
  EXPECT_EQ(most, 6);
}

TEST(World, CapExceeded) {
  try {
    generate_world(1, 1001, 1000);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("cap"), std::string::npos);
  }
  EXPECT_THROW(generate_world(1, 0, 3), ConfigError);
}

TEST(Vocab, LayoutAndRoundTrip) {
  const auto w = generate_world(3, 5, 3, 12);
  const auto v = Vocab::for_world(w);
  EXPECT_EQ(v.size(), 4u + 6u + 5u + 3u + 12u);
  EXPECT_EQ(v.id("<pad>"), Vocab::kPad);
  EXPECT_EQ(v.decode(v.encode("what is color of E3 ?")), "what is color of E3 ?");
  std::stringstream ss;
  write_vocab(ss, v);
  EXPECT_EQ(read_vocab(ss), v);
  EXPECT_THROW(v.id("zebra"), DataError);
}

TEST(Synthesize, AnswersFollowWorld) {
  const auto w = generate_world(7, 4, 3, 20);
  const auto v = Vocab::for_world(w);
  const auto samples = synthesize_samples(w, v, 200, 5);
  bool seen = false;
  for (const auto& s : samples) {
    EXPECT_TRUE(s.is_clean());
    EXPECT_EQ(lookup_answer(w, v, s.question), s.answer);
    if (v.token(s.question[4]) == "E1" && v.token(s.question[2]) == "color") {
      seen = true;
      EXPECT_EQ(v.token(s.answer[5]), w.fact(1, 0));
    }
  }
  EXPECT_TRUE(seen);
  EXPECT_EQ(v.decode(samples[0].question).substr(0, 8), "what is ");
}

TEST(Synthesize, CountBoundaryAndDistinctIds) {
  const auto w = generate_world(7, 30, 10);
  EXPECT_THROW(synthesize_samples(w, 0, 1), DataError);
  const auto samples = synthesize_samples(w, 1000, 1);
  std::set<SampleId> ids;
  std::set<std::vector<TokenId>> questions;
  for (const auto& s : samples) {
    ids.insert(s.id);
    questions.insert(s.question);
  }
  EXPECT_EQ(ids.size(), 1000u);
  EXPECT_LE(questions.size(), 300u);
  EXPECT_EQ(synthesize_samples(w, 1000, 1), samples);
}

TEST(Synthesize, MissingTemplateWord) {
  const auto w = generate_world(7, 2, 2, 4);
  std::vector<std::string> tokens = Vocab::for_world(w).tokens();
  tokens.erase(std::find(tokens.begin(), tokens.end(), "what"));
  const auto v = Vocab::from_tokens(tokens);
  EXPECT_THROW(synthesize_samples(w, v, 3, 1), DataError);
}

TEST(Cut, Examples) {
  const auto long_sample = make_sample(1, 150);
  EXPECT_EQ(corrupt_cut(long_sample, 100)->answer.size(), 100u);
  EXPECT_FALSE(corrupt_cut(make_sample(2, 80), 100).has_value());
  const auto s6 = make_sample(3, 6);
  const auto c = corrupt_cut(s6, 3);
  ASSERT_TRUE(c);
  EXPECT_EQ(c->answer, std::vector<TokenId>(s6.answer.begin(), s6.answer.begin() + 3));
  EXPECT_EQ(c->provenance, Provenance::kCut);
  EXPECT_EQ(c->question, s6.question);
  EXPECT_EQ(corrupt_cut(make_sample(4, 7))->answer.size(), 4u);
  EXPECT_FALSE(corrupt_cut(make_sample(5, 1)).has_value());
}

TEST(Delete, Examples) {
  const auto s = make_sample(9, 10);
  const auto d = corrupt_delete(s, 0.4, 3);
  ASSERT_EQ(d.answer.size(), 6u);
  EXPECT_TRUE(std::is_sorted(d.answer.begin(), d.answer.end()));
  EXPECT_EQ(d.provenance, Provenance::kDelete);
  EXPECT_EQ(d, corrupt_delete(s, 0.4, 3));
  EXPECT_THROW(corrupt_delete(make_sample(1, 2), 0.99, 3), DataError);
  EXPECT_THROW(corrupt_delete(s, 0.0, 3), DataError);
}

TEST(Delete, RejectsCorruptedInput) {
  auto s = make_sample(9, 10);
  s.provenance = Provenance::kCut;
  EXPECT_THROW(corrupt_delete(s, 0.4, 3), DataError);
}

TEST(Exchange, TwoSamplesSwap) {
  const std::vector<Sample> in = {make_sample(0, 3), make_sample(1, 4)};
  const auto out = corrupt_exchange(in, 1);
  EXPECT_EQ(out[0].answer, in[1].answer);
  EXPECT_EQ(out[1].answer, in[0].answer);
  EXPECT_EQ(out[0].origin_id, 1);
  EXPECT_EQ(out[0].question, in[0].question);
}

TEST(Exchange, NoFixedPoints) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::vector<Sample> in;
    for (SampleId i = 0; i < 5; ++i) in.push_back(make_sample(i, 2 + static_cast<std::size_t>(i)));
    const auto out = corrupt_exchange(in, seed);
    for (std::size_t i = 0; i < 5; ++i) {
      EXPECT_NE(out[i].answer, in[i].answer);
      EXPECT_NE(out[i].origin_id, in[i].id);
      EXPECT_EQ(out[i].provenance, Provenance::kExchange);
    }
  }
  EXPECT_THROW(corrupt_exchange(std::vector<Sample>{make_sample(0, 3)}, 1), DataError);
}

TEST(Exchange, AnswersContradictTheWorld) {
  const auto w = generate_world(2, 5, 3, 10);
  const auto v = Vocab::for_world(w);
  const auto samples = synthesize_samples(w, v, 60, 4);
  for (const auto& s : corrupt_exchange(samples, 8)) EXPECT_NE(lookup_answer(w, v, s.question), s.answer);
}

TEST(LargestRemainder, Examples) {
  EXPECT_EQ(largest_remainder_counts(16000, {}), (std::array<std::size_t, 4>{1600, 2400, 2400, 9600}));
  const auto c = largest_remainder_counts(100, {0.333, 0.333, 0.333});
  EXPECT_EQ(c[0] + c[1] + c[2] + c[3], 100u);
  EXPECT_EQ(c, (std::array<std::size_t, 4>{34, 33, 33, 0}));
}

class MixtureTest : public ::testing::Test {
 protected:
  void SetUp() override {
    world = generate_world(7, 30, 10);
    vocab = Vocab::for_world(world);
    clean = synthesize_samples(world, vocab, 2000, 3);
  }
  World world;
  Vocab vocab;
  std::vector<Sample> clean;
};

TEST_F(MixtureTest, DefaultFractions) {
  const auto d = build_mixture(clean, {}, 11);
  EXPECT_EQ(d.counts, (ClassCounts{1200, 200, 300, 300}));
  EXPECT_EQ(d.samples, build_mixture(clean, {}, 11).samples);
}

TEST_F(MixtureTest, InvariantsHold) {
  const auto d = build_mixture(clean, {}, 11);
  ASSERT_EQ(d.size(), clean.size());
  std::set<SampleId> ids;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const Sample& s = d.samples[i];
    ids.insert(s.id);
    EXPECT_EQ(question_source_id(s.id), clean[i].id);
    EXPECT_EQ(s.question, clean[i].question);
    switch (s.provenance) {
      case Provenance::kClean: EXPECT_EQ(s, clean[i]); break;
      case Provenance::kCut:
        EXPECT_LT(s.answer.size(), clean[i].answer.size());
        EXPECT_TRUE(std::equal(s.answer.begin(), s.answer.end(), clean[i].answer.begin()));
        break;
      case Provenance::kDelete: EXPECT_LT(s.answer.size(), clean[i].answer.size()); break;
      case Provenance::kExchange: EXPECT_NE(lookup_answer(world, vocab, s.question), s.answer); break;
    }
  }
  EXPECT_EQ(ids.size(), d.size());
}

TEST_F(MixtureTest, ZeroFractionsIsIdentity) {
  const auto d = build_mixture(clean, {0.0, 0.0, 0.0}, 11);
  EXPECT_EQ(d.samples, clean);
  EXPECT_EQ(d.low_quality_count(), 0u);
}

TEST_F(MixtureTest, RejectsOverfullFractions) {
  try {
    build_mixture(clean, {0.5, 0.4, 0.2}, 11);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("corpus.mixture"), std::string::npos);
  }
}

TEST_F(MixtureTest, LiteralCutLimitCannotFillPool) {
  CorruptionOptions o;
  o.cut_limit = 100;
  EXPECT_THROW(build_mixture(clean, {}, 11, o), DataError);
}

TEST_F(MixtureTest, DatasetFileRoundTrip) {
  const auto d = build_mixture(clean, {}, 11);
  std::stringstream ss;
  write_dataset(ss, d.samples, vocab);
  const auto back = read_dataset(ss, vocab);
  EXPECT_EQ(back.samples, d.samples);
  EXPECT_EQ(back.counts, d.counts);
}

TEST(DatasetFile, RejectsBadLines) {
  const auto w = generate_world(7, 2, 2, 4);
  const auto v = Vocab::for_world(w);
  std::stringstream bad("{\"id\": 1, \"question\": \"what\"}\n");
  EXPECT_THROW(read_dataset(bad, v), DataError);
  std::stringstream unknown(
      "{\"id\":1,\"question\":\"what zebra\",\"answer\":\"the\",\"provenance\":\"clean\",\"origin_id\":1}\n");
  EXPECT_THROW(read_dataset(unknown, v), DataError);
}

}  // namespace
}  // namespace fedqc
