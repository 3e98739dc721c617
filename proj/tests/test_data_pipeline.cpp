#include <filesystem>
#include <algorithm>
#include <map>
#include <set>

#include <gtest/gtest.h>

#include "bft/data.hpp"
#include "bft/errors.hpp"
#include "bft/random.hpp"

using namespace bft;

namespace {

std::vector<std::int32_t> ids(std::initializer_list<std::int32_t> v) { return v; }

const SpecialTokens kSmall = SpecialTokens::for_vocab(16);

}  // namespace

TEST(Tokenize, AsciiBytes) { EXPECT_EQ(tokenize("AB"), ids({65, 66})); }

TEST(Tokenize, EmptyText) { EXPECT_TRUE(tokenize("").empty()); }

TEST(Tokenize, EveryByteRoundTrips) {
  std::string all;
  for (int b = 0; b < 256; ++b) all.push_back(static_cast<char>(b));
  const auto tokens = tokenize(all);
  for (int b = 0; b < 256; ++b) EXPECT_EQ(tokens[static_cast<std::size_t>(b)], b);
  EXPECT_EQ(detokenize(tokens), all);

  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    std::string s(rng.below(40), '\0');
    for (auto& c : s) c = static_cast<char>(rng.below(256));
    EXPECT_EQ(detokenize(tokenize(s)), s);
  }
}

TEST(Tokenize, ReservedIdsAreNotBytes) {
  const SpecialTokens bytes = SpecialTokens::bytes();
  EXPECT_EQ(bytes.bos, 256);
  EXPECT_EQ(bytes.separator, 257);
  EXPECT_EQ(bytes.pad, 258);
  EXPECT_EQ(bytes.vocab_size, 259);
  EXPECT_THROW(detokenize(ids({65, 256})), IndexError);
}

TEST(ShareGpt, OnePairGivesTwoTurns) {
  const auto conversations = parse_sharegpt(
      R"([{"conversations": [{"from": "human", "value": "hi"}, {"from": "gpt", "value": "hello"}]}])");
  ASSERT_EQ(conversations.size(), 1u);
  ASSERT_EQ(conversations[0].turns.size(), 2u);
  EXPECT_EQ(conversations[0].turns[0].role, Role::human);
  EXPECT_EQ(conversations[0].turns[1].text, "hello");
}

TEST(ShareGpt, EmptyArray) { EXPECT_TRUE(parse_sharegpt("[]").empty()); }

TEST(ShareGpt, MissingValueNamesTheRecord) {
  try {
    parse_sharegpt(R"([{"conversations": [{"from": "human", "value": "a"}, {"from": "gpt", "value": "b"}]},
                       {"conversations": [{"from": "human"}]}])");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("1"), std::string::npos) << e.what();
  }
}

TEST(ShareGpt, MalformedJsonIsAParseError) { EXPECT_THROW(parse_sharegpt("[{"), ParseError); }

TEST(ShareGpt, RoleViolationsAreValidationErrors) {
  EXPECT_THROW(parse_sharegpt(R"([{"conversations": [{"from": "gpt", "value": "a"}]}])"), ValidationError);
  EXPECT_THROW(parse_sharegpt(R"([{"conversations": [{"from": "human", "value": "a"}, {"from": "human", "value": "b"}]}])"),
               ValidationError);
  EXPECT_THROW(parse_sharegpt(R"([{"conversations": [{"from": "human", "value": "a"}]}])"), ValidationError);
}

TEST(ShareGpt, DumpAndParseRoundTrip) {
  const std::vector<Conversation> conversations{
      {{{Role::human, "q1"}, {Role::gpt, "a1"}, {Role::human, "q2"}, {Role::gpt, "a\n2 \"quoted\""}}}};
  EXPECT_EQ(parse_sharegpt(dump_sharegpt(conversations)), conversations);
  const auto path = std::filesystem::temp_directory_path() / "bft_sharegpt_roundtrip.json";
  save_sharegpt(path.string(), conversations);
  EXPECT_EQ(load_sharegpt(path.string()), conversations);
  std::filesystem::remove(path);
}

TEST(ShareGpt, SyntheticSamplesExportAndReimport) {
  const SyntheticTaskSpec spec{.kind = TaskKind::reverse, .vocab_size = 16, .seed = 3};
  const auto samples = gen_synthetic(spec, 20);
  std::vector<Conversation> conversations;
  for (const auto& s : samples) conversations.push_back(to_conversation(s, kSmall));
  const auto back = parse_sharegpt(dump_sharegpt(conversations));
  for (std::size_t i = 0; i < samples.size(); ++i) {
    Sample again = to_sample(back[i], kSmall, TextEncoding::symbols);
    again.hard = samples[i].hard;
    EXPECT_EQ(again, samples[i]);
  }
}

TEST(ToSample, GptTurnsAreSupervisedIncludingSeparator) {
  const Conversation c{{{Role::human, "ab"}, {Role::gpt, "c"}, {Role::human, "d"}, {Role::gpt, "ef"}}};
  const Sample s = to_sample(c, SpecialTokens::bytes());
  EXPECT_EQ(s.tokens, ids({'a', 'b', 257, 'c', 257, 'd', 257, 'e', 'f', 257}));
  EXPECT_EQ(s.supervised, (std::vector<std::uint8_t>{0, 0, 0, 1, 1, 0, 0, 1, 1, 1}));
}

TEST(BuildBatch, PromptThreeResponseTwo) {
  const Sample s = Sample::prompt_response(ids({1, 2, 3}), ids({4, 5}));
  const TokenBatch batch = build_batch(std::span(&s, 1), 8, kSmall);
  EXPECT_EQ(batch.mask.row(0), (TokenGrid(1, 5) << 0, 0, 0, 1, 1).finished());
  EXPECT_EQ(batch.targets.row(0), (TokenGrid(1, 5) << 1, 2, 3, 4, 5).finished());
  EXPECT_EQ(batch.inputs.row(0), (TokenGrid(1, 5) << kSmall.bos, 1, 2, 3, 4).finished());
}

TEST(BuildBatch, ShorterSamplePadsWithMaskZero) {
  const std::vector<Sample> samples{Sample::prompt_response(ids({1, 2}), ids({3, 4})),
                                    Sample::prompt_response(ids({1, 2, 3}), ids({4, 5, 6}))};
  const TokenBatch batch = build_batch(samples, 8, kSmall);
  EXPECT_EQ(batch.steps(), 6);
  EXPECT_EQ(batch.lengths, (std::vector<Index>{4, 6}));
  for (Index t = 4; t < 6; ++t) {
    EXPECT_EQ(batch.mask(0, t), 0);
    EXPECT_EQ(batch.inputs(0, t), kSmall.pad);
    EXPECT_EQ(batch.targets(0, t), kSmall.pad);
  }
}

TEST(BuildBatch, MaskTotalEqualsResponseLengths) {
  const SyntheticTaskSpec spec{.kind = TaskKind::copy, .vocab_size = 16, .seed = 5};
  const auto samples = gen_synthetic(spec, 40);
  const TokenBatch batch = build_batch(samples, 24, kSmall);
  Index expected = 0;
  for (const auto& s : samples) expected += s.response_length();
  EXPECT_EQ(batch.mask.cast<Index>().sum(), expected);
}

TEST(BuildBatch, MaskMarksExactlyTheResponsePositions) {
  Rng rng(6);
  std::vector<Sample> samples;
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  for (int i = 0; i < 10; ++i) {
    std::vector<std::int32_t> prompt(1 + rng.below(5)), response(1 + rng.below(5));
    for (auto& v : prompt) v = static_cast<std::int32_t>(rng.below(13));
    for (auto& v : response) v = static_cast<std::int32_t>(rng.below(13));
    samples.push_back(Sample::prompt_response(prompt, response));
    spans.emplace_back(prompt.size(), response.size());
  }
  const TokenBatch batch = build_batch(samples, 16, kSmall);
  for (Index b = 0; b < 10; ++b) {
    const auto [p, r] = spans[static_cast<std::size_t>(b)];
    for (Index t = 0; t < batch.steps(); ++t) {
      const bool response = t >= static_cast<Index>(p) && t < static_cast<Index>(p + r);
      EXPECT_EQ(batch.mask(b, t), response ? 1 : 0);
    }
  }
}

TEST(BuildBatch, PromptIsLeftTruncatedResponseNever) {
  const Sample s = Sample::prompt_response(ids({1, 2, 3, 4, 5, 6}), ids({7, 8, 9}));
  const TokenBatch batch = build_batch(std::span(&s, 1), 5, kSmall);
  EXPECT_EQ(batch.targets.row(0), (TokenGrid(1, 5) << 5, 6, 7, 8, 9).finished());
  EXPECT_EQ(batch.mask.row(0).sum(), 3);
}

TEST(BuildBatch, OverlongResponseIsRejected) {
  const Sample s = Sample::prompt_response(ids({1}), ids({2, 3, 4, 5, 6}));
  EXPECT_FALSE(fit_to_context(s, 4).has_value());
  EXPECT_THROW(build_batch(std::span(&s, 1), 4, kSmall), ValidationError);
}

TEST(Synthetic, SameSpecSameHash) {
  const SyntheticTaskSpec spec{.kind = TaskKind::rare_key, .vocab_size = 32, .seed = 9, .label_noise = 0.2};
  EXPECT_EQ(dataset_hash(gen_synthetic(spec, 100)), dataset_hash(gen_synthetic(spec, 100)));
  SyntheticTaskSpec other = spec;
  other.seed = 10;
  EXPECT_NE(dataset_hash(gen_synthetic(spec, 100)), dataset_hash(gen_synthetic(other, 100)));
}

TEST(Synthetic, ZeroHardFractionGivesNoHardSamples) {
  for (TaskKind kind : {TaskKind::copy, TaskKind::reverse, TaskKind::modular_sum, TaskKind::rare_key}) {
    const SyntheticTaskSpec spec{.kind = kind, .vocab_size = 32, .hard_fraction = 0.0, .seed = 1};
    for (const auto& s : gen_synthetic(spec, 50)) EXPECT_FALSE(s.hard) << to_string(kind);
  }
}

TEST(Synthetic, HardFractionIsHonoured) {
  const SyntheticTaskSpec spec{.kind = TaskKind::copy, .vocab_size = 32, .hard_fraction = 0.2, .seed = 1};
  Index hard = 0;
  for (const auto& s : gen_synthetic(spec, 100)) hard += s.hard;
  EXPECT_EQ(hard, 20);
}

TEST(Synthetic, CopyResponseEqualsPromptPayload) {
  const SyntheticTaskSpec spec{.kind = TaskKind::copy, .vocab_size = 20, .seed = 2};
  const SpecialTokens special = SpecialTokens::for_vocab(20);
  for (const auto& s : gen_synthetic(spec, 200)) {
    const auto n = static_cast<std::size_t>(s.response_length());
    const std::vector<std::int32_t> prompt(s.tokens.begin(), s.tokens.end() - static_cast<std::ptrdiff_t>(n));
    const std::vector<std::int32_t> response(s.tokens.end() - static_cast<std::ptrdiff_t>(n), s.tokens.end());
    ASSERT_EQ(prompt.size(), response.size());
    EXPECT_EQ(prompt.back(), special.separator);
    EXPECT_EQ(prompt, response);
  }
}

TEST(Synthetic, ReverseAndModularSum) {
  const auto rev = gen_synthetic({.kind = TaskKind::reverse, .vocab_size = 20, .seed = 3}, 50);
  for (const auto& s : rev) {
    const auto n = static_cast<std::size_t>(s.response_length());
    std::vector<std::int32_t> prompt(s.tokens.begin(), s.tokens.begin() + static_cast<std::ptrdiff_t>(n - 1));
    std::reverse(prompt.begin(), prompt.end());
    EXPECT_TRUE(std::equal(prompt.begin(), prompt.end(), s.tokens.end() - static_cast<std::ptrdiff_t>(n)));
  }
  const auto sum = gen_synthetic({.kind = TaskKind::modular_sum, .vocab_size = 20, .seed = 4}, 50);
  for (const auto& s : sum) {
    ASSERT_EQ(s.response_length(), 2);
    std::int64_t total = 0;
    for (std::size_t i = 0; i + 3 < s.tokens.size(); ++i) total += s.tokens[i];
    EXPECT_EQ(s.tokens[s.tokens.size() - 2], total % 10);
  }
}

TEST(Synthetic, RareKeysOccurAtMostTwice) {
  const SyntheticTaskSpec spec{.kind = TaskKind::rare_key, .vocab_size = 32, .hard_fraction = 0.2, .seed = 5,
                               .common_repeats = 8};
  std::map<std::vector<std::int32_t>, std::pair<int, bool>> keys;
  for (const auto& s : gen_synthetic(spec, 400)) {
    const auto sep = std::find(s.tokens.begin(), s.tokens.end(), SpecialTokens::for_vocab(32).separator);
    const std::vector<std::int32_t> key(sep - 2, sep);
    auto& [count, hard] = keys[key];
    ++count;
    hard = s.hard;
  }
  for (const auto& [key, entry] : keys) {
    if (entry.second) EXPECT_LE(entry.first, 2);
    else EXPECT_EQ(entry.first, 8);
  }
}

TEST(Synthetic, RareKeyEvalQueriesEveryKeyWithConsistentValues) {
  const SyntheticTaskSpec spec{.kind = TaskKind::rare_key, .vocab_size = 32, .seed = 6};
  const auto train = gen_synthetic(spec, 200);
  // 40 hard samples on 20 rare keys, 160 common samples on 20 keys.
  const auto eval = gen_synthetic_eval(spec, 200, 40);
  const std::int32_t sep = SpecialTokens::for_vocab(32).separator;
  std::map<std::vector<std::int32_t>, std::vector<std::int32_t>> answers;
  for (const auto& s : train) {
    const auto q = std::find(s.tokens.begin(), s.tokens.end(), sep);
    answers[{q - 2, q}] = {q + 1, s.tokens.end()};
  }
  Index hard = 0;
  std::set<std::vector<std::int32_t>> queried;
  for (const auto& s : eval) {
    const auto q = std::find(s.tokens.begin(), s.tokens.end(), sep);
    const std::vector<std::int32_t> key(q - 2, q);
    queried.insert(key);
    ASSERT_TRUE(answers.count(key));
    EXPECT_EQ(answers[key], std::vector<std::int32_t>(q + 1, s.tokens.end()));
    hard += s.hard;
  }
  EXPECT_EQ(hard, 20);
  EXPECT_EQ(queried.size(), answers.size());
}

TEST(Synthetic, InvalidSpecIsRejected) {
  EXPECT_THROW(gen_synthetic({.kind = TaskKind::copy, .hard_fraction = 1.5}, 10), ConfigError);
  EXPECT_THROW(gen_synthetic({.kind = TaskKind::copy, .min_length = 5, .max_length = 2}, 10), ConfigError);
  EXPECT_THROW(parse_task_kind("sorting"), ConfigError);
}
