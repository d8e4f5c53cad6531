#include "attnrules/model.hpp"

#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include "attnrules/sae.hpp"
#include "test_util.hpp"

namespace attnrules {
namespace {

namespace fs = std::filesystem;

ToyModel one_hot_model(std::size_t vocab, std::size_t max_len = 8) {
  std::vector<std::string> words;
  for (std::size_t i = 0; i < vocab; ++i) words.push_back("w" + std::to_string(i));
  AttentionHead head(vocab, vocab);
  return ToyModel(words, TensorF32::identity(vocab), TensorF32({max_len, vocab}), {{0, 0, head}});
}

ToyModel random_model(Rng& rng, std::size_t vocab, std::size_t d_model, std::size_t d_head, std::size_t max_len) {
  std::vector<std::string> words;
  for (std::size_t i = 0; i < vocab; ++i) words.push_back("tok" + std::to_string(i));
  AttentionHead head(random_normal({d_head, d_model}, rng, 0.5), random_normal({d_head, d_model}, rng, 0.5),
                     random_normal({d_head, d_model}, rng, 0.5));
  return ToyModel(words, random_normal({vocab, d_model}, rng), random_normal({max_len, d_model}, rng, 0.1),
                  {{0, 0, head}});
}

TEST(Embed, ZeroPositionalTableGivesTokenRows) {
  Rng rng(2);
  std::vector<std::string> words{"a", "b", "c"};
  const TensorF32 tok = random_normal({3, 4}, rng);
  ToyModel m(words, tok, TensorF32({5, 4}), {});
  const TensorF32 x = embed(m, {{2, 0, 1}});
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_EQ(x(0, j), tok(2, j));
    EXPECT_EQ(x(1, j), tok(0, j));
    EXPECT_EQ(x(2, j), tok(1, j));
  }
}

TEST(Embed, EmptySequence) {
  const ToyModel m = one_hot_model(4);
  const TensorF32 x = embed(m, {});
  EXPECT_EQ(x.shape(), (Shape{0, 4}));
}

TEST(Embed, OneHotRowsAreUnitVectors) {
  const ToyModel m = one_hot_model(4);
  const TensorF32 x = embed(m, {{2, 0}});
  EXPECT_EQ(x(0, 2), 1.0f);
  EXPECT_EQ(x(1, 0), 1.0f);
  EXPECT_EQ(x(0, 0) + x(0, 1) + x(0, 3), 0.0f);
}

TEST(Embed, Errors) {
  const ToyModel m = one_hot_model(4, 3);
  EXPECT_THROW(embed(m, {{4}}), DomainError);
  EXPECT_THROW(embed(m, {{0, 1, 2, 3}}), DomainError);
}

TEST(AttentionLogits, ZeroProjectionsGiveZero) {
  const ToyModel m = one_hot_model(4);
  const TensorF32 l = attention_logits(m.heads()[0].weights, embed(m, {{0, 1, 2}}));
  for (float v : l.data()) EXPECT_EQ(v, 0.0f);
}

TEST(AttentionLogits, IdentityProjectionsMatchEqualTokens) {
  const std::size_t v = 5;
  AttentionHead head(TensorF32::identity(v), TensorF32::identity(v), TensorF32::identity(v));
  const TensorF32 x = embed(one_hot_model(v), {{1, 3, 1, 4}});
  const TensorF32 l = attention_logits(head, x);
  const std::vector<TokenId> ids{1, 3, 1, 4};
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t i = 0; i <= t; ++i) EXPECT_EQ(l(t, i), ids[t] == ids[i] ? 1.0f : 0.0f);
}

TEST(AttentionLogits, ShapeMismatch) {
  AttentionHead head(2, 3);
  EXPECT_THROW(attention_logits(head, TensorF32({2, 4})), DimensionError);
}

TEST(AttentionForward, SingleToken) {
  Rng rng(4);
  const ToyModel m = random_model(rng, 6, 5, 3, 4);
  const auto& head = m.heads()[0].weights;
  const TensorF32 x = embed(m, {{3}});
  const auto out = attention_forward(head, x);
  EXPECT_EQ(out.attn(0, 0), 1.0f);
  const TensorF32 vx = matvec(head.w_v, x.row(0));
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(out.y(0, j), vx[j], 1e-6);
}

TEST(AttentionForward, IdenticalTokensUniformAttention) {
  const ToyModel m = one_hot_model(4);
  const auto out = attention_forward(m.heads()[0].weights, embed(m, {{2, 2, 2, 2}}));
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t i = 0; i <= t; ++i) EXPECT_FLOAT_EQ(out.attn(t, i), 1.0f / static_cast<float>(t + 1));
}

TEST(AttentionForward, MatchesStraightLineDoubleOracle) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const ToyModel m = random_model(rng, 7, 6, 4, 6);
    const auto& head = m.heads()[0].weights;
    const TokenSequence seq{{static_cast<TokenId>(rng.below(7)), static_cast<TokenId>(rng.below(7)),
                             static_cast<TokenId>(rng.below(7)), static_cast<TokenId>(rng.below(7))}};
    const TensorF32 x = embed(m, seq);
    const auto out = attention_forward(head, x);
    const auto ref = testutil::reference_attention(head, x);
    for (std::size_t t = 0; t < 4; ++t) {
      for (std::size_t i = 0; i <= t; ++i) ASSERT_NEAR(out.attn(t, i), ref.attn[t][i], 1e-5);
      for (std::size_t j = 0; j < head.d_head(); ++j)
        ASSERT_NEAR(out.y(t, j), ref.y[t][j], 1e-5 * std::max(1.0, std::fabs(ref.y[t][j])));
    }
  }
}

TEST(AttentionForward, RowsSumToOne) {
  Rng rng(12);
  const ToyModel m = random_model(rng, 9, 8, 4, 16);
  TokenSequence seq;
  for (int i = 0; i < 16; ++i) seq.ids.push_back(static_cast<TokenId>(rng.below(9)));
  const auto out = attention_forward(m.heads()[0].weights, embed(m, seq));
  for (std::size_t t = 0; t < 16; ++t) {
    double s = 0;
    for (std::size_t i = 0; i < 16; ++i) s += out.attn(t, i);
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(AttentionForward, MaskedEntriesNeverInfluenceOutput) {
  Rng rng(13);
  const ToyModel m = random_model(rng, 5, 4, 3, 8);
  const auto& head = m.heads()[0].weights;
  const TensorF32 x = embed(m, {{0, 3, 1, 4, 2}});
  TensorF32 logits = attention_logits(head, x);
  const auto base = attention_from_logits(head, x, logits);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t i = t + 1; i < 5; ++i) logits(t, i) = static_cast<float>(rng.uniform(-1e3, 1e3));
  const auto perturbed = attention_from_logits(head, x, logits);
  EXPECT_EQ(base.y, perturbed.y);
  EXPECT_EQ(base.attn, perturbed.attn);
}

// Logits and output activations through exact SAE features equal the
// direct computation when the input dictionary reconstructs exactly.
TEST(FeatureExpansion, LogitsAndOutputMatchExpansion) {
  Rng rng(21);
  const std::size_t d = 8;
  const ToyModel m = [&] {
    std::vector<std::string> words;
    for (std::size_t i = 0; i < d; ++i) words.push_back("t" + std::to_string(i));
    AttentionHead head(random_normal({4, d}, rng), random_normal({4, d}, rng), random_normal({4, d}, rng));
    return ToyModel(words, TensorF32::identity(d), TensorF32({8, d}), {{0, 0, head}});
  }();
  const SaeDictionary sae_in = SaeDictionary::identity(d);
  const auto& head = m.heads()[0].weights;
  const TensorF32 u = random_normal({4}, rng);
  const TokenSequence seq{{1, 5, 2, 5, 7, 0}};
  const TensorF32 x = embed(m, seq);
  const TensorF32 logits = attention_logits(head, x);
  const auto out = attention_forward(head, x);
  const auto feats = sequence_features(m, {0, 0, Stream::input}, sae_in, seq);
  const auto ref = testutil::expanded_scores(head, sae_in, u, feats);
  for (std::size_t t = 0; t < seq.size(); ++t) {
    for (std::size_t i = 0; i <= t; ++i) {
      ASSERT_NEAR(logits(t, i), ref.logits[t][i], 1e-4 * std::max(1.0, std::fabs(ref.logits[t][i])));
    }
    const double direct = std::max(0.0, dot(out.y.row(t), u.data()));
    ASSERT_NEAR(direct, ref.activation[t], 1e-4 * std::max(1.0, ref.activation[t]));
  }
}

TEST(Tokenize, SplitsOnWhitespace) {
  std::vector<std::string> words{"<bos>", "If", "then", "x"};
  ToyModel m(words, TensorF32::identity(4), TensorF32({8, 4}), {});
  EXPECT_EQ(tokenize(m, "If then").ids, (std::vector<TokenId>{1, 2}));
  EXPECT_TRUE(tokenize(m, "").ids.empty());
  EXPECT_THROW(tokenize(m, "If maybe"), NotFoundError);
  EXPECT_EQ(detokenize(m, tokenize(m, "  If \t then\n x ")), "If then x");
}

TEST(Tokenize, RoundTripProperty) {
  Rng rng(17);
  const ToyModel m = one_hot_model(30);
  for (int trial = 0; trial < 100; ++trial) {
    std::string text;
    const std::size_t n = rng.below(12);
    for (std::size_t i = 0; i < n; ++i) {
      text += std::string(1 + rng.below(3), rng.below(2) ? ' ' : '\t');
      text += "w" + std::to_string(rng.below(30));
    }
    std::string normalized;
    std::istringstream in(text);
    std::string w;
    while (in >> w) normalized += (normalized.empty() ? "" : " ") + w;
    ASSERT_EQ(detokenize(m, tokenize(m, text)), normalized);
  }
}

TEST(ModelIo, SaveLoadRoundTrip) {
  Rng rng(30);
  const ToyModel m = random_model(rng, 6, 5, 3, 7);
  testutil::TempDir dir;
  save_model(m, dir.path() / "model.atrw");
  EXPECT_EQ(load_model(dir.path() / "model.atrw"), m);
}

TEST(ModelIo, CorruptedMagicIsFormatError) {
  Rng rng(31);
  testutil::TempDir dir;
  const auto path = dir.path() / "model.atrw";
  save_model(random_model(rng, 3, 2, 2, 2), path);
  std::string bytes = atrw::read_file(path);
  bytes[0] = 'X';
  atrw::write_file(path, bytes);
  EXPECT_THROW(load_model(path), FormatError);
}

TEST(Atrw, RejectsVersionTruncationAndBadTables) {
  const std::string good = atrw::encode({{"a", TensorF32::vector({1, 2, 3})}, {"b", TensorF32({2, 2})}});
  EXPECT_EQ(atrw::decode(good).size(), 2u);

  std::string bad_version = good;
  bad_version[4] = 2;
  EXPECT_THROW(atrw::decode(bad_version), FormatError);

  EXPECT_THROW(atrw::decode(good.substr(0, good.size() - 3)), FormatError);
  EXPECT_THROW(atrw::decode(good.substr(0, 10)), FormatError);

  EXPECT_THROW(atrw::decode(good + std::string(4, '\0')), FormatError);

  const std::string dup = atrw::encode({{"a", TensorF32({1})}, {"a", TensorF32({1})}});
  EXPECT_THROW(atrw::decode(dup), FormatError);
}

TEST(Atrw, PayloadsAre64ByteAligned) {
  const std::string bytes = atrw::encode({{"x", TensorF32::vector({1.5f})}, {"yy", TensorF32::vector({-2.0f, 4.0f})}});
  // Header: 4 + 4 + 4 + (2 + 1 + 1 + 8) + (2 + 2 + 1 + 8) = 37 -> first payload at 64.
  ASSERT_EQ(bytes.size(), 128u + 8u);
  float v;
  std::memcpy(&v, bytes.data() + 64, 4);
  EXPECT_EQ(v, 1.5f);
  std::memcpy(&v, bytes.data() + 128, 4);
  EXPECT_EQ(v, -2.0f);
}

// tests/fixtures/golden.atrw was produced once by make_golden_fixture (see
// test_util.hpp) and its SHA-256 recorded here.
TEST(Atrw, GoldenFixture) {
  const fs::path path = fs::path(ATTNRULES_FIXTURE_DIR) / "golden.atrw";
  const std::string bytes = atrw::read_file(path);
  EXPECT_EQ(testutil::sha256_hex(bytes), "9303609f4a5c1dca5faf933d5103398edf8f729b347aaaa4e37cc2c73acf91b8");
  EXPECT_EQ(atrw::encode(testutil::golden_tensors()), bytes);
  const ToyModel m = load_model(path);
  EXPECT_EQ(m.vocab_size(), 4u);
  EXPECT_EQ(m.d_model(), 3u);
  EXPECT_EQ(m.max_len(), 5u);
  ASSERT_EQ(m.heads().size(), 1u);
  EXPECT_EQ(m.heads()[0].weights.d_head(), 2u);
  EXPECT_EQ(m.token(3), "dog");
}

}  // namespace
}  // namespace attnrules
