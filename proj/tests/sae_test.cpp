#include "attnrules/sae.hpp"

#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "sae_fixtures.hpp"
#include "test_util.hpp"

namespace attnrules {
namespace {

using testutil::Matrix;

TEST(Encode, ReluOfShiftedProjection) {
  SaeDictionary sae(TensorF32::matrix({{1, 0}, {0, 1}, {1, 1}}), TensorF32::matrix({{1, 0}, {0, 1}, {0, 0}}),
                    TensorF32::vector({0, 0, -1}), TensorF32::vector({0.5f, 0}));
  // x - b_dec = (1.5, -2) -> pre = (1.5, -2, -1.5)
  const TensorF32 f = encode(sae, std::vector<float>{2, -2});
  EXPECT_EQ(f, TensorF32::vector({1.5f, 0, 0}));
  const SparseFeatures sparse = encode_sparse(sae, std::vector<float>{2, -2});
  ASSERT_EQ(sparse.size(), 1u);
  EXPECT_EQ(sparse[0].index, 0u);
  EXPECT_EQ(sparse[0].value, 1.5f);
  EXPECT_EQ(decode(sae, f.data()), TensorF32::vector({2.0f, 0}));
}

TEST(Encode, WidthMismatchThrows) {
  const auto sae = SaeDictionary::identity(3);
  EXPECT_THROW(encode(sae, std::vector<float>{1, 2}), DimensionError);
  EXPECT_THROW(decode(sae, std::vector<float>{1, 2}), DimensionError);
}

TEST(Encode, OrthonormalDictionaryReconstructsNonnegativeCombinations) {
  Rng rng(4);
  const TensorF32 atoms = testutil::random_orthonormal(8, 8, rng);
  const SaeDictionary sae(atoms, atoms);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> coef(8);
    std::vector<float> x(8, 0.0f);
    for (std::size_t j = 0; j < 8; ++j) {
      coef[j] = rng.uniform() < 0.5 ? 0.0 : rng.uniform(0.1, 2.0);
      for (std::size_t i = 0; i < 8; ++i) x[i] += static_cast<float>(coef[j] * atoms(j, i));
    }
    const TensorF32 f = encode(sae, x);
    for (std::size_t j = 0; j < 8; ++j) ASSERT_NEAR(f[j], coef[j], 1e-5);
    const TensorF32 xhat = decode(sae, f.data());
    for (std::size_t i = 0; i < 8; ++i) ASSERT_NEAR(xhat[i], x[i], 1e-5);
  }
}

TEST(Encode, BatchAgreesWithRows) {
  Rng rng(8);
  const auto sae = init_sae(6, 4, 2);
  const TensorF32 x = random_normal({5, 4}, rng);
  const TensorF32 fb = encode_batch(sae, x);
  for (std::size_t b = 0; b < 5; ++b) {
    const TensorF32 f = encode(sae, x.row(b));
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(fb(b, j), f[j], 1e-6);
  }
}

TEST(Loss, ClosedFormForScalarDictionary) {
  // One feature, dim 1, weights w_e=2, w_d=0.5, b_enc=0, b_dec=0: f = relu(2x), xhat = x for x>0, 0 otherwise.
  SaeDictionary sae(TensorF32::matrix({{2}}), TensorF32::matrix({{0.5f}}));
  const TensorF32 batch = TensorF32::matrix({{1}, {-3}});
  const SaeLoss loss = sae_loss(sae, batch, 0.1);
  EXPECT_DOUBLE_EQ(loss.mse, (0.0 + 9.0) / 2.0);
  EXPECT_DOUBLE_EQ(loss.l1, 0.1 * 2.0 / 2.0);
  EXPECT_DOUBLE_EQ(loss.total, loss.mse + loss.l1);
  EXPECT_DOUBLE_EQ(sae_loss(sae, batch, 0.0).total, loss.mse);
}

// Loss evaluated in double from double parameters, independent of the
// library's encode/decode kernels.
struct DoubleSae {
  Matrix enc, dec;
  std::vector<double> b_enc, b_dec;
};

DoubleSae to_double(const SaeDictionary& s) {
  DoubleSae d;
  d.enc.assign(s.n(), std::vector<double>(s.dim()));
  d.dec = d.enc;
  for (std::size_t j = 0; j < s.n(); ++j)
    for (std::size_t i = 0; i < s.dim(); ++i) {
      d.enc[j][i] = s.encoder(j, i);
      d.dec[j][i] = s.decoder(j, i);
    }
  d.b_enc.assign(s.b_enc.data().begin(), s.b_enc.data().end());
  d.b_dec.assign(s.b_dec.data().begin(), s.b_dec.data().end());
  return d;
}

// Returns the loss and the active pattern (for detecting kink crossings).
std::pair<double, std::vector<bool>> double_loss(const DoubleSae& s, const TensorF32& batch, double l1) {
  const std::size_t n = s.enc.size(), dim = s.b_dec.size();
  double total = 0;
  std::vector<bool> pattern;
  for (std::size_t b = 0; b < batch.rows(); ++b) {
    std::vector<double> xhat(s.b_dec);
    for (std::size_t j = 0; j < n; ++j) {
      double pre = s.b_enc[j];
      for (std::size_t i = 0; i < dim; ++i) pre += s.enc[j][i] * (batch(b, i) - s.b_dec[i]);
      pattern.push_back(pre > 0);
      const double f = pre > 0 ? pre : 0;
      total += l1 * f;
      for (std::size_t i = 0; i < dim; ++i) xhat[i] += f * s.dec[j][i];
    }
    for (std::size_t i = 0; i < dim; ++i) total += (xhat[i] - batch(b, i)) * (xhat[i] - batch(b, i));
  }
  return {total / static_cast<double>(batch.rows()), pattern};
}

TEST(Gradients, MatchCentralFiniteDifferences) {
  Rng rng(21);
  SaeDictionary sae = init_sae(5, 4, 13);
  for (auto& v : sae.b_enc.data()) v = static_cast<float>(rng.uniform(-0.2, 0.2));
  for (auto& v : sae.b_dec.data()) v = static_cast<float>(rng.uniform(-0.2, 0.2));
  const TensorF32 batch = random_normal({6, 4}, rng);
  const double l1 = 0.05;
  const SaeGradients g = sae_gradients(sae, batch, l1);
  const DoubleSae base = to_double(sae);
  EXPECT_NEAR(g.loss.total, double_loss(base, batch, l1).first, 1e-5);

  // The loss is piecewise quadratic, so a central difference is exact away
  // from activation kinks; coordinates whose probe crosses a kink are skipped.
  const double h = 1e-3;
  std::size_t checked = 0, skipped = 0;
  auto probe = [&](auto&& param_ref, float analytic) {
    DoubleSae plus = base, minus = base;
    param_ref(plus) += h;
    param_ref(minus) -= h;
    const auto [lp, pp] = double_loss(plus, batch, l1);
    const auto [lm, pm] = double_loss(minus, batch, l1);
    if (pp != pm) {
      ++skipped;
      return;
    }
    ++checked;
    const double fd = (lp - lm) / (2 * h);
    EXPECT_NEAR(analytic, fd, 1e-4 * std::max(1.0, std::fabs(fd)));
  };
  for (std::size_t j = 0; j < 5; ++j)
    for (std::size_t i = 0; i < 4; ++i) {
      probe([&](DoubleSae& s) -> double& { return s.enc[j][i]; }, g.encoder(j, i));
      probe([&](DoubleSae& s) -> double& { return s.dec[j][i]; }, g.decoder(j, i));
    }
  for (std::size_t j = 0; j < 5; ++j) probe([&](DoubleSae& s) -> double& { return s.b_enc[j]; }, g.b_enc[j]);
  for (std::size_t i = 0; i < 4; ++i) probe([&](DoubleSae& s) -> double& { return s.b_dec[i]; }, g.b_dec[i]);
  EXPECT_GE(checked, 40u);
  EXPECT_LE(skipped, 8u);
}

TrainConfig small_config(std::size_t steps) {
  TrainConfig cfg;
  cfg.batch_size = 64;
  cfg.steps = steps;
  cfg.l1_coefficient = 1e-2;
  cfg.lr = 3e-3;
  cfg.resample_checkpoints = {};
  cfg.dead_window = 200;
  cfg.seed = 7;
  return cfg;
}

TEST(Train, ZeroStepsReturnsInit) {
  const auto init = init_sae(4, 4, 1);
  const auto result = train_sae(small_config(0), init, [](std::size_t) { return TensorF32({1, 4}); });
  EXPECT_EQ(result.sae, init);
  EXPECT_TRUE(result.history.empty());
}

TEST(Train, DeterministicForFixedSeed) {
  Rng rng(2);
  const testutil::SparseSource src{testutil::random_orthonormal(8, 8, rng), 2, 32, 5};
  const auto a = train_sae(small_config(50), init_sae(8, 8, 3), src);
  const auto b = train_sae(small_config(50), init_sae(8, 8, 3), src);
  EXPECT_EQ(a.sae, b.sae);
  ASSERT_EQ(a.history.size(), 50u);
  EXPECT_EQ(a.history.back().step, 50u);
}

TEST(Train, DecoderRowsStayUnitNorm) {
  Rng rng(6);
  const testutil::SparseSource src{testutil::random_orthonormal(8, 8, rng), 2, 32, 5};
  SaeTrainer trainer(small_config(100), init_sae(12, 8, 9));
  for (std::size_t s = 0; s < 100; ++s) {
    trainer.step(src(s));
    for (std::size_t j = 0; j < 12; ++j) ASSERT_NEAR(l2_norm(trainer.sae().decoder.row(j)), 1.0, 1e-4);
  }
}

TEST(Train, RecoversSmallDictionary) {
  Rng rng(10);
  const testutil::SparseSource src{testutil::random_orthonormal(16, 16, rng), 2, 64, 11};
  const auto result = train_sae(small_config(3000), init_sae(16, 16, 12), src);
  EXPECT_GE(testutil::variance_explained(result.sae, src(999999)), 0.9);
  EXPECT_GE(testutil::mean_matched_cosine(result.sae, src.atoms), 0.8);
  EXPECT_LT(result.history.back().total, result.history.front().total);
}

TEST(Train, NonFiniteBatchRaises) {
  SaeTrainer trainer(small_config(1), init_sae(2, 2, 1));
  TensorF32 batch({1, 2});
  batch[0] = 3e38f;
  batch[1] = 3e38f;
  EXPECT_THROW(trainer.step(batch), DomainError);
}

TEST(Resample, EmptyDeadSetIsNoOp) {
  auto sae = init_sae(4, 4, 1);
  const auto before = sae;
  Rng rng(1);
  EXPECT_EQ(resample_dead(sae, {}, TensorF32({3, 4}), rng), 0u);
  EXPECT_EQ(sae, before);
}

TEST(Resample, EmptyBatchWarnsAndLeavesDictionary) {
  auto sae = init_sae(4, 4, 1);
  const auto before = sae;
  Rng rng(1);
  EXPECT_EQ(resample_dead(sae, {0, 1}, TensorF32({0, 4}), rng), 0u);
  EXPECT_EQ(sae, before);
}

TEST(Resample, AllDeadFeaturesPointAtHighLossExamples) {
  auto sae = init_sae(3, 4, 1);
  for (auto& v : sae.b_enc.data()) v = -100.0f;  // nothing fires, every example is unexplained
  const TensorF32 batch = TensorF32::matrix({{2, 0, 0, 0}, {0, 3, 0, 0}});
  Rng rng(5);
  ASSERT_EQ(resample_dead(sae, {0, 1, 2}, batch, rng), 3u);
  for (std::size_t j = 0; j < 3; ++j) {
    EXPECT_NEAR(l2_norm(sae.decoder.row(j)), 1.0, 1e-6);
    EXPECT_EQ(sae.b_enc[j], 0.0f);
    // The new direction is one of the batch examples, and fires on it.
    const bool is_first = sae.decoder(j, 0) > 0.5f;
    const TensorF32 f = encode(sae, batch.row(is_first ? 0 : 1));
    EXPECT_GT(f[j], 0.0f);
  }
}

TEST(Resample, TrainerRevivesDeadFeaturesAtCheckpoint) {
  Rng rng(3);
  const testutil::SparseSource src{testutil::random_orthonormal(8, 8, rng), 2, 32, 5};
  auto init = init_sae(8, 8, 4);
  for (std::size_t j = 0; j < 3; ++j) init.b_enc[j] = -10.0f;
  TrainConfig cfg = small_config(0);
  cfg.dead_window = 20;
  cfg.resample_checkpoints = {40};
  SaeTrainer trainer(cfg, init);
  for (std::size_t s = 0; s < 39; ++s) trainer.step(src(s));
  EXPECT_EQ(trainer.history().back().dead, 3u);
  const auto rec = trainer.step(src(39));
  EXPECT_EQ(rec.dead, 0u);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(trainer.sae().b_enc[j], 0.0f);
}

TEST(Resample, ResumedTrainingMatchesUninterrupted) {
  Rng rng(3);
  const testutil::SparseSource src{testutil::random_orthonormal(8, 8, rng), 2, 32, 5};
  auto init = init_sae(8, 8, 4);
  init.b_enc[0] = -10.0f;
  TrainConfig cfg = small_config(0);
  cfg.dead_window = 10;
  cfg.resample_checkpoints = {30, 60};
  SaeTrainer full(cfg, init);
  for (std::size_t s = 0; s < 80; ++s) full.step(src(s));

  SaeTrainer first(cfg, init);
  for (std::size_t s = 0; s < 45; ++s) first.step(src(s));
  SaeTrainer resumed(cfg, init_sae(8, 8, 99));
  resumed.restore(first.sae(), first.optimizer(), first.last_fired(), first.steps_done(), first.history());
  for (std::size_t s = 45; s < 80; ++s) resumed.step(src(s));
  EXPECT_EQ(resumed.sae(), full.sae());
}

TEST(Persistence, SaeRoundTrip) {
  testutil::TempDir dir;
  auto sae = init_sae(5, 3, 8);
  sae.b_enc[2] = 0.25f;
  save_sae(sae, dir.path() / "sae.atrw");
  EXPECT_EQ(load_sae(dir.path() / "sae.atrw"), sae);
}

// One-hot model whose head copies the previous token's embedding.
ToyModel tiny_model() {
  const std::size_t v = 4;
  TensorF32 wq({v, v}), wk({v, v});
  return ToyModel({"<bos>", "a", "b", "c"}, TensorF32::identity(v), TensorF32({6, v}),
                  {HeadEntry{0, 0, AttentionHead(wq, wk, TensorF32::identity(v))}});
}

Corpus tiny_corpus() { return {{{0, 1, 2}}, {{0, 3}}, {{0, 2, 2, 1}}}; }

TEST(Index, ZeroEncoderGivesEmptyIndex) {
  SaeDictionary sae(TensorF32({4, 4}), TensorF32::identity(4));
  const auto index = collect_activations(tiny_model(), {0, 0, Stream::input}, sae, tiny_corpus(), 100);
  EXPECT_TRUE(index.records().empty());
  for (std::size_t f = 0; f < 4; ++f) EXPECT_EQ(index.active_sequence_count(f), 0u);
}

TEST(Index, InputStreamCountsTokenOccurrences) {
  const auto index =
      collect_activations(tiny_model(), {0, 0, Stream::input}, SaeDictionary::identity(4), tiny_corpus(), 100);
  EXPECT_EQ(index.n_sequences(), 3u);
  EXPECT_EQ(index.active_sequence_count(0), 3u);
  EXPECT_EQ(index.active_sequence_count(2), 2u);
  EXPECT_EQ(index.active_sequence_count(3), 1u);
  EXPECT_EQ(index.activation(2, 2, 1), 1.0f);
  EXPECT_EQ(index.activation(2, 2, 0), 0.0f);
  const auto peaks = index.peaks(2);
  ASSERT_EQ(peaks.size(), 2u);
  EXPECT_EQ(peaks[1].seq, 2u);
  EXPECT_EQ(peaks[1].pos, 1u);  // first of the tied positions
  for (std::size_t f = 0; f < 4; ++f) EXPECT_LE(index.active_sequence_count(f), index.n_sequences());
}

TEST(Index, OutputStreamAveragesPrefix) {
  // Uniform attention: output at position p is the mean of the prefix embeddings.
  const auto index =
      collect_activations(tiny_model(), {0, 0, Stream::output}, SaeDictionary::identity(4), tiny_corpus(), 1);
  EXPECT_EQ(index.n_sequences(), 1u);
  EXPECT_NEAR(index.activation(0, 0, 2), 1.0 / 3.0, 1e-6);
  EXPECT_NEAR(index.activation(1, 0, 1), 0.5, 1e-6);
}

TEST(Index, JsonlRoundTrip) {
  const auto index =
      collect_activations(tiny_model(), {0, 0, Stream::output}, SaeDictionary::identity(4), tiny_corpus(), 100);
  const auto back = index_from_jsonl(index_to_jsonl(index), index_summary(index));
  EXPECT_EQ(back, index);
}

TEST(Index, RejectsInconsistentRecords) {
  EXPECT_THROW(ActivationIndex(2, {3}, {{5, 0, 0, 1.0f}}), FormatError);
  EXPECT_THROW(ActivationIndex(2, {3}, {{0, 0, 3, 1.0f}}), FormatError);
  EXPECT_THROW(ActivationIndex(2, {3}, {{0, 0, 1, 0.0f}}), FormatError);
  EXPECT_THROW(ActivationIndex(2, {3}, {{0, 0, 1, 1.0f}, {0, 0, 1, 2.0f}}), FormatError);
  EXPECT_THROW(ActivationIndex(2, {3}, {}).records(2), NotFoundError);
}

}  // namespace
}  // namespace attnrules
