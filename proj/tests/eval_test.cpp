#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "attnrules/eval.hpp"
#include "attnrules/synth.hpp"
#include "test_util.hpp"

namespace attnrules {
namespace {

Metrics counts(std::size_t tp, std::size_t fp, std::size_t fn, std::size_t tn) {
  std::vector<bool> pred, actual;
  auto add = [&](std::size_t n, bool p, bool a) {
    for (std::size_t i = 0; i < n; ++i) {
      pred.push_back(p);
      actual.push_back(a);
    }
  };
  add(tp, true, true);
  add(fp, true, false);
  add(fn, false, true);
  add(tn, false, false);
  return binary_metrics(pred, actual);
}

TEST(Metrics, PerfectPrediction) {
  const auto m = counts(5, 0, 0, 5);
  EXPECT_EQ(m.precision, 1.0);
  EXPECT_EQ(m.recall, 1.0);
  EXPECT_EQ(m.f1, 1.0);
}

TEST(Metrics, AllNegativePredictions) {
  const auto m = counts(0, 0, 4, 6);
  EXPECT_EQ(m.precision, 1.0);
  EXPECT_EQ(m.recall, 0.0);
  EXPECT_EQ(m.f1, 0.0);
}

TEST(Metrics, OneTrueOneFalsePositive) {
  const auto m = counts(1, 1, 0, 0);
  EXPECT_DOUBLE_EQ(m.precision, 0.5);
  EXPECT_DOUBLE_EQ(m.recall, 1.0);
  EXPECT_DOUBLE_EQ(m.f1, 2.0 / 3.0);
}

TEST(Metrics, NoActualPositivesGivesUnitRecall) {
  const auto m = counts(0, 2, 0, 3);
  EXPECT_EQ(m.recall, 1.0);
  EXPECT_EQ(m.precision, 0.0);
}

TEST(Metrics, LengthMismatchThrows) {
  EXPECT_THROW(binary_metrics({true, false}, {true}), DimensionError);
}

TEST(Metrics, RandomCountsStayInBounds) {
  Rng rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    const auto m = counts(rng.below(20), rng.below(20), rng.below(20), rng.below(20));
    for (double v : {m.precision, m.recall, m.f1}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    const double lo = std::min(m.precision, m.recall), hi = std::max(m.precision, m.recall);
    EXPECT_LE(m.f1, 2.0 * lo / (1.0 + lo) + 1e-12);
    EXPECT_GE(m.f1, lo - 1e-12);
    EXPECT_LE(m.f1, hi + 1e-12);
  }
}

TEST(Dfa, SumsToProjectedHeadOutput) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t dm = 2 + rng.below(12), dh = 1 + rng.below(8), len = 1 + rng.below(10);
    const AttentionHead head(random_normal({dh, dm}, rng, 0.5), random_normal({dh, dm}, rng, 0.5),
                             random_normal({dh, dm}, rng, 0.5));
    const TensorF32 x = random_normal({len, dm}, rng);
    const TensorF32 u = random_normal({dh}, rng);
    const std::size_t t = rng.below(len);
    const auto parts = dfa(head, u.data(), x, t);
    ASSERT_EQ(parts.size(), t + 1);
    double sum = 0.0;
    for (double p : parts) sum += p;
    const auto y = attention_forward(head, x).y;
    EXPECT_NEAR(sum, dot(y.row(t), u.data()), 1e-5);
  }
}

TEST(Dfa, RejectsOutOfRangePosition) {
  const AttentionHead head(TensorF32({1, 2}), TensorF32({1, 2}), TensorF32({1, 2}));
  const TensorF32 x({3, 2});
  const TensorF32 u({1});
  EXPECT_THROW(dfa(head, u.data(), x, 3), DomainError);
}

PlantSpec absence_spec() {
  PlantSpec s;
  s.kind = PlantKind::absence;
  s.key = 3;
  s.query = 7;
  s.distractor = 11;
  s.output_feature = 5;
  return s;
}

TEST(Intervene, PlantedAbsenceDecreasesWithRepeats) {
  const auto gt = plant_absence({}, {absence_spec()});
  const TokenSequence s{{kBos, 20, 3, 21, 22, 7}};
  double prev = INFINITY;
  for (std::size_t r = 0; r <= 4; ++r) {
    const double act = intervene_prepend(gt.model, {}, gt.sae_out, 5, s, 5, 11, r);
    EXPECT_LT(act, prev) << "repeats " << r;
    prev = act;
  }
}

TEST(Intervene, ZeroRepeatsIsBitIdentical) {
  const auto gt = plant_absence({}, {absence_spec()});
  const TokenSequence s{{kBos, 20, 3, 21, 22, 7}};
  const auto feats = sequence_features(gt.model, {}, gt.sae_out, s);
  float expected = 0.0f;
  for (const auto& f : feats[5])
    if (f.index == 5) expected = f.value;
  ASSERT_GT(expected, 0.0f);
  EXPECT_EQ(static_cast<float>(intervene_prepend(gt.model, {}, gt.sae_out, 5, s, 5, 11, 0)), expected);
}

TEST(Intervene, InsertsAfterBos) {
  // The distractor lands between <bos> and the key, so a matched pattern stays matched.
  const auto gt = plant_absence({}, {absence_spec()});
  const TokenSequence s{{kBos, 3, 7}};
  const TokenSequence manual{{kBos, 11, 11, 3, 7}};
  EXPECT_DOUBLE_EQ(intervene_prepend(gt.model, {}, gt.sae_out, 5, s, 2, 11, 2),
                   encode(gt.sae_out, attention_forward(gt.model.head(0, 0).weights, embed(gt.model, manual)).y.row(4))[5]);
}

TEST(Intervene, OverflowingMaxLenThrows) {
  const auto gt = plant_absence({}, {absence_spec()});
  TokenSequence s;
  s.ids.assign(60, 20);
  s.ids[0] = kBos;
  EXPECT_NO_THROW(intervene_prepend(gt.model, {}, gt.sae_out, 5, s, 59, 11, 4));
  EXPECT_THROW(intervene_prepend(gt.model, {}, gt.sae_out, 5, s, 59, 11, 5), DomainError);
}

TEST(PickDistractor, ArgmaxOverTokens) {
  const auto gt = plant_absence({}, {absence_spec()});
  EXPECT_EQ(pick_distractor_token(gt.sae_in, 11, gt.model.token_embeddings()), 11u);
  EXPECT_EQ(pick_distractor_token(gt.sae_in, 40, gt.model.token_embeddings()), 40u);
}

TEST(PickDistractor, TiesGoToLowestId) {
  SaeDictionary sae = init_sae(1, 2, 1);
  sae.encoder = TensorF32({1, 2}, {1.0f, 0.0f});
  sae.b_enc = TensorF32({1});
  sae.b_dec = TensorF32({2});
  const TensorF32 emb({4, 2}, {0.0f, 1.0f, 2.0f, 0.0f, 2.0f, 5.0f, 1.0f, 1.0f});
  EXPECT_EQ(pick_distractor_token(sae, 0, emb), 1u);
}

TEST(PickDistractor, FeatureThatNeverFiresFallsBackToFirstToken) {
  SaeDictionary sae = init_sae(1, 2, 1);
  sae.encoder = TensorF32({1, 2}, {-1.0f, -1.0f});
  sae.b_enc = TensorF32({1});
  sae.b_dec = TensorF32({2});
  const TensorF32 emb({3, 2}, {1.0f, 0.0f, 0.0f, 1.0f, 1.0f, 1.0f});
  EXPECT_EQ(pick_distractor_token(sae, 0, emb), 0u);
  EXPECT_THROW(pick_distractor_token(sae, 1, emb), NotFoundError);
}

// 20 skip-gram plants over 2000 sequences: each feature fires in roughly a
// tenth of the corpus.
struct SkipgramWorld {
  GroundTruth gt;
  GeneratedCorpus corpus;
  ActivationIndex index;

  static const SkipgramWorld& get() {
    static const SkipgramWorld w = [] {
      SkipgramWorld w;
      w.gt = plant({}, random_specs(PlantKind::skipgram, 20, {}, 5));
      CorpusParams cp;
      cp.seed = 9;
      w.corpus = gen_corpus(w.gt, cp);
      w.index = collect_activations(w.gt.model, {}, w.gt.sae_out, w.corpus.sequences, cp.n_sequences);
      return w;
    }();
    return w;
  }
};

TEST(Dataset, PlantedFeaturesAreEligible) {
  const auto& w = SkipgramWorld::get();
  for (const auto& s : w.gt.specs) EXPECT_FALSE(eligibility_problem(w.index, s.output_feature)) << s.output_feature;
}

TEST(Dataset, DeterministicForSeed) {
  const auto& w = SkipgramWorld::get();
  const FeatureRef f{"out", w.gt.specs[0].output_feature, ""};
  EXPECT_EQ(build_exemplar_dataset(w.index, f, 4), build_exemplar_dataset(w.index, f, 4));
  EXPECT_NE(build_exemplar_dataset(w.index, f, 4).negatives, build_exemplar_dataset(w.index, f, 5).negatives);
}

TEST(Dataset, PositivesAreTopPeaksAndNegativesInactive) {
  const auto& w = SkipgramWorld::get();
  const auto g = w.gt.specs[1].output_feature;
  const auto ds = build_exemplar_dataset(w.index, {"out", g, ""}, 7);
  ASSERT_EQ(ds.positives.size(), 150u);
  ASSERT_EQ(ds.negatives.size(), 150u);

  auto peaks = w.index.peaks(g);
  float floor = INFINITY;
  for (std::size_t i = 0; i < ds.positives.size(); ++i) {
    const auto& e = ds.positives[i];
    EXPECT_EQ(e.activation, w.index.activation(g, e.seq, e.pos));
    for (std::uint32_t p = 0; p < e.pos; ++p) EXPECT_LT(w.index.activation(g, e.seq, p), e.activation);
    if (i > 0) {
      const auto& prev = ds.positives[i - 1];
      EXPECT_TRUE(prev.activation > e.activation || (prev.activation == e.activation && prev.seq < e.seq));
    }
    floor = std::min(floor, e.activation);
  }
  std::set<std::uint32_t> chosen;
  for (const auto& e : ds.positives) chosen.insert(e.seq);
  for (const auto& p : peaks)
    if (!chosen.count(p.seq)) EXPECT_LE(p.act, floor);

  for (const auto& e : ds.negatives) {
    EXPECT_EQ(peaks.end(),
              std::find_if(peaks.begin(), peaks.end(), [&](const SequencePeak& p) { return p.seq == e.seq; }));
    const std::uint32_t one_based = e.pos + 1;
    EXPECT_GT(one_based, 1u);
    EXPECT_LE(one_based, std::min<std::uint32_t>(64, w.index.sequence_lengths()[e.seq]));
    EXPECT_EQ(e.activation, 0.0f);
  }
}

TEST(Dataset, SplitsAreBalancedThirds) {
  const auto& w = SkipgramWorld::get();
  const auto ds = build_exemplar_dataset(w.index, {"out", w.gt.specs[2].output_feature, ""}, 1);
  for (const auto* side : {&ds.positives, &ds.negatives}) {
    std::size_t n[3] = {0, 0, 0};
    for (const auto& e : *side) ++n[static_cast<int>(e.split)];
    EXPECT_LE(*std::max_element(n, n + 3) - *std::min_element(n, n + 3), 1u);
  }
}

TEST(Dataset, EverywhereActiveFeatureIsIneligible) {
  std::vector<ActivationRecord> recs;
  for (std::uint32_t s = 0; s < 400; ++s) recs.push_back({0, s, 0, 1.0f});
  const ActivationIndex index(1, std::vector<std::uint32_t>(400, 8), recs);
  try {
    build_exemplar_dataset(index, {"out", 0, ""}, 1);
    FAIL() << "expected EligibilityError";
  } catch (const EligibilityError& e) {
    EXPECT_NE(std::string(e.what()).find("inactive"), std::string::npos);
  }
}

TEST(Dataset, RareFeatureIsIneligible) {
  std::vector<ActivationRecord> recs;
  for (std::uint32_t s = 0; s < 149; ++s) recs.push_back({0, s, 1, 1.0f});
  const ActivationIndex index(1, std::vector<std::uint32_t>(1000, 8), recs);
  try {
    build_exemplar_dataset(index, {"out", 0, ""}, 1);
    FAIL() << "expected EligibilityError";
  } catch (const EligibilityError& e) {
    EXPECT_NE(std::string(e.what()).find("active in 149"), std::string::npos);
  }
}

TEST(Dataset, JsonRoundTrip) {
  const auto& w = SkipgramWorld::get();
  const auto ds = build_exemplar_dataset(w.index, {"out", w.gt.specs[3].output_feature, "g"}, 2);
  EXPECT_EQ(dataset_from_json(nlohmann::json::parse(dataset_to_json(ds).dump())), ds);
  auto bad = dataset_to_json(ds);
  bad["schema_version"] = 7;
  EXPECT_THROW(dataset_from_json(bad), FormatError);
}

TEST(EvaluateRules, PlantedSkipgramRulesSeparateTestSplit) {
  const auto& w = SkipgramWorld::get();
  const auto& s = w.gt.specs[4];
  const auto ds = build_exemplar_dataset(w.index, {"out", s.output_feature, ""}, 3);
  const ScoreContext ctx(w.gt.sae_in, w.gt.model.head(0, 0).weights, w.gt.sae_out.encoder.row(s.output_feature));
  RuleSet rs;
  rs.output_feature = {"out", s.output_feature, ""};
  rs.rules = rank_weight_based(select_candidates(ctx));
  ASSERT_EQ(rs.rules.front().key.index, s.key);
  ASSERT_EQ(rs.rules.front().query.index, s.query);
  auto lookup = [&, cache = std::map<std::uint32_t, FeatureSequence>()](std::uint32_t seq) mutable -> const FeatureSequence& {
    auto it = cache.find(seq);
    if (it == cache.end())
      it = cache.emplace(seq, sequence_features(w.gt.model, {0, 0, Stream::input}, w.gt.sae_in, w.corpus.sequences[seq])).first;
    return it->second;
  };
  const auto m = evaluate_rules(rs, ds, Split::test, 1, lookup);
  EXPECT_EQ(m.tp + m.fn, 50u);
  EXPECT_EQ(m.fp + m.tn, 50u);
  EXPECT_EQ(m.f1, 1.0);
}

TEST(Report, AggregatesMeansPerGroup) {
  std::vector<FeatureMetricsRow> rows;
  rows.push_back({0, 0, 1, RankMethod::weight, 1, metrics_from_counts(1, 1, 0, 0)});
  rows.push_back({0, 1, 2, RankMethod::weight, 1, metrics_from_counts(1, 0, 0, 0)});
  rows.push_back({1, 0, 3, RankMethod::weight, 1, metrics_from_counts(0, 0, 1, 0)});
  rows.push_back({0, 0, 1, RankMethod::gradient, 1, metrics_from_counts(1, 0, 0, 0)});

  const auto by_layer = aggregate_report(rows, Grouping::layer);
  ASSERT_EQ(by_layer.size(), 3u);
  EXPECT_EQ(by_layer[0].group, "L0");
  EXPECT_EQ(by_layer[0].method, RankMethod::weight);
  EXPECT_EQ(by_layer[0].n_features, 2u);
  EXPECT_DOUBLE_EQ(by_layer[0].precision, 0.75);
  EXPECT_DOUBLE_EQ(by_layer[0].f1, (2.0 / 3.0 + 1.0) / 2.0);

  const auto by_head = aggregate_report(rows, Grouping::head);
  EXPECT_EQ(by_head.size(), 4u);
  EXPECT_EQ(by_head[0].group, "L0H0");
}

TEST(Report, CsvHeadersAndRows) {
  std::vector<FeatureMetricsRow> rows{{0, 2, 9, RankMethod::gradient, 3, metrics_from_counts(1, 1, 0, 0)}};
  const auto csv = feature_metrics_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "layer,head,feature,method,top_n,precision,recall,f1");
  EXPECT_NE(csv.find("0,2,9,gradient,3,0.5,1,"), std::string::npos);
  const auto agg = aggregate_report(rows, Grouping::head);
  const auto acsv = aggregate_csv(agg);
  EXPECT_EQ(acsv.substr(0, acsv.find('\n')), "group,method,top_n,n_features,precision,recall,f1");
  EXPECT_EQ(aggregate_json(agg, Grouping::head)["rows"].size(), 1u);
}

}  // namespace
}  // namespace attnrules
