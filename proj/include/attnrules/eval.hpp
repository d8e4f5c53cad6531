#pragma once

// Exemplar datasets, binary metrics, direct feature attribution, distractor
// interventions, and per-group report tables.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "attnrules/error.hpp"
#include "attnrules/model.hpp"
#include "attnrules/numkernel.hpp"
#include "attnrules/rules.hpp"
#include "attnrules/sae.hpp"

namespace attnrules {

// ---------------------------------------------------------------------------
// Exemplar datasets

enum class Split { train, val, test };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "'");
}

struct Exemplar {
  std::uint32_t seq = 0;
  std::uint32_t pos = 0;  // 0-based target position
  float activation = 0.0f;
  Split split = Split::train;
  friend bool operator==(const Exemplar&, const Exemplar&) = default;
};

struct ExemplarDataset {
  FeatureRef feature;
  std::uint64_t seed = 0;
  std::vector<Exemplar> positives;
  std::vector<Exemplar> negatives;
  friend bool operator==(const ExemplarDataset&, const ExemplarDataset&) = default;
};

struct DatasetOptions {
  std::size_t n = 150;
  std::size_t max_target = 64;  // negatives draw 1-based targets from (1, min(len, max_target)]
};

namespace detail {
/// Seeded partition into thirds: sizes differ by at most one.
inline void assign_thirds(std::vector<Exemplar>& items, Rng rng) {
  std::vector<std::size_t> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(std::span<std::size_t>(order));
  for (std::size_t r = 0; r < order.size(); ++r) {
    items[order[r]].split = static_cast<Split>((r * 3) / order.size());
  }
}
}  // namespace detail

/// Top-n sequences by peak activation (ties by sequence id) as positives,
/// n seeded-random inactive sequences as negatives, each side split into
/// seeded thirds.
inline ExemplarDataset build_exemplar_dataset(const ActivationIndex& index, const FeatureRef& feature,
                                              std::uint64_t seed, const DatasetOptions& opt = {}) {
  const std::size_t n_seq = index.n_sequences();
  const std::size_t active = index.active_sequence_count(feature.index);
  const auto& lengths = index.sequence_lengths();

  auto peaks = index.peaks(feature.index);
  std::vector<bool> is_active(n_seq, false);
  for (const auto& p : peaks) is_active[p.seq] = true;
  std::vector<std::uint32_t> inactive;
  for (std::uint32_t s = 0; s < n_seq; ++s)
    if (!is_active[s] && lengths[s] >= 2) inactive.push_back(s);

  if (active < opt.n) {
    throw EligibilityError("feature " + std::to_string(feature.index) + " is active in " + std::to_string(active) +
                           " sequences; at least " + std::to_string(opt.n) + " required");
  }
  if (inactive.size() < opt.n) {
    throw EligibilityError("feature " + std::to_string(feature.index) + " is inactive in " +
                           std::to_string(inactive.size()) + " sequences; at least " + std::to_string(opt.n) +
                           " required");
  }

  ExemplarDataset ds;
  ds.feature = feature;
  ds.seed = seed;
  std::stable_sort(peaks.begin(), peaks.end(), [](const SequencePeak& a, const SequencePeak& b) {
    return a.act > b.act || (a.act == b.act && a.seq < b.seq);
  });
  for (std::size_t i = 0; i < opt.n; ++i) ds.positives.push_back({peaks[i].seq, peaks[i].pos, peaks[i].act, Split::train});

  const Rng root(seed);
  Rng pick = root.split(1);
  pick.shuffle(std::span<std::uint32_t>(inactive));
  inactive.resize(opt.n);
  std::sort(inactive.begin(), inactive.end());
  Rng pos_rng = root.split(2);
  for (auto s : inactive) {
    const std::size_t upper = std::min<std::size_t>(lengths[s], opt.max_target);  // 1-based inclusive bound
    const auto pos = static_cast<std::uint32_t>(1 + pos_rng.below(upper - 1));       // 0-based in [1, upper-1]
    ds.negatives.push_back({s, pos, 0.0f, Split::train});
  }
  detail::assign_thirds(ds.positives, root.split(3));
  detail::assign_thirds(ds.negatives, root.split(4));
  return ds;
}

/// Eligibility check without building: empty when eligible, otherwise the reason.
inline std::optional<std::string> eligibility_problem(const ActivationIndex& index, std::uint32_t feature,
                                                      std::size_t n = 150) {
  try {
    build_exemplar_dataset(index, {"", feature, ""}, 0, {n});
  } catch (const EligibilityError& e) {
    return std::string(e.what());
  }
  return std::nullopt;
}

inline nlohmann::ordered_json dataset_to_json(const ExemplarDataset& ds) {
  auto side = [](const std::vector<Exemplar>& v) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& e : v) arr.push_back({{"seq", e.seq}, {"pos", e.pos}, {"activation", e.activation}, {"split", to_string(e.split)}});
    return arr;
  };
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["feature"] = to_json(ds.feature);
  j["seed"] = ds.seed;
  j["positives"] = side(ds.positives);
  j["negatives"] = side(ds.negatives);
  return j;
}

inline ExemplarDataset dataset_from_json(const nlohmann::json& j) {
  if (j.value("schema_version", 0) != 1) throw FormatError("dataset: unsupported schema_version");
  ExemplarDataset ds;
  ds.feature = feature_ref_from_json(j.at("feature"));
  ds.seed = j.at("seed").get<std::uint64_t>();
  auto side = [](const nlohmann::json& arr) {
    std::vector<Exemplar> v;
    for (const auto& e : arr)
      v.push_back({e.at("seq").get<std::uint32_t>(), e.at("pos").get<std::uint32_t>(), e.at("activation").get<float>(),
                   split_from_string(e.at("split").get<std::string>())});
    return v;
  };
  ds.positives = side(j.at("positives"));
  ds.negatives = side(j.at("negatives"));
  if (ds.positives.size() != ds.negatives.size()) throw FormatError("dataset: unbalanced positives and negatives");
  return ds;
}

// ---------------------------------------------------------------------------
// Metrics

struct Metrics {
  double precision = 1.0;
  double recall = 1.0;
  double f1 = 1.0;
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  friend bool operator==(const Metrics&, const Metrics&) = default;
};

/// Precision is 1 with no predicted positives; recall is 1 with no actual positives.
inline Metrics metrics_from_counts(std::size_t tp, std::size_t fp, std::size_t fn, std::size_t tn) {
  Metrics m;
  m.tp = tp;
  m.fp = fp;
  m.fn = fn;
  m.tn = tn;
  m.precision = (tp + fp) == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  m.recall = (tp + fn) == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  m.f1 = (m.precision + m.recall) == 0.0 ? 0.0 : 2.0 * m.precision * m.recall / (m.precision + m.recall);
  return m;
}

inline Metrics binary_metrics(const std::vector<bool>& predicted, const std::vector<bool>& actual) {
  if (predicted.size() != actual.size()) {
    throw DimensionError("binary_metrics: " + std::to_string(predicted.size()) + " predictions vs " +
                         std::to_string(actual.size()) + " labels");
  }
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i] && actual[i]) ++tp;
    else if (predicted[i]) ++fp;
    else if (actual[i]) ++fn;
    else ++tn;
  }
  return metrics_from_counts(tp, fp, fn, tn);
}

/// Rule predictions on one split of a dataset; `features(seq)` supplies the
/// input-SAE activations of a corpus sequence.
template <typename FeatureLookup>
Metrics evaluate_rules(const RuleSet& rs, const ExemplarDataset& ds, Split split, std::size_t top_n,
                       FeatureLookup&& features, const PredictOptions& opt = {}) {
  std::vector<bool> predicted, actual;
  auto run = [&](const std::vector<Exemplar>& side, bool label) {
    for (const auto& e : side) {
      if (e.split != split) continue;
      const FeatureSequence& f = features(e.seq);
      predicted.push_back(predict_active(rs, f, e.pos, top_n, opt));
      actual.push_back(label);
    }
  };
  run(ds.positives, true);
  run(ds.negatives, false);
  return binary_metrics(predicted, actual);
}

// ---------------------------------------------------------------------------
// Attribution and interventions

/// a_{t,t'} * (x_{t'} . W_V^T u) for t' = 0..t.
inline std::vector<double> dfa(const AttentionHead& head, std::span<const float> u, const TensorF32& x, std::size_t t) {
  x.require_rank(2, "dfa input");
  if (t >= x.rows()) throw DomainError("dfa: position " + std::to_string(t) + " out of range");
  if (u.size() != head.d_head()) throw DimensionError("dfa: direction length differs from d_head");
  const AttentionOutput out = attention_forward(head, x);
  std::vector<double> d(t + 1);
  for (std::size_t i = 0; i <= t; ++i) d[i] = out.attn(t, i) * value_score(x.row(i), head, u);
  return d;
}

/// Inserts `repeats` copies of `token` at position 0 (after a leading <bos>,
/// token id 0 when `bos` is set) and returns the output feature's activation
/// at the shifted target.
inline double intervene_prepend(const ToyModel& model, const HeadSelector& sel, const SaeDictionary& sae_out,
                                std::uint32_t feature, const TokenSequence& seq, std::size_t target, TokenId token,
                                std::size_t repeats, std::optional<TokenId> bos = TokenId{0}) {
  if (target >= seq.size()) throw DomainError("intervene: target position out of range");
  if (feature >= sae_out.n()) throw NotFoundError("intervene: feature " + std::to_string(feature) + " out of range");
  if (seq.size() + repeats > model.max_len()) {
    throw DomainError("intervene: " + std::to_string(seq.size() + repeats) + " tokens exceed max_len " +
                      std::to_string(model.max_len()));
  }
  TokenSequence s = seq;
  const std::size_t at = (bos && !s.ids.empty() && s.ids[0] == *bos) ? 1 : 0;
  s.ids.insert(s.ids.begin() + static_cast<std::ptrdiff_t>(at), repeats, token);
  const std::size_t shifted = target >= at ? target + repeats : target;
  const TensorF32 x = embed(model, s);
  const TensorF32 y =
      sel.stream == Stream::input ? x : attention_forward(model.head(sel.layer, sel.head).weights, x).y;
  return encode(sae_out, y.row(shifted))[feature];
}

struct InterventionResult {
  std::uint32_t feature = 0;
  TokenId token = 0;
  std::vector<std::uint32_t> seqs;
  std::vector<std::vector<double>> activations;  // [sequence][repeats]
  std::vector<double> mean;                      // per repeat count
};

/// intervene_prepend for repeats 0..max_repeats over the `sample` strongest
/// positives of a dataset.
inline InterventionResult intervention_sweep(const ToyModel& model, const HeadSelector& sel,
                                             const SaeDictionary& sae_out, const ExemplarDataset& ds,
                                             const Corpus& corpus, TokenId token, std::size_t max_repeats,
                                             std::size_t sample) {
  if (sample == 0) throw ConfigError("intervention sample size must be positive");
  if (token >= model.vocab_size()) throw NotFoundError("token id " + std::to_string(token) + " out of range");
  InterventionResult out;
  out.feature = ds.feature.index;
  out.token = token;
  out.mean.assign(max_repeats + 1, 0.0);
  for (std::size_t i = 0; i < std::min(sample, ds.positives.size()); ++i) {
    const auto& e = ds.positives[i];
    if (e.seq >= corpus.size()) throw FormatError("dataset references sequence " + std::to_string(e.seq));
    std::vector<double> row;
    for (std::size_t r = 0; r <= max_repeats; ++r)
      row.push_back(intervene_prepend(model, sel, sae_out, ds.feature.index, corpus[e.seq], e.pos, token, r));
    for (std::size_t r = 0; r <= max_repeats; ++r) out.mean[r] += row[r];
    out.seqs.push_back(e.seq);
    out.activations.push_back(std::move(row));
  }
  if (!out.seqs.empty())
    for (auto& m : out.mean) m /= static_cast<double>(out.seqs.size());
  return out;
}

inline std::string intervention_csv(const InterventionResult& r) {
  std::string out = "feature,seq,repeats,activation\n";
  for (std::size_t i = 0; i < r.seqs.size(); ++i)
    for (std::size_t k = 0; k < r.activations[i].size(); ++k)
      out += fmt::format("{},{},{},{}\n", r.feature, r.seqs[i], k, r.activations[i][k]);
  return out;
}

/// argmax_w f_k(e_w) over raw token embeddings; ties by lowest id.
inline TokenId pick_distractor_token(const SaeDictionary& sae_in, std::uint32_t feature, const TensorF32& token_embeddings) {
  if (feature >= sae_in.n()) throw NotFoundError("feature " + std::to_string(feature) + " out of range");
  TokenId best = 0;
  float best_act = -1.0f;
  for (std::size_t w = 0; w < token_embeddings.rows(); ++w) {
    const float act = encode(sae_in, token_embeddings.row(w))[feature];
    if (act > best_act) {
      best_act = act;
      best = static_cast<TokenId>(w);
    }
  }
  if (!(best_act > 0.0f)) spdlog::warn("pick_distractor_token: feature {} fires on no token; using token {}", feature, best);
  return best;
}

// ---------------------------------------------------------------------------
// Reports

struct FeatureMetricsRow {
  int layer = 0;
  int head = 0;
  std::uint32_t feature = 0;
  RankMethod method = RankMethod::weight;
  std::size_t top_n = 1;
  Metrics metrics;
};

enum class Grouping { layer, head };

inline Grouping grouping_from_string(const std::string& s) {
  if (s == "layer") return Grouping::layer;
  if (s == "head") return Grouping::head;
  throw ConfigError("unknown grouping '" + s + "'");
}

struct AggregateRow {
  std::string group;
  RankMethod method = RankMethod::weight;
  std::size_t top_n = 1;
  std::size_t n_features = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0;
};

/// Mean precision/recall/F1 per (group, method, top_n).
inline std::vector<AggregateRow> aggregate_report(std::span<const FeatureMetricsRow> rows, Grouping grouping) {
  std::map<std::tuple<std::string, int, std::size_t>, AggregateRow> acc;
  for (const auto& r : rows) {
    std::string g = "L" + std::to_string(r.layer);
    if (grouping == Grouping::head) g += "H" + std::to_string(r.head);
    auto& a = acc[{g, static_cast<int>(r.method), r.top_n}];
    a.group = g;
    a.method = r.method;
    a.top_n = r.top_n;
    ++a.n_features;
    a.precision += r.metrics.precision;
    a.recall += r.metrics.recall;
    a.f1 += r.metrics.f1;
  }
  std::vector<AggregateRow> out;
  for (auto& [key, a] : acc) {
    const double n = static_cast<double>(a.n_features);
    a.precision /= n;
    a.recall /= n;
    a.f1 /= n;
    out.push_back(a);
  }
  return out;
}

inline std::string feature_metrics_csv(std::span<const FeatureMetricsRow> rows) {
  std::string out = "layer,head,feature,method,top_n,precision,recall,f1\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{},{},{},{},{},{},{}\n", r.layer, r.head, r.feature, to_string(r.method), r.top_n,
                       r.metrics.precision, r.metrics.recall, r.metrics.f1);
  }
  return out;
}

inline std::string aggregate_csv(std::span<const AggregateRow> rows) {
  std::string out = "group,method,top_n,n_features,precision,recall,f1\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{},{},{},{},{},{}\n", r.group, to_string(r.method), r.top_n, r.n_features, r.precision,
                       r.recall, r.f1);
  }
  return out;
}

inline nlohmann::ordered_json aggregate_json(std::span<const AggregateRow> rows, Grouping grouping) {
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["group_by"] = grouping == Grouping::layer ? "layer" : "head";
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    j["rows"].push_back({{"group", r.group},
                         {"method", to_string(r.method)},
                         {"top_n", r.top_n},
                         {"n_features", r.n_features},
                         {"precision", r.precision},
                         {"recall", r.recall},
                         {"f1", r.f1}});
  }
  return j;
}

}  // namespace attnrules
