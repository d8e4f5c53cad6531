#pragma once

// Skip-gram rule extraction for one attention head and one output feature:
// value/attention scores over SAE decoder rows, candidate selection, weight
// and gradient ranking, prediction, distractor and counting detection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnrules/error.hpp"
#include "attnrules/model.hpp"
#include "attnrules/numkernel.hpp"
#include "attnrules/sae.hpp"

namespace attnrules {

// ---------------------------------------------------------------------------
// Scores

/// d_k . W_V^T u
inline double value_score(std::span<const float> d_k, const AttentionHead& head, std::span<const float> u) {
  if (d_k.size() != head.d_model() || u.size() != head.d_head()) {
    throw DimensionError("value_score: expected d_model " + std::to_string(head.d_model()) + " and d_head " +
                         std::to_string(head.d_head()));
  }
  const TensorF32 v = matvec(head.w_v, d_k);
  return dot(v.data(), u);
}

/// d_q^T W_Q^T W_K d_k, query first.
inline double attention_score(std::span<const float> d_q, std::span<const float> d_k, const AttentionHead& head) {
  if (d_q.size() != head.d_model() || d_k.size() != head.d_model()) {
    throw DimensionError("attention_score: vectors must have length d_model " + std::to_string(head.d_model()));
  }
  const TensorF32 q = matvec(head.w_q, d_q);
  const TensorF32 k = matvec(head.w_k, d_k);
  return dot(q.data(), k.data());
}

/// Per-feature projections of the input dictionary through one head, so
/// every score is a short dot product.
class ScoreContext {
 public:
  ScoreContext(const SaeDictionary& sae_in, const AttentionHead& head, std::span<const float> u,
               std::string sae_id = "in", std::vector<std::string> labels = {})
      : sae_id_(std::move(sae_id)), labels_(std::move(labels)) {
    if (sae_in.dim() != head.d_model()) throw DimensionError("input SAE width differs from d_model");
    if (u.size() != head.d_head()) throw DimensionError("output direction length differs from d_head");
    if (!labels_.empty() && labels_.size() != sae_in.n()) throw DimensionError("label count differs from dictionary");
    const std::size_t n = sae_in.n(), dh = head.d_head();
    q_.assign(n * dh, 0.0);
    k_.assign(n * dh, 0.0);
    value_.assign(n, 0.0);
    const TensorF32 qd = gemm_nt(sae_in.decoder, head.w_q);
    const TensorF32 kd = gemm_nt(sae_in.decoder, head.w_k);
    const TensorF32 vd = gemm_nt(sae_in.decoder, head.w_v);
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t c = 0; c < dh; ++c) {
        q_[j * dh + c] = qd(j, c);
        k_[j * dh + c] = kd(j, c);
      }
      value_[j] = dot(vd.row(j), u);
    }
    n_ = n;
    dh_ = dh;
  }

  std::size_t n() const { return n_; }
  const std::string& sae_id() const { return sae_id_; }
  double value(std::size_t k) const { return value_.at(k); }
  const std::vector<double>& values() const { return value_; }

  double attention(std::size_t q, std::size_t k) const {
    if (q >= n_ || k >= n_) throw NotFoundError("feature index out of range");
    double s = 0.0;
    for (std::size_t c = 0; c < dh_; ++c) s += q_[q * dh_ + c] * k_[k * dh_ + c];
    return s;
  }

  std::string label(std::size_t j) const { return labels_.empty() ? std::string() : labels_.at(j); }

 private:
  std::string sae_id_;
  std::vector<std::string> labels_;
  std::vector<double> q_, k_, value_;
  std::size_t n_ = 0, dh_ = 0;
};

// ---------------------------------------------------------------------------
// Rule types

struct FeatureRef {
  std::string sae;
  std::uint32_t index = 0;
  std::string label;
  friend bool operator==(const FeatureRef&, const FeatureRef&) = default;
};

struct SkipGramRule {
  FeatureRef key;
  FeatureRef query;
  double value_score = 0.0;
  double attention_score = 0.0;
  std::optional<double> importance;

  bool admissible() const { return value_score > 0.0 && attention_score > 0.0; }
  friend bool operator==(const SkipGramRule&, const SkipGramRule&) = default;
};

struct AbsenceAnnotation {
  std::size_t rule = 0;  // index into RuleSet::rules
  FeatureRef distractor;
  double distractor_attention = 0.0;
  double distractor_value = 0.0;
  friend bool operator==(const AbsenceAnnotation&, const AbsenceAnnotation&) = default;
};

struct CountingHypothesis {
  FeatureRef key;
  double correlation = 0.0;
  std::size_t sample_count = 0;
  friend bool operator==(const CountingHypothesis&, const CountingHypothesis&) = default;
};

enum class RankMethod { weight, gradient };

inline const char* to_string(RankMethod m) { return m == RankMethod::weight ? "weight" : "gradient"; }

inline RankMethod rank_method_from_string(const std::string& s) {
  if (s == "weight") return RankMethod::weight;
  if (s == "gradient") return RankMethod::gradient;
  throw ConfigError("unknown ranking method '" + s + "'");
}

struct RuleSet {
  FeatureRef output_feature;
  RankMethod method = RankMethod::weight;
  std::vector<SkipGramRule> rules;
  std::optional<AbsenceAnnotation> absence;
  std::optional<CountingHypothesis> counting;
  friend bool operator==(const RuleSet&, const RuleSet&) = default;
};

inline FeatureRef feature_ref(const ScoreContext& ctx, std::size_t j) {
  return {ctx.sae_id(), static_cast<std::uint32_t>(j), ctx.label(j)};
}

inline SkipGramRule make_rule(const ScoreContext& ctx, std::size_t key, std::size_t query) {
  return {feature_ref(ctx, key), feature_ref(ctx, query), ctx.value(key), ctx.attention(query, key), std::nullopt};
}

// ---------------------------------------------------------------------------
// Candidates and ranking

namespace detail {
/// Indices of the `k` largest scores, descending, ties by ascending index.
inline std::vector<std::size_t> top_indices(const std::vector<double>& scores, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return scores[a] > scores[b] || (scores[a] == scores[b] && a < b); });
  idx.resize(k);
  return idx;
}

inline bool rule_order(double sa, const SkipGramRule& a, double sb, const SkipGramRule& b) {
  if (sa != sb) return sa > sb;
  if (a.key.index != b.key.index) return a.key.index < b.key.index;
  return a.query.index < b.query.index;
}
}  // namespace detail

/// Top `k_keys` keys by value score, each paired with its top `k_queries`
/// queries by attention score. Both counts are clamped to the dictionary size.
inline std::vector<SkipGramRule> select_candidates(const ScoreContext& ctx, std::size_t k_keys = 100,
                                                   std::size_t k_queries = 100) {
  std::vector<SkipGramRule> out;
  const auto keys = detail::top_indices(ctx.values(), k_keys);
  std::vector<double> att(ctx.n());
  for (auto k : keys) {
    for (std::size_t q = 0; q < ctx.n(); ++q) att[q] = ctx.attention(q, k);
    for (auto q : detail::top_indices(att, k_queries)) out.push_back(make_rule(ctx, k, q));
  }
  return out;
}

/// Descending attention x value; ties by (key, query) ascending.
inline std::vector<SkipGramRule> rank_weight_based(std::vector<SkipGramRule> candidates) {
  std::sort(candidates.begin(), candidates.end(), [](const SkipGramRule& a, const SkipGramRule& b) {
    return detail::rule_order(a.attention_score * a.value_score, a, b.attention_score * b.value_score, b);
  });
  return candidates;
}

/// Input-SAE activations of every position of one sequence.
using FeatureSequence = std::vector<SparseFeatures>;

struct GradientExample {
  FeatureSequence features;
  std::size_t t = 0;
};

namespace detail {
inline double activation_of(const SparseFeatures& f, std::uint32_t j) {
  auto it = std::lower_bound(f.begin(), f.end(), j, [](const FeatureActivation& a, std::uint32_t v) { return a.index < v; });
  return (it != f.end() && it->index == j) ? static_cast<double>(it->value) : 0.0;
}
}  // namespace detail

/// d g / d m_{q,k} at m = 1 for each candidate pair, where g = relu(z) and
/// the attention logits are rebuilt from the feature expansion.
inline std::vector<double> importance_gradient(const ScoreContext& ctx, const GradientExample& ex,
                                               std::span<const SkipGramRule> candidates) {
  const auto& feats = ex.features;
  if (ex.t >= feats.size()) throw DomainError("importance_gradient: position out of range");
  const std::size_t t = ex.t;

  // Logits l_i = sum_{q,k} f_q(x_t) f_k(x_i) A(q,k), evaluated pairwise.
  std::vector<double> logits(t + 1, 0.0), v(t + 1, 0.0);
  for (std::size_t i = 0; i <= t; ++i) {
    for (const auto& fk : feats[i]) {
      v[i] += fk.value * ctx.value(fk.index);
      for (const auto& fq : feats[t]) logits[i] += static_cast<double>(fq.value) * fk.value * ctx.attention(fq.index, fk.index);
    }
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> a(t + 1);
  double zsum = 0.0;
  for (std::size_t i = 0; i <= t; ++i) zsum += (a[i] = std::exp(logits[i] - mx));
  double z = 0.0;
  for (std::size_t i = 0; i <= t; ++i) z += (a[i] /= zsum) * v[i];

  std::vector<double> out(candidates.size(), 0.0);
  if (!(z > 0.0)) return out;
  // w_k = sum_i dl_i f_k(x_i), with dl_i = a_i (v_i - z).
  std::vector<double> w(ctx.n(), 0.0);
  for (std::size_t i = 0; i <= t; ++i) {
    const double dl = a[i] * (v[i] - z);
    for (const auto& fk : feats[i]) w[fk.index] += dl * fk.value;
  }
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const auto& r = candidates[c];
    const double fq = detail::activation_of(feats[t], r.query.index);
    if (fq != 0.0 && w[r.key.index] != 0.0) out[c] = fq * w[r.key.index] * r.attention_score;
  }
  return out;
}

/// Mean gradient importance over `train`, sorted descending; ties by (key, query).
inline std::vector<SkipGramRule> rank_gradient_based(const ScoreContext& ctx, std::vector<SkipGramRule> candidates,
                                                     std::span<const GradientExample> train) {
  if (train.empty()) throw DomainError("rank_gradient_based: empty training split");
  std::vector<double> total(candidates.size(), 0.0);
  for (const auto& ex : train) {
    const auto g = importance_gradient(ctx, ex, candidates);
    for (std::size_t c = 0; c < total.size(); ++c) total[c] += g[c];
  }
  for (std::size_t c = 0; c < candidates.size(); ++c) candidates[c].importance = total[c] / static_cast<double>(train.size());
  std::sort(candidates.begin(), candidates.end(), [](const SkipGramRule& a, const SkipGramRule& b) {
    return detail::rule_order(*a.importance, a, *b.importance, b);
  });
  return candidates;
}

// ---------------------------------------------------------------------------
// Prediction

struct PredictOptions {
  bool absence_aware = false;  // drop the annotated rule when its distractor fired in the prefix
};

namespace detail {
inline bool fired_in_prefix(const FeatureSequence& feats, std::size_t t, std::uint32_t j) {
  for (std::size_t i = 0; i <= t; ++i)
    if (activation_of(feats[i], j) > 0.0) return true;
  return false;
}
}  // namespace detail

/// Max over matched admissible rules among the first `top_n` of
/// A * S * f_q(x_t) * max_{t'<=t} f_k(x_t'); 0 when nothing matches.
inline double predict_score(const RuleSet& rs, const FeatureSequence& feats, std::size_t t, std::size_t top_n,
                            const PredictOptions& opt = {}) {
  if (t >= feats.size()) throw DomainError("predict: position out of range");
  const std::size_t n = std::min(top_n, rs.rules.size());
  bool suppressed = false;
  if (opt.absence_aware && rs.absence) {
    suppressed = detail::fired_in_prefix(feats, t, rs.absence->distractor.index);
  }
  double best = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const auto& rule = rs.rules[r];
    if (!rule.admissible()) continue;
    if (suppressed && rs.absence->rule == r) continue;
    const double fq = detail::activation_of(feats[t], rule.query.index);
    if (!(fq > 0.0)) continue;
    double fk = 0.0;
    for (std::size_t i = 0; i <= t; ++i) fk = std::max(fk, detail::activation_of(feats[i], rule.key.index));
    if (!(fk > 0.0)) continue;
    best = std::max(best, rule.attention_score * rule.value_score * fq * fk);
  }
  return best;
}

/// True iff an admissible rule among the first `top_n` has its query active
/// at t and its key active somewhere in positions 0..t.
inline bool predict_active(const RuleSet& rs, const FeatureSequence& feats, std::size_t t, std::size_t top_n,
                           const PredictOptions& opt = {}) {
  return predict_score(rs, feats, t, top_n, opt) > 0.0;
}

// ---------------------------------------------------------------------------
// Absence and counting

/// For the top rule (k, q): the input feature k' with the largest A(q, k')
/// among those with A(q, k') > A(q, k) and S(k') < 0.
inline std::optional<AbsenceAnnotation> detect_distractor(const RuleSet& rs, const ScoreContext& ctx) {
  if (rs.rules.empty()) throw DomainError("detect_distractor: empty rule set");
  const auto& top = rs.rules.front();
  const double base = ctx.attention(top.query.index, top.key.index);
  std::optional<AbsenceAnnotation> best;
  for (std::size_t k = 0; k < ctx.n(); ++k) {
    if (!(ctx.value(k) < 0.0)) continue;
    const double att = ctx.attention(top.query.index, k);
    if (!(att > base)) continue;
    if (!best || att > best->distractor_attention) best = AbsenceAnnotation{0, feature_ref(ctx, k), att, ctx.value(k)};
  }
  return best;
}

struct CountingSample {
  double activation = 0.0;
  std::size_t count = 0;
};

/// |{t' <= t : f_key(x_t') > 0}|
inline std::size_t key_count(const FeatureSequence& feats, std::size_t t, std::uint32_t key) {
  if (t >= feats.size()) throw DomainError("key_count: position out of range");
  std::size_t c = 0;
  for (std::size_t i = 0; i <= t; ++i) c += detail::activation_of(feats[i], key) > 0.0;
  return c;
}

/// Pearson correlation; 0 when either side has zero variance.
inline double pearson(std::span<const CountingSample> samples) {
  const double n = static_cast<double>(samples.size());
  if (samples.size() < 2) return 0.0;
  double ma = 0, mc = 0;
  for (const auto& s : samples) {
    ma += s.activation;
    mc += static_cast<double>(s.count);
  }
  ma /= n;
  mc /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (const auto& s : samples) {
    const double da = s.activation - ma, dc = static_cast<double>(s.count) - mc;
    sab += da * dc;
    saa += da * da;
    sbb += dc * dc;
  }
  if (saa <= 0.0 || sbb <= 0.0) return 0.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

struct CountingOptions {
  double threshold = 0.5;
  std::size_t min_count_spread = 3;
};

/// Counting hypothesis for the top rule's key from (activation, key count)
/// samples taken at exemplar positions.
inline std::optional<CountingHypothesis> detect_counting(const RuleSet& rs, std::span<const CountingSample> samples,
                                                         const CountingOptions& opt = {}) {
  if (rs.rules.empty() || samples.empty()) return std::nullopt;
  std::vector<std::size_t> counts;
  for (const auto& s : samples) counts.push_back(s.count);
  std::sort(counts.begin(), counts.end());
  const auto distinct = static_cast<std::size_t>(std::unique(counts.begin(), counts.end()) - counts.begin());
  const double r = pearson(samples);
  if (distinct < opt.min_count_spread || r < opt.threshold) return std::nullopt;
  return CountingHypothesis{rs.rules.front().key, r, samples.size()};
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::ordered_json to_json(const FeatureRef& f) {
  return {{"sae", f.sae}, {"index", f.index}, {"label", f.label}};
}

inline FeatureRef feature_ref_from_json(const nlohmann::json& j) {
  return {j.at("sae").get<std::string>(), j.at("index").get<std::uint32_t>(), j.value("label", std::string())};
}

inline constexpr int kRuleSchemaVersion = 1;

inline nlohmann::ordered_json ruleset_to_json(const RuleSet& rs) {
  nlohmann::ordered_json j;
  j["schema_version"] = kRuleSchemaVersion;
  j["output_feature"] = to_json(rs.output_feature);
  j["method"] = to_string(rs.method);
  j["rules"] = nlohmann::ordered_json::array();
  for (const auto& r : rs.rules) {
    nlohmann::ordered_json rj;
    rj["key"] = to_json(r.key);
    rj["query"] = to_json(r.query);
    rj["value_score"] = r.value_score;
    rj["attention_score"] = r.attention_score;
    if (r.importance) rj["importance"] = *r.importance;
    j["rules"].push_back(rj);
  }
  if (rs.absence) {
    j["absence"] = {{"rule", rs.absence->rule},
                    {"distractor", to_json(rs.absence->distractor)},
                    {"distractor_attention", rs.absence->distractor_attention},
                    {"distractor_value", rs.absence->distractor_value}};
  }
  if (rs.counting) {
    j["counting"] = {{"key", to_json(rs.counting->key)},
                     {"correlation", rs.counting->correlation},
                     {"sample_count", rs.counting->sample_count}};
  }
  return j;
}

inline RuleSet ruleset_from_json(const nlohmann::json& j) {
  if (j.value("schema_version", 0) != kRuleSchemaVersion) throw FormatError("rule set: unsupported schema_version");
  RuleSet rs;
  rs.output_feature = feature_ref_from_json(j.at("output_feature"));
  rs.method = rank_method_from_string(j.at("method").get<std::string>());
  for (const auto& rj : j.at("rules")) {
    SkipGramRule r{feature_ref_from_json(rj.at("key")), feature_ref_from_json(rj.at("query")),
                   rj.at("value_score").get<double>(), rj.at("attention_score").get<double>(), std::nullopt};
    if (rj.contains("importance")) r.importance = rj.at("importance").get<double>();
    rs.rules.push_back(std::move(r));
  }
  if (j.contains("absence")) {
    const auto& a = j.at("absence");
    rs.absence = AbsenceAnnotation{a.at("rule").get<std::size_t>(), feature_ref_from_json(a.at("distractor")),
                                   a.at("distractor_attention").get<double>(), a.at("distractor_value").get<double>()};
  }
  if (j.contains("counting")) {
    const auto& c = j.at("counting");
    rs.counting = CountingHypothesis{feature_ref_from_json(c.at("key")), c.at("correlation").get<double>(),
                                     c.at("sample_count").get<std::size_t>()};
  }
  return rs;
}

/// Token whose embedding most activates each input feature ("" if none fires).
inline std::vector<std::string> token_labels(const ToyModel& model, const SaeDictionary& sae_in) {
  std::vector<std::string> labels(sae_in.n());
  std::vector<float> best(sae_in.n(), 0.0f);
  for (std::size_t w = 0; w < model.vocab_size(); ++w) {
    const TensorF32 f = encode(sae_in, model.token_embeddings().row(w));
    for (std::size_t j = 0; j < sae_in.n(); ++j) {
      if (f[j] > best[j]) {
        best[j] = f[j];
        labels[j] = model.token(static_cast<TokenId>(w));
      }
    }
  }
  return labels;
}

}  // namespace attnrules
