#pragma once

// Synthetic one-layer models with planted skip-gram, absence and counting
// circuits, a matching corpus generator, and a 64-bit reference forward pass.
//
// Layout of a planted model (vocab V, d_model = V, one-hot embeddings):
//   * head dimension i < n_specs is the private query/key channel of spec i;
//     dimension n_specs is a shared sink channel that only <bos> writes to.
//   * every token's query reads the sink with `bos_logit`, so a query with no
//     matching key parks its attention on <bos> instead of spreading it.
//   * W_V writes value-gain * e_g for each key, and the identity output SAE
//     reads feature g straight off output dimension g.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnrules/error.hpp"
#include "attnrules/model.hpp"
#include "attnrules/numkernel.hpp"
#include "attnrules/sae.hpp"

namespace attnrules {

enum class PlantKind { skipgram, absence, counting };

inline const char* to_string(PlantKind k) {
  switch (k) {
    case PlantKind::skipgram: return "skipgram";
    case PlantKind::absence: return "absence";
    case PlantKind::counting: return "counting";
  }
  return "?";
}

inline PlantKind plant_kind_from_string(const std::string& s) {
  if (s == "skipgram") return PlantKind::skipgram;
  if (s == "absence") return PlantKind::absence;
  if (s == "counting") return PlantKind::counting;
  throw ConfigError("unknown plant kind '" + s + "'");
}

struct PlantSpec {
  PlantKind kind = PlantKind::skipgram;
  TokenId key = 0;  // the counted token for counting plants
  TokenId query = 0;
  TokenId distractor = 0;  // absence only
  std::uint32_t output_feature = 0;
  double logit_gain = 8.0;
  double value_gain = 1.0;
  double distractor_gain = 8.2;   // 0 disables the distractor wiring
  double distractor_value = -0.25;  // multiple of value_gain

  friend bool operator==(const PlantSpec&, const PlantSpec&) = default;
};

struct SynthParams {
  std::size_t vocab_size = 64;
  std::size_t d_model = 64;
  std::size_t d_head = 0;  // 0 = d_model
  std::size_t max_len = 64;
  double bos_logit = 4.0;
  double sink_weight = 4.0;
};

struct GroundTruth {
  std::vector<PlantSpec> specs;
  SynthParams params;
  ToyModel model;
  SaeDictionary sae_in;
  SaeDictionary sae_out;
  std::vector<TokenId> fillers;  // tokens no plant touches
};

inline constexpr TokenId kBos = 0;

inline std::vector<std::string> synth_vocab(std::size_t n) {
  std::vector<std::string> v{"<bos>"};
  for (std::size_t i = 1; i < n; ++i) v.push_back("tok" + std::to_string(i));
  return v;
}

inline void validate_specs(const std::vector<PlantSpec>& specs, const SynthParams& p) {
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    const std::string where = "plant " + std::to_string(i);
    auto check_token = [&](TokenId t) {
      if (t == kBos || t >= p.vocab_size) throw ConfigError(where + ": token " + std::to_string(t) + " not plantable");
    };
    check_token(s.key);
    check_token(s.query);
    if (s.key == s.query) throw ConfigError(where + ": key and query must differ");
    if (s.kind == PlantKind::absence) {
      check_token(s.distractor);
      if (s.distractor == s.key || s.distractor == s.query) throw ConfigError(where + ": distractor must be distinct");
      if (s.distractor_gain != 0.0 && !(s.distractor_gain > s.logit_gain)) {
        throw ConfigError(where + ": distractor gain must exceed logit gain");
      }
      if (s.distractor_value > 0.0) throw ConfigError(where + ": distractor value must be non-positive");
    }
    if (!(s.logit_gain > 0.0) || !(s.value_gain > 0.0)) throw ConfigError(where + ": gains must be positive");
    if (s.output_feature >= (p.d_head ? p.d_head : p.d_model)) throw ConfigError(where + ": output feature out of range");
    for (std::size_t j = 0; j < i; ++j) {
      const auto& o = specs[j];
      if (o.query == s.query && o.output_feature == s.output_feature) {
        throw ConfigError("plants " + std::to_string(j) + " and " + std::to_string(i) +
                          " share query and output feature");
      }
      if ((s.kind == PlantKind::counting || o.kind == PlantKind::counting) && o.query == s.query) {
        throw ConfigError("plants " + std::to_string(j) + " and " + std::to_string(i) + " share a counting query");
      }
    }
  }
}

/// Builds the planted model and its exact SAEs. Deterministic in `specs`.
inline GroundTruth plant(const SynthParams& params, std::vector<PlantSpec> specs) {
  SynthParams p = params;
  if (p.d_head == 0) p.d_head = p.d_model;
  if (p.d_model < p.vocab_size) throw ConfigError("d_model must be at least the vocabulary size");
  if (p.vocab_size < 2) throw ConfigError("vocabulary needs <bos> and at least one token");
  if (p.d_head < specs.size() + 1) throw ConfigError("d_head too small for the number of plants");
  validate_specs(specs, p);

  const std::size_t sink = specs.size();
  AttentionHead head(p.d_head, p.d_model);
  for (std::size_t t = 1; t < p.vocab_size; ++t) head.w_q(sink, t) = static_cast<float>(p.bos_logit);
  head.w_k(sink, kBos) = 1.0f;

  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    const double root = std::sqrt(s.logit_gain);
    head.w_q(i, s.query) += static_cast<float>(root);
    head.w_k(i, s.key) += static_cast<float>(root);
    head.w_v(s.output_feature, s.key) += static_cast<float>(s.value_gain);
    if (s.kind == PlantKind::absence && s.distractor_gain != 0.0) {
      head.w_k(i, s.distractor) += static_cast<float>(s.distractor_gain / root);
      head.w_v(s.output_feature, s.distractor) += static_cast<float>(s.distractor_value * s.value_gain);
    }
    if (s.kind == PlantKind::counting) {
      head.w_q(sink, s.query) = static_cast<float>(s.logit_gain + std::log(p.sink_weight));
    }
  }

  TensorF32 tok({p.vocab_size, p.d_model});
  for (std::size_t t = 0; t < p.vocab_size; ++t) tok(t, t) = 1.0f;

  GroundTruth gt;
  gt.specs = std::move(specs);
  gt.params = p;
  gt.model = ToyModel(synth_vocab(p.vocab_size), std::move(tok), TensorF32({p.max_len, p.d_model}),
                      {HeadEntry{0, 0, std::move(head)}});
  gt.sae_in = SaeDictionary::identity(p.d_model);
  gt.sae_out = SaeDictionary::identity(p.d_head);
  std::vector<bool> used(p.vocab_size, false);
  used[kBos] = true;
  for (const auto& s : gt.specs) {
    used[s.key] = used[s.query] = true;
    if (s.kind == PlantKind::absence) used[s.distractor] = true;
  }
  for (std::size_t t = 0; t < p.vocab_size; ++t)
    if (!used[t]) gt.fillers.push_back(static_cast<TokenId>(t));
  return gt;
}

namespace detail {
inline GroundTruth plant_only(PlantKind kind, const SynthParams& p, std::vector<PlantSpec> specs) {
  for (const auto& s : specs) {
    if (s.kind != kind) throw ConfigError(std::string("expected only ") + to_string(kind) + " plants");
  }
  return plant(p, std::move(specs));
}
}  // namespace detail

inline GroundTruth plant_skipgram(const SynthParams& p, std::vector<PlantSpec> specs) {
  return detail::plant_only(PlantKind::skipgram, p, std::move(specs));
}
inline GroundTruth plant_absence(const SynthParams& p, std::vector<PlantSpec> specs) {
  return detail::plant_only(PlantKind::absence, p, std::move(specs));
}
inline GroundTruth plant_counting(const SynthParams& p, std::vector<PlantSpec> specs) {
  return detail::plant_only(PlantKind::counting, p, std::move(specs));
}

/// `count` specs of one kind over disjoint random tokens, each writing its
/// own random output feature. `proto` supplies the gains.
inline std::vector<PlantSpec> random_specs(PlantKind kind, std::size_t count, const SynthParams& p, std::uint64_t seed,
                                           const PlantSpec& proto = {}, std::vector<TokenId> taken = {}) {
  const std::size_t per = kind == PlantKind::absence ? 3 : 2;
  const std::size_t d_head = p.d_head ? p.d_head : p.d_model;
  std::vector<TokenId> pool;
  for (std::size_t t = 1; t < p.vocab_size; ++t)
    if (std::find(taken.begin(), taken.end(), static_cast<TokenId>(t)) == taken.end()) pool.push_back(static_cast<TokenId>(t));
  if (pool.size() < per * count) throw ConfigError("vocabulary too small for " + std::to_string(count) + " plants");
  if (d_head < count) throw ConfigError("not enough output features for the requested plants");
  Rng rng(seed);
  rng.shuffle(std::span<TokenId>(pool));
  std::vector<std::uint32_t> features(d_head);
  for (std::size_t i = 0; i < d_head; ++i) features[i] = static_cast<std::uint32_t>(i);
  rng.shuffle(std::span<std::uint32_t>(features));

  std::vector<PlantSpec> specs;
  for (std::size_t i = 0; i < count; ++i) {
    PlantSpec s = proto;
    s.kind = kind;
    s.key = pool[per * i];
    s.query = pool[per * i + 1];
    if (kind == PlantKind::absence) s.distractor = pool[per * i + 2];
    s.output_feature = features[i];
    specs.push_back(s);
  }
  return specs;
}

struct PlantCounts {
  std::size_t skipgram = 0;
  std::size_t absence = 0;
  std::size_t counting = 0;
};

/// Plants of several kinds over disjoint tokens with distinct output features.
inline std::vector<PlantSpec> random_plants(const PlantCounts& counts, const SynthParams& p, std::uint64_t seed,
                                            const PlantSpec& proto = {}) {
  const Rng root(seed);
  std::vector<PlantSpec> all;
  std::vector<TokenId> taken;
  const std::pair<PlantKind, std::size_t> kinds[] = {
      {PlantKind::skipgram, counts.skipgram}, {PlantKind::absence, counts.absence}, {PlantKind::counting, counts.counting}};
  for (const auto& [kind, n] : kinds) {
    if (n == 0) continue;
    for (auto& s : random_specs(kind, n, p, root.split(static_cast<std::uint64_t>(kind)).next_u64(), proto, taken)) {
      taken.push_back(s.key);
      taken.push_back(s.query);
      if (kind == PlantKind::absence) taken.push_back(s.distractor);
      all.push_back(s);
    }
  }
  const std::size_t d_head = p.d_head ? p.d_head : p.d_model;
  if (d_head < all.size()) throw ConfigError("not enough output features for the requested plants");
  std::vector<std::uint32_t> features(d_head);
  for (std::size_t i = 0; i < d_head; ++i) features[i] = static_cast<std::uint32_t>(i);
  Rng rng = root.split(99);
  rng.shuffle(std::span<std::uint32_t>(features));
  for (std::size_t i = 0; i < all.size(); ++i) all[i].output_feature = features[i];
  return all;
}

// ---------------------------------------------------------------------------
// Corpus

struct CorpusParams {
  std::size_t n_sequences = 2000;
  std::size_t length = 16;
  double match_fraction = 0.9;
  std::size_t max_plants_per_sequence = 4;
  std::size_t max_count = 5;
  std::uint64_t seed = 0;
};

/// Where one plant landed in one sequence.
struct PlantPlacement {
  std::uint32_t spec = 0;
  std::vector<std::uint32_t> key_positions;
  std::uint32_t query_position = 0;
  std::optional<std::uint32_t> distractor_position;

  friend bool operator==(const PlantPlacement&, const PlantPlacement&) = default;
};

struct SequenceLabels {
  std::vector<PlantPlacement> plants;
  friend bool operator==(const SequenceLabels&, const SequenceLabels&) = default;
};

struct GeneratedCorpus {
  Corpus sequences;
  std::vector<SequenceLabels> labels;
};

namespace detail {
inline std::size_t max_slots(const PlantSpec& s, std::size_t max_count) {
  switch (s.kind) {
    case PlantKind::skipgram: return 2;
    case PlantKind::absence: return 3;
    case PlantKind::counting: return max_count + 1;
  }
  return 2;
}
}  // namespace detail

/// Every sequence starts with <bos>. A matched sequence carries one or more
/// distinct plants, each with its key(s) strictly before its query.
inline GeneratedCorpus gen_corpus(const GroundTruth& gt, const CorpusParams& cp) {
  if (cp.length < 2) throw ConfigError("sequence length must be at least 2");
  if (cp.length > gt.model.max_len()) throw ConfigError("sequence length exceeds the model's max_len");
  if (cp.match_fraction < 0.0 || cp.match_fraction > 1.0) throw ConfigError("match fraction must lie in [0, 1]");
  if (cp.max_count < 1) throw ConfigError("max count must be positive");
  for (const auto& s : gt.specs) {
    if (detail::max_slots(s, cp.max_count) > cp.length - 1) {
      throw ConfigError("sequence length " + std::to_string(cp.length) + " too short to fit a " + to_string(s.kind) +
                        " pattern");
    }
  }
  if (gt.fillers.empty() && cp.length > 1) throw ConfigError("no filler tokens left in the vocabulary");

  GeneratedCorpus out;
  out.sequences.resize(cp.n_sequences);
  out.labels.resize(cp.n_sequences);
  const Rng root(cp.seed);
  for (std::size_t n = 0; n < cp.n_sequences; ++n) {
    Rng rng = root.split(n);
    const std::size_t slots = cp.length - 1;
    std::vector<TokenId> body(slots);
    for (auto& t : body) t = gt.fillers[rng.below(gt.fillers.size())];

    if (!gt.specs.empty() && rng.uniform() < cp.match_fraction) {
      std::vector<std::uint32_t> order(gt.specs.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::uint32_t>(i);
      rng.shuffle(std::span<std::uint32_t>(order));
      const std::size_t want = 1 + rng.below(std::min(cp.max_plants_per_sequence, order.size()));

      // Per-plant token runs, in order; `role` 0 key, 1 query, 2 distractor.
      struct Run {
        std::uint32_t spec;
        std::vector<std::pair<TokenId, int>> items;
      };
      std::vector<Run> runs;
      std::size_t used = 0;
      for (std::size_t k = 0; k < want; ++k) {
        const auto& s = gt.specs[order[k]];
        Run run{order[k], {}};
        if (s.kind == PlantKind::counting) {
          const std::size_t c = 1 + rng.below(cp.max_count);
          for (std::size_t i = 0; i < c; ++i) run.items.push_back({s.key, 0});
        } else {
          run.items.push_back({s.key, 0});
        }
        if (s.kind == PlantKind::absence && rng.uniform() < 0.5) {
          const std::size_t at = rng.below(run.items.size() + 1);
          run.items.insert(run.items.begin() + static_cast<std::ptrdiff_t>(at), {s.distractor, 2});
        }
        run.items.push_back({s.query, 1});
        if (used + run.items.size() > slots) continue;
        used += run.items.size();
        runs.push_back(std::move(run));
      }

      // Random interleaving of the runs, then random increasing positions.
      std::vector<std::size_t> owner;
      for (std::size_t r = 0; r < runs.size(); ++r)
        for (std::size_t i = 0; i < runs[r].items.size(); ++i) owner.push_back(r);
      rng.shuffle(std::span<std::size_t>(owner));
      std::vector<std::size_t> positions(slots);
      for (std::size_t i = 0; i < slots; ++i) positions[i] = i;
      rng.shuffle(std::span<std::size_t>(positions));
      positions.resize(owner.size());
      std::sort(positions.begin(), positions.end());

      std::vector<std::size_t> cursor(runs.size(), 0);
      std::vector<PlantPlacement> placed(runs.size());
      for (std::size_t r = 0; r < runs.size(); ++r) placed[r].spec = runs[r].spec;
      for (std::size_t i = 0; i < owner.size(); ++i) {
        const std::size_t r = owner[i];
        const auto [token, role] = runs[r].items[cursor[r]++];
        body[positions[i]] = token;
        const auto pos = static_cast<std::uint32_t>(positions[i] + 1);
        if (role == 0) placed[r].key_positions.push_back(pos);
        if (role == 1) placed[r].query_position = pos;
        if (role == 2) placed[r].distractor_position = pos;
      }
      std::sort(placed.begin(), placed.end(), [](const auto& a, const auto& b) { return a.spec < b.spec; });
      out.labels[n].plants = std::move(placed);
    }

    out.sequences[n].ids.reserve(cp.length);
    out.sequences[n].ids.push_back(kBos);
    out.sequences[n].ids.insert(out.sequences[n].ids.end(), body.begin(), body.end());
  }
  return out;
}

/// Output features expected to be active somewhere in a sequence.
inline std::vector<std::uint32_t> expected_active_features(const GroundTruth& gt, const SequenceLabels& labels) {
  std::vector<std::uint32_t> out;
  for (const auto& p : labels.plants) out.push_back(gt.specs.at(p.spec).output_feature);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// Reference forward pass

/// Head output y_t computed with every intermediate in double.
inline std::vector<double> oracle_head_output(const GroundTruth& gt, const TokenSequence& seq, std::size_t t) {
  if (t >= seq.size()) throw DomainError("oracle: position out of range");
  if (seq.size() > gt.model.max_len()) throw DomainError("oracle: sequence longer than max_len");
  const auto& h = gt.model.heads().front().weights;
  const auto& tok = gt.model.token_embeddings();
  const auto& pos = gt.model.positional_embeddings();
  const std::size_t dm = h.d_model(), dh = h.d_head();

  auto embed_row = [&](std::size_t p) {
    if (seq.ids[p] >= gt.model.vocab_size()) throw DomainError("oracle: token id out of range");
    std::vector<double> x(dm);
    for (std::size_t i = 0; i < dm; ++i) x[i] = static_cast<double>(tok(seq.ids[p], i)) + pos(p, i);
    return x;
  };
  auto project = [&](const TensorF32& w, const std::vector<double>& x) {
    std::vector<double> out(dh, 0.0);
    for (std::size_t a = 0; a < dh; ++a)
      for (std::size_t b = 0; b < dm; ++b) out[a] += static_cast<double>(w(a, b)) * x[b];
    return out;
  };
  const auto q = project(h.w_q, embed_row(t));
  std::vector<double> logits(t + 1);
  std::vector<std::vector<double>> values(t + 1);
  double mx = -INFINITY;
  for (std::size_t i = 0; i <= t; ++i) {
    const auto x = embed_row(i);
    const auto k = project(h.w_k, x);
    double l = 0.0;
    for (std::size_t c = 0; c < dh; ++c) l += q[c] * k[c];
    logits[i] = l;
    mx = std::max(mx, l);
    values[i] = project(h.w_v, x);
  }
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  std::vector<double> y(dh, 0.0);
  for (std::size_t i = 0; i <= t; ++i) {
    const double a = std::exp(logits[i] - mx) / z;
    for (std::size_t c = 0; c < dh; ++c) y[c] += a * values[i][c];
  }
  return y;
}

/// Output-SAE feature activation of a double head output.
inline double oracle_feature(const GroundTruth& gt, const std::vector<double>& y, std::uint32_t feature) {
  if (feature >= gt.sae_out.n()) throw DomainError("oracle: feature out of range");
  double pre = gt.sae_out.b_enc[feature];
  for (std::size_t c = 0; c < y.size(); ++c)
    pre += static_cast<double>(gt.sae_out.encoder(feature, c)) * (y[c] - gt.sae_out.b_dec[c]);
  return std::max(0.0, pre);
}

/// relu(enc_g . (y_t - b_dec) + b_enc_g), all in double.
inline double oracle_activation(const GroundTruth& gt, const TokenSequence& seq, std::size_t t,
                                std::uint32_t feature) {
  return oracle_feature(gt, oracle_head_output(gt, seq, t), feature);
}

// ---------------------------------------------------------------------------
// plants.json

inline nlohmann::ordered_json spec_to_json(const PlantSpec& s, const ToyModel& model) {
  nlohmann::ordered_json j;
  j["kind"] = to_string(s.kind);
  j["key"] = model.token(s.key);
  j["query"] = model.token(s.query);
  if (s.kind == PlantKind::absence) j["distractor"] = model.token(s.distractor);
  j["output_feature"] = s.output_feature;
  j["logit_gain"] = s.logit_gain;
  j["value_gain"] = s.value_gain;
  if (s.kind == PlantKind::absence) {
    j["distractor_gain"] = s.distractor_gain;
    j["distractor_value"] = s.distractor_value;
  }
  return j;
}

inline PlantSpec spec_from_json(const nlohmann::json& j, const ToyModel& model) {
  PlantSpec s;
  s.kind = plant_kind_from_string(j.at("kind").get<std::string>());
  s.key = model.token_id(j.at("key").get<std::string>());
  s.query = model.token_id(j.at("query").get<std::string>());
  if (s.kind == PlantKind::absence) {
    s.distractor = model.token_id(j.at("distractor").get<std::string>());
    s.distractor_gain = j.at("distractor_gain").get<double>();
    s.distractor_value = j.at("distractor_value").get<double>();
  }
  s.output_feature = j.at("output_feature").get<std::uint32_t>();
  s.logit_gain = j.at("logit_gain").get<double>();
  s.value_gain = j.at("value_gain").get<double>();
  return s;
}

inline nlohmann::ordered_json plants_to_json(const GroundTruth& gt, const CorpusParams& cp,
                                             const std::vector<SequenceLabels>& labels) {
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["params"] = {{"vocab_size", gt.params.vocab_size}, {"d_model", gt.params.d_model},
                 {"d_head", gt.params.d_head},         {"max_len", gt.params.max_len},
                 {"bos_logit", gt.params.bos_logit},   {"sink_weight", gt.params.sink_weight}};
  j["corpus"] = {{"n_sequences", cp.n_sequences},
                 {"length", cp.length},
                 {"match_fraction", cp.match_fraction},
                 {"max_plants_per_sequence", cp.max_plants_per_sequence},
                 {"max_count", cp.max_count},
                 {"seed", cp.seed}};
  j["specs"] = nlohmann::ordered_json::array();
  for (const auto& s : gt.specs) j["specs"].push_back(spec_to_json(s, gt.model));
  j["sequences"] = nlohmann::ordered_json::array();
  for (std::size_t n = 0; n < labels.size(); ++n) {
    nlohmann::ordered_json seq;
    seq["seq"] = n;
    seq["active_features"] = expected_active_features(gt, labels[n]);
    seq["plants"] = nlohmann::ordered_json::array();
    for (const auto& p : labels[n].plants) {
      nlohmann::ordered_json pj;
      pj["spec"] = p.spec;
      pj["key_positions"] = p.key_positions;
      pj["query_position"] = p.query_position;
      if (p.distractor_position) pj["distractor_position"] = *p.distractor_position;
      seq["plants"].push_back(pj);
    }
    j["sequences"].push_back(seq);
  }
  return j;
}

/// Specs and labels back from plants.json; the model is rebuilt from the specs.
inline std::pair<GroundTruth, std::vector<SequenceLabels>> plants_from_json(const nlohmann::json& j) {
  SynthParams p;
  const auto& pj = j.at("params");
  p.vocab_size = pj.at("vocab_size");
  p.d_model = pj.at("d_model");
  p.d_head = pj.at("d_head");
  p.max_len = pj.at("max_len");
  p.bos_logit = pj.at("bos_logit");
  p.sink_weight = pj.at("sink_weight");
  const ToyModel names(synth_vocab(p.vocab_size), TensorF32({p.vocab_size, 1}), TensorF32({1, 1}), {});
  std::vector<PlantSpec> specs;
  for (const auto& s : j.at("specs")) specs.push_back(spec_from_json(s, names));
  std::vector<SequenceLabels> labels;
  for (const auto& sj : j.at("sequences")) {
    SequenceLabels l;
    for (const auto& pj2 : sj.at("plants")) {
      PlantPlacement pl;
      pl.spec = pj2.at("spec");
      pl.key_positions = pj2.at("key_positions").get<std::vector<std::uint32_t>>();
      pl.query_position = pj2.at("query_position");
      if (pj2.contains("distractor_position")) pl.distractor_position = pj2.at("distractor_position").get<std::uint32_t>();
      l.plants.push_back(std::move(pl));
    }
    labels.push_back(std::move(l));
  }
  return {plant(p, std::move(specs)), std::move(labels)};
}

}  // namespace attnrules
