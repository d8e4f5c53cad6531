#pragma once

// Finite-difference oracle for mask-gradient importance: random small heads
// and feature sequences, with g(m) evaluated directly in double from the
// decoder rows and head weights.

#include <algorithm>
#include <cmath>
#include <vector>

#include "attnrules/rules.hpp"
#include "test_util.hpp"

namespace attnrules::testutil {

// |analytic - fd| <= kGradientRelTol * max(|fd|, kGradientAbsFloor)
inline constexpr double kGradientRelTol = 1e-4;
inline constexpr double kGradientAbsFloor = 1e-6;

struct GradientInstance {
  AttentionHead head;
  SaeDictionary sae;
  TensorF32 u;
  GradientExample example;
  std::vector<SkipGramRule> candidates;
  Matrix attn;                // A(q, k) in double
  std::vector<double> value;  // S(k) in double

  ScoreContext ctx() const { return ScoreContext(sae, head, u.data()); }

  /// Pre-activation z and g = relu(z) with m_{pair} = 1 + delta (all other m = 1).
  std::pair<double, double> evaluate(std::size_t pair, double delta) const {
    const auto& f = example.features;
    const std::size_t t = example.t;
    const std::uint32_t pq = candidates[pair].query.index, pk = candidates[pair].key.index;
    std::vector<double> logit(t + 1, 0.0), v(t + 1, 0.0);
    for (std::size_t i = 0; i <= t; ++i) {
      for (const auto& fk : f[i]) {
        v[i] += static_cast<double>(fk.value) * value[fk.index];
        for (const auto& fq : f[t]) {
          const double m = (fq.index == pq && fk.index == pk) ? 1.0 + delta : 1.0;
          logit[i] += m * static_cast<double>(fq.value) * fk.value * attn[fq.index][fk.index];
        }
      }
    }
    const double mx = *std::max_element(logit.begin(), logit.end());
    double zs = 0.0, z = 0.0;
    for (double l : logit) zs += std::exp(l - mx);
    for (std::size_t i = 0; i <= t; ++i) z += std::exp(logit[i] - mx) / zs * v[i];
    return {z, std::max(0.0, z)};
  }

  double central_difference(std::size_t pair, double eps) const {
    return (evaluate(pair, eps).second - evaluate(pair, -eps).second) / (2.0 * eps);
  }

  /// Pre-activation far enough from the ReLU kink that +-eps probes stay on one side.
  bool well_separated() const { return std::fabs(evaluate(0, 0.0).first) > 1e-2; }
};

/// d_model <= 16, at most 8 positions, dictionary of 2..12 features.
inline GradientInstance random_gradient_instance(Rng& rng) {
  const std::size_t dm = 2 + rng.below(15), dh = 1 + rng.below(8), n = 2 + rng.below(11);
  const std::size_t len = 1 + rng.below(8);
  const float scale = static_cast<float>(1.0 / std::sqrt(static_cast<double>(dm)));
  GradientInstance inst{AttentionHead(random_normal({dh, dm}, rng, scale), random_normal({dh, dm}, rng, scale),
                                      random_normal({dh, dm}, rng, scale)),
                        init_sae(n, dm, rng.next_u64()),
                        random_normal({dh}, rng),
                        {},
                        {},
                        {},
                        {}};
  for (std::size_t p = 0; p < len; ++p) {
    SparseFeatures sf;
    for (std::uint32_t j = 0; j < n; ++j) {
      if (rng.uniform() < 0.4) sf.push_back({j, static_cast<float>(rng.uniform(0.1, 1.5))});
    }
    inst.example.features.push_back(std::move(sf));
  }
  inst.example.t = len - 1;
  inst.attn.assign(n, std::vector<double>(n));
  inst.value.assign(n, 0.0);
  for (std::size_t a = 0; a < n; ++a) {
    inst.value[a] = value_score_ref(inst.sae.decoder.row(a), inst.head.w_v, inst.u.data());
    for (std::size_t b = 0; b < n; ++b)
      inst.attn[a][b] = bilinear(inst.sae.decoder.row(a), inst.head.w_q, inst.head.w_k, inst.sae.decoder.row(b));
  }
  inst.candidates = select_candidates(inst.ctx());
  return inst;
}

}  // namespace attnrules::testutil
