#pragma once

// ReLU sparse autoencoders over attention-head inputs and outputs.
//
//   f_j(x) = relu(enc_j . (x - b_dec) + b_enc_j)
//   x_hat  = sum_j f_j(x) dec_j + b_dec
//
// With zero biases this is exactly x = sum_j f_j(x) d_j.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "attnrules/atrw.hpp"
#include "attnrules/error.hpp"
#include "attnrules/model.hpp"
#include "attnrules/numkernel.hpp"

namespace attnrules {

struct SaeDictionary {
  TensorF32 encoder;  // [n x dim]
  TensorF32 decoder;  // [n x dim]
  TensorF32 b_enc;    // [n]
  TensorF32 b_dec;    // [dim]

  SaeDictionary() = default;
  SaeDictionary(TensorF32 enc, TensorF32 dec)
      : encoder(std::move(enc)), decoder(std::move(dec)), b_enc({encoder.rows()}), b_dec({encoder.cols()}) {
    validate();
  }
  SaeDictionary(TensorF32 enc, TensorF32 dec, TensorF32 be, TensorF32 bd)
      : encoder(std::move(enc)), decoder(std::move(dec)), b_enc(std::move(be)), b_dec(std::move(bd)) {
    validate();
  }

  /// Encoder = decoder = I_n.
  static SaeDictionary identity(std::size_t n) { return {TensorF32::identity(n), TensorF32::identity(n)}; }

  std::size_t n() const { return encoder.rows(); }
  std::size_t dim() const { return encoder.cols(); }

  void validate() const {
    encoder.require_rank(2, "sae encoder");
    if (decoder.shape() != encoder.shape()) {
      throw DimensionError("sae decoder " + shape_string(decoder.shape()) + " vs encoder " +
                           shape_string(encoder.shape()));
    }
    if (b_enc.shape() != Shape{n()} || b_dec.shape() != Shape{dim()}) {
      throw DimensionError("sae bias shapes do not match dictionary");
    }
  }

  friend bool operator==(const SaeDictionary&, const SaeDictionary&) = default;
};

struct FeatureActivation {
  std::uint32_t index = 0;
  float value = 0.0f;
  friend bool operator==(const FeatureActivation&, const FeatureActivation&) = default;
};

/// Active features of one embedding, ascending by index, values > 0.
using SparseFeatures = std::vector<FeatureActivation>;

inline TensorF32 encode(const SaeDictionary& sae, std::span<const float> x) {
  if (x.size() != sae.dim()) {
    throw DimensionError("encode: input length " + std::to_string(x.size()) + " != sae dim " +
                         std::to_string(sae.dim()));
  }
  std::vector<float> centered(x.begin(), x.end());
  for (std::size_t i = 0; i < centered.size(); ++i) centered[i] -= sae.b_dec[i];
  TensorF32 f({sae.n()});
  for (std::size_t j = 0; j < sae.n(); ++j) {
    f[j] = relu(static_cast<float>(dot(sae.encoder.row(j), centered) + sae.b_enc[j]));
  }
  return f;
}

inline SparseFeatures encode_sparse(const SaeDictionary& sae, std::span<const float> x) {
  const TensorF32 f = encode(sae, x);
  SparseFeatures out;
  for (std::size_t j = 0; j < f.size(); ++j) {
    if (f[j] > 0.0f) out.push_back({static_cast<std::uint32_t>(j), f[j]});
  }
  return out;
}

/// Encodes every row of x [B x dim] -> [B x n].
inline TensorF32 encode_batch(const SaeDictionary& sae, const TensorF32& x) {
  x.require_rank(2, "encode_batch");
  if (x.cols() != sae.dim()) throw DimensionError("encode_batch: width mismatch");
  TensorF32 centered = x;
  for (std::size_t b = 0; b < x.rows(); ++b) {
    auto r = centered.row(b);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] -= sae.b_dec[i];
  }
  TensorF32 pre = gemm(centered, transpose(sae.encoder));
  for (std::size_t b = 0; b < pre.rows(); ++b) {
    auto r = pre.row(b);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] = relu(r[j] + sae.b_enc[j]);
  }
  return pre;
}

inline TensorF32 decode(const SaeDictionary& sae, std::span<const float> f) {
  if (f.size() != sae.n()) {
    throw DimensionError("decode: activation length " + std::to_string(f.size()) + " != n " +
                         std::to_string(sae.n()));
  }
  TensorF32 x = matvec_t(sae.decoder, f);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += sae.b_dec[i];
  return x;
}

inline TensorF32 decode_batch(const SaeDictionary& sae, const TensorF32& f) {
  f.require_rank(2, "decode_batch");
  if (f.cols() != sae.n()) throw DimensionError("decode_batch: width mismatch");
  TensorF32 x = gemm(f, sae.decoder);
  for (std::size_t b = 0; b < x.rows(); ++b) {
    auto r = x.row(b);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] += sae.b_dec[i];
  }
  return x;
}

struct SaeLoss {
  double mse = 0.0;
  double l1 = 0.0;
  double total = 0.0;
};

/// mse = mean_b ||x_b - x_hat_b||^2, l1 = coeff * mean_b sum_j f_j.
inline SaeLoss sae_loss(const SaeDictionary& sae, const TensorF32& batch, double l1_coefficient) {
  const TensorF32 f = encode_batch(sae, batch);
  const TensorF32 xhat = decode_batch(sae, f);
  const double bsz = static_cast<double>(batch.rows());
  SaeLoss loss;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double e = static_cast<double>(xhat[i]) - batch[i];
    loss.mse += e * e;
  }
  double act = 0.0;
  for (float v : f.data()) act += v;
  loss.mse /= bsz;
  loss.l1 = l1_coefficient * act / bsz;
  loss.total = loss.mse + loss.l1;
  return loss;
}

/// Random unit-norm decoder rows with the encoder tied to them; zero biases.
inline SaeDictionary init_sae(std::size_t n, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  TensorF32 dec = random_normal({n, dim}, rng);
  for (std::size_t j = 0; j < n; ++j) {
    auto r = dec.row(j);
    const double norm = l2_norm(r);
    for (auto& v : r) v = static_cast<float>(v / norm);
  }
  return {dec, dec};
}

inline void normalize_decoder_rows(SaeDictionary& sae) {
  for (std::size_t j = 0; j < sae.n(); ++j) {
    auto r = sae.decoder.row(j);
    const double norm = l2_norm(r);
    if (norm > 0.0) {
      for (auto& v : r) v = static_cast<float>(v / norm);
    }
  }
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  double l1_coefficient = 5e-4;
  std::size_t batch_size = 4096;
  double lr = 0.0012;
  double beta1 = 0.9;
  double beta2 = 0.99;
  std::size_t steps = 0;
  std::vector<std::size_t> resample_checkpoints{25000, 50000, 75000, 100000};
  std::size_t dead_window = 12500;
  std::uint64_t seed = 0;
};

struct TrainRecord {
  std::size_t step = 0;
  double mse = 0.0;
  double l1 = 0.0;
  double total = 0.0;
  std::size_t dead = 0;
};

struct SaeOptimizerState {
  AdamState encoder, decoder, b_enc, b_dec;

  SaeOptimizerState() = default;
  SaeOptimizerState(const SaeDictionary& sae, const TrainConfig& cfg)
      : encoder(sae.encoder.shape(), cfg.lr),
        decoder(sae.decoder.shape(), cfg.lr),
        b_enc(sae.b_enc.shape(), cfg.lr),
        b_dec(sae.b_dec.shape(), cfg.lr) {
    for (AdamState* s : {&encoder, &decoder, &b_enc, &b_dec}) {
      s->beta1 = cfg.beta1;
      s->beta2 = cfg.beta2;
    }
  }

  void reset_feature(std::size_t j) {
    encoder.reset_row(j);
    decoder.reset_row(j);
    b_enc.reset_entry(j);
  }
};

struct SaeGradients {
  SaeLoss loss;
  TensorF32 features;  // [B x n] activations of the batch
  TensorF32 encoder, decoder, b_enc, b_dec;
};

/// Loss and its analytic gradient for one batch (ReLU subgradient 0 at 0).
inline SaeGradients sae_gradients(const SaeDictionary& sae, const TensorF32& batch, double l1) {
  batch.require_rank(2, "training batch");
  if (batch.cols() != sae.dim()) throw DimensionError("training batch width mismatch");
  const std::size_t bsz = batch.rows(), n = sae.n(), dim = sae.dim();
  const double inv_b = 1.0 / static_cast<double>(bsz);

  TensorF32 xc = batch;
  for (std::size_t b = 0; b < bsz; ++b) {
    auto r = xc.row(b);
    for (std::size_t i = 0; i < dim; ++i) r[i] -= sae.b_dec[i];
  }
  TensorF32 pre = gemm_nt(xc, sae.encoder);
  TensorF32 f({bsz, n});
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t j = 0; j < n; ++j) {
      pre(b, j) += sae.b_enc[j];
      f(b, j) = relu(pre(b, j));
    }
  TensorF32 dxhat = gemm(f, sae.decoder);

  SaeGradients g;
  double act_sum = 0.0;
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double e = static_cast<double>(dxhat(b, i)) + sae.b_dec[i] - batch(b, i);
      g.loss.mse += e * e;
      dxhat(b, i) = static_cast<float>(2.0 * e * inv_b);
    }
    for (std::size_t j = 0; j < n; ++j) act_sum += f(b, j);
  }
  g.loss.mse *= inv_b;
  g.loss.l1 = l1 * act_sum * inv_b;
  g.loss.total = g.loss.mse + g.loss.l1;

  g.decoder = gemm(transpose(f), dxhat);
  TensorF32 dpre = gemm(dxhat, transpose(sae.decoder));
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t j = 0; j < n; ++j)
      dpre(b, j) = pre(b, j) > 0.0f ? static_cast<float>(dpre(b, j) + l1 * inv_b) : 0.0f;
  std::vector<double> benc_acc(n, 0.0), bdec_acc(dim, 0.0);
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t j = 0; j < n; ++j) benc_acc[j] += dpre(b, j);
    for (std::size_t i = 0; i < dim; ++i) bdec_acc[i] += dxhat(b, i);
  }
  g.b_enc = TensorF32({n});
  for (std::size_t j = 0; j < n; ++j) g.b_enc[j] = static_cast<float>(benc_acc[j]);
  g.encoder = gemm(transpose(dpre), xc);
  const TensorF32 through_enc = matvec_t(sae.encoder, g.b_enc.data());
  g.b_dec = TensorF32({dim});
  for (std::size_t i = 0; i < dim; ++i) g.b_dec[i] = static_cast<float>(bdec_acc[i] - through_enc[i]);
  g.features = std::move(f);
  return g;
}

/// Re-initializes each dead feature toward a high-reconstruction-loss example
/// of `recent_batch` (sampled with probability proportional to squared loss).
/// Returns the number of features re-initialized.
inline std::size_t resample_dead(SaeDictionary& sae, const std::vector<std::size_t>& dead,
                                 const TensorF32& recent_batch, Rng& rng,
                                 SaeOptimizerState* optimizer = nullptr) {
  if (dead.empty()) return 0;
  if (recent_batch.rank() != 2 || recent_batch.rows() == 0) {
    spdlog::warn("resample_dead: empty recent batch, {} dead features left untouched", dead.size());
    return 0;
  }
  if (recent_batch.cols() != sae.dim()) throw DimensionError("resample_dead: batch width mismatch");

  const TensorF32 f = encode_batch(sae, recent_batch);
  const TensorF32 xhat = decode_batch(sae, f);
  const std::size_t bsz = recent_batch.rows();
  std::vector<double> weight(bsz, 0.0);
  double total = 0.0;
  for (std::size_t b = 0; b < bsz; ++b) {
    double err = 0.0;
    for (std::size_t i = 0; i < sae.dim(); ++i) {
      const double e = static_cast<double>(xhat(b, i)) - recent_batch(b, i);
      err += e * e;
    }
    weight[b] = err * err;
    total += weight[b];
  }

  std::vector<bool> is_dead(sae.n(), false);
  for (auto j : dead) is_dead.at(j) = true;
  double alive_norm = 0.0;
  std::size_t alive = 0;
  for (std::size_t j = 0; j < sae.n(); ++j) {
    if (!is_dead[j]) {
      alive_norm += l2_norm(sae.encoder.row(j));
      ++alive;
    }
  }
  const double enc_scale = 0.2 * (alive ? alive_norm / static_cast<double>(alive) : 1.0);

  auto pick = [&]() -> std::size_t {
    if (total <= 0.0) return static_cast<std::size_t>(rng.below(bsz));
    double r = rng.uniform() * total;
    for (std::size_t b = 0; b < bsz; ++b) {
      r -= weight[b];
      if (r < 0.0) return b;
    }
    return bsz - 1;
  };

  std::size_t count = 0;
  for (auto j : dead) {
    std::vector<float> dir(sae.dim());
    double norm = 0.0;
    for (int attempt = 0; attempt < 16 && norm <= 0.0; ++attempt) {
      const std::size_t b = pick();
      for (std::size_t i = 0; i < sae.dim(); ++i) dir[i] = recent_batch(b, i) - sae.b_dec[i];
      norm = l2_norm(dir);
    }
    if (norm <= 0.0) {
      spdlog::warn("resample_dead: no usable example for feature {}", j);
      continue;
    }
    auto dec = sae.decoder.row(j);
    auto enc = sae.encoder.row(j);
    for (std::size_t i = 0; i < sae.dim(); ++i) {
      const double unit = dir[i] / norm;
      dec[i] = static_cast<float>(unit);
      enc[i] = static_cast<float>(unit * enc_scale);
    }
    sae.b_enc[j] = 0.0f;
    if (optimizer) optimizer->reset_feature(j);
    ++count;
  }
  return count;
}

/// Stateful trainer; `step` consumes one batch. Everything it owns is plain
/// data so a checkpoint is a faithful snapshot.
class SaeTrainer {
 public:
  SaeTrainer(TrainConfig config, SaeDictionary init)
      : config_(std::move(config)),
        sae_(std::move(init)),
        opt_(sae_, config_),
        last_fired_(sae_.n(), 0) {}

  const SaeDictionary& sae() const { return sae_; }
  const TrainConfig& config() const { return config_; }
  const std::vector<TrainRecord>& history() const { return history_; }
  std::size_t steps_done() const { return step_; }
  const SaeOptimizerState& optimizer() const { return opt_; }
  const std::vector<std::size_t>& last_fired() const { return last_fired_; }

  std::vector<std::size_t> dead_features() const {
    std::vector<std::size_t> dead;
    for (std::size_t j = 0; j < last_fired_.size(); ++j) {
      if (step_ >= last_fired_[j] + config_.dead_window) dead.push_back(j);
    }
    return dead;
  }

  /// One Adam step on `batch` [B x dim], then decoder renormalization and,
  /// at checkpoints, dead-feature resampling.
  TrainRecord step(const TensorF32& batch) {
    SaeGradients g = sae_gradients(sae_, batch, config_.l1_coefficient);
    TrainRecord rec;
    rec.step = step_ + 1;
    rec.mse = g.loss.mse;
    rec.l1 = g.loss.l1;
    rec.total = g.loss.total;
    if (!std::isfinite(rec.total)) {
      throw DomainError("train_sae: non-finite loss at step " + std::to_string(rec.step) +
                        " (mse=" + std::to_string(rec.mse) + ", l1=" + std::to_string(rec.l1) + ")");
    }
    const std::size_t bsz = batch.rows(), n = sae_.n();
    const TensorF32& f = g.features;

    adam_step(sae_.encoder, g.encoder, opt_.encoder);
    adam_step(sae_.decoder, g.decoder, opt_.decoder);
    adam_step(sae_.b_enc, g.b_enc, opt_.b_enc);
    adam_step(sae_.b_dec, g.b_dec, opt_.b_dec);
    normalize_decoder_rows(sae_);

    ++step_;
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t b = 0; b < bsz; ++b) {
        if (f(b, j) > 0.0f) {
          last_fired_[j] = step_;
          break;
        }
      }
    }
    if (std::find(config_.resample_checkpoints.begin(), config_.resample_checkpoints.end(), step_) !=
        config_.resample_checkpoints.end()) {
      const auto dead = dead_features();
      if (!dead.empty()) {
        // Draws are keyed by checkpoint step so resumed runs stay aligned.
        Rng rng = Rng(config_.seed).split(0x5a30000ULL + step_);
        const std::size_t done = resample_dead(sae_, dead, batch, rng, &opt_);
        spdlog::debug("step {}: resampled {} dead features", step_, done);
        // Give the new directions a full window before they can be judged dead again.
        for (auto j : dead) last_fired_[j] = step_;
      }
    }
    rec.dead = dead_features().size();
    history_.push_back(rec);
    return rec;
  }

  /// Restores the full trainer state from a checkpoint.
  void restore(SaeDictionary sae, SaeOptimizerState opt, std::vector<std::size_t> last_fired, std::size_t step,
               std::vector<TrainRecord> history) {
    sae.validate();
    if (last_fired.size() != sae.n()) throw FormatError("checkpoint: last-fired length mismatch");
    sae_ = std::move(sae);
    opt_ = std::move(opt);
    last_fired_ = std::move(last_fired);
    step_ = step;
    history_ = std::move(history);
  }

 private:
  TrainConfig config_;
  SaeDictionary sae_;
  SaeOptimizerState opt_;
  std::vector<std::size_t> last_fired_;
  std::size_t step_ = 0;
  std::vector<TrainRecord> history_;
};

struct TrainResult {
  SaeDictionary sae;
  std::vector<TrainRecord> history;
};

/// Runs `config.steps` steps; `next_batch(step)` must return batch number
/// `step` as a [B x dim] tensor.
template <typename BatchSource>
TrainResult train_sae(const TrainConfig& config, SaeDictionary init, BatchSource&& next_batch) {
  SaeTrainer trainer(config, std::move(init));
  for (std::size_t s = 0; s < config.steps; ++s) trainer.step(next_batch(s));
  return {trainer.sae(), trainer.history()};
}

// ---------------------------------------------------------------------------
// Persistence

inline void save_sae(const SaeDictionary& sae, const std::filesystem::path& path) {
  atrw::save(path, {{"encoder", sae.encoder}, {"decoder", sae.decoder}, {"b_enc", sae.b_enc}, {"b_dec", sae.b_dec}});
}

inline SaeDictionary load_sae(const std::filesystem::path& path) {
  const auto t = atrw::load(path);
  return {atrw::find(t, "encoder"), atrw::find(t, "decoder"), atrw::find(t, "b_enc"), atrw::find(t, "b_dec")};
}

// ---------------------------------------------------------------------------
// Activation index

struct ActivationRecord {
  std::uint32_t feature = 0;
  std::uint32_t seq = 0;
  std::uint32_t pos = 0;
  float act = 0.0f;
  friend bool operator==(const ActivationRecord&, const ActivationRecord&) = default;
};

/// Max activation of one feature within one sequence (first argmax position).
struct SequencePeak {
  std::uint32_t seq = 0;
  std::uint32_t pos = 0;
  float act = 0.0f;
};

/// Sparse record of every positive feature activation over a corpus.
class ActivationIndex {
 public:
  ActivationIndex() = default;
  ActivationIndex(std::size_t n_features, std::vector<std::uint32_t> sequence_lengths,
                  std::vector<ActivationRecord> records)
      : n_features_(n_features), lengths_(std::move(sequence_lengths)), records_(std::move(records)) {
    std::sort(records_.begin(), records_.end(), [](const auto& a, const auto& b) {
      return std::tie(a.feature, a.seq, a.pos) < std::tie(b.feature, b.seq, b.pos);
    });
    offsets_.assign(n_features_ + 1, 0);
    counts_.assign(n_features_, 0);
    for (std::size_t r = 0; r < records_.size(); ++r) {
      const auto& rec = records_[r];
      if (rec.feature >= n_features_) throw FormatError("activation index: feature out of range");
      if (rec.seq >= lengths_.size()) throw FormatError("activation index: sequence out of range");
      if (rec.pos >= lengths_[rec.seq]) throw FormatError("activation index: position out of range");
      if (!(rec.act > 0.0f)) throw FormatError("activation index: non-positive activation");
      if (r > 0 && records_[r - 1].feature == rec.feature && records_[r - 1].seq == rec.seq &&
          records_[r - 1].pos == rec.pos) {
        throw FormatError("activation index: duplicate record");
      }
      ++offsets_[rec.feature + 1];
      if (r == 0 || records_[r - 1].feature != rec.feature || records_[r - 1].seq != rec.seq) {
        ++counts_[rec.feature];
      }
    }
    for (std::size_t f = 0; f < n_features_; ++f) offsets_[f + 1] += offsets_[f];
  }

  std::size_t n_features() const { return n_features_; }
  std::size_t n_sequences() const { return lengths_.size(); }
  const std::vector<std::uint32_t>& sequence_lengths() const { return lengths_; }
  const std::vector<ActivationRecord>& records() const { return records_; }

  std::span<const ActivationRecord> records(std::size_t feature) const {
    check(feature);
    return std::span<const ActivationRecord>(records_).subspan(offsets_[feature],
                                                               offsets_[feature + 1] - offsets_[feature]);
  }

  std::size_t active_sequence_count(std::size_t feature) const {
    check(feature);
    return counts_[feature];
  }

  /// One entry per sequence in which `feature` fires, ascending by sequence.
  std::vector<SequencePeak> peaks(std::size_t feature) const {
    std::vector<SequencePeak> out;
    for (const auto& r : records(feature)) {
      if (out.empty() || out.back().seq != r.seq) {
        out.push_back({r.seq, r.pos, r.act});
      } else if (r.act > out.back().act) {
        out.back().pos = r.pos;
        out.back().act = r.act;
      }
    }
    return out;
  }

  /// Activation of `feature` at (seq, pos); 0 when no record exists.
  float activation(std::size_t feature, std::uint32_t seq, std::uint32_t pos) const {
    const auto recs = records(feature);
    auto it = std::lower_bound(recs.begin(), recs.end(), std::make_pair(seq, pos),
                               [](const ActivationRecord& r, const std::pair<std::uint32_t, std::uint32_t>& key) {
                                 return std::tie(r.seq, r.pos) < std::tie(key.first, key.second);
                               });
    return (it != recs.end() && it->seq == seq && it->pos == pos) ? it->act : 0.0f;
  }

  friend bool operator==(const ActivationIndex& a, const ActivationIndex& b) {
    return a.n_features_ == b.n_features_ && a.lengths_ == b.lengths_ && a.records_ == b.records_;
  }

 private:
  void check(std::size_t feature) const {
    if (feature >= n_features_) throw NotFoundError("feature " + std::to_string(feature) + " out of range");
  }

  std::size_t n_features_ = 0;
  std::vector<std::uint32_t> lengths_;
  std::vector<ActivationRecord> records_;
  std::vector<std::size_t> offsets_;
  std::vector<std::size_t> counts_;
};

using Corpus = std::vector<TokenSequence>;

enum class Stream { input, output };

struct HeadSelector {
  int layer = 0;
  int head = 0;
  Stream stream = Stream::output;
};

/// Per-position SAE activations of the selected stream for one sequence.
inline std::vector<SparseFeatures> sequence_features(const ToyModel& model, const HeadSelector& sel,
                                                     const SaeDictionary& sae, const TokenSequence& seq) {
  const TensorF32 x = embed(model, seq);
  const TensorF32 stream =
      sel.stream == Stream::input ? x : attention_forward(model.head(sel.layer, sel.head).weights, x).y;
  std::vector<SparseFeatures> out;
  out.reserve(seq.size());
  for (std::size_t p = 0; p < seq.size(); ++p) out.push_back(encode_sparse(sae, stream.row(p)));
  return out;
}

inline ActivationIndex collect_activations(const ToyModel& model, const HeadSelector& sel, const SaeDictionary& sae,
                                           const Corpus& corpus, std::size_t max_seqs) {
  if (corpus.empty()) throw DomainError("collect_activations: corpus is empty");
  const std::size_t n = std::min(max_seqs, corpus.size());
  std::vector<std::uint32_t> lengths;
  std::vector<ActivationRecord> records;
  for (std::size_t s = 0; s < n; ++s) {
    const auto& seq = corpus[s];
    lengths.push_back(static_cast<std::uint32_t>(seq.size()));
    const auto feats = sequence_features(model, sel, sae, seq);
    for (std::size_t p = 0; p < feats.size(); ++p) {
      for (const auto& fa : feats[p]) {
        records.push_back({fa.index, static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(p), fa.value});
      }
    }
  }
  return ActivationIndex(sae.n(), std::move(lengths), std::move(records));
}

// JSON-lines records plus a summary document.

inline std::string index_to_jsonl(const ActivationIndex& index) {
  std::string out;
  for (const auto& r : index.records()) {
    nlohmann::ordered_json j;
    j["feature"] = r.feature;
    j["seq"] = r.seq;
    j["pos"] = r.pos;
    j["act"] = r.act;
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline nlohmann::ordered_json index_summary(const ActivationIndex& index) {
  nlohmann::ordered_json j;
  j["n_features"] = index.n_features();
  j["n_sequences"] = index.n_sequences();
  j["sequence_lengths"] = index.sequence_lengths();
  std::vector<std::size_t> counts;
  for (std::size_t f = 0; f < index.n_features(); ++f) counts.push_back(index.active_sequence_count(f));
  j["active_sequence_counts"] = counts;
  return j;
}

inline ActivationIndex index_from_jsonl(const std::string& jsonl, const nlohmann::json& summary) {
  std::vector<ActivationRecord> records;
  std::size_t start = 0;
  try {
    while (start < jsonl.size()) {
      auto end = jsonl.find('\n', start);
      if (end == std::string::npos) end = jsonl.size();
      if (end > start) {
        const auto j = nlohmann::json::parse(jsonl.substr(start, end - start));
        records.push_back({j.at("feature").get<std::uint32_t>(), j.at("seq").get<std::uint32_t>(),
                           j.at("pos").get<std::uint32_t>(), j.at("act").get<float>()});
      }
      start = end + 1;
    }
    ActivationIndex index(summary.at("n_features").get<std::size_t>(),
                          summary.at("sequence_lengths").get<std::vector<std::uint32_t>>(), std::move(records));
    const auto counts = summary.at("active_sequence_counts").get<std::vector<std::size_t>>();
    for (std::size_t f = 0; f < index.n_features(); ++f) {
      if (counts.at(f) != index.active_sequence_count(f)) {
        throw FormatError("activation index summary disagrees with records for feature " + std::to_string(f));
      }
    }
    return index;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("activation index: ") + e.what());
  }
}

}  // namespace attnrules
