#pragma once

// Toy causal attention heads over a closed whitespace vocabulary.

#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnrules/atrw.hpp"
#include "attnrules/error.hpp"
#include "attnrules/numkernel.hpp"

namespace attnrules {

using TokenId = std::uint32_t;

/// One attention head; each projection is [d_head x d_model].
struct AttentionHead {
  TensorF32 w_q;
  TensorF32 w_k;
  TensorF32 w_v;

  AttentionHead() = default;
  AttentionHead(TensorF32 q, TensorF32 k, TensorF32 v) : w_q(std::move(q)), w_k(std::move(k)), w_v(std::move(v)) {
    validate();
  }
  AttentionHead(std::size_t d_head, std::size_t d_model)
      : w_q({d_head, d_model}), w_k({d_head, d_model}), w_v({d_head, d_model}) {}

  std::size_t d_head() const { return w_q.rows(); }
  std::size_t d_model() const { return w_q.cols(); }

  void validate() const {
    w_q.require_rank(2, "w_q");
    if (w_k.shape() != w_q.shape() || w_v.shape() != w_q.shape()) {
      throw DimensionError("attention head projections disagree: " + shape_string(w_q.shape()) +
                           ", " + shape_string(w_k.shape()) + ", " + shape_string(w_v.shape()));
    }
  }

  friend bool operator==(const AttentionHead&, const AttentionHead&) = default;
};

struct HeadEntry {
  int layer = 0;
  int head = 0;
  AttentionHead weights;

  std::string name() const { return "L" + std::to_string(layer) + "H" + std::to_string(head); }
  friend bool operator==(const HeadEntry&, const HeadEntry&) = default;
};

struct TokenSequence {
  std::vector<TokenId> ids;

  std::size_t size() const { return ids.size(); }
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

class ToyModel {
 public:
  ToyModel() = default;
  ToyModel(std::vector<std::string> vocab, TensorF32 token_embeddings, TensorF32 positional_embeddings,
           std::vector<HeadEntry> heads)
      : vocab_(std::move(vocab)),
        token_embeddings_(std::move(token_embeddings)),
        positional_embeddings_(std::move(positional_embeddings)),
        heads_(std::move(heads)) {
    validate();
  }

  const std::vector<std::string>& vocab() const { return vocab_; }
  std::size_t vocab_size() const { return vocab_.size(); }
  const TensorF32& token_embeddings() const { return token_embeddings_; }
  const TensorF32& positional_embeddings() const { return positional_embeddings_; }
  const std::vector<HeadEntry>& heads() const { return heads_; }
  std::size_t d_model() const { return token_embeddings_.cols(); }
  std::size_t max_len() const { return positional_embeddings_.rows(); }

  const HeadEntry& head(int layer, int head) const {
    for (const auto& h : heads_) {
      if (h.layer == layer && h.head == head) return h;
    }
    throw NotFoundError("no head L" + std::to_string(layer) + "H" + std::to_string(head));
  }

  TokenId token_id(const std::string& word) const {
    auto it = index_.find(word);
    if (it == index_.end()) throw NotFoundError("unknown token '" + word + "'");
    return it->second;
  }

  const std::string& token(TokenId id) const {
    if (id >= vocab_.size()) throw DomainError("token id " + std::to_string(id) + " out of range");
    return vocab_[id];
  }

  friend bool operator==(const ToyModel& a, const ToyModel& b) {
    return a.vocab_ == b.vocab_ && a.token_embeddings_ == b.token_embeddings_ &&
           a.positional_embeddings_ == b.positional_embeddings_ && a.heads_ == b.heads_;
  }

 private:
  void validate() {
    token_embeddings_.require_rank(2, "token embeddings");
    positional_embeddings_.require_rank(2, "positional embeddings");
    if (token_embeddings_.rows() != vocab_.size()) {
      throw DimensionError("token embedding rows (" + std::to_string(token_embeddings_.rows()) +
                           ") differ from vocabulary size (" + std::to_string(vocab_.size()) + ")");
    }
    if (positional_embeddings_.cols() != token_embeddings_.cols()) {
      throw DimensionError("positional embedding width differs from d_model");
    }
    index_.clear();
    for (std::size_t i = 0; i < vocab_.size(); ++i) {
      if (!index_.emplace(vocab_[i], static_cast<TokenId>(i)).second) {
        throw FormatError("duplicate vocabulary entry '" + vocab_[i] + "'");
      }
    }
    for (const auto& h : heads_) {
      h.weights.validate();
      if (h.weights.d_model() != d_model()) throw DimensionError(h.name() + ": d_model mismatch");
    }
  }

  std::vector<std::string> vocab_;
  TensorF32 token_embeddings_;
  TensorF32 positional_embeddings_;
  std::vector<HeadEntry> heads_;
  std::unordered_map<std::string, TokenId> index_;
};

// ---------------------------------------------------------------------------
// Forward pass

/// Row i = token_embeddings[ids[i]] + positional_embeddings[i].
inline TensorF32 embed(const ToyModel& model, const TokenSequence& seq) {
  if (seq.size() > model.max_len()) {
    throw DomainError("sequence length " + std::to_string(seq.size()) + " exceeds max_len " +
                      std::to_string(model.max_len()));
  }
  const std::size_t d = model.d_model();
  TensorF32 x({seq.size(), d});
  for (std::size_t i = 0; i < seq.size(); ++i) {
    const TokenId id = seq.ids[i];
    if (id >= model.vocab_size()) {
      throw DomainError("token id " + std::to_string(id) + " out of range");
    }
    auto tok = model.token_embeddings().row(id);
    auto pos = model.positional_embeddings().row(i);
    auto out = x.row(i);
    for (std::size_t j = 0; j < d; ++j) out[j] = tok[j] + pos[j];
  }
  return x;
}

/// Entry (t, i) = x_t^T W_Q^T W_K x_i for i <= t. Entries with i > t are
/// masked: they are left at zero and never read by the forward pass.
inline TensorF32 attention_logits(const AttentionHead& head, const TensorF32& x) {
  x.require_rank(2, "attention input");
  if (x.cols() != head.d_model()) {
    throw DimensionError("attention input width " + std::to_string(x.cols()) + " != d_model " +
                         std::to_string(head.d_model()));
  }
  const TensorF32 q = gemm_nt(x, head.w_q);
  const TensorF32 k = gemm_nt(x, head.w_k);
  const std::size_t t = x.rows();
  TensorF32 logits({t, t});
  for (std::size_t a = 0; a < t; ++a)
    for (std::size_t b = 0; b <= a; ++b) logits(a, b) = static_cast<float>(dot(q.row(a), k.row(b)));
  return logits;
}

struct AttentionOutput {
  TensorF32 y;     // [t x d_head]
  TensorF32 attn;  // [t x t], upper triangle zero
};

inline AttentionOutput attention_from_logits(const AttentionHead& head, const TensorF32& x,
                                             const TensorF32& logits) {
  const std::size_t t = x.rows();
  if (logits.rank() != 2 || logits.rows() != t || logits.cols() != t) {
    throw DimensionError("logits shape " + shape_string(logits.shape()) + " does not match input");
  }
  const TensorF32 v = gemm_nt(x, head.w_v);
  AttentionOutput out{TensorF32({t, head.d_head()}), TensorF32({t, t})};
  std::vector<double> acc(head.d_head());
  for (std::size_t a = 0; a < t; ++a) {
    const TensorF32 row = softmax_causal_row(logits.row(a), a + 1);
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t b = 0; b <= a; ++b) {
      out.attn(a, b) = row[b];
      const double w = row[b];
      const auto vb = v.row(b);
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += w * vb[j];
    }
    for (std::size_t j = 0; j < acc.size(); ++j) out.y(a, j) = static_cast<float>(acc[j]);
  }
  return out;
}

inline AttentionOutput attention_forward(const AttentionHead& head, const TensorF32& x) {
  return attention_from_logits(head, x, attention_logits(head, x));
}

// ---------------------------------------------------------------------------
// Tokenization

inline TokenSequence tokenize(const ToyModel& model, const std::string& text) {
  TokenSequence seq;
  std::istringstream in(text);
  std::string word;
  while (in >> word) seq.ids.push_back(model.token_id(word));
  return seq;
}

inline std::string detokenize(const ToyModel& model, const TokenSequence& seq) {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out += ' ';
    out += model.token(seq.ids[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence: ATRW tensors plus a JSON sidecar with vocabulary and heads.

inline std::filesystem::path meta_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".meta.json");
}

inline void save_model(const ToyModel& model, const std::filesystem::path& path) {
  atrw::NamedTensors tensors;
  tensors.emplace_back("token_embeddings", model.token_embeddings());
  tensors.emplace_back("positional_embeddings", model.positional_embeddings());
  nlohmann::ordered_json heads = nlohmann::ordered_json::array();
  for (const auto& h : model.heads()) {
    tensors.emplace_back(h.name() + ".w_q", h.weights.w_q);
    tensors.emplace_back(h.name() + ".w_k", h.weights.w_k);
    tensors.emplace_back(h.name() + ".w_v", h.weights.w_v);
    heads.push_back({{"layer", h.layer}, {"head", h.head}, {"d_head", h.weights.d_head()}});
  }
  atrw::save(path, tensors);
  nlohmann::ordered_json meta;
  meta["format"] = "attnrules-model";
  meta["d_model"] = model.d_model();
  meta["max_len"] = model.max_len();
  meta["vocab"] = model.vocab();
  meta["heads"] = heads;
  atrw::write_file(meta_path(path), meta.dump(2) + "\n");
}

inline ToyModel load_model(const std::filesystem::path& path) {
  const auto tensors = atrw::load(path);
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(atrw::read_file(meta_path(path)));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model sidecar: ") + e.what());
  }
  try {
    std::vector<HeadEntry> heads;
    for (const auto& h : meta.at("heads")) {
      HeadEntry e;
      e.layer = h.at("layer").get<int>();
      e.head = h.at("head").get<int>();
      const std::string prefix = e.name();
      e.weights = AttentionHead(atrw::find(tensors, prefix + ".w_q"), atrw::find(tensors, prefix + ".w_k"),
                                atrw::find(tensors, prefix + ".w_v"));
      heads.push_back(std::move(e));
    }
    return ToyModel(meta.at("vocab").get<std::vector<std::string>>(), atrw::find(tensors, "token_embeddings"),
                    atrw::find(tensors, "positional_embeddings"), std::move(heads));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model sidecar: ") + e.what());
  }
}

}  // namespace attnrules
