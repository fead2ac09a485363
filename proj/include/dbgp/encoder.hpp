/*
 * Copyright 2026 The dbgp Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

// BEHRT-style sequence encoder: summed code/age/segment/position embeddings,
// a post-norm multi-head self-attention stack, first-token pooling, and the
// masked-code pretraining objective.

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dbgp/autodiff.hpp"
#include "dbgp/bayes.hpp"
#include "dbgp/checkpoint.hpp"
#include "dbgp/error.hpp"
#include "dbgp/params.hpp"
#include "dbgp/rng.hpp"
#include "dbgp/synthdata.hpp"

namespace dbgp {

struct EncoderConfig {
  int max_sequence_length = 256;
  int hidden_size = 150;
  int n_layers = 4;
  int n_heads = 6;
  int intermediate_size = 108;
  double dropout = 0.29;
  int pool_size = 150;

  void validate() const {
    if (max_sequence_length < 1) throw ConfigError("encoder.max_sequence_length", "must be >= 1");
    if (hidden_size < 1) throw ConfigError("encoder.hidden_size", "must be >= 1");
    if (n_layers < 0) throw ConfigError("encoder.n_layers", "must be >= 0");
    if (n_heads < 1 || hidden_size % n_heads != 0)
      throw ConfigError("encoder.n_heads", "hidden_size must be divisible by n_heads");
    if (intermediate_size < 1) throw ConfigError("encoder.intermediate_size", "must be >= 1");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("encoder.dropout", "must lie in [0, 1)");
    if (pool_size < 1) throw ConfigError("encoder.pool_size", "must be >= 1");
  }

  Json to_json() const {
    return Json{{"max_sequence_length", max_sequence_length}, {"hidden_size", hidden_size},
                {"n_layers", n_layers},
                {"n_heads", n_heads},
                {"intermediate_size", intermediate_size},
                {"dropout", dropout},
                {"pool_size", pool_size}};
  }
  static EncoderConfig from_json(const Json& j) {
    EncoderConfig c;
    c.max_sequence_length = j.at("max_sequence_length").get<int>();
    c.hidden_size = j.at("hidden_size").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.intermediate_size = j.at("intermediate_size").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.pool_size = j.at("pool_size").get<int>();
    return c;
  }
  bool operator==(const EncoderConfig&) const = default;
};

/// Padded batch of patient sequences, flattened row-major as
/// (patient * seq_len + position).
struct Batch {
  int size = 0;
  int seq_len = 0;
  std::vector<int> codes, ages, segments, positions;
  std::vector<char> valid;
  std::vector<int> labels;
  std::vector<std::string> patient_ids;

  std::vector<Eigen::Index> first_rows() const {
    std::vector<Eigen::Index> rows(static_cast<std::size_t>(size));
    for (int b = 0; b < size; ++b) rows[static_cast<std::size_t>(b)] = static_cast<Eigen::Index>(b) * seq_len;
    return rows;
  }
};

inline Batch make_batch(const std::vector<const PatientRecord*>& records) {
  if (records.empty()) throw DataError("empty batch");
  Batch b;
  b.size = static_cast<int>(records.size());
  for (const auto* r : records) b.seq_len = std::max<int>(b.seq_len, static_cast<int>(r->length()));
  const auto total = static_cast<std::size_t>(b.size * b.seq_len);
  b.codes.assign(total, Vocabulary::kPad);
  b.ages.assign(total, 0);
  b.segments.assign(total, 0);
  b.positions.assign(total, 0);
  b.valid.assign(total, 0);
  for (int i = 0; i < b.size; ++i) {
    const auto& r = *records[static_cast<std::size_t>(i)];
    for (std::size_t t = 0; t < r.length(); ++t) {
      const auto k = static_cast<std::size_t>(i * b.seq_len) + t;
      b.codes[k] = r.codes[t];
      b.ages[k] = r.ages[t];
      b.segments[k] = r.segments[t];
      b.positions[k] = r.positions[t];
      b.valid[k] = 1;
    }
    b.labels.push_back(r.label);
    b.patient_ids.push_back(r.patient_id);
  }
  return b;
}

inline Batch make_batch(const std::vector<PatientRecord>& records) {
  std::vector<const PatientRecord*> ptrs;
  for (const auto& r : records) ptrs.push_back(&r);
  return make_batch(ptrs);
}

/// Names of the four embedding tables; the deterministic table (or the
/// variational mean) is stored under the name, the pre-softplus scale under
/// name + ".rho".
inline const std::array<std::string, 4>& embedding_table_names() {
  static const std::array<std::string, 4> names{"emb.code", "emb.age", "emb.segment", "emb.position"};
  return names;
}

inline std::string layer_prefix(int l) { return "enc." + std::to_string(l) + "."; }

/// Uniform in +-sqrt(6 / (fan_in + fan_out)).
inline Matrix glorot_uniform(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Matrix m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = a * (2.0 * rng.uniform() - 1.0);
  return m;
}

/// Adds freshly initialized embedding, encoder and pooling blocks.
inline void init_encoder_parameters(ParameterSet& params, const EncoderConfig& cfg, int vocab_size, Rng& rng) {
  cfg.validate();
  const int h = cfg.hidden_size;
  const std::array<int, 4> rows{vocab_size, Vocabulary::num_age_bins(), 2, cfg.max_sequence_length};
  const double emb_a = std::sqrt(3.0 / h);
  for (std::size_t i = 0; i < 4; ++i) {
    Matrix t(rows[i], h);
    for (Eigen::Index j = 0; j < t.size(); ++j) t.data()[j] = emb_a * (2.0 * rng.uniform() - 1.0);
    if (i == 0) t.row(Vocabulary::kPad).setZero();
    params.add(embedding_table_names()[i], std::move(t));
  }
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto p = layer_prefix(l);
    for (const char* proj : {"q", "k", "v", "o"}) {
      params.add(p + proj + ".w", glorot_uniform(h, h, rng));
      params.add(p + proj + ".b", Matrix::Zero(1, h));
    }
    params.add(p + "ln1.g", Matrix::Ones(1, h));
    params.add(p + "ln1.b", Matrix::Zero(1, h));
    params.add(p + "ff1.w", glorot_uniform(h, cfg.intermediate_size, rng));
    params.add(p + "ff1.b", Matrix::Zero(1, cfg.intermediate_size));
    params.add(p + "ff2.w", glorot_uniform(cfg.intermediate_size, h, rng));
    params.add(p + "ff2.b", Matrix::Zero(1, h));
    params.add(p + "ln2.g", Matrix::Ones(1, h));
    params.add(p + "ln2.b", Matrix::Zero(1, h));
  }
  params.add("pool.w", glorot_uniform(h, cfg.pool_size, rng));
  params.add("pool.b", Matrix::Zero(1, cfg.pool_size));
}

/// Resolves named blocks to tape nodes: trainable leaves when a mutable set is
/// supplied, constants otherwise.
class WeightSource {
 public:
  WeightSource(ad::Tape& tape, ParameterSet& params, bool trainable)
      : tape_(tape), mutable_(&params), const_(&params), trainable_(trainable) {}
  WeightSource(ad::Tape& tape, const ParameterSet& params) : tape_(tape), const_(&params) {}

  ad::Var operator()(const std::string& name) {
    if (trainable_) return tape_.parameter(mutable_->at(name));
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    ad::Var v = tape_.constant(const_->at(name).value);
    cache_.emplace(name, v);
    return v;
  }
  bool contains(const std::string& name) const { return const_->contains(name); }
  const Matrix& value(const std::string& name) const { return const_->at(name).value; }
  ad::Tape& tape() { return tape_; }

 private:
  ad::Tape& tape_;
  ParameterSet* mutable_ = nullptr;
  const ParameterSet* const_ = nullptr;
  bool trainable_ = false;
  std::unordered_map<std::string, ad::Var> cache_;
};

struct EmbeddingTables {
  std::array<ad::Var, 4> tables;
};

/// Realizes the four tables. With `eps` supplied (one standard-normal matrix
/// per table) the tables are stochastic draws mu + softplus(rho) * eps;
/// otherwise the stored (mean) values are used.
inline EmbeddingTables embedding_tables(WeightSource& w, const std::array<Matrix, 4>* eps) {
  EmbeddingTables out;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& name = embedding_table_names()[i];
    ad::Var mu = w(name);
    out.tables[i] = eps ? ad::reparameterize(mu, w(name + ".rho"), (*eps)[i]) : mu;
  }
  return out;
}

/// Standard-normal noise for one realization of every embedding table.
inline std::array<Matrix, 4> draw_embedding_noise(const ParameterSet& params, Rng& rng) {
  std::array<Matrix, 4> eps;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& v = params.at(embedding_table_names()[i]).value;
    eps[i] = rng.normal_matrix(v.rows(), v.cols());
  }
  return eps;
}

/// code + age + segment + position embeddings for every batch position.
inline ad::Var embed_batch(const EmbeddingTables& t, const Batch& b) {
  ad::Var x = ad::gather_rows(t.tables[0], b.codes);
  x = ad::add(x, ad::gather_rows(t.tables[1], b.ages));
  x = ad::add(x, ad::gather_rows(t.tables[2], b.segments));
  return ad::add(x, ad::gather_rows(t.tables[3], b.positions));
}

inline ad::Var dropout(ad::Var x, double p, Rng* rng) {
  if (!rng || p <= 0.0) return x;
  Matrix mask(x.rows(), x.cols());
  const double keep = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng->uniform() < p ? 0.0 : keep;
  return ad::apply_mask(x, std::move(mask));
}

/// The attention stack. Each layer:
///   h1 = LN(x + Attn(x) Wo + bo)
///   h2 = LN(h1 + GELU(h1 W1 + b1) W2 + b2)
/// PAD positions receive no attention weight. Dropout applies only when
/// `dropout_rng` is given.
inline ad::Var encode(ad::Var x, const Batch& b, const EncoderConfig& cfg, WeightSource& w,
                      Rng* dropout_rng = nullptr) {
  if (x.cols() != cfg.hidden_size || x.rows() != static_cast<Eigen::Index>(b.size) * b.seq_len)
    throw DimensionError("encode: latent is " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) +
                         ", expected " + std::to_string(b.size * b.seq_len) + "x" + std::to_string(cfg.hidden_size));
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto p = layer_prefix(l);
    ad::Var q = ad::affine(x, w(p + "q.w"), w(p + "q.b"));
    ad::Var k = ad::affine(x, w(p + "k.w"), w(p + "k.b"));
    ad::Var v = ad::affine(x, w(p + "v.w"), w(p + "v.b"));
    ad::Var att = ad::masked_attention(q, k, v, b.valid, b.size, b.seq_len, cfg.n_heads);
    ad::Var o = dropout(ad::affine(att, w(p + "o.w"), w(p + "o.b")), cfg.dropout, dropout_rng);
    ad::Var h1 = ad::layer_norm(ad::add(x, o), w(p + "ln1.g"), w(p + "ln1.b"));
    ad::Var f = ad::gelu(ad::affine(h1, w(p + "ff1.w"), w(p + "ff1.b")));
    f = dropout(ad::affine(f, w(p + "ff2.w"), w(p + "ff2.b")), cfg.dropout, dropout_rng);
    x = ad::layer_norm(ad::add(h1, f), w(p + "ln2.g"), w(p + "ln2.b"));
  }
  return x;
}

/// tanh(h_CLS Wp + bp) for every sequence in the batch.
inline ad::Var pool_first(ad::Var h, const Batch& b, WeightSource& w) {
  return ad::tanh(ad::affine(ad::select_rows(h, b.first_rows()), w("pool.w"), w("pool.b")));
}

// ---------------------------------------------------------------------------
// Value-level entry points for single sequences.

struct LatentSequence {
  Matrix values;           // seq_len x hidden
  std::vector<char> mask;  // 1 for real tokens
};

/// Four embedding tables, each deterministic or mean-field.
struct EmbeddingBlock {
  std::array<MeanFieldTensor, 4> tables;
  bool stochastic = false;

  static EmbeddingBlock from_parameters(const ParameterSet& params) {
    EmbeddingBlock e;
    e.stochastic = params.contains(embedding_table_names()[0] + ".rho");
    for (std::size_t i = 0; i < 4; ++i) {
      const auto& name = embedding_table_names()[i];
      e.tables[i].mu = params.at(name).value;
      if (e.stochastic) e.tables[i].rho = params.at(name + ".rho").value;
    }
    return e;
  }
};

/// One weight realization per call (shared by all positions) when the block
/// is stochastic and an rng is given; mean weights otherwise.
inline LatentSequence embed_sequence(const PatientRecord& r, const EmbeddingBlock& block, Rng* rng) {
  const int h = static_cast<int>(block.tables[0].mu.cols());
  for (const auto& t : block.tables)
    if (t.mu.cols() != h) throw DimensionError("embedding tables differ in width");
  std::array<Matrix, 4> realized;
  for (std::size_t i = 0; i < 4; ++i) {
    const auto& t = block.tables[i];
    realized[i] = (block.stochastic && rng) ? sample_mean_field(t, rng->normal_matrix(t.mu.rows(), t.mu.cols())) : t.mu;
  }
  const std::array<const std::vector<int>*, 4> ids{&r.codes, &r.ages, &r.segments, &r.positions};
  LatentSequence out{Matrix::Zero(static_cast<Eigen::Index>(r.length()), h),
                     std::vector<char>(r.length(), 1)};
  for (std::size_t i = 0; i < 4; ++i) {
    if (ids[i]->size() != r.length()) throw DimensionError("record fields differ in length");
    for (std::size_t p = 0; p < r.length(); ++p) {
      const int id = (*ids[i])[p];
      if (id < 0 || id >= realized[i].rows())
        throw LookupError(p, embedding_table_names()[i] + " id " + std::to_string(id) + " out of range");
      out.values.row(static_cast<Eigen::Index>(p)) += realized[i].row(id);
    }
  }
  return out;
}

inline LatentSequence encode(const LatentSequence& latent, const EncoderConfig& cfg, const ParameterSet& params) {
  ad::Tape tape;
  WeightSource w(tape, params);
  Batch b;
  b.size = 1;
  b.seq_len = static_cast<int>(latent.values.rows());
  b.valid = latent.mask;
  if (latent.mask.size() != static_cast<std::size_t>(b.seq_len)) throw DimensionError("mask length");
  ad::Var out = encode(tape.constant(latent.values), b, cfg, w);
  return {out.value(), latent.mask};
}

inline Vector pool_first(const LatentSequence& latent, const ParameterSet& params) {
  if (latent.values.rows() == 0) throw DimensionError("pool_first: empty sequence");
  const Matrix& w = params.at("pool.w").value;
  const Matrix& b = params.at("pool.b").value;
  if (w.rows() != latent.values.cols()) throw DimensionError("pool_first: width");
  return (latent.values.row(0) * w + b).array().tanh().transpose();
}

// ---------------------------------------------------------------------------
// Masked-code pretraining

/// Mean softmax cross-entropy of logits rows against target classes.
inline double masked_cross_entropy(const Matrix& logits, const std::vector<int>& targets) {
  if (logits.rows() != static_cast<Eigen::Index>(targets.size()))
    throw DimensionError("masked_cross_entropy: one target per row");
  if (targets.empty()) return 0.0;
  double loss = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    loss += mx + std::log((logits.row(i).array() - mx).exp().sum()) - logits(i, targets[static_cast<std::size_t>(i)]);
  }
  return loss / static_cast<double>(targets.size());
}

struct MaskedBatch {
  Batch batch;                       // codes with [MASK] substituted
  std::vector<Eigen::Index> rows;    // flattened rows that were masked
  std::vector<int> targets;          // original code index (id - first code id)
};

/// Replaces a `fraction` of code positions with [MASK]. If the draw selects
/// nothing while maskable positions exist, one is chosen uniformly.
inline MaskedBatch mask_codes(const Batch& b, double fraction, Rng& rng) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("pretrain.mask_fraction", "must lie in (0, 1)");
  MaskedBatch m{b, {}, {}};
  std::vector<Eigen::Index> maskable;
  for (std::size_t k = 0; k < b.codes.size(); ++k) {
    if (!b.valid[k] || b.codes[k] < Vocabulary::kNumSpecial) continue;
    maskable.push_back(static_cast<Eigen::Index>(k));
    if (rng.uniform() < fraction) m.rows.push_back(static_cast<Eigen::Index>(k));
  }
  if (m.rows.empty() && !maskable.empty())
    m.rows.push_back(maskable[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(maskable.size()) - 1))]);
  for (auto k : m.rows) {
    m.targets.push_back(b.codes[static_cast<std::size_t>(k)] - Vocabulary::kNumSpecial);
    m.batch.codes[static_cast<std::size_t>(k)] = Vocabulary::kMask;
  }
  return m;
}

struct MlmResult {
  ad::Var loss;
  bool no_maskable = false;  // loss defined as 0
  std::size_t n_masked = 0;
};

/// Mean cross-entropy over masked positions, predicting the original code
/// through the code embedding table (tied output weights) plus a bias.
inline MlmResult mlm_loss(const Batch& b, double mask_fraction, const EncoderConfig& cfg, WeightSource& w, Rng& rng,
                          Rng* dropout_rng = nullptr) {
  const auto masked = mask_codes(b, mask_fraction, rng);
  if (masked.rows.empty()) return {w.tape().constant(Matrix::Zero(1, 1)), true, 0};
  EmbeddingTables tables = embedding_tables(w, nullptr);
  ad::Var x = dropout(embed_batch(tables, masked.batch), cfg.dropout, dropout_rng);
  ad::Var h = encode(x, masked.batch, cfg, w, dropout_rng);
  const int vocab = static_cast<int>(w.value("emb.code").rows());
  std::vector<int> code_ids;
  for (int id = Vocabulary::kNumSpecial; id < vocab; ++id) code_ids.push_back(id);
  ad::Var out_emb = ad::gather_rows(tables.tables[0], code_ids);
  ad::Var logits = ad::add_row(ad::matmul_bt(ad::select_rows(h, masked.rows), out_emb), w("mlm.bias"));
  return {ad::softmax_cross_entropy(logits, masked.targets), false, masked.rows.size()};
}

inline void add_mlm_parameters(ParameterSet& params, int vocab_size) {
  params.add("mlm.bias", Matrix::Zero(1, vocab_size - Vocabulary::kNumSpecial));
}

}  // namespace dbgp
