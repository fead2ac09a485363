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

// Model variants built from the encoder, mean-field Bayesian blocks and GP
// heads; the joint variational objective, training loop, Monte Carlo
// prediction and a finite-difference gradient check.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dbgp/autodiff.hpp"
#include "dbgp/bayes.hpp"
#include "dbgp/checkpoint.hpp"
#include "dbgp/encoder.hpp"
#include "dbgp/error.hpp"
#include "dbgp/eval.hpp"
#include "dbgp/gp/grid.hpp"
#include "dbgp/gp/svgp.hpp"
#include "dbgp/params.hpp"
#include "dbgp/rng.hpp"
#include "dbgp/synthdata.hpp"

namespace dbgp {

enum class ModelVariant { kDbgp, kBe, kBo, kBeBo, kWhitenedGp, kKissGp, kDeterministic };
enum class HeadKind { kDense, kWhitenedGp, kKissGp };

struct VariantFlags {
  bool embedding_stochastic = false;
  bool output_stochastic = false;
  HeadKind head = HeadKind::kDense;

  bool gp_head() const { return head != HeadKind::kDense; }
};

inline VariantFlags variant_flags(ModelVariant v) {
  switch (v) {
    case ModelVariant::kDbgp: return {true, false, HeadKind::kKissGp};
    case ModelVariant::kBe: return {true, false, HeadKind::kDense};
    case ModelVariant::kBo: return {false, true, HeadKind::kDense};
    case ModelVariant::kBeBo: return {true, true, HeadKind::kDense};
    case ModelVariant::kWhitenedGp: return {false, false, HeadKind::kWhitenedGp};
    case ModelVariant::kKissGp: return {false, false, HeadKind::kKissGp};
    case ModelVariant::kDeterministic: return {false, false, HeadKind::kDense};
  }
  throw ConfigError("model.variant", "unknown variant");
}

inline const char* to_string(ModelVariant v) {
  switch (v) {
    case ModelVariant::kDbgp: return "DBGP";
    case ModelVariant::kBe: return "BE";
    case ModelVariant::kBo: return "BO";
    case ModelVariant::kBeBo: return "BE_BO";
    case ModelVariant::kWhitenedGp: return "WHITENED_GP";
    case ModelVariant::kKissGp: return "KISS_GP";
    case ModelVariant::kDeterministic: return "DETERMINISTIC";
  }
  return "?";
}

/// The six probabilistic variants. DETERMINISTIC is a plain baseline.
inline const std::array<ModelVariant, 6>& probabilistic_variants() {
  static const std::array<ModelVariant, 6> v{ModelVariant::kDbgp,       ModelVariant::kBe,
                                             ModelVariant::kBo,         ModelVariant::kBeBo,
                                             ModelVariant::kWhitenedGp, ModelVariant::kKissGp};
  return v;
}

inline ModelVariant parse_variant(const std::string& s) {
  for (auto v : {ModelVariant::kDbgp, ModelVariant::kBe, ModelVariant::kBo, ModelVariant::kBeBo,
                 ModelVariant::kWhitenedGp, ModelVariant::kKissGp, ModelVariant::kDeterministic})
    if (s == to_string(v)) return v;
  throw ConfigError("model.variant", "unknown variant '" + s +
                                         "' (expected DBGP, BE, BO, BE_BO, WHITENED_GP, KISS_GP or DETERMINISTIC)");
}

struct GpHeadConfig {
  int dims = 2;                // GP input dimensions after projection
  int grid_size = 32;          // per dimension, KISS head
  int inducing_points = 64;    // whitened head
  double init_lengthscale = 0.5;
  double init_outputscale = 1.0;
  double init_mean_std = 0.1;  // whitened mean drawn from N(0, init_mean_std^2 I)

  void validate() const {
    if (dims < 1 || dims > 3) throw ConfigError("model.gp.dims", "must lie in [1, 3]");
    if (grid_size < 4) throw ConfigError("model.gp.grid_size", "must be >= 4");
    if (inducing_points < 1) throw ConfigError("model.gp.inducing_points", "must be >= 1");
    if (!(init_lengthscale > 0.0)) throw ConfigError("model.gp.init_lengthscale", "must be positive");
    if (!(init_outputscale > 0.0)) throw ConfigError("model.gp.init_outputscale", "must be positive");
    if (!(init_mean_std >= 0.0)) throw ConfigError("model.gp.init_mean_std", "must be >= 0");
  }
  Json to_json() const {
    return Json{{"dims", dims},
                {"grid_size", grid_size},
                {"inducing_points", inducing_points},
                {"init_lengthscale", init_lengthscale},
                {"init_outputscale", init_outputscale},
                {"init_mean_std", init_mean_std}};
  }
  static GpHeadConfig from_json(const Json& j) {
    GpHeadConfig c;
    c.dims = j.at("dims").get<int>();
    c.grid_size = j.at("grid_size").get<int>();
    c.inducing_points = j.at("inducing_points").get<int>();
    c.init_lengthscale = j.at("init_lengthscale").get<double>();
    c.init_outputscale = j.at("init_outputscale").get<double>();
    c.init_mean_std = j.at("init_mean_std").get<double>();
    return c;
  }
  bool operator==(const GpHeadConfig&) const = default;
};

struct ModelConfig {
  ModelVariant variant = ModelVariant::kDbgp;
  EncoderConfig encoder;
  int dense_pool_size = 150;
  int gp_pool_size = 24;
  GpHeadConfig gp;
  double embedding_prior_std = 0.374;
  double output_prior_std = 1.0;

  VariantFlags flags() const { return variant_flags(variant); }

  /// Encoder settings with the pooling width of the chosen head.
  EncoderConfig resolved_encoder() const {
    EncoderConfig e = encoder;
    e.pool_size = flags().gp_head() ? gp_pool_size : dense_pool_size;
    return e;
  }

  void validate() const {
    resolved_encoder().validate();
    if (dense_pool_size < 1) throw ConfigError("model.dense_pool_size", "must be >= 1");
    if (gp_pool_size < 1) throw ConfigError("model.gp_pool_size", "must be >= 1");
    gp.validate();
    if (!(embedding_prior_std > 0.0)) throw ConfigError("model.embedding_prior_std", "must be positive");
    if (!(output_prior_std > 0.0)) throw ConfigError("model.output_prior_std", "must be positive");
  }

  Json to_json() const {
    return Json{{"variant", to_string(variant)},
                {"encoder", encoder.to_json()},
                {"dense_pool_size", dense_pool_size},
                {"gp_pool_size", gp_pool_size},
                {"gp", gp.to_json()},
                {"embedding_prior_std", embedding_prior_std},
                {"output_prior_std", output_prior_std}};
  }
  static ModelConfig from_json(const Json& j) {
    ModelConfig c;
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.encoder = EncoderConfig::from_json(j.at("encoder"));
    c.dense_pool_size = j.at("dense_pool_size").get<int>();
    c.gp_pool_size = j.at("gp_pool_size").get<int>();
    c.gp = GpHeadConfig::from_json(j.at("gp"));
    c.embedding_prior_std = j.at("embedding_prior_std").get<double>();
    c.output_prior_std = j.at("output_prior_std").get<double>();
    return c;
  }
  bool operator==(const ModelConfig&) const = default;
};

// rng stream tags
inline constexpr std::uint64_t kStreamInit = 0x696e6974ULL;
inline constexpr std::uint64_t kStreamHead = 0x68656164ULL;
inline constexpr std::uint64_t kStreamWeights = 0x77656967687473ULL;
inline constexpr std::uint64_t kStreamLatent = 0x6c6174656e74ULL;
inline constexpr std::uint64_t kStreamShuffle = 0x73687566666c65ULL;
inline constexpr std::uint64_t kStreamDropout = 0x64726f706f7574ULL;
inline constexpr std::uint64_t kStreamMask = 0x6d61736bULL;

/// Fixed KISS grid over the range of tanh-squashed GP inputs, (-1, 1) per
/// dimension, with one spacing of margin on each side.
inline gp::InducingGrid squashed_input_grid(int dims, int count) {
  if (count < 4) throw ConfigError("model.gp.grid_size", "must be >= 4");
  const double h = 2.0 / (count - 3);
  return gp::InducingGrid(std::vector<double>(static_cast<std::size_t>(dims), -1.0 - h),
                          std::vector<double>(static_cast<std::size_t>(dims), h),
                          std::vector<int>(static_cast<std::size_t>(dims), count));
}

struct ModelState {
  ModelConfig config;
  Vocabulary vocabulary;
  ParameterSet params;
  std::optional<gp::InducingGrid> grid;  // KISS head only

  VariantFlags flags() const { return config.flags(); }

  gp::Inducing inducing() const {
    if (flags().head == HeadKind::kKissGp) return *grid;
    return gp::InducingPoints{params.at("gp.z").value};
  }
};

struct BayesBlock {
  std::string name;
  double prior_std = 1.0;
};

/// Mean-field blocks of a variant: name of the mean block (the pre-softplus
/// scale lives under name + ".rho") and its prior.
inline std::vector<BayesBlock> bayes_blocks(const ModelConfig& cfg) {
  std::vector<BayesBlock> out;
  const auto f = cfg.flags();
  if (f.embedding_stochastic)
    for (const auto& n : embedding_table_names()) out.push_back({n, cfg.embedding_prior_std});
  if (f.output_stochastic) {
    out.push_back({"head.w", cfg.output_prior_std});
    out.push_back({"head.b", cfg.output_prior_std});
  }
  return out;
}

inline Matrix lattice_points(int count, int dims, Rng& rng) {
  const int k = static_cast<int>(std::lround(std::pow(count, 1.0 / dims)));
  long total = 1;
  for (int d = 0; d < dims; ++d) total *= k;
  Matrix z(count, dims);
  if (k >= 2 && total == count) {
    for (int i = 0; i < count; ++i) {
      int rest = i;
      for (int d = dims - 1; d >= 0; --d) {
        z(i, d) = -1.0 + 2.0 * (rest % k) / (k - 1);
        rest /= k;
      }
    }
  } else {
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = 2.0 * rng.uniform() - 1.0;
  }
  return z;
}

/// Fresh model. Embedding, encoder and pooling blocks are taken from
/// `pretrained` where present (pooling only if its width matches); the
/// classifier head is always drawn at random.
inline ModelState init_model(const ModelConfig& cfg, const Vocabulary& vocab, std::uint64_t seed,
                             const ParameterSet* pretrained = nullptr) {
  cfg.validate();
  ModelState st{cfg, vocab, {}, std::nullopt};
  const EncoderConfig enc = cfg.resolved_encoder();
  {
    Rng rng(derive_seed(seed, kStreamInit));
    init_encoder_parameters(st.params, enc, vocab.size(), rng);
  }
  if (pretrained) {
    copy_matching(*pretrained, st.params, "emb.");
    copy_matching(*pretrained, st.params, "enc.");
    if (pretrained->contains("pool.w") &&
        pretrained->at("pool.w").value.cols() == st.params.at("pool.w").value.cols()) {
      copy_matching(*pretrained, st.params, "pool.");
    }
  }
  const auto f = cfg.flags();
  if (f.embedding_stochastic)
    for (const auto& n : embedding_table_names()) {
      const auto& mu = st.params.at(n).value;
      st.params.add(n + ".rho", Matrix::Constant(mu.rows(), mu.cols(), inverse_softplus(cfg.embedding_prior_std / 10.0)));
    }

  Rng rng(derive_seed(seed, kStreamHead));
  const int pool = enc.pool_size;
  if (!f.gp_head()) {
    st.params.add("head.w", glorot_uniform(pool, 1, rng));
    st.params.add("head.b", Matrix::Zero(1, 1));
    if (f.output_stochastic) {
      const double r = inverse_softplus(cfg.output_prior_std / 10.0);
      st.params.add("head.w.rho", Matrix::Constant(pool, 1, r));
      st.params.add("head.b.rho", Matrix::Constant(1, 1, r));
    }
    return st;
  }
  const int d = cfg.gp.dims;
  st.params.add("gp.proj.w", glorot_uniform(pool, d, rng));
  st.params.add("gp.proj.b", Matrix::Zero(1, d));
  st.params.add("gp.log_lengthscale", Matrix::Constant(1, d, std::log(cfg.gp.init_lengthscale)));
  st.params.add("gp.log_outputscale", Matrix::Constant(1, 1, std::log(cfg.gp.init_outputscale)));
  Eigen::Index m = 0;
  if (f.head == HeadKind::kKissGp) {
    st.grid = squashed_input_grid(d, cfg.gp.grid_size);
    m = st.grid->size();
  } else {
    st.params.add("gp.z", lattice_points(cfg.gp.inducing_points, d, rng));
    m = cfg.gp.inducing_points;
  }
  // A random initial latent function gives the encoder a gradient from the
  // first step; with m = 0 and L = I the head is constant in its inputs.
  st.params.add("gp.m", cfg.gp.init_mean_std * rng.normal_matrix(m, 1));
  st.params.add("gp.L_raw", Matrix::Zero(m, m));  // L = I
  return st;
}

// ---------------------------------------------------------------------------
// Forward pass

/// Standard-normal noise for one realization of every stochastic block.
struct WeightNoise {
  std::optional<std::array<Matrix, 4>> embedding;
  std::optional<std::array<Matrix, 2>> head;  // head.w, head.b
};

inline WeightNoise draw_weight_noise(const ModelState& st, Rng& rng) {
  WeightNoise n;
  const auto f = st.flags();
  if (f.embedding_stochastic) n.embedding = draw_embedding_noise(st.params, rng);
  if (f.output_stochastic) {
    const auto& w = st.params.at("head.w").value;
    Matrix ew = rng.normal_matrix(w.rows(), w.cols());
    Matrix eb = rng.normal_matrix(1, 1);
    n.head = std::array<Matrix, 2>{std::move(ew), std::move(eb)};
  }
  return n;
}

/// Noise for draw `draw` of a prediction run; every batch sees the same weights.
inline WeightNoise prediction_noise(const ModelState& st, std::uint64_t seed, int draw) {
  Rng rng(derive_seed(seed, kStreamWeights, static_cast<std::uint64_t>(draw)));
  return draw_weight_noise(st, rng);
}

/// Pooled encoder output (B x pool). Without noise, stochastic tables are
/// replaced by their means.
inline ad::Var pooled_output(const ModelState& st, WeightSource& w, const Batch& b, const WeightNoise* noise,
                             Rng* dropout_rng) {
  const EncoderConfig enc = st.config.resolved_encoder();
  const bool stochastic = st.flags().embedding_stochastic && noise && noise->embedding;
  EmbeddingTables tables = embedding_tables(w, stochastic ? &*noise->embedding : nullptr);
  ad::Var x = dropout(embed_batch(tables, b), enc.dropout, dropout_rng);
  ad::Var h = encode(x, b, enc, w, dropout_rng);
  return pool_first(h, b, w);
}

/// Dense head logits (B x 1).
inline ad::Var dense_logits(const ModelState& st, WeightSource& w, ad::Var pooled, const WeightNoise* noise) {
  ad::Var wt = w("head.w"), bias = w("head.b");
  if (st.flags().output_stochastic && noise && noise->head) {
    wt = ad::reparameterize(wt, w("head.w.rho"), (*noise->head)[0]);
    bias = ad::reparameterize(bias, w("head.b.rho"), (*noise->head)[1]);
  }
  return ad::affine(pooled, wt, bias);
}

/// GP inputs tanh(pooled Wp + bp), B x d.
inline ad::Var gp_inputs(WeightSource& w, ad::Var pooled) {
  return ad::tanh(ad::affine(pooled, w("gp.proj.w"), w("gp.proj.b")));
}

inline gp::RbfKernelParams gp_kernel_params(const ParameterSet& p) {
  gp::RbfKernelParams k;
  k.log_lengthscale = p.at("gp.log_lengthscale").value.row(0).transpose();
  k.log_outputscale = p.at("gp.log_outputscale").value(0, 0);
  return k;
}

inline gp::WhitenedVariationalState gp_state(const ParameterSet& p) {
  return {p.at("gp.m").value.col(0), gp::lower_from_raw(p.at("gp.L_raw").value)};
}

/// Classification SVGP objective of the GP head as a tape node:
/// sum_i E_q[ln p(y_i | f_i)] - kl_scale * KL(q(v) || p(v)).
inline ad::Var gp_head_objective(const ModelState& st, WeightSource& w, ad::Var x, const std::vector<int>& labels,
                                 double kl_scale) {
  ad::Tape& t = w.tape();
  const bool whitened = st.flags().head == HeadKind::kWhitenedGp;
  ad::Var m = w("gp.m"), lraw = w("gp.L_raw"), lls = w("gp.log_lengthscale"), los = w("gp.log_outputscale");
  ad::Var z = whitened ? w("gp.z") : ad::Var{};
  gp::WhitenedVariationalState q{m.value().col(0), gp::lower_from_raw(lraw.value())};
  gp::RbfKernelParams k;
  k.log_lengthscale = lls.value().row(0).transpose();
  k.log_outputscale = los.value()(0, 0);
  gp::Inducing inducing = whitened ? gp::Inducing(gp::InducingPoints{z.value()}) : gp::Inducing(*st.grid);
  Vector targets(static_cast<Eigen::Index>(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) targets(static_cast<Eigen::Index>(i)) = labels[i];
  const bool ng = t.needs_grad({x, m, lraw, lls, los}) || (whitened && t.needs_grad(z.id));
  auto obj = gp::svgp_objective(inducing, x.value(), targets, q, k, gp::Likelihood::kBernoulli, kl_scale, ng);
  if (!ng) return t.constant(Matrix::Constant(1, 1, obj.value));
  Matrix g_raw = gp::raw_gradient(q.L, obj.g_L);
  return t.push(Matrix::Constant(1, 1, obj.value), true,
                [x, m, lraw, lls, los, z, whitened, obj = std::move(obj), g_raw = std::move(g_raw)](
                    ad::Tape& t, const Matrix& g) {
                  const double s = g(0, 0);
                  t.accumulate(x.id, s * obj.g_x);
                  t.accumulate(m.id, s * Matrix(obj.g_m));
                  t.accumulate(lraw.id, s * g_raw);
                  t.accumulate(lls.id, s * Matrix(obj.g_kernel.log_lengthscale.transpose()));
                  t.accumulate(los.id, Matrix::Constant(1, 1, s * obj.g_kernel.log_outputscale));
                  if (whitened) t.accumulate(z.id, s * obj.g_z);
                });
}

/// Per-patient output of one forward pass: a logit for dense heads, latent
/// moments for GP heads.
struct CompositeOutput {
  bool gp = false;
  Vector logit;
  gp::LatentMoments latent;
};

inline CompositeOutput head_from_pooled(const ModelState& st, WeightSource& w, ad::Var pooled,
                                        const WeightNoise* noise) {
  CompositeOutput out;
  if (!st.flags().gp_head()) {
    out.logit = dense_logits(st, w, pooled, noise).value().col(0);
    return out;
  }
  out.gp = true;
  const Matrix x = gp_inputs(w, pooled).value();
  out.latent = gp::latent_posterior_predict(gp_state(st.params), st.inducing(), x, gp_kernel_params(st.params));
  return out;
}

/// embed (stochastic iff noise is given for a stochastic-embedding variant)
/// -> encode -> pool -> head. No dropout.
inline CompositeOutput composite_forward(const ModelState& st, const Batch& b, const WeightNoise* noise) {
  ad::Tape tape;
  WeightSource w(tape, st.params);
  ad::Var pooled = pooled_output(st, w, b, noise, nullptr);
  return head_from_pooled(st, w, pooled, noise);
}

// ---------------------------------------------------------------------------
// Objective

struct ElboOptions {
  std::size_t n_train = 0;     // training-set size for the minibatch KL scale
  double kl_weight = 1.0;      // annealing factor on every KL term
  const WeightNoise* noise = nullptr;
  Rng* dropout_rng = nullptr;
};

struct Elbo {
  ad::Var objective;
  double head = 0.0;        // expected log-likelihood (GP KL already subtracted for GP heads)
  double kl_weights = 0.0;  // sum of weight-block KLs, unscaled
};

/// L_head - (B / N) * sum_blocks KL(q(w) || p(w)). For GP heads L_head is the
/// SVGP objective with its own KL scaled by B / N; for dense heads it is the
/// Bernoulli log-likelihood.
inline Elbo dbgp_elbo(const ModelState& st, WeightSource& w, const Batch& b, const ElboOptions& opt) {
  if (opt.n_train == 0) throw ConfigError("train.n_train", "training-set size must be positive");
  const double scale = opt.kl_weight * static_cast<double>(b.size) / static_cast<double>(opt.n_train);
  ad::Var pooled = pooled_output(st, w, b, opt.noise, opt.dropout_rng);
  ad::Var head = st.flags().gp_head() ? gp_head_objective(st, w, gp_inputs(w, pooled), b.labels, scale)
                                      : ad::bernoulli_log_likelihood(dense_logits(st, w, pooled, opt.noise), b.labels);
  Elbo out;
  out.head = head.scalar();
  ad::Var obj = head;
  for (const auto& blk : bayes_blocks(st.config)) {
    ad::Var kl = ad::kl_mean_field(w(blk.name), w(blk.name + ".rho"), blk.prior_std);
    out.kl_weights += kl.scalar();
    obj = ad::sub(obj, ad::scale(kl, scale));
  }
  out.objective = obj;
  return out;
}

/// Objective value with a fixed weight realization and no dropout.
inline double elbo_value(const ModelState& st, const Batch& b, std::size_t n_train, const WeightNoise* noise) {
  ad::Tape tape;
  WeightSource w(tape, st.params);
  ElboOptions opt;
  opt.n_train = n_train;
  opt.noise = noise;
  return dbgp_elbo(st, w, b, opt).objective.scalar();
}

/// Objective and its gradient (added into params' grad fields, which are
/// zeroed first).
inline double elbo_gradient(ModelState& st, const Batch& b, const ElboOptions& opt) {
  st.params.zero_grad();
  ad::Tape tape;
  WeightSource w(tape, st.params, true);
  Elbo e = dbgp_elbo(st, w, b, opt);
  tape.backward(e.objective);
  return e.objective.scalar();
}

// ---------------------------------------------------------------------------
// Prediction

/// Patients ordered by id, so batch composition does not depend on input order.
inline std::vector<std::size_t> order_by_id(const std::vector<const PatientRecord*>& recs) {
  std::vector<std::size_t> order(recs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](auto a, auto b) { return recs[a]->patient_id < recs[b]->patient_id; });
  return order;
}

/// Probability at the variational means: sigmoid of the mean-weight logit for
/// dense heads, E[sigmoid(f)] under the latent posterior for GP heads.
inline Vector predict_mean_probability(const ModelState& st, const std::vector<const PatientRecord*>& recs,
                                       int batch_size = 256) {
  Vector out(static_cast<Eigen::Index>(recs.size()));
  const auto order = order_by_id(recs);
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<const PatientRecord*> chunk;
    for (auto k = start; k < end; ++k) chunk.push_back(recs[order[k]]);
    const auto o = composite_forward(st, make_batch(chunk), nullptr);
    for (auto k = start; k < end; ++k) {
      const auto i = static_cast<Eigen::Index>(k - start);
      out(static_cast<Eigen::Index>(order[k])) =
          o.gp ? gp::expected_sigmoid(o.latent.mean(i), o.latent.var(i)) : sigmoid(o.logit(i));
    }
  }
  return out;
}

struct PredictOptions {
  int batch_size = 256;
  bool sample_latent = true;  // draw f ~ q(f) for GP heads; off uses the latent mean
};

/// S draws per patient. Draw s samples every stochastic weight block once
/// (keyed by seed and s), runs the forward pass and, for GP heads, samples the
/// latent from a substream keyed by (seed, patient id, s). Rows follow the
/// input order; any prefix of the draws equals a run with fewer draws.
inline PredictiveSamples mc_predict(const ModelState& st, const std::vector<const PatientRecord*>& recs, int samples,
                                    std::uint64_t seed, const PredictOptions& opt = {}) {
  if (samples < 1) throw ConfigError("predict.samples", "must be >= 1");
  if (opt.batch_size < 1) throw ConfigError("predict.batch_size", "must be >= 1");
  PredictiveSamples out;
  out.probs.resize(static_cast<Eigen::Index>(recs.size()), samples);
  for (const auto* r : recs) {
    out.patient_ids.push_back(r->patient_id);
    out.labels.push_back(r->label);
  }
  const auto f = st.flags();
  std::vector<WeightNoise> noise;
  for (int s = 0; s < samples; ++s) noise.push_back(prediction_noise(st, seed, s));
  const auto order = order_by_id(recs);
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opt.batch_size)) {
    const auto end = std::min(order.size(), start + static_cast<std::size_t>(opt.batch_size));
    std::vector<const PatientRecord*> chunk;
    for (auto k = start; k < end; ++k) chunk.push_back(recs[order[k]]);
    const Batch b = make_batch(chunk);
    // A deterministic encoder runs once per batch.
    std::optional<Matrix> fixed_pooled;
    if (!f.embedding_stochastic) {
      ad::Tape tape;
      WeightSource w(tape, st.params);
      fixed_pooled = pooled_output(st, w, b, nullptr, nullptr).value();
    }
    std::optional<CompositeOutput> fixed_head;
    for (int s = 0; s < samples; ++s) {
      const WeightNoise& n = noise[static_cast<std::size_t>(s)];
      CompositeOutput o;
      ad::Tape tape;
      WeightSource w(tape, st.params);
      if (fixed_pooled && !f.output_stochastic) {
        if (!fixed_head) fixed_head = head_from_pooled(st, w, tape.constant(*fixed_pooled), nullptr);
        o = *fixed_head;
      } else {
        ad::Var pooled = fixed_pooled ? tape.constant(*fixed_pooled) : pooled_output(st, w, b, &n, nullptr);
        o = head_from_pooled(st, w, pooled, &n);
      }
      for (auto k = start; k < end; ++k) {
        const auto i = static_cast<Eigen::Index>(k - start);
        const auto row = static_cast<Eigen::Index>(order[k]);
        double p;
        if (o.gp) {
          double fval = o.latent.mean(i);
          if (opt.sample_latent) {
            Rng rng(derive_seed(seed, kStreamLatent, hash_string(recs[order[k]]->patient_id),
                                static_cast<std::uint64_t>(s)));
            fval += std::sqrt(std::max(o.latent.var(i), 0.0)) * rng.normal();
          }
          p = sigmoid(fval);
        } else {
          p = sigmoid(o.logit(i));
        }
        out.probs(row, s) = p;
      }
    }
  }
  if (!out.probs.allFinite()) throw NumericError("non-finite predictive probability");
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int epochs = 20;
  int batch_size = 256;
  double learning_rate = 1e-3;
  int mc_train_samples = 1;
  std::uint64_t seed = 1;
  int patience = 5;
  // KL weight: kl_weight_start for the first kl_hold_epochs epochs, then
  // rising linearly to 1 over kl_warmup_epochs.
  double kl_weight_start = 1.0;
  int kl_hold_epochs = 0;
  int kl_warmup_epochs = 0;

  void validate() const {
    if (epochs < 0) throw ConfigError("train.epochs", "must be >= 0");
    if (batch_size < 1) throw ConfigError("train.batch_size", "must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
      throw ConfigError("train.learning_rate", "must be positive");
    if (mc_train_samples < 1) throw ConfigError("train.mc_train_samples", "must be >= 1");
    if (patience < 1) throw ConfigError("train.patience", "must be >= 1");
    if (!(kl_weight_start >= 0.0 && kl_weight_start <= 1.0))
      throw ConfigError("train.kl_weight_start", "must lie in [0, 1]");
    if (kl_hold_epochs < 0) throw ConfigError("train.kl_hold_epochs", "must be >= 0");
    if (kl_warmup_epochs < 0) throw ConfigError("train.kl_warmup_epochs", "must be >= 0");
  }

  /// KL weight used in (0-based) epoch e; 1 from the end of warmup on.
  double kl_weight(int e) const {
    if (e < kl_hold_epochs) return kl_weight_start;
    const int r = e - kl_hold_epochs;
    if (r >= kl_warmup_epochs) return 1.0;
    return kl_weight_start + (1.0 - kl_weight_start) * static_cast<double>(r) / kl_warmup_epochs;
  }

  Json to_json() const {
    return Json{{"epochs", epochs},
                {"batch_size", batch_size},
                {"learning_rate", learning_rate},
                {"mc_train_samples", mc_train_samples},
                {"seed", seed},
                {"patience", patience},
                {"kl_weight_start", kl_weight_start},
                {"kl_hold_epochs", kl_hold_epochs},
                {"kl_warmup_epochs", kl_warmup_epochs}};
  }
};

struct EpochMetrics {
  int epoch = 0;
  double objective = 0.0;  // mean minibatch objective
  double kl_weight = 1.0;
  std::optional<double> val_auroc;

  Json to_json() const {
    Json j{{"epoch", epoch}, {"objective", objective}, {"kl_weight", kl_weight}};
    j["val_auroc"] = val_auroc ? Json(*val_auroc) : Json(nullptr);
    return j;
  }
};

struct TrainResult {
  std::vector<EpochMetrics> log;
  int best_epoch = 0;  // 0 = initial state
  bool diverged = false;
  std::string message;
};

inline std::vector<const PatientRecord*> split_records(const std::vector<PatientRecord>& recs, Split s) {
  std::vector<const PatientRecord*> out;
  for (const auto& r : recs)
    if (r.split == s) out.push_back(&r);
  return out;
}

/// Validation AUROC at the variational means, or nullopt when undefined.
inline std::optional<double> validation_auroc(const ModelState& st, const std::vector<const PatientRecord*>& val) {
  if (val.empty()) return std::nullopt;
  const Vector p = predict_mean_probability(st, val);
  std::vector<int> labels;
  for (const auto* r : val) labels.push_back(r->label);
  try {
    return auroc(p, labels);
  } catch (const UndefinedMetricError&) {
    return std::nullopt;
  }
}

/// Stochastic gradient ascent on dbgp_elbo with Adam. Keeps the parameters of
/// the epoch with the best validation AUROC (training objective when AUROC is
/// undefined) among epochs at full KL weight, and stops after `patience` such
/// epochs without improvement. A
/// non-finite objective stops training and restores the best parameters so
/// far.
inline TrainResult train(ModelState& st, const std::vector<PatientRecord>& recs, const TrainConfig& cfg,
                         const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  cfg.validate();
  TrainResult res;
  const auto train_set = split_records(recs, Split::kTrain);
  const auto val_set = split_records(recs, Split::kValidation);
  if (cfg.epochs == 0) return res;
  if (train_set.empty()) throw DataError("no training patients");
  for (const auto& r : recs) validate_record(r, st.vocabulary);

  Adam adam({cfg.learning_rate});
  ParameterSet best = st.params;
  std::optional<double> best_val;
  double best_obj = -std::numeric_limits<double>::infinity();
  int since_best = 0;
  bool full_weight_seen = false;

  for (int e = 0; e < cfg.epochs; ++e) {
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    {
      Rng rng(derive_seed(cfg.seed, kStreamShuffle, static_cast<std::uint64_t>(e)));
      std::shuffle(order.begin(), order.end(), rng.engine());
    }
    const double klw = cfg.kl_weight(e);
    double total = 0.0;
    std::size_t n_batches = 0;
    try {
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
        const auto end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
        std::vector<const PatientRecord*> chunk;
        for (auto k = start; k < end; ++k) chunk.push_back(train_set[order[k]]);
        const Batch b = make_batch(chunk);
        st.params.zero_grad();
        ad::Tape tape;
        WeightSource w(tape, st.params, true);
        Rng drop(derive_seed(cfg.seed, kStreamDropout, static_cast<std::uint64_t>(e), n_batches));
        ad::Var obj;
        for (int k = 0; k < cfg.mc_train_samples; ++k) {
          Rng nr(derive_seed(cfg.seed, kStreamWeights, static_cast<std::uint64_t>(e), n_batches,
                             static_cast<std::uint64_t>(k)));
          const WeightNoise noise = draw_weight_noise(st, nr);
          ElboOptions opt{train_set.size(), klw, &noise, &drop};
          ad::Var o = ad::scale(dbgp_elbo(st, w, b, opt).objective, 1.0 / cfg.mc_train_samples);
          obj = k == 0 ? o : ad::add(obj, o);
        }
        if (!std::isfinite(obj.scalar())) throw NumericError("non-finite objective");
        tape.backward(obj);
        for (const auto& p : st.params)
          if (!p.grad.allFinite()) throw NumericError("non-finite gradient in block " + p.name);
        adam.step(st.params);
        total += obj.scalar();
        ++n_batches;
      }
    } catch (const NumericError& ex) {
      res.diverged = true;
      res.message = "epoch " + std::to_string(e + 1) + ": " + ex.what();
      st.params = best;
      return res;
    }
    EpochMetrics m;
    m.epoch = e + 1;
    m.objective = total / static_cast<double>(n_batches);
    m.kl_weight = klw;
    m.val_auroc = validation_auroc(st, val_set);
    res.log.push_back(m);
    if (on_epoch) on_epoch(m);

    // Warmup epochs and the first full-weight epoch always replace the kept
    // state, so a kept state is never one trained at partial KL weight
    // unless training ends inside the warmup.
    bool improved;
    if (klw < 1.0 || !full_weight_seen)
      improved = true;
    else if (m.val_auroc)
      improved = !best_val || *m.val_auroc > *best_val;
    else
      improved = !best_val && m.objective > best_obj;
    if (klw >= 1.0) full_weight_seen = true;
    if (improved) {
      best = st.params;
      best_val = m.val_auroc;
      best_obj = m.objective;
      res.best_epoch = m.epoch;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  st.params = best;
  for (auto& p : st.params) p.zero_grad();
  return res;
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_block;
  std::size_t coordinates = 0;
};

/// `f(params, with_grad)` returns the objective; with_grad also writes the
/// gradient into the grad fields (zeroed by f).
using ObjectiveFn = std::function<double(ParameterSet&, bool)>;

/// Central differences on up to `per_block` random coordinates of every named
/// block (all blocks when `blocks` is empty). Relative error is
/// |a - n| / max(|a|, |n|, floor).
inline GradCheckResult grad_check(ParameterSet& params, const ObjectiveFn& f, std::vector<std::string> blocks,
                                  double step = 1e-4, int per_block = 3, std::uint64_t seed = 7,
                                  double floor = 1e-6) {
  if (blocks.empty())
    for (const auto& p : params) blocks.push_back(p.name);
  f(params, true);
  std::vector<Matrix> analytic;
  for (const auto& n : blocks) analytic.push_back(params.at(n).grad);
  Rng rng(seed);
  GradCheckResult res;
  for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
    auto& p = params.at(blocks[bi]);
    const auto size = p.value.size();
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(size));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(per_block)));
    for (auto i : idx) {
      const double x0 = p.value.data()[i];
      p.value.data()[i] = x0 + step;
      const double fp = f(params, false);
      p.value.data()[i] = x0 - step;
      const double fm = f(params, false);
      p.value.data()[i] = x0;
      const double num = (fp - fm) / (2.0 * step);
      const double a = analytic[bi].data()[i];
      const double err = std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor});
      ++res.coordinates;
      if (err > res.max_rel_error || !std::isfinite(err)) {
        res.max_rel_error = std::isfinite(err) ? err : std::numeric_limits<double>::infinity();
        res.worst_block = p.name;
      }
    }
  }
  return res;
}

/// grad_check applied to dbgp_elbo with one fixed weight realization and
/// dropout off.
inline GradCheckResult finite_difference_grad_check(ModelState& st, const Batch& b,
                                                    const std::vector<std::string>& blocks = {}, double step = 1e-4,
                                                    std::size_t n_train = 1000, int per_block = 3,
                                                    std::uint64_t seed = 7, double floor = 1e-6) {
  Rng nr(derive_seed(seed, kStreamWeights));
  const WeightNoise noise = draw_weight_noise(st, nr);
  ObjectiveFn f = [&](ParameterSet&, bool with_grad) {
    ElboOptions opt;
    opt.n_train = n_train;
    opt.noise = &noise;
    if (with_grad) return elbo_gradient(st, b, opt);
    return elbo_value(st, b, n_train, &noise);
  };
  return grad_check(st.params, f, blocks, step, per_block, seed, floor);
}

// ---------------------------------------------------------------------------
// Pretraining

struct PretrainConfig {
  int epochs = 3;
  int batch_size = 64;
  double learning_rate = 1e-3;
  double mask_fraction = 0.15;
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs < 0) throw ConfigError("pretrain.epochs", "must be >= 0");
    if (batch_size < 1) throw ConfigError("pretrain.batch_size", "must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("pretrain.learning_rate", "must be positive");
    if (!(mask_fraction > 0.0 && mask_fraction <= 1.0))
      throw ConfigError("pretrain.mask_fraction", "must lie in (0, 1]");
  }
};

struct PretrainResult {
  ParameterSet params;
  std::vector<double> epoch_loss;   // mean over batches with masked tokens
  std::size_t skipped_batches = 0;  // batches with nothing to mask
};

/// Masked-code pretraining of embeddings and encoder on the training split.
inline PretrainResult pretrain_mlm(const std::vector<PatientRecord>& recs, const Vocabulary& vocab,
                                   const EncoderConfig& cfg, const PretrainConfig& pc) {
  cfg.validate();
  pc.validate();
  PretrainResult res;
  {
    Rng rng(derive_seed(pc.seed, kStreamInit));
    init_encoder_parameters(res.params, cfg, vocab.size(), rng);
  }
  add_mlm_parameters(res.params, vocab.size());
  const auto train_set = split_records(recs, Split::kTrain);
  if (train_set.empty() && pc.epochs > 0) throw DataError("no training patients");
  for (const auto* r : train_set) validate_record(*r, vocab);
  Adam adam({pc.learning_rate, 0.9, 0.999, 1e-8, false});
  for (int e = 0; e < pc.epochs; ++e) {
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    {
      Rng rng(derive_seed(pc.seed, kStreamShuffle, static_cast<std::uint64_t>(e)));
      std::shuffle(order.begin(), order.end(), rng.engine());
    }
    double total = 0.0;
    std::size_t used = 0, batch_index = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(pc.batch_size), ++batch_index) {
      const auto end = std::min(order.size(), start + static_cast<std::size_t>(pc.batch_size));
      std::vector<const PatientRecord*> chunk;
      for (auto k = start; k < end; ++k) chunk.push_back(train_set[order[k]]);
      const Batch b = make_batch(chunk);
      res.params.zero_grad();
      ad::Tape tape;
      WeightSource w(tape, res.params, true);
      Rng mask_rng(derive_seed(pc.seed, kStreamMask, static_cast<std::uint64_t>(e), batch_index));
      Rng drop(derive_seed(pc.seed, kStreamDropout, static_cast<std::uint64_t>(e), batch_index));
      auto r = mlm_loss(b, pc.mask_fraction, cfg, w, mask_rng, &drop);
      if (r.no_maskable) {
        ++res.skipped_batches;
        continue;
      }
      if (!std::isfinite(r.loss.scalar())) throw NumericError("non-finite pretraining loss");
      tape.backward(r.loss);
      adam.step(res.params);
      total += r.loss.scalar();
      ++used;
    }
    res.epoch_loss.push_back(used ? total / static_cast<double>(used) : 0.0);
  }
  for (auto& p : res.params) p.zero_grad();
  return res;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline Json grid_to_json(const gp::InducingGrid& g) {
  std::vector<double> lower, spacing;
  for (int d = 0; d < g.dims(); ++d) {
    lower.push_back(g.lower(d));
    spacing.push_back(g.spacing(d));
  }
  return Json{{"lower", lower}, {"spacing", spacing}, {"counts", g.counts()}};
}

inline gp::InducingGrid grid_from_json(const Json& j) {
  return gp::InducingGrid(j.at("lower").get<std::vector<double>>(), j.at("spacing").get<std::vector<double>>(),
                          j.at("counts").get<std::vector<int>>());
}

inline Json model_to_json(const ModelState& st) {
  Json j;
  j["format"] = "dbgp-model";
  j["variant"] = to_string(st.config.variant);
  j["config"] = st.config.to_json();
  j["vocabulary"] = st.vocabulary.code_tokens();
  Json priors = Json::object();
  for (const auto& b : bayes_blocks(st.config)) priors[b.name] = b.prior_std;
  j["priors"] = priors;
  j["grid"] = st.grid ? grid_to_json(*st.grid) : Json(nullptr);
  j["params"] = parameters_to_json(st.params);
  return j;
}

/// Rebuilds the block layout from the stored config and fills it from the
/// stored values; a block with a different shape is an error.
inline ModelState model_from_json(const Json& j) {
  try {
    if (j.at("format").get<std::string>() != "dbgp-model") throw DataError("not a model checkpoint");
    const auto cfg = ModelConfig::from_json(j.at("config"));
    const Vocabulary vocab(j.at("vocabulary").get<std::vector<std::string>>());
    ModelState st = init_model(cfg, vocab, 0);
    const std::size_t expected = st.params.size();
    parameters_from_json(j.at("params"), st.params);
    if (st.params.size() != expected) throw DataError("checkpoint has blocks not used by variant " + std::string(to_string(cfg.variant)));
    if (!j.at("grid").is_null()) st.grid = grid_from_json(j.at("grid"));
    return st;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed model checkpoint: ") + e.what());
  }
}

inline Json pretrained_to_json(const ParameterSet& params, const EncoderConfig& cfg, const Vocabulary& vocab) {
  Json j;
  j["format"] = "dbgp-pretrained";
  j["encoder"] = cfg.to_json();
  j["vocabulary"] = vocab.code_tokens();
  j["params"] = parameters_to_json(params);
  return j;
}

struct Pretrained {
  EncoderConfig encoder;
  Vocabulary vocabulary;
  ParameterSet params;
};

inline Pretrained pretrained_from_json(const Json& j) {
  try {
    if (j.at("format").get<std::string>() != "dbgp-pretrained") throw DataError("not a pretrained checkpoint");
    Pretrained p;
    p.encoder = EncoderConfig::from_json(j.at("encoder"));
    p.vocabulary = Vocabulary(j.at("vocabulary").get<std::vector<std::string>>());
    parameters_from_json(j.at("params"), p.params);
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed pretrained checkpoint: ") + e.what());
  }
}

}  // namespace dbgp
