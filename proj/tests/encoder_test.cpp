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
#include <gtest/gtest.h>

#include <cmath>

#include "dbgp/encoder.hpp"
#include "test_util.hpp"

using namespace dbgp;
using dbgp::testing::rel_err;

namespace {

EncoderConfig small_config(int layers = 2) {
  EncoderConfig c;
  c.max_sequence_length = 16;
  c.hidden_size = 8;
  c.n_layers = layers;
  c.n_heads = 2;
  c.intermediate_size = 12;
  c.dropout = 0.0;
  c.pool_size = 5;
  return c;
}

PatientRecord make_record(const std::vector<int>& codes, const std::string& id = "P1") {
  PatientRecord r;
  r.patient_id = id;
  int pos = 0;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    r.codes.push_back(codes[i]);
    r.ages.push_back(40 + pos);
    r.segments.push_back(pos % 2);
    r.positions.push_back(pos);
    if (codes[i] == Vocabulary::kSep || i == 0) ++pos;
  }
  return r;
}

ParameterSet random_encoder(const EncoderConfig& cfg, int vocab, std::uint64_t seed) {
  ParameterSet p;
  Rng rng(seed);
  init_encoder_parameters(p, cfg, vocab, rng);
  for (auto& blk : p)
    if (blk.name.find("ln") != std::string::npos) blk.value.array() += 0.3 * rng.normal_matrix(1, blk.value.cols()).array();
  return p;
}

}  // namespace

TEST(EncoderConfig, Validation) {
  EncoderConfig c;
  EXPECT_NO_THROW(c.validate());
  c.n_heads = 7;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(EncoderConfig::from_json(EncoderConfig{}.to_json()), EncoderConfig{});
}

TEST(EmbedSequence, ZeroTablesGiveZeroLatent) {
  const auto cfg = small_config();
  auto params = random_encoder(cfg, 12, 1);
  for (const auto& n : embedding_table_names()) params.at(n).value.setZero();
  const auto r = make_record({Vocabulary::kCls, 6, 7, Vocabulary::kSep});
  const auto lat = embed_sequence(r, EmbeddingBlock::from_parameters(params), nullptr);
  EXPECT_EQ(lat.values, Matrix::Zero(4, 8));
}

TEST(EmbedSequence, OneHotCodeIsIdentityLookup) {
  const auto cfg = small_config();
  auto params = random_encoder(cfg, 12, 2);
  for (std::size_t i = 1; i < 4; ++i) params.at(embedding_table_names()[i]).value.setZero();
  const auto r = make_record({Vocabulary::kCls, 9, 6, Vocabulary::kSep});
  const auto lat = embed_sequence(r, EmbeddingBlock::from_parameters(params), nullptr);
  EXPECT_EQ(lat.values.row(1), params.at("emb.code").value.row(9));
}

TEST(EmbedSequence, SumOfFourTables) {
  const auto cfg = small_config();
  auto params = random_encoder(cfg, 12, 3);
  const auto r = make_record({Vocabulary::kCls, 9, 6, Vocabulary::kSep, 11, Vocabulary::kSep});
  const auto lat = embed_sequence(r, EmbeddingBlock::from_parameters(params), nullptr);
  for (std::size_t p = 0; p < r.length(); ++p) {
    const RowVector expected = params.at("emb.code").value.row(r.codes[p]) + params.at("emb.age").value.row(r.ages[p]) +
                               params.at("emb.segment").value.row(r.segments[p]) +
                               params.at("emb.position").value.row(r.positions[p]);
    EXPECT_LT((lat.values.row(static_cast<Eigen::Index>(p)) - expected).cwiseAbs().maxCoeff(), 1e-15);
  }
  // same through the batched tape path
  ad::Tape tape;
  WeightSource w(tape, params);
  const auto b = make_batch(std::vector<PatientRecord>{r});
  EXPECT_LT((embed_batch(embedding_tables(w, nullptr), b).value() - lat.values).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(EmbedSequence, VanishingScaleEqualsMean) {
  const auto cfg = small_config();
  auto params = random_encoder(cfg, 12, 4);
  for (const auto& n : embedding_table_names()) {
    const auto& v = params.at(n).value;
    params.add(n + ".rho", Matrix::Constant(v.rows(), v.cols(), -800.0));
  }
  const auto r = make_record({Vocabulary::kCls, 9, 6, Vocabulary::kSep});
  auto block = EmbeddingBlock::from_parameters(params);
  ASSERT_TRUE(block.stochastic);
  Rng rng(1);
  const auto stochastic = embed_sequence(r, block, &rng);
  const auto mean = embed_sequence(r, block, nullptr);
  EXPECT_EQ(stochastic.values, mean.values);
}

TEST(EmbedSequence, OutOfRangeIdNamesPosition) {
  const auto cfg = small_config();
  auto params = random_encoder(cfg, 12, 5);
  auto r = make_record({Vocabulary::kCls, 9, 6, Vocabulary::kSep});
  r.codes[2] = 99;
  try {
    embed_sequence(r, EmbeddingBlock::from_parameters(params), nullptr);
    FAIL();
  } catch (const LookupError& e) {
    EXPECT_EQ(e.position(), 2u);
  }
  ad::Tape tape;
  WeightSource w(tape, params);
  EXPECT_THROW(embed_batch(embedding_tables(w, nullptr), make_batch(std::vector<PatientRecord>{r})), LookupError);
}

TEST(Encode, EmptyStackIsIdentity) {
  const auto cfg = small_config(0);
  auto params = random_encoder(cfg, 12, 6);
  Rng rng(2);
  LatentSequence lat{rng.normal_matrix(5, 8), std::vector<char>(5, 1)};
  EXPECT_EQ(encode(lat, cfg, params).values, lat.values);
}

TEST(Encode, ShapeMismatchIsDimensionError) {
  const auto cfg = small_config(1);
  auto params = random_encoder(cfg, 12, 6);
  Rng rng(2);
  LatentSequence lat{rng.normal_matrix(5, 7), std::vector<char>(5, 1)};
  EXPECT_THROW(encode(lat, cfg, params), DimensionError);
}

TEST(Encode, UniformScoresGiveMaskedMeanOfValues) {
  // One layer, one head, zero query/key maps, identity value/output maps.
  auto cfg = small_config(1);
  cfg.n_heads = 1;
  ParameterSet params = random_encoder(cfg, 12, 7);
  const auto p = layer_prefix(0);
  params.at(p + "q.w").value.setZero();
  params.at(p + "k.w").value.setZero();
  params.at(p + "v.w").value.setIdentity();
  params.at(p + "o.w").value.setIdentity();
  Rng rng(3);
  const Matrix x = rng.normal_matrix(6, 8);
  std::vector<char> mask{1, 1, 0, 1, 1, 0};
  ad::Tape tape;
  WeightSource w(tape, params);
  Batch b;
  b.size = 1;
  b.seq_len = 6;
  b.valid = mask;
  ad::Var xv = tape.constant(x);
  ad::Var att = ad::masked_attention(ad::affine(xv, w(p + "q.w"), w(p + "q.b")), ad::affine(xv, w(p + "k.w"), w(p + "k.b")),
                                     ad::affine(xv, w(p + "v.w"), w(p + "v.b")), mask, 1, 6, 1);
  const RowVector masked_mean = (x.row(0) + x.row(1) + x.row(3) + x.row(4)) / 4.0;
  for (int i = 0; i < 6; ++i) EXPECT_LT((att.value().row(i) - masked_mean).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Encode, PadContentDoesNotLeak) {
  const auto cfg = small_config(2);
  auto params = random_encoder(cfg, 12, 8);
  Rng rng(4);
  Matrix x = rng.normal_matrix(6, 8);
  std::vector<char> mask{1, 1, 1, 1, 0, 0};
  const auto a = encode(LatentSequence{x, mask}, cfg, params);
  Matrix swapped = x;
  swapped.row(4) = x.row(5);
  swapped.row(5) = 3.0 * x.row(4);
  const auto b = encode(LatentSequence{swapped, mask}, cfg, params);
  EXPECT_LT((a.values.topRows(4) - b.values.topRows(4)).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(Encode, PermutationEquivariantWithoutPositionInformation) {
  const auto cfg = small_config(2);
  auto params = random_encoder(cfg, 12, 9);
  Rng rng(5);
  const Matrix x = rng.normal_matrix(5, 8);
  const std::vector<int> perm{3, 0, 4, 1, 2};
  Matrix px(5, 8);
  for (int i = 0; i < 5; ++i) px.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
  const auto a = encode(LatentSequence{x, std::vector<char>(5, 1)}, cfg, params);
  const auto b = encode(LatentSequence{px, std::vector<char>(5, 1)}, cfg, params);
  for (int i = 0; i < 5; ++i)
    EXPECT_LT((b.values.row(i) - a.values.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(Encode, EvaluationForwardIsBitIdentical) {
  auto cfg = small_config(2);
  cfg.dropout = 0.29;
  auto params = random_encoder(cfg, 12, 10);
  const auto r = make_record({Vocabulary::kCls, 9, 6, Vocabulary::kSep, 7, Vocabulary::kSep});
  auto run = [&] {
    ad::Tape tape;
    WeightSource w(tape, params);
    const auto b = make_batch(std::vector<PatientRecord>{r});
    return pool_first(encode(embed_batch(embedding_tables(w, nullptr), b), b, cfg, w), b, w).value();
  };
  EXPECT_EQ(run(), run());
}

TEST(PoolFirst, Cases) {
  const auto cfg = small_config(0);
  auto params = random_encoder(cfg, 12, 11);
  Rng rng(6);
  // identity pool, zero bias, small inputs
  ParameterSet sq;
  sq.add("pool.w", Matrix::Identity(8, 8));
  sq.add("pool.b", Matrix::Zero(1, 8));
  LatentSequence small{1e-4 * rng.normal_matrix(3, 8), std::vector<char>(3, 1)};
  EXPECT_LT((pool_first(small, sq).transpose() - small.values.row(0)).cwiseAbs().maxCoeff(), 1e-11);
  // zero CLS row
  LatentSequence zero{rng.normal_matrix(3, 8), std::vector<char>(3, 1)};
  zero.values.row(0).setZero();
  params.at("pool.b").value = rng.normal_matrix(1, 5);
  EXPECT_LT((pool_first(zero, params).transpose() - params.at("pool.b").value.array().tanh().matrix()).cwiseAbs().maxCoeff(),
            1e-15);
  // dense oracle
  LatentSequence lat{rng.normal_matrix(4, 8), std::vector<char>(4, 1)};
  const Matrix& w = params.at("pool.w").value;
  Vector oracle(5);
  for (int j = 0; j < 5; ++j) {
    double s = params.at("pool.b").value(0, j);
    for (int i = 0; i < 8; ++i) s += lat.values(0, i) * w(i, j);
    oracle(j) = std::tanh(s);
  }
  EXPECT_LT((pool_first(lat, params) - oracle).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Mlm, CrossEntropyCases) {
  Matrix two(1, 2);
  two << 2.0, 0.0;
  EXPECT_NEAR(masked_cross_entropy(two, {0}), 0.1269, 1e-4);
  EXPECT_NEAR(masked_cross_entropy(two, {0}), std::log1p(std::exp(-2.0)), 1e-15);
  const int v = 17;
  EXPECT_NEAR(masked_cross_entropy(Matrix::Zero(3, v), {0, 5, 16}), std::log(v), 1e-14);
  Matrix confident = Matrix::Zero(1, 4);
  confident(0, 2) = 800.0;
  EXPECT_LT(masked_cross_entropy(confident, {2}), 1e-300);
}

TEST(Mlm, UniformPredictorOverCodes) {
  const auto cfg = small_config(1);
  const int vocab = 5 + 12;
  auto params = random_encoder(cfg, vocab, 12);
  add_mlm_parameters(params, vocab);
  params.at("emb.code").value.setZero();  // tied logits become the (zero) bias
  const auto r = make_record({Vocabulary::kCls, 9, 6, 14, Vocabulary::kSep});
  ad::Tape tape;
  WeightSource w(tape, params);
  Rng rng(1);
  const auto res = mlm_loss(make_batch(std::vector<PatientRecord>{r}), 0.5, cfg, w, rng);
  EXPECT_FALSE(res.no_maskable);
  EXPECT_NEAR(res.loss.scalar(), std::log(12.0), 1e-12);
}

TEST(Mlm, NoMaskablePositionsIsZeroWithFlag) {
  const auto cfg = small_config(1);
  auto params = random_encoder(cfg, 12, 13);
  add_mlm_parameters(params, 12);
  const auto r = make_record({Vocabulary::kCls, Vocabulary::kSep});
  ad::Tape tape;
  WeightSource w(tape, params);
  Rng rng(1);
  const auto res = mlm_loss(make_batch(std::vector<PatientRecord>{r}), 0.15, cfg, w, rng);
  EXPECT_TRUE(res.no_maskable);
  EXPECT_EQ(res.loss.scalar(), 0.0);
  EXPECT_THROW(mlm_loss(make_batch(std::vector<PatientRecord>{r}), 1.0, cfg, w, rng), ConfigError);
}

TEST(Mlm, MasksOnlyCodesAtRequestedRate) {
  Batch b;
  b.size = 1;
  b.seq_len = 4000;
  for (int i = 0; i < 4000; ++i) {
    b.codes.push_back(i % 10 == 0 ? Vocabulary::kSep : 5 + i % 7);
    b.valid.push_back(1);
  }
  Rng rng(3);
  const auto m = mask_codes(b, 0.15, rng);
  for (auto k : m.rows) EXPECT_GE(b.codes[static_cast<std::size_t>(k)], Vocabulary::kNumSpecial);
  EXPECT_NEAR(static_cast<double>(m.rows.size()) / 3600.0, 0.15, 0.02);
}

namespace {

// Max relative error of tape gradients against central differences over every
// coordinate of every block in `params` (small model).
double encoder_grad_error(ParameterSet& params, const std::function<ad::Var(WeightSource&)>& objective, double floor) {
  params.zero_grad();
  {
    ad::Tape tape;
    WeightSource w(tape, params, true);
    tape.backward(objective(w));
  }
  auto eval = [&] {
    ad::Tape tape;
    WeightSource w(tape, params);
    return objective(w).scalar();
  };
  double worst = 0.0;
  const double h = 1e-4;
  for (auto& blk : params) {
    for (Eigen::Index i = 0; i < blk.value.size(); ++i) {
      const double orig = blk.value.data()[i];
      blk.value.data()[i] = orig + h;
      const double fp = eval();
      blk.value.data()[i] = orig - h;
      const double fm = eval();
      blk.value.data()[i] = orig;
      const double fd = (fp - fm) / (2 * h);
      const double e = rel_err(blk.grad.data()[i], fd, floor);
      if (e > worst) worst = e;
    }
  }
  return worst;
}

}  // namespace

TEST(EncoderGradients, PooledOutputMatchesFiniteDifferences) {
  auto cfg = small_config(2);
  cfg.max_sequence_length = 6;
  const int vocab = 9;
  auto params = random_encoder(cfg, vocab, 14);
  const std::vector<PatientRecord> recs{make_record({Vocabulary::kCls, 6, 7, Vocabulary::kSep}, "A"),
                                        make_record({Vocabulary::kCls, 8, Vocabulary::kSep, 5, 6, Vocabulary::kSep}, "B")};
  const auto b = make_batch(recs);
  Rng rng(7);
  const Matrix proj = rng.normal_matrix(cfg.pool_size, 1);
  auto objective = [&](WeightSource& w) {
    ad::Var pooled = pool_first(encode(embed_batch(embedding_tables(w, nullptr), b), b, cfg, w), b, w);
    return ad::sum(ad::matmul(pooled, w.tape().constant(proj)));
  };
  EXPECT_LT(encoder_grad_error(params, objective, 1e-6), 1e-4);
}

TEST(EncoderGradients, MlmLossMatchesFiniteDifferences) {
  auto cfg = small_config(1);
  cfg.max_sequence_length = 6;
  const int vocab = 10;
  auto params = random_encoder(cfg, vocab, 15);
  add_mlm_parameters(params, vocab);
  const std::vector<PatientRecord> recs{make_record({Vocabulary::kCls, 6, 7, 9, Vocabulary::kSep}, "A"),
                                        make_record({Vocabulary::kCls, 8, Vocabulary::kSep, 5, 6, Vocabulary::kSep}, "B")};
  const auto b = make_batch(recs);
  auto objective = [&](WeightSource& w) {
    Rng rng(3);  // same mask every evaluation
    return mlm_loss(b, 0.4, cfg, w, rng).loss;
  };
  EXPECT_LT(encoder_grad_error(params, objective, 1e-6), 1e-4);
}

TEST(Checkpoint, RoundTripAndShapeCheck) {
  const auto cfg = small_config(1);
  auto params = random_encoder(cfg, 12, 16);
  const Json j = parameters_to_json(params);
  ParameterSet loaded;
  parameters_from_json(Json::parse(j.dump()), loaded);
  for (const auto& p : params) EXPECT_EQ(loaded.at(p.name).value, p.value) << p.name;
  auto other = random_encoder(small_config(1), 13, 1);
  EXPECT_THROW(parameters_from_json(j, other), DimensionError);
}
