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

// Run configuration for the command-line tool: a nested JSON document whose
// every leaf is declared in config_keys() with a default and its origin.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dbgp/checkpoint.hpp"
#include "dbgp/error.hpp"
#include "dbgp/eval.hpp"
#include "dbgp/model.hpp"
#include "dbgp/synthdata.hpp"

namespace dbgp {

enum class Provenance { kPublished, kToolkit };

inline const char* to_string(Provenance p) { return p == Provenance::kPublished ? "published" : "toolkit"; }

struct ConfigKey {
  std::string path;  // dotted
  Json default_value;
  Provenance provenance = Provenance::kToolkit;
  std::string help;
};

inline const std::vector<ConfigKey>& config_keys() {
  using P = Provenance;
  static const std::vector<ConfigKey> keys = {
      {"seed", 1, P::kToolkit, "root seed for generation, init, training and prediction"},
      {"cohort.n_patients", 2000, P::kToolkit, "synthetic cohort size"},
      {"cohort.positive_rate", 0.083, P::kPublished, "fraction of positive patients"},
      {"cohort.n_codes", 200, P::kToolkit, "code vocabulary size"},
      {"cohort.n_risk_codes", 5, P::kToolkit, "planted codes that drive the label"},
      {"cohort.visits_min", 2, P::kToolkit, "visits per patient, lower bound"},
      {"cohort.visits_max", 8, P::kToolkit, "visits per patient, upper bound"},
      {"cohort.codes_per_visit_min", 1, P::kToolkit, "codes per visit, lower bound"},
      {"cohort.codes_per_visit_max", 4, P::kToolkit, "codes per visit, upper bound"},
      {"cohort.noise_rate", 0.1, P::kToolkit, "fraction of negatives carrying risk codes"},
      {"cohort.positive_risk_mean", 2.0, P::kToolkit, "mean extra risk-code count for positives"},
      {"cohort.noise_risk_mean", 0.5, P::kToolkit, "mean extra risk-code count for noisy negatives"},
      {"cohort.train_fraction", 0.7, P::kPublished, "training share of the train/validation split"},
      {"model.variant", "DBGP", P::kPublished, "DBGP, BE, BO, BE_BO, WHITENED_GP, KISS_GP or DETERMINISTIC"},
      {"model.encoder.max_sequence_length", 256, P::kPublished, "longest accepted sequence"},
      {"model.encoder.hidden_size", 150, P::kPublished, "encoder width"},
      {"model.encoder.n_layers", 4, P::kPublished, "transformer layers"},
      {"model.encoder.n_heads", 6, P::kPublished, "attention heads"},
      {"model.encoder.intermediate_size", 108, P::kPublished, "feed-forward width"},
      {"model.encoder.dropout", 0.29, P::kPublished, "hidden dropout"},
      {"model.dense_pool_size", 150, P::kPublished, "pool width for dense-head variants"},
      {"model.gp_pool_size", 24, P::kPublished, "pool width for GP-head variants"},
      {"model.embedding_prior_std", 0.374, P::kPublished, "prior std of stochastic embeddings"},
      {"model.output_prior_std", 1.0, P::kPublished, "prior std of the stochastic output layer"},
      {"model.gp.dims", 2, P::kToolkit, "GP input dimensions after projection"},
      {"model.gp.grid_size", 32, P::kToolkit, "KISS grid points per dimension"},
      {"model.gp.inducing_points", 64, P::kToolkit, "inducing points of the whitened head"},
      {"model.gp.init_lengthscale", 0.5, P::kToolkit, "initial RBF lengthscale"},
      {"model.gp.init_outputscale", 1.0, P::kToolkit, "initial RBF outputscale"},
      {"model.gp.init_mean_std", 0.1, P::kToolkit, "std of the random initial variational mean"},
      {"pretrain.epochs", 3, P::kToolkit, "masked-code pretraining epochs"},
      {"pretrain.batch_size", 64, P::kToolkit, "pretraining batch size"},
      {"pretrain.learning_rate", 1e-3, P::kToolkit, "pretraining step size"},
      {"pretrain.mask_fraction", 0.15, P::kToolkit, "share of code tokens masked"},
      {"train.epochs", 20, P::kToolkit, "fine-tuning epoch budget"},
      {"train.batch_size", 256, P::kToolkit, "fine-tuning batch size"},
      {"train.learning_rate", 1e-3, P::kToolkit, "fine-tuning step size"},
      {"train.mc_train_samples", 1, P::kToolkit, "weight draws per training step"},
      {"train.patience", 5, P::kToolkit, "early-stopping patience on validation AUROC"},
      {"train.kl_weight_start", 1.0, P::kToolkit, "KL weight during the hold phase"},
      {"train.kl_hold_epochs", 0, P::kToolkit, "epochs at kl_weight_start"},
      {"train.kl_warmup_epochs", 0, P::kToolkit, "epochs of linear KL ramp to 1"},
      {"predict.samples", 30, P::kPublished, "Monte Carlo draws per patient"},
      {"predict.batch_size", 256, P::kToolkit, "prediction batch size"},
      {"predict.sample_latent", true, P::kToolkit, "draw the GP latent instead of using its mean"},
      {"predict.split", "validation", P::kToolkit, "validation, train or all"},
      {"repro.samples", Json::array({30, 60}), P::kPublished, "draw counts compared by repro"},
      {"eval.calibration_bins", 10, P::kToolkit, "equal-width calibration bins"},
      {"eval.thresholds", Json::array({0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95}), P::kToolkit,
       "confidence thresholds"},
      {"paths.dataset", "", P::kToolkit, "cohort .jsonl (vocabulary alongside)"},
      {"paths.pretrained", "", P::kToolkit, "pretrained checkpoint, empty for none"},
      {"paths.model", "", P::kToolkit, "trained model checkpoint"},
      {"paths.predictions", "", P::kToolkit, "predictions table"},
  };
  return keys;
}

inline Json::json_pointer key_pointer(const std::string& dotted) {
  std::string p;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) p += "/" + part;
  return Json::json_pointer(p);
}

inline const ConfigKey* find_key(const std::string& dotted) {
  for (const auto& k : config_keys())
    if (k.path == dotted) return &k;
  return nullptr;
}

inline Json default_config() {
  Json j = Json::object();
  for (const auto& k : config_keys()) j[key_pointer(k.path)] = k.default_value;
  return j;
}

namespace detail {

inline bool is_integer(const Json& v) { return v.is_number_integer() || v.is_number_unsigned(); }

inline bool same_kind(const Json& def, const Json& v) {
  if (def.is_boolean()) return v.is_boolean();
  if (def.is_string()) return v.is_string();
  if (is_integer(def)) return is_integer(v);
  if (def.is_number()) return v.is_number();
  if (def.is_array()) {
    if (!v.is_array() || v.empty()) return false;
    for (const auto& e : v)
      if (!same_kind(def.front(), e)) return false;
    return true;
  }
  return false;
}

inline const char* kind_name(const Json& def) {
  if (def.is_boolean()) return "a boolean";
  if (def.is_string()) return "a string";
  if (is_integer(def)) return "an integer";
  if (def.is_number()) return "a number";
  return "a non-empty array";
}

inline void merge_into(Json& base, const Json& overlay, const std::string& prefix) {
  if (!overlay.is_object()) throw ConfigError(prefix.empty() ? "<root>" : prefix, "expected a table of keys");
  for (const auto& [name, value] : overlay.items()) {
    const std::string path = prefix.empty() ? name : prefix + "." + name;
    if (const ConfigKey* k = find_key(path)) {
      if (!same_kind(k->default_value, value)) throw ConfigError(path, std::string("must be ") + kind_name(k->default_value));
      base[key_pointer(path)] = value;
    } else if (value.is_object() && base.contains(key_pointer(path)) && base[key_pointer(path)].is_object()) {
      merge_into(base, value, path);
    } else {
      throw ConfigError(path, "unknown key");
    }
  }
}

}  // namespace detail

/// Applies `overlay` on top of `base`; unknown keys and wrongly typed values
/// are rejected.
inline Json merge_config(Json base, const Json& overlay) {
  detail::merge_into(base, overlay, "");
  return base;
}

/// Sets one dotted key from its text form. The text is read as JSON when it
/// parses, so numbers, booleans and arrays work; string keys take the text
/// verbatim.
inline void apply_override(Json& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  const ConfigKey* k = find_key(path);
  if (!k) throw ConfigError(path, "unknown key");
  Json value;
  if (k->default_value.is_string()) {
    value = text;
  } else {
    try {
      value = Json::parse(text);
    } catch (const nlohmann::json::parse_error&) {
      throw ConfigError(path, "cannot parse '" + text + "'");
    }
    if (!detail::same_kind(k->default_value, value))
      throw ConfigError(path, std::string("must be ") + detail::kind_name(k->default_value));
  }
  cfg[key_pointer(path)] = value;
}

struct PredictConfig {
  int samples = 30;
  int batch_size = 256;
  bool sample_latent = true;
  std::string split = "validation";

  void validate() const {
    if (samples < 1) throw ConfigError("predict.samples", "must be >= 1");
    if (batch_size < 1) throw ConfigError("predict.batch_size", "must be >= 1");
    if (split != "validation" && split != "train" && split != "all")
      throw ConfigError("predict.split", "must be validation, train or all");
  }
};

struct EvalConfig {
  int calibration_bins = 10;
  std::vector<double> thresholds = default_confidence_thresholds();

  void validate() const {
    if (calibration_bins < 2) throw ConfigError("eval.calibration_bins", "need at least 2 bins");
    for (std::size_t i = 0; i < thresholds.size(); ++i) {
      if (!(thresholds[i] >= 0.5 && thresholds[i] < 1.0))
        throw ConfigError("eval.thresholds", "each threshold must lie in [0.5, 1)");
      if (i > 0 && !(thresholds[i] > thresholds[i - 1]))
        throw ConfigError("eval.thresholds", "must be strictly ascending");
    }
  }
};

struct PathsConfig {
  std::string dataset, pretrained, model, predictions;
};

struct RunConfig {
  std::uint64_t seed = 1;
  CohortConfig cohort;
  ModelConfig model;
  PretrainConfig pretrain;
  TrainConfig train;
  PredictConfig predict;
  std::vector<int> repro_samples{30, 60};
  EvalConfig eval;
  PathsConfig paths;
  Json resolved;  // the document this was built from

  void validate() const {
    cohort.validate();
    model.validate();
    pretrain.validate();
    train.validate();
    predict.validate();
    eval.validate();
    for (int s : repro_samples)
      if (s < 1) throw ConfigError("repro.samples", "every entry must be >= 1");
  }

  /// Builds typed sections from a merged document and validates them.
  static RunConfig from_json(const Json& j) {
    RunConfig r;
    auto at = [&](const char* path) -> const Json& { return j.at(key_pointer(path)); };
    r.resolved = j;
    if (at("seed").is_number_integer() && at("seed").get<long long>() < 0) throw ConfigError("seed", "must be >= 0");
    r.seed = at("seed").get<std::uint64_t>();

    auto& c = r.cohort;
    c.n_patients = at("cohort.n_patients").get<long>();
    c.positive_rate = at("cohort.positive_rate").get<double>();
    c.n_codes = at("cohort.n_codes").get<int>();
    c.n_risk_codes = at("cohort.n_risk_codes").get<int>();
    c.visits_min = at("cohort.visits_min").get<int>();
    c.visits_max = at("cohort.visits_max").get<int>();
    c.codes_per_visit_min = at("cohort.codes_per_visit_min").get<int>();
    c.codes_per_visit_max = at("cohort.codes_per_visit_max").get<int>();
    c.noise_rate = at("cohort.noise_rate").get<double>();
    c.positive_risk_mean = at("cohort.positive_risk_mean").get<double>();
    c.noise_risk_mean = at("cohort.noise_risk_mean").get<double>();
    c.train_fraction = at("cohort.train_fraction").get<double>();
    c.seed = r.seed;

    auto& m = r.model;
    m.variant = parse_variant(at("model.variant").get<std::string>());
    m.encoder.max_sequence_length = at("model.encoder.max_sequence_length").get<int>();
    m.encoder.hidden_size = at("model.encoder.hidden_size").get<int>();
    m.encoder.n_layers = at("model.encoder.n_layers").get<int>();
    m.encoder.n_heads = at("model.encoder.n_heads").get<int>();
    m.encoder.intermediate_size = at("model.encoder.intermediate_size").get<int>();
    m.encoder.dropout = at("model.encoder.dropout").get<double>();
    m.dense_pool_size = at("model.dense_pool_size").get<int>();
    m.gp_pool_size = at("model.gp_pool_size").get<int>();
    m.embedding_prior_std = at("model.embedding_prior_std").get<double>();
    m.output_prior_std = at("model.output_prior_std").get<double>();
    m.gp.dims = at("model.gp.dims").get<int>();
    m.gp.grid_size = at("model.gp.grid_size").get<int>();
    m.gp.inducing_points = at("model.gp.inducing_points").get<int>();
    m.gp.init_lengthscale = at("model.gp.init_lengthscale").get<double>();
    m.gp.init_outputscale = at("model.gp.init_outputscale").get<double>();
    m.gp.init_mean_std = at("model.gp.init_mean_std").get<double>();
    m.encoder.pool_size = m.resolved_encoder().pool_size;

    auto& p = r.pretrain;
    p.epochs = at("pretrain.epochs").get<int>();
    p.batch_size = at("pretrain.batch_size").get<int>();
    p.learning_rate = at("pretrain.learning_rate").get<double>();
    p.mask_fraction = at("pretrain.mask_fraction").get<double>();
    p.seed = r.seed;

    auto& t = r.train;
    t.epochs = at("train.epochs").get<int>();
    t.batch_size = at("train.batch_size").get<int>();
    t.learning_rate = at("train.learning_rate").get<double>();
    t.mc_train_samples = at("train.mc_train_samples").get<int>();
    t.patience = at("train.patience").get<int>();
    t.kl_weight_start = at("train.kl_weight_start").get<double>();
    t.kl_hold_epochs = at("train.kl_hold_epochs").get<int>();
    t.kl_warmup_epochs = at("train.kl_warmup_epochs").get<int>();
    t.seed = r.seed;

    r.predict.samples = at("predict.samples").get<int>();
    r.predict.batch_size = at("predict.batch_size").get<int>();
    r.predict.sample_latent = at("predict.sample_latent").get<bool>();
    r.predict.split = at("predict.split").get<std::string>();
    r.repro_samples = at("repro.samples").get<std::vector<int>>();
    r.eval.calibration_bins = at("eval.calibration_bins").get<int>();
    r.eval.thresholds = at("eval.thresholds").get<std::vector<double>>();

    r.paths.dataset = at("paths.dataset").get<std::string>();
    r.paths.pretrained = at("paths.pretrained").get<std::string>();
    r.paths.model = at("paths.model").get<std::string>();
    r.paths.predictions = at("paths.predictions").get<std::string>();
    r.validate();
    return r;
  }
};

/// Defaults, then the optional file, then each override in order, then the
/// optional seed.
inline RunConfig resolve_config(const std::optional<std::filesystem::path>& file,
                                const std::vector<std::string>& overrides, std::optional<std::uint64_t> seed) {
  Json cfg = default_config();
  if (file) {
    Json doc;
    try {
      doc = read_json_file(*file);
    } catch (const ParseError& e) {
      throw ConfigError("--config", e.what());
    }
    cfg = merge_config(cfg, doc);
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  if (seed) cfg["seed"] = *seed;
  return RunConfig::from_json(cfg);
}

/// One line per key: name, default, provenance, description.
inline std::string config_help() {
  std::size_t w = 0, wd = 0;
  for (const auto& k : config_keys()) {
    w = std::max(w, k.path.size());
    wd = std::max(wd, k.default_value.dump().size());
  }
  std::ostringstream out;
  out << "Config keys (default, provenance):\n";
  for (const auto& k : config_keys()) {
    const std::string d = k.default_value.dump();
    out << "  " << k.path << std::string(w - k.path.size() + 2, ' ') << d << std::string(wd - d.size() + 2, ' ')
        << to_string(k.provenance) << (k.provenance == Provenance::kPublished ? "  " : "    ") << k.help << '\n';
  }
  return out.str();
}

}  // namespace dbgp
