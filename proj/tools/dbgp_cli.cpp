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

// dbgp: generate | pretrain | train | predict | report | repro
//
// Each invocation writes into a fresh run directory
// <root>/<command>-<config hash>-<UTC timestamp>, where <root> is --out,
// else $DBGP_OUT_ROOT, else ./runs. The run directory path is printed on
// stdout. Inputs are never modified.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dbgp/config.hpp"
#include "dbgp/eval.hpp"
#include "dbgp/model.hpp"
#include "dbgp/synthdata.hpp"

namespace fs = std::filesystem;
using namespace dbgp;

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string num(const std::optional<double>& v) { return v ? num(*v) : "NA"; }

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Input files are recorded by name and content digest so that artifacts do
/// not depend on where their inputs live.
Json describe_input(const std::string& path, bool dataset) {
  if (path.empty()) return "";
  std::string bytes = read_bytes(path);
  if (dataset) bytes += read_bytes(vocabulary_path_for(path));
  return Json{{"file", fs::path(path).filename().string()}, {"fnv1a64", hex64(hash_string(bytes))}};
}

struct Run {
  std::string command;
  RunConfig cfg;
  fs::path dir;
  Json embedded;  // resolved config with inputs replaced by name and digest

  Json embedded_config() const {
    Json j = cfg.resolved;
    j["paths"]["dataset"] = describe_input(cfg.paths.dataset, true);
    for (const char* k : {"pretrained", "model", "predictions"})
      j["paths"][k] = describe_input(j["paths"][k].get<std::string>(), false);
    return j;
  }

  /// Header shared by every table written in this run.
  std::string table_header(const std::string& kind) const {
    return "# dbgp " + kind + "\n# command " + command + "\n# seed " + std::to_string(cfg.seed) + "\n# config " +
           embedded.dump() + "\n";
  }

  Json provenance() const { return Json{{"command", command}, {"seed", cfg.seed}, {"config", embedded}}; }

  void write_text(const std::string& name, const std::string& body) const {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw IoError("cannot open " + (dir / name).string() + " for writing");
    out << body;
    if (!out) throw IoError("write failed: " + (dir / name).string());
  }

  void write_table(const std::string& name, const std::string& kind, const std::vector<std::string>& columns,
                   const std::vector<std::vector<std::string>>& rows) const {
    std::ostringstream out;
    out << table_header(kind);
    for (std::size_t c = 0; c < columns.size(); ++c) out << (c ? "\t" : "") << columns[c];
    out << '\n';
    for (const auto& r : rows) {
      for (std::size_t c = 0; c < r.size(); ++c) out << (c ? "\t" : "") << r[c];
      out << '\n';
    }
    write_text(name, out.str());
  }
};

std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

fs::path make_run_dir(const fs::path& root, const std::string& command, const Json& resolved) {
  const std::string base =
      command + "-" + hex64(hash_string(command + "\n" + resolved.dump())).substr(0, 8) + "-" + utc_timestamp();
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create output root " + root.string() + ": " + ec.message());
  for (int k = 1;; ++k) {
    fs::path dir = root / (k == 1 ? base : base + "-" + std::to_string(k));
    if (fs::create_directory(dir, ec)) return dir;
    if (ec) throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());
  }
}

const std::string& require_path(const std::string& value, const std::string& key, const std::string& command) {
  if (value.empty()) throw ConfigError(key, "required by " + command);
  if (!fs::exists(value)) throw IoError(key + ": no such file " + value);
  return value;
}

std::vector<const PatientRecord*> select_split(const std::vector<PatientRecord>& recs, const std::string& split) {
  if (split == "train") return split_records(recs, Split::kTrain);
  if (split == "validation") return split_records(recs, Split::kValidation);
  std::vector<const PatientRecord*> all;
  for (const auto& r : recs) all.push_back(&r);
  return all;
}

void check_same_vocabulary(const Vocabulary& a, const Vocabulary& b, const std::string& what) {
  if (a.code_tokens() != b.code_tokens()) throw DataError(what + " was built on a different vocabulary");
}

// ---------------------------------------------------------------------------
// Predictions table: patient_id, label, mean, std, p_1 .. p_S

void write_predictions(const Run& run, const std::string& name, const PredictiveSamples& s) {
  std::vector<std::string> cols{"patient_id", "label", "mean", "std"};
  for (Eigen::Index d = 0; d < s.draws(); ++d) cols.push_back("p_" + std::to_string(d + 1));
  const Vector m = s.mean(), sd = s.stddev();
  std::vector<std::vector<std::string>> rows;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    std::vector<std::string> r{s.patient_ids[static_cast<std::size_t>(i)],
                               std::to_string(s.labels[static_cast<std::size_t>(i)]), num(m(i)), num(sd(i))};
    for (Eigen::Index d = 0; d < s.draws(); ++d) r.push_back(num(s.probs(i, d)));
    rows.push_back(std::move(r));
  }
  run.write_table(name, "predictions", cols, rows);
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, '\t')) out.push_back(f);
  return out;
}

double parse_double(const std::string& s, std::size_t lineno) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(lineno, "not a number: '" + s + "'");
  }
}

PredictiveSamples read_predictions(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  PredictiveSamples s;
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0, draws = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto f = split_tabs(line);
    if (!header) {
      if (f.size() < 5 || f[0] != "patient_id" || f[1] != "label")
        throw ParseError(lineno, "expected header patient_id, label, mean, std, p_1 ...");
      draws = f.size() - 4;
      header = true;
      continue;
    }
    if (f.size() != draws + 4) throw ParseError(lineno, "expected " + std::to_string(draws + 4) + " fields");
    if (f[1] != "0" && f[1] != "1") throw ParseError(lineno, "label must be 0 or 1");
    s.patient_ids.push_back(f[0]);
    s.labels.push_back(f[1] == "1");
    std::vector<double> p;
    for (std::size_t d = 0; d < draws; ++d) p.push_back(parse_double(f[4 + d], lineno));
    rows.push_back(std::move(p));
  }
  if (!header) throw ParseError(lineno, "predictions table has no header");
  if (rows.empty()) throw DataError("predictions table has no patients");
  s.probs.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(draws));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t d = 0; d < draws; ++d) s.probs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = rows[i][d];
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Commands

void cmd_generate(const Run& run) {
  const Cohort c = generate_cohort(run.cfg.cohort);
  write_dataset(run.dir / "cohort.jsonl", c.vocabulary, c.records);
  std::vector<std::vector<std::string>> rows;
  for (int code : c.risk_codes) rows.push_back({std::to_string(code), c.vocabulary.token(code)});
  run.write_table("risk_codes.tsv", "risk codes", {"token_id", "token"}, rows);
  std::cerr << "generated " << c.records.size() << " patients\n";
}

void cmd_pretrain(const Run& run) {
  const auto [vocab, recs] = read_dataset(require_path(run.cfg.paths.dataset, "paths.dataset", run.command));
  const EncoderConfig enc = run.cfg.model.resolved_encoder();
  const PretrainResult res = pretrain_mlm(recs, vocab, enc, run.cfg.pretrain);
  Json j = pretrained_to_json(res.params, enc, vocab);
  j["epoch_loss"] = res.epoch_loss;
  j["run"] = run.provenance();
  write_json_file(run.dir / "pretrained.json", j);
  for (std::size_t e = 0; e < res.epoch_loss.size(); ++e)
    std::cerr << "pretrain epoch " << e + 1 << " loss " << res.epoch_loss[e] << '\n';
}

void cmd_train(const Run& run) {
  const auto& cfg = run.cfg;
  const auto [vocab, recs] = read_dataset(require_path(cfg.paths.dataset, "paths.dataset", run.command));
  std::optional<Pretrained> pt;
  if (!cfg.paths.pretrained.empty()) {
    pt = pretrained_from_json(read_json_file(require_path(cfg.paths.pretrained, "paths.pretrained", run.command)));
    check_same_vocabulary(pt->vocabulary, vocab, "pretrained checkpoint");
    EncoderConfig a = pt->encoder, b = cfg.model.resolved_encoder();
    a.pool_size = b.pool_size;
    if (!(a == b)) throw ConfigError("paths.pretrained", "encoder shape differs from model.encoder");
  }
  ModelState st = init_model(cfg.model, vocab, cfg.seed, pt ? &pt->params : nullptr);
  const TrainResult res = train(st, recs, cfg.train, [](const EpochMetrics& m) {
    std::cerr << "epoch " << m.epoch << " objective " << m.objective << " kl_weight " << m.kl_weight << " val_auroc "
              << (m.val_auroc ? num(*m.val_auroc) : "NA") << '\n';
  });

  Json j = model_to_json(st);
  j["training"] = Json{{"best_epoch", res.best_epoch}, {"diverged", res.diverged}, {"message", res.message}};
  j["run"] = run.provenance();
  write_json_file(run.dir / "model.json", j);
  std::vector<std::vector<std::string>> rows;
  for (const auto& m : res.log)
    rows.push_back({std::to_string(m.epoch), num(m.objective), num(m.kl_weight), num(m.val_auroc)});
  run.write_table("metrics.tsv", "training metrics", {"epoch", "objective", "kl_weight", "val_auroc"}, rows);
  if (res.diverged) throw NumericError("training diverged: " + res.message + " (kept state written)");
}

struct Loaded {
  ModelState st;
  std::vector<PatientRecord> recs;
};

Loaded load_model_and_data(const Run& run) {
  const auto& cfg = run.cfg;
  ModelState st = model_from_json(read_json_file(require_path(cfg.paths.model, "paths.model", run.command)));
  auto [vocab, recs] = read_dataset(require_path(cfg.paths.dataset, "paths.dataset", run.command));
  check_same_vocabulary(st.vocabulary, vocab, "model");
  return {std::move(st), std::move(recs)};
}

PredictiveSamples predict_draws(const Run& run, const Loaded& l, int samples) {
  const auto sel = select_split(l.recs, run.cfg.predict.split);
  if (sel.empty()) throw DataError("no patients in split '" + run.cfg.predict.split + "'");
  return mc_predict(l.st, sel, samples, run.cfg.seed, {run.cfg.predict.batch_size, run.cfg.predict.sample_latent});
}

void cmd_predict(const Run& run) {
  const Loaded l = load_model_and_data(run);
  write_predictions(run, "predictions.tsv", predict_draws(run, l, run.cfg.predict.samples));
}

void cmd_repro(const Run& run) {
  const Loaded l = load_model_and_data(run);
  const auto& counts = run.cfg.repro_samples;
  const int most = *std::max_element(counts.begin(), counts.end());
  // Draw d uses the same weights whatever the total, so smaller counts are
  // prefixes of the largest run.
  const PredictiveSamples all = predict_draws(run, l, most);
  write_predictions(run, "predictions.tsv", all);
  std::vector<std::vector<std::string>> rows;
  std::optional<RankingMetrics> first;
  for (int s : counts) {
    const RankingMetrics r = ranking_metrics(all.prefix(s));
    if (!first) first = r;
    rows.push_back({std::to_string(s), num(r.auroc), num(r.average_precision), num(r.auroc - first->auroc),
                    num(r.average_precision - first->average_precision)});
  }
  run.write_table("repro.tsv", "sampling comparison",
                  {"samples", "auroc", "average_precision", "auroc_diff", "average_precision_diff"}, rows);
}

void cmd_report(const Run& run) {
  const auto& cfg = run.cfg;
  const PredictiveSamples s = read_predictions(require_path(cfg.paths.predictions, "paths.predictions", run.command));
  const RankingMetrics rank = ranking_metrics(s);

  const auto [acc, auc] = confidence_curves(s, cfg.eval.thresholds);
  std::vector<std::vector<std::string>> rows;
  for (std::size_t k = 0; k < acc.thresholds.size(); ++k)
    rows.push_back({num(acc.thresholds[k]), std::to_string(acc.retained[k]), num(acc.values[k]), num(auc.values[k])});
  run.write_table("confidence.tsv", "confidence curves", {"threshold", "retained", "accuracy", "auroc"}, rows);

  rows.clear();
  for (const auto& b : calibration_curve(s, cfg.eval.calibration_bins))
    rows.push_back({num(b.lower), num(b.upper), std::to_string(b.count), num(b.mean_predicted), num(b.positive_fraction)});
  run.write_table("calibration.tsv", "calibration", {"lower", "upper", "count", "mean_predicted", "positive_fraction"},
                  rows);

  const UncertaintySplit split = uncertainty_split(s);
  rows.clear();
  for (const auto& [name, v] : std::vector<std::pair<std::string, const std::vector<double>*>>{
           {"TP", &split.tp}, {"FP", &split.fp}, {"TN", &split.tn}, {"FN", &split.fn}}) {
    const GroupSummary g = summarize(*v);
    rows.push_back({name, std::to_string(g.count), num(g.min), num(g.q1), num(g.median), num(g.q3), num(g.max),
                    num(g.mean)});
  }
  run.write_table("uncertainty.tsv", "predictive std by outcome",
                  {"group", "count", "min", "q1", "median", "q3", "max", "mean"}, rows);

  auto div = [&](Side side) -> std::optional<double> {
    try {
      return div_metric(split, side);
    } catch (const UndefinedMetricError& e) {
      std::cerr << "note: " << e.what() << '\n';
      return std::nullopt;
    }
  };

  // Entropy ranking needs a model with a stochastic code embedding.
  rows.clear();
  std::string entropy_note;
  if (cfg.paths.model.empty()) {
    entropy_note = "no model given";
  } else {
    const ModelState st = model_from_json(read_json_file(require_path(cfg.paths.model, "paths.model", run.command)));
    if (!st.params.contains("emb.code.rho")) {
      entropy_note = std::string("variant ") + to_string(st.config.variant) + " has no stochastic embedding";
    } else {
      const EntropyRanking er = embedding_entropy(
          MeanFieldTensor{st.params.at("emb.code").value, st.params.at("emb.code.rho").value,
                          st.config.embedding_prior_std},
          st.vocabulary);
      for (std::size_t k = 0; k < er.token_ids.size(); ++k)
        rows.push_back({std::to_string(k + 1), std::to_string(er.token_ids[k]), er.tokens[k], num(er.entropy[k])});
    }
  }
  run.write_table("entropy.tsv", entropy_note.empty() ? "embedding entropy" : "embedding entropy (" + entropy_note + ")",
                  {"rank", "token_id", "token", "entropy"}, rows);

  std::size_t positives = 0;
  for (int y : s.labels) positives += static_cast<std::size_t>(y);
  const GroupSummary tp = summarize(split.tp), fp = summarize(split.fp);
  rows = {{"patients", std::to_string(s.size())},
          {"draws", std::to_string(s.draws())},
          {"positives", std::to_string(positives)},
          {"auroc", num(rank.auroc)},
          {"average_precision", num(rank.average_precision)},
          {"accuracy", num(acc.values.empty() ? std::nullopt : acc.values.front())},
          {"tp_mean_std", num(tp.mean)},
          {"fp_mean_std", num(fp.mean)},
          {"div_positive", num(div(Side::kPositive))},
          {"div_negative", num(div(Side::kNegative))}};
  run.write_table("summary.tsv", "report summary", {"metric", "value"}, rows);
}

int exit_status(ExitCode c) { return static_cast<int>(c); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep Bayesian Gaussian process toolkit for synthetic patient records"};
  app.footer(config_help() +
             "\nExit codes: 0 ok, 2 config, 3 data, 4 numeric, 5 I/O.\n"
             "Output root: --out, else $DBGP_OUT_ROOT, else ./runs.");
  app.fallthrough();
  app.require_subcommand(1, 1);

  std::optional<std::string> config_path;
  std::vector<std::string> overrides;
  std::optional<std::string> out_root;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--set", overrides, "override one key, key=value (repeatable)")->take_all();
  app.add_option("--out", out_root, "output root directory");
  app.add_option("--seed", seed, "root seed (overrides the config)");

  const std::map<std::string, void (*)(const Run&)> commands{
      {"generate", cmd_generate}, {"pretrain", cmd_pretrain}, {"train", cmd_train},
      {"predict", cmd_predict},   {"report", cmd_report},     {"repro", cmd_repro}};
  const std::map<std::string, std::string> about{
      {"generate", "synthesize a cohort"},
      {"pretrain", "masked-code pretraining"},
      {"train", "fine-tune a variant"},
      {"predict", "Monte Carlo predictive samples"},
      {"report", "evaluation tables from a predictions file"},
      {"repro", "compare draw counts on one model"}};
  for (const auto& [name, fn] : commands) app.add_subcommand(name, about.at(name));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return exit_status(ExitCode::kConfig);
  }

  try {
    Run run;
    run.command = app.get_subcommands().front()->get_name();
    run.cfg = resolve_config(config_path ? std::optional<fs::path>(*config_path) : std::nullopt, overrides, seed);
    fs::path root = "runs";
    if (out_root) {
      root = *out_root;
    } else if (const char* env = std::getenv("DBGP_OUT_ROOT"); env && *env) {
      root = env;
    }
    run.embedded = run.embedded_config();
    run.dir = make_run_dir(root, run.command, run.cfg.resolved);
    write_json_file(run.dir / "run.json", run.provenance());
    commands.at(run.command)(run);
    std::cout << run.dir.string() << '\n';
    return exit_status(ExitCode::kOk);
  } catch (const Error& e) {
    std::cerr << "dbgp: " << e.what() << '\n';
    return exit_status(exit_code(e));
  } catch (const fs::filesystem_error& e) {
    std::cerr << "dbgp: " << e.what() << '\n';
    return exit_status(ExitCode::kIo);
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "dbgp: malformed input: " << e.what() << '\n';
    return exit_status(ExitCode::kData);
  }
}
