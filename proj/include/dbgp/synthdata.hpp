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

// Synthetic EHR-like cohorts: token vocabularies, patient sequences in the
// CLS / visit / SEP layout, and line-delimited dataset serialization.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dbgp/error.hpp"
#include "dbgp/rng.hpp"

namespace dbgp {

inline constexpr int kMaxAge = 110;
inline constexpr std::size_t kMaxSequenceLength = 256;

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;
  static constexpr int kMask = 4;
  static constexpr int kNumSpecial = 5;

  static const std::vector<std::string>& special_tokens() {
    static const std::vector<std::string> specials{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
    return specials;
  }

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  explicit Vocabulary(std::vector<std::string> code_tokens) {
    for (const auto& s : special_tokens()) add(s);
    for (auto& c : code_tokens) {
      for (const auto& s : special_tokens())
        if (c == s) throw DataError("code token collides with special token " + s);
      add(c);
    }
  }

  int id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& token) const { return ids_.count(token) > 0; }
  const std::string& token(int id) const {
    if (id < 0 || id >= size()) throw LookupError(0, "token id " + std::to_string(id));
    return tokens_[static_cast<std::size_t>(id)];
  }
  int size() const { return static_cast<int>(tokens_.size()); }
  int num_codes() const { return size() - kNumSpecial; }
  bool is_code(int id) const { return id >= kNumSpecial && id < size(); }
  std::vector<std::string> code_tokens() const {
    return {tokens_.begin() + kNumSpecial, tokens_.end()};
  }
  /// Age bins are integer years 0..kMaxAge; the bin id equals the year.
  static constexpr int num_age_bins() { return kMaxAge + 1; }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  void add(const std::string& t) {
    if (t.empty()) throw DataError("empty token");
    if (!ids_.emplace(t, size()).second) throw DataError("duplicate token " + t);
    tokens_.push_back(t);
  }
  std::vector<std::string> tokens_;
  std::map<std::string, int> ids_;
};

enum class Split { kTrain, kValidation };

inline const char* to_string(Split s) { return s == Split::kTrain ? "train" : "validation"; }

struct PatientRecord {
  std::string patient_id;
  std::vector<int> codes;
  std::vector<int> ages;
  std::vector<int> segments;
  std::vector<int> positions;
  int label = 0;
  Split split = Split::kTrain;

  std::size_t length() const { return codes.size(); }
  bool operator==(const PatientRecord&) const = default;
};

struct CohortConfig {
  long n_patients = 2000;
  double positive_rate = 0.083;
  int n_codes = 200;
  int n_risk_codes = 5;
  int visits_min = 2;
  int visits_max = 8;
  int codes_per_visit_min = 1;
  int codes_per_visit_max = 4;
  double noise_rate = 0.1;
  /// Mean of the extra (beyond the first) risk-code occurrences for
  /// positives and for noisy negatives.
  double positive_risk_mean = 2.0;
  double noise_risk_mean = 0.5;
  double train_fraction = 0.7;
  std::uint64_t seed = 1;

  void validate() const {
    if (n_patients < 1) throw ConfigError("cohort.n_patients", "must be >= 1");
    if (!(positive_rate > 0.0 && positive_rate < 1.0))
      throw ConfigError("cohort.positive_rate", "must lie in (0, 1)");
    if (n_codes < 2) throw ConfigError("cohort.n_codes", "must be >= 2");
    if (n_risk_codes < 1 || n_risk_codes >= n_codes)
      throw ConfigError("cohort.n_risk_codes", "must satisfy 1 <= n_risk_codes < n_codes");
    if (visits_min < 1 || visits_max < visits_min)
      throw ConfigError("cohort.visits_per_patient", "empty or non-positive range");
    if (codes_per_visit_min < 1 || codes_per_visit_max < codes_per_visit_min)
      throw ConfigError("cohort.codes_per_visit", "empty or non-positive range");
    if (!(noise_rate >= 0.0 && noise_rate <= 1.0))
      throw ConfigError("cohort.noise_rate", "must lie in [0, 1]");
    if (positive_risk_mean < 0.0) throw ConfigError("cohort.positive_risk_mean", "must be >= 0");
    if (noise_risk_mean < 0.0) throw ConfigError("cohort.noise_risk_mean", "must be >= 0");
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
      throw ConfigError("cohort.train_fraction", "must lie in (0, 1)");
  }
};

struct Cohort {
  Vocabulary vocabulary;
  std::vector<PatientRecord> records;
  /// Token ids of the codes that drive the label.
  std::vector<int> risk_codes;
};

/// Checks every record invariant; throws ValidationError naming the patient.
inline void validate_record(const PatientRecord& r, const Vocabulary& vocab,
                            std::size_t max_len = kMaxSequenceLength) {
  auto fail = [&](const std::string& what) { throw ValidationError(r.patient_id, what); };
  const auto n = r.codes.size();
  if (n == 0) fail("empty sequence");
  if (r.ages.size() != n || r.segments.size() != n || r.positions.size() != n)
    fail("codes/ages/segments/positions lengths differ");
  if (n > max_len) fail("sequence length " + std::to_string(n) + " exceeds " + std::to_string(max_len));
  if (r.codes[0] != Vocabulary::kCls) fail("sequence must begin with [CLS]");
  for (std::size_t i = 0; i < n; ++i) {
    if (r.codes[i] < 0 || r.codes[i] >= vocab.size()) fail("token id out of range at " + std::to_string(i));
    if (r.codes[i] == Vocabulary::kPad) fail("[PAD] inside sequence at " + std::to_string(i));
    if (r.ages[i] < 0 || r.ages[i] > kMaxAge) fail("age bin out of range at " + std::to_string(i));
    if (r.segments[i] != 0 && r.segments[i] != 1) fail("segment not in {0,1} at " + std::to_string(i));
    if (r.positions[i] < 0 || r.positions[i] >= static_cast<int>(max_len))
      fail("position out of range at " + std::to_string(i));
    if (i > 0 && r.positions[i] < r.positions[i - 1]) fail("positions decrease at " + std::to_string(i));
  }
  if (r.label != 0 && r.label != 1) fail("label not in {0,1}");
}

/// Generates a cohort whose label depends on planted risk-code counts.
///
/// Labels are drawn first at `positive_rate`. Positives carry 1 + Poisson
/// (positive_risk_mean) risk-code occurrences; a `noise_rate` fraction of
/// negatives carry 1 + Poisson(noise_risk_mean). Given a count c >= 1 the
/// log-odds of the label is affine in c, so a logistic classifier on counts is
/// Bayes optimal. Each patient draws from its own substream keyed by its index.
inline Cohort generate_cohort(const CohortConfig& cfg) {
  cfg.validate();
  std::vector<std::string> codes;
  codes.reserve(static_cast<std::size_t>(cfg.n_codes));
  for (int i = 0; i < cfg.n_codes; ++i) {
    std::ostringstream os;
    os << "C" << std::setw(4) << std::setfill('0') << i;
    codes.push_back(os.str());
  }
  Cohort cohort{Vocabulary(codes), {}, {}};
  const Vocabulary& vocab = cohort.vocabulary;

  std::vector<int> code_ids(static_cast<std::size_t>(cfg.n_codes));
  std::iota(code_ids.begin(), code_ids.end(), Vocabulary::kNumSpecial);
  {
    Rng rng(derive_seed(cfg.seed, 0x7269736bULL));  // "risk"
    std::shuffle(code_ids.begin(), code_ids.end(), rng.engine());
  }
  cohort.risk_codes.assign(code_ids.begin(), code_ids.begin() + cfg.n_risk_codes);
  std::sort(cohort.risk_codes.begin(), cohort.risk_codes.end());
  std::vector<int> background(code_ids.begin() + cfg.n_risk_codes, code_ids.end());
  std::sort(background.begin(), background.end());

  const auto n = static_cast<std::size_t>(cfg.n_patients);
  std::vector<Split> splits(n, Split::kValidation);
  {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, 0x73706c6974ULL));  // "split"
    std::shuffle(order.begin(), order.end(), rng.engine());
    const auto n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(n)));
    for (std::size_t i = 0; i < n_train; ++i) splits[order[i]] = Split::kTrain;
  }

  cohort.records.reserve(n);
  for (std::size_t p = 0; p < n; ++p) {
    Rng rng(derive_seed(cfg.seed, 0x70617469656e74ULL, p));  // "patient"
    PatientRecord r;
    {
      std::ostringstream os;
      os << "P" << std::setw(7) << std::setfill('0') << p;
      r.patient_id = os.str();
    }
    r.split = splits[p];
    r.label = rng.bernoulli(cfg.positive_rate) ? 1 : 0;

    // History cut at a random visit count; the oldest visits are dropped if
    // the sequence would exceed the maximum length.
    const auto n_visits = static_cast<int>(rng.uniform_int(cfg.visits_min, cfg.visits_max));
    std::vector<int> visit_sizes(static_cast<std::size_t>(n_visits));
    for (auto& v : visit_sizes) v = static_cast<int>(rng.uniform_int(cfg.codes_per_visit_min, cfg.codes_per_visit_max));
    std::size_t first = 0;
    auto total_len = [&](std::size_t from) {
      std::size_t len = 1;
      for (std::size_t v = from; v < visit_sizes.size(); ++v) len += static_cast<std::size_t>(visit_sizes[v]) + 1;
      return len;
    };
    while (first + 1 < visit_sizes.size() && total_len(first) > kMaxSequenceLength) ++first;
    visit_sizes.erase(visit_sizes.begin(), visit_sizes.begin() + static_cast<long>(first));
    while (total_len(0) > kMaxSequenceLength) --visit_sizes.front();

    std::vector<int> slots;
    for (int v : visit_sizes)
      for (int c = 0; c < v; ++c)
        slots.push_back(background[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(background.size()) - 1))]);

    long risk = 0;
    if (r.label == 1) {
      risk = 1 + rng.poisson(cfg.positive_risk_mean);
    } else if (rng.bernoulli(cfg.noise_rate)) {
      risk = 1 + rng.poisson(cfg.noise_risk_mean);
    }
    risk = std::min<long>(risk, static_cast<long>(slots.size()));
    std::vector<std::size_t> slot_order(slots.size());
    std::iota(slot_order.begin(), slot_order.end(), 0);
    std::shuffle(slot_order.begin(), slot_order.end(), rng.engine());
    for (long k = 0; k < risk; ++k) {
      const auto which = rng.uniform_int(0, cfg.n_risk_codes - 1);
      slots[slot_order[static_cast<std::size_t>(k)]] = cohort.risk_codes[static_cast<std::size_t>(which)];
    }

    int age = static_cast<int>(rng.uniform_int(30, 85));
    r.codes.push_back(Vocabulary::kCls);
    r.ages.push_back(age);
    r.segments.push_back(0);
    r.positions.push_back(0);
    std::size_t slot = 0;
    for (std::size_t v = 0; v < visit_sizes.size(); ++v) {
      if (v > 0) age = std::min(kMaxAge, age + static_cast<int>(rng.uniform_int(0, 1)));
      const int seg = static_cast<int>(v % 2);
      const int pos = static_cast<int>(v) + 1;
      for (int c = 0; c <= visit_sizes[v]; ++c) {
        r.codes.push_back(c < visit_sizes[v] ? slots[slot++] : Vocabulary::kSep);
        r.ages.push_back(age);
        r.segments.push_back(seg);
        r.positions.push_back(pos);
      }
    }
    validate_record(r, vocab);
    cohort.records.push_back(std::move(r));
  }
  return cohort;
}

// ---------------------------------------------------------------------------
// Serialization

/// Vocabulary file that accompanies a dataset file: `cohort.jsonl` pairs
/// with `cohort.vocab.tsv`.
inline std::filesystem::path vocabulary_path_for(const std::filesystem::path& dataset) {
  auto p = dataset;
  p.replace_extension(".vocab.tsv");
  return p;
}

inline void write_vocabulary(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "# dbgp vocabulary\n# age_bins " << Vocabulary::num_age_bins() << "\n";
  for (int i = 0; i < vocab.size(); ++i) out << vocab.token(i) << '\t' << i << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

inline Vocabulary read_vocabulary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::string> tokens;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError(lineno, "expected token<TAB>id");
    const std::string token = line.substr(0, tab);
    int id = -1;
    try {
      std::size_t used = 0;
      id = std::stoi(line.substr(tab + 1), &used);
      if (used != line.size() - tab - 1) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw ParseError(lineno, "bad token id");
    }
    if (id != static_cast<int>(tokens.size())) throw ParseError(lineno, "token ids must be dense and ordered");
    tokens.push_back(token);
  }
  const auto& specials = Vocabulary::special_tokens();
  if (tokens.size() < specials.size()) throw DataError("vocabulary lacks special tokens");
  for (std::size_t i = 0; i < specials.size(); ++i)
    if (tokens[i] != specials[i]) throw DataError("special token order mismatch at id " + std::to_string(i));
  return Vocabulary(std::vector<std::string>(tokens.begin() + static_cast<long>(specials.size()), tokens.end()));
}

inline nlohmann::ordered_json record_to_json(const PatientRecord& r) {
  nlohmann::ordered_json j;
  j["patient_id"] = r.patient_id;
  j["codes"] = r.codes;
  j["ages"] = r.ages;
  j["segments"] = r.segments;
  j["positions"] = r.positions;
  j["label"] = r.label;
  j["split"] = to_string(r.split);
  return j;
}

inline PatientRecord record_from_json(const nlohmann::json& j) {
  PatientRecord r;
  r.patient_id = j.at("patient_id").get<std::string>();
  r.codes = j.at("codes").get<std::vector<int>>();
  r.ages = j.at("ages").get<std::vector<int>>();
  r.segments = j.at("segments").get<std::vector<int>>();
  r.positions = j.at("positions").get<std::vector<int>>();
  r.label = j.at("label").get<int>();
  const auto split = j.at("split").get<std::string>();
  if (split == "train")
    r.split = Split::kTrain;
  else if (split == "validation")
    r.split = Split::kValidation;
  else
    throw std::invalid_argument("unknown split '" + split + "'");
  return r;
}

/// Writes one JSON object per line plus the companion vocabulary file.
inline void write_dataset(const std::filesystem::path& path, const Vocabulary& vocab,
                          const std::vector<PatientRecord>& records) {
  for (const auto& r : records) validate_record(r, vocab);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& r : records) out << record_to_json(r).dump() << '\n';
  if (!out) throw IoError("write failed: " + path.string());
  write_vocabulary(vocabulary_path_for(path), vocab);
}

inline std::pair<Vocabulary, std::vector<PatientRecord>> read_dataset(const std::filesystem::path& path) {
  Vocabulary vocab = read_vocabulary(vocabulary_path_for(path));
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<PatientRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    PatientRecord r;
    try {
      r = record_from_json(nlohmann::json::parse(line));
    } catch (const std::exception& e) {
      throw ParseError(lineno, e.what());
    }
    validate_record(r, vocab);
    records.push_back(std::move(r));
  }
  return {std::move(vocab), std::move(records)};
}

}  // namespace dbgp
