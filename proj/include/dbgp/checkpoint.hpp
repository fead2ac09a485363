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

// JSON serialization of named parameter blocks.

#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "dbgp/error.hpp"
#include "dbgp/linalg.hpp"
#include "dbgp/params.hpp"

namespace dbgp {

using Json = nlohmann::ordered_json;

inline Json matrix_to_json(const Matrix& m) {
  Json j;
  j["rows"] = m.rows();
  j["cols"] = m.cols();
  std::vector<double> data(static_cast<std::size_t>(m.size()));
  // row-major on disk
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) data[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
  j["data"] = data;
  return j;
}

inline Matrix matrix_from_json(const Json& j, const std::string& name) {
  try {
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const auto data = j.at("data").get<std::vector<double>>();
    if (rows < 0 || cols < 0 || static_cast<Eigen::Index>(data.size()) != rows * cols)
      throw DataError("block " + name + ": data length does not match shape");
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = data[static_cast<std::size_t>(r * cols + c)];
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("block " + name + ": " + e.what());
  }
}

inline Json parameters_to_json(const ParameterSet& params) {
  Json blocks = Json::array();
  for (const auto& p : params) {
    Json b = matrix_to_json(p.value);
    b["name"] = p.name;
    blocks.push_back(std::move(b));
  }
  return blocks;
}

/// Reads blocks into a parameter set, adding blocks that are absent.
inline void parameters_from_json(const Json& blocks, ParameterSet& params) {
  for (const auto& b : blocks) {
    const auto name = b.at("name").get<std::string>();
    Matrix m = matrix_from_json(b, name);
    if (params.contains(name)) {
      auto& p = params.at(name);
      if (p.value.rows() != m.rows() || p.value.cols() != m.cols())
        throw DimensionError("checkpoint block " + name + " has shape " + std::to_string(m.rows()) + "x" +
                             std::to_string(m.cols()) + ", expected " + std::to_string(p.value.rows()) + "x" +
                             std::to_string(p.value.cols()));
      p.value = std::move(m);
      p.zero_grad();
    } else {
      params.add(name, std::move(m));
    }
  }
}

/// Copies every block of `src` whose name and shape exist in `dst`; returns
/// the number of blocks copied. Shape mismatches are errors.
inline std::size_t copy_matching(const ParameterSet& src, ParameterSet& dst, const std::string& prefix = "") {
  std::size_t copied = 0;
  for (const auto& p : src) {
    if (p.name.rfind(prefix, 0) != 0 || !dst.contains(p.name)) continue;
    auto& d = dst.at(p.name);
    if (d.value.rows() != p.value.rows() || d.value.cols() != p.value.cols())
      throw DimensionError("block " + p.name + " differs in shape from the pretrained checkpoint");
    d.value = p.value;
    ++copied;
  }
  return copied;
}

inline void write_json_file(const std::filesystem::path& path, const Json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump(1) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

inline Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(0, path.string() + ": " + e.what());
  }
}

}  // namespace dbgp
