/*
 * Copyright 2026 The AutoMap Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace automap {

inline constexpr const char* kVersion = "1.0.0";

/// Base error for every failed precondition or malformed input in the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream os;
  (os << ... << std::forward<Args>(args));
  return os.str();
}

}  // namespace detail

template <typename... Args>
[[noreturn]] void fail(Args&&... args) {
  throw Error(detail::concat(std::forward<Args>(args)...));
}

template <typename... Args>
void require(bool cond, Args&&... args) {
  if (!cond) fail(std::forward<Args>(args)...);
}

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent seed for a named stage from a global seed.
/// Adding a new stream never perturbs the seeds of existing ones.
inline std::uint64_t stream_seed(std::uint64_t seed, std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(seed ^ splitmix64(h));
}

inline Rng make_rng(std::uint64_t seed, std::string_view stream) {
  return Rng(stream_seed(seed, stream));
}

/// Comma-separated table with a header row; fields hold no quoting.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    fail("CSV has no column '", name, "'");
  }
};

inline std::vector<std::string> split_fields(const std::string& line, char sep = ',') {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, sep)) out.push_back(field);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

inline CsvTable read_csv(const std::string& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), "cannot open ", path);
  CsvTable t;
  std::string line;
  require(static_cast<bool>(std::getline(is, line)), path, ": missing header row");
  t.header = split_fields(line);
  for (std::size_t n = 2; std::getline(is, line); ++n) {
    if (line.empty()) continue;
    auto f = split_fields(line);
    require(f.size() == t.header.size(), path, ":", n, ": expected ", t.header.size(), " fields, got ", f.size());
    t.rows.push_back(std::move(f));
  }
  return t;
}

inline double parse_double(const std::string& s, std::string_view what = "value") {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    fail("invalid ", what, " '", s, "'");
  }
  require(used == s.size(), "invalid ", what, " '", s, "'");
  return v;
}

}  // namespace automap
