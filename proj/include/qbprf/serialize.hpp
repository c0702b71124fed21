// Copyright 2026 The qbprf authors
//
// Licensed under the Apache License, Version 2.0 (the "License"); you may not use this file except in compliance
// with the License. You may obtain a copy of the License at
//
// http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software distributed under the License
// is distributed on an "AS IS" BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express
// or implied. See the License for the specific language governing permissions and limitations under the License.

#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace qbprf {

// All binary artifacts are written little-endian regardless of host order so
// that files are portable and their hashes stable across machines.

void write_u32(std::ostream& os, uint32_t v);
void write_u64(std::ostream& os, uint64_t v);
void write_f64(std::ostream& os, double v);
void write_string(std::ostream& os, const std::string& s);
void write_matrix(std::ostream& os, const Eigen::MatrixXd& m);

uint32_t read_u32(std::istream& is);
uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
std::string read_string(std::istream& is);
Eigen::MatrixXd read_matrix(std::istream& is);

// Incremental FNV-1a (64-bit) hash used to fingerprint binary artifacts.
class Fnv1a64 {
 public:
  void update(const void* data, size_t len);
  void update_string(const std::string& s);
  void update_u64(uint64_t v);
  void update_matrix(const Eigen::MatrixXd& m);
  uint64_t digest() const { return state_; }
  // Digest formatted as 16 lowercase hex characters.
  std::string hex() const;

 private:
  uint64_t state_ = 0xcbf29ce484222325ULL;
};

// Hash of a file's raw bytes; throws UserError if the file cannot be read.
std::string hash_file(const std::string& path);

// Reads an entire file into a string; throws UserError on failure.
std::string read_file(const std::string& path);

// Writes a string to a file atomically-ish (truncate + write); throws UserError on failure.
void write_file(const std::string& path, const std::string& content);

}  // namespace qbprf
