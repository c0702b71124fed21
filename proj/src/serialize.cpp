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

#include "qbprf/serialize.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "qbprf/errors.hpp"

namespace qbprf {

namespace {

// Host doubles are assumed IEEE-754; we byte-swap only on big-endian hosts.
bool host_is_little_endian() {
  uint16_t probe = 1;
  uint8_t first;
  std::memcpy(&first, &probe, 1);
  return first == 1;
}

template <typename T>
T to_le(T v) {
  if (host_is_little_endian()) return v;
  T out;
  auto* src = reinterpret_cast<const uint8_t*>(&v);
  auto* dst = reinterpret_cast<uint8_t*>(&out);
  for (size_t i = 0; i < sizeof(T); ++i) dst[i] = src[sizeof(T) - 1 - i];
  return out;
}

void require_good(std::istream& is, const char* what) {
  if (!is.good()) throw InternalError(std::string("deserialize: truncated or corrupt stream reading ") + what);
}

}  // namespace

void write_u32(std::ostream& os, uint32_t v) {
  uint32_t le = to_le(v);
  os.write(reinterpret_cast<const char*>(&le), sizeof(le));
}

void write_u64(std::ostream& os, uint64_t v) {
  uint64_t le = to_le(v);
  os.write(reinterpret_cast<const char*>(&le), sizeof(le));
}

void write_f64(std::ostream& os, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  write_u64(os, bits);
}

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void write_matrix(std::ostream& os, const Eigen::MatrixXd& m) {
  write_u32(os, static_cast<uint32_t>(m.rows()));
  write_u32(os, static_cast<uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) write_f64(os, m(i, j));
}

uint32_t read_u32(std::istream& is) {
  uint32_t le;
  is.read(reinterpret_cast<char*>(&le), sizeof(le));
  require_good(is, "u32");
  return to_le(le);
}

uint64_t read_u64(std::istream& is) {
  uint64_t le;
  is.read(reinterpret_cast<char*>(&le), sizeof(le));
  require_good(is, "u64");
  return to_le(le);
}

double read_f64(std::istream& is) {
  uint64_t bits = read_u64(is);
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

std::string read_string(std::istream& is) {
  uint32_t n = read_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  require_good(is, "string");
  return s;
}

Eigen::MatrixXd read_matrix(std::istream& is) {
  uint32_t rows = read_u32(is);
  uint32_t cols = read_u32(is);
  Eigen::MatrixXd m(rows, cols);
  for (uint32_t i = 0; i < rows; ++i)
    for (uint32_t j = 0; j < cols; ++j) m(i, j) = read_f64(is);
  return m;
}

void Fnv1a64::update(const void* data, size_t len) {
  const auto* bytes = static_cast<const uint8_t*>(data);
  for (size_t i = 0; i < len; ++i) {
    state_ ^= bytes[i];
    state_ *= 0x100000001b3ULL;
  }
}

void Fnv1a64::update_string(const std::string& s) {
  uint64_t n = s.size();
  update_u64(n);
  update(s.data(), s.size());
}

void Fnv1a64::update_u64(uint64_t v) {
  uint8_t buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<uint8_t>((v >> (8 * i)) & 0xff);
  update(buf, 8);
}

void Fnv1a64::update_matrix(const Eigen::MatrixXd& m) {
  update_u64(static_cast<uint64_t>(m.rows()));
  update_u64(static_cast<uint64_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      uint64_t bits;
      double v = m(i, j);
      std::memcpy(&bits, &v, sizeof(bits));
      update_u64(bits);
    }
}

std::string Fnv1a64::hex() const {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 0; i < 16; ++i) out[15 - i] = digits[(state_ >> (4 * i)) & 0xf];
  return out;
}

std::string hash_file(const std::string& path) {
  std::string content = read_file(path);
  Fnv1a64 h;
  h.update(content.data(), content.size());
  return h.hex();
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UserError("cannot open file for reading: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UserError("cannot open file for writing: " + path);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw UserError("failed writing file: " + path);
}

}  // namespace qbprf
