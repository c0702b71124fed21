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

#include <istream>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

namespace qbprf {

// Reserved vocabulary ids. PAD fills short sequences, UNK replaces
// out-of-vocabulary words, BOS/EOS bracket decoder inputs, MASK replaces
// dropped decoder inputs during reconstruction training.
constexpr int kPadId = 0;
constexpr int kUnkId = 1;
constexpr int kBosId = 2;
constexpr int kEosId = 3;
constexpr int kMaskId = 4;
constexpr int kNumReservedIds = 5;

// Token -> dense id map. Ids are dense in [0, size()); ids below
// kNumReservedIds are fixed special tokens.
class Vocabulary {
 public:
  Vocabulary();

  // Builds from raw texts: words ranked by descending frequency, ties broken
  // lexicographically. max_size of 0 means unbounded; otherwise the total
  // size including reserved ids is capped at max_size.
  static Vocabulary build(const std::vector<std::string>& texts, size_t max_size = 0);

  // Id for a token; kUnkId when absent.
  int id_of(const std::string& token) const;
  const std::string& token_of(int id) const;
  bool contains(const std::string& token) const;
  size_t size() const { return id_to_token_.size(); }

  // Fingerprint over the full id -> token table.
  std::string content_hash() const;

  void write(std::ostream& os) const;
  static Vocabulary read(std::istream& is);

 private:
  void add(const std::string& token);

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

// Lowercases and splits on whitespace and punctuation (punctuation is
// dropped). Bytes outside ASCII are kept as ordinary word characters.
std::vector<std::string> split_words(const std::string& text);

// Fixed-length encoding: split_words, map through vocab (OOV -> UNK),
// truncate to max_len, right-pad with PAD to exactly max_len.
std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab, int max_len);

}  // namespace qbprf
