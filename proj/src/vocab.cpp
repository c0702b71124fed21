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

#include "qbprf/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include "qbprf/errors.hpp"
#include "qbprf/serialize.hpp"

namespace qbprf {

Vocabulary::Vocabulary() {
  for (const char* tok : {"<pad>", "<unk>", "<bos>", "<eos>", "<mask>"}) add(tok);
}

void Vocabulary::add(const std::string& token) {
  if (token_to_id_.count(token)) throw InternalError("vocabulary: duplicate token " + token);
  token_to_id_.emplace(token, static_cast<int>(id_to_token_.size()));
  id_to_token_.push_back(token);
}

Vocabulary Vocabulary::build(const std::vector<std::string>& texts, size_t max_size) {
  // std::map keeps words sorted so the frequency sort below only has to be
  // stable to get the documented lexicographic tie-break.
  std::map<std::string, int64_t> freq;
  for (const auto& text : texts)
    for (const auto& word : split_words(text)) ++freq[word];

  std::vector<std::pair<std::string, int64_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  Vocabulary vocab;
  for (const auto& [word, count] : ranked) {
    if (max_size != 0 && vocab.size() >= max_size) break;
    if (!vocab.contains(word)) vocab.add(word);
  }
  return vocab;
}

int Vocabulary::id_of(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token_of(int id) const {
  if (id < 0 || static_cast<size_t>(id) >= id_to_token_.size())
    throw InternalError("vocabulary: id out of range: " + std::to_string(id));
  return id_to_token_[static_cast<size_t>(id)];
}

bool Vocabulary::contains(const std::string& token) const { return token_to_id_.count(token) > 0; }

std::string Vocabulary::content_hash() const {
  Fnv1a64 h;
  for (const auto& token : id_to_token_) h.update_string(token);
  return h.hex();
}

void Vocabulary::write(std::ostream& os) const {
  write_u32(os, static_cast<uint32_t>(id_to_token_.size()));
  for (const auto& token : id_to_token_) write_string(os, token);
}

Vocabulary Vocabulary::read(std::istream& is) {
  uint32_t n = read_u32(is);
  if (n < kNumReservedIds) throw InternalError("vocabulary blob smaller than the reserved set");
  Vocabulary vocab;
  for (uint32_t i = 0; i < n; ++i) {
    std::string token = read_string(is);
    if (i < kNumReservedIds) {
      if (token != vocab.id_to_token_[i])
        throw InternalError("vocabulary blob reserved token mismatch: " + token);
    } else {
      vocab.add(token);
    }
  }
  return vocab;
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> words;
  std::string current;
  for (char c : text) {
    auto uc = static_cast<unsigned char>(c);
    bool separator = uc < 0x80 && (std::isspace(uc) || std::ispunct(uc));
    if (separator) {
      if (!current.empty()) {
        words.push_back(std::move(current));
        current.clear();
      }
    } else {
      current.push_back(uc < 0x80 ? static_cast<char>(std::tolower(uc)) : c);
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

std::vector<int> tokenize(const std::string& text, const Vocabulary& vocab, int max_len) {
  if (max_len <= 0) throw InternalError("tokenize: max_len must be positive");
  std::vector<int> ids;
  ids.reserve(static_cast<size_t>(max_len));
  for (const auto& word : split_words(text)) {
    if (static_cast<int>(ids.size()) >= max_len) break;
    ids.push_back(vocab.id_of(word));
  }
  ids.resize(static_cast<size_t>(max_len), kPadId);
  return ids;
}

}  // namespace qbprf
