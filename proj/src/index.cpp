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

#include "qbprf/index.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "qbprf/errors.hpp"
#include "qbprf/serialize.hpp"

namespace qbprf {

int EmbeddingIndex::row_of(int64_t id) const {
  for (size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == id) return static_cast<int>(i);
  return -1;
}

EmbeddingIndex build_index(const std::vector<Query>& queries, const Stage1Checkpoint& ckpt) {
  if (queries.empty()) throw UserError("build_index: no queries");
  if (!ckpt.model) throw InternalError("build_index: empty checkpoint");

  std::unordered_set<int64_t> seen;
  std::vector<std::vector<int>> tokens;
  tokens.reserve(queries.size());
  EmbeddingIndex index;
  index.ids.reserve(queries.size());
  for (const auto& q : queries) {
    if (!seen.insert(q.id).second)
      throw InternalError("build_index: duplicate query id " + std::to_string(q.id));
    index.ids.push_back(q.id);
    tokens.push_back(tokenize(q.text, ckpt.vocab, ckpt.config.max_len));
  }
  index.matrix = embed_batch(*ckpt.model, tokens);
  index.checkpoint_hash = ckpt.model->params().content_hash();
  return index;
}

void verify_index_checkpoint(const EmbeddingIndex& index, const Stage1Checkpoint& ckpt) {
  if (!ckpt.model) throw InternalError("verify_index_checkpoint: empty checkpoint");
  if (index.checkpoint_hash != ckpt.model->params().content_hash())
    throw UserError("embedding index was built by a different encoder (hash " +
                    index.checkpoint_hash + " vs " + ckpt.model->params().content_hash() + ")");
}

RankedList search(const EmbeddingIndex& index, const Eigen::VectorXd& query_vector, int k,
                  int64_t exclude_id) {
  if (index.matrix.rows() != static_cast<Eigen::Index>(index.ids.size()))
    throw InternalError("search: index rows/ids mismatch");
  if (query_vector.size() != index.matrix.cols())
    throw InternalError("search: query vector dimension mismatch");

  std::vector<size_t> rows;
  rows.reserve(index.ids.size());
  for (size_t i = 0; i < index.ids.size(); ++i)
    if (index.ids[i] != exclude_id) rows.push_back(i);
  if (k < 1 || static_cast<size_t>(k) > rows.size())
    throw UserError("search: k = " + std::to_string(k) + " outside [1, " +
                    std::to_string(rows.size()) + "]");

  // Per-row dot products (not a gemv) so scores are bitwise reproducible by
  // the straightforward oracle computation.
  std::vector<double> scores(index.ids.size(), 0.0);
  for (size_t i : rows) scores[i] = index.matrix.row(static_cast<Eigen::Index>(i)).dot(query_vector);

  auto better = [&](size_t a, size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return index.ids[a] < index.ids[b];
  };
  std::partial_sort(rows.begin(), rows.begin() + k, rows.end(), better);

  RankedList out;
  out.query_id = exclude_id;
  out.candidates.reserve(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) {
    size_t row = rows[static_cast<size_t>(i)];
    out.candidates.push_back(ScoredId{index.ids[row], scores[row]});
  }
  return out;
}

RetrievalDiagnostics retrieval_diagnostics(const EmbeddingIndex& index,
                                           const std::vector<QueryBag>& gold_bags, int k) {
  RetrievalDiagnostics diag;
  for (const auto& bag : gold_bags) {
    int row = index.row_of(bag.anchor_id);
    if (row < 0) continue;
    RankedList ranked = search(index, index.matrix.row(row), k, bag.anchor_id);
    std::unordered_set<int64_t> members(bag.member_ids.begin(), bag.member_ids.end());
    int hits = 0;
    for (const auto& c : ranked.candidates) hits += members.count(c.id) ? 1 : 0;
    diag.mean_bag_recall_count += hits;
    diag.candidate_accuracy += static_cast<double>(hits) / static_cast<double>(k);
    ++diag.n_anchors;
  }
  if (diag.n_anchors > 0) {
    diag.mean_bag_recall_count /= diag.n_anchors;
    diag.candidate_accuracy /= diag.n_anchors;
  }
  return diag;
}

namespace {
constexpr uint32_t kIndexMagic = 0x51424958;  // "QBIX"
}

void save_index(const EmbeddingIndex& index, const std::string& prefix) {
  std::ostringstream blob;
  write_u32(blob, kIndexMagic);
  write_u32(blob, kIndexFormatVersion);
  write_matrix(blob, index.matrix);
  write_file(prefix + ".bin", blob.str());

  nlohmann::json sidecar{{"format_version", kIndexFormatVersion},
                         {"ids", index.ids},
                         {"d_z", index.matrix.cols()},
                         {"checkpoint_hash", index.checkpoint_hash}};
  write_file(prefix + ".json", sidecar.dump(2) + "\n");
}

EmbeddingIndex load_index(const std::string& prefix) {
  nlohmann::json sidecar;
  try {
    sidecar = nlohmann::json::parse(read_file(prefix + ".json"));
  } catch (const nlohmann::json::exception& e) {
    throw UserError("index sidecar " + prefix + ".json: " + e.what());
  }
  if (sidecar.at("format_version").get<uint32_t>() != kIndexFormatVersion)
    throw UserError("index " + prefix + " has unsupported format_version");

  std::istringstream blob(read_file(prefix + ".bin"));
  if (read_u32(blob) != kIndexMagic) throw UserError("index " + prefix + ".bin: bad magic");
  if (read_u32(blob) != kIndexFormatVersion)
    throw UserError("index " + prefix + ".bin: unsupported format_version");

  EmbeddingIndex index;
  index.matrix = read_matrix(blob);
  index.ids = sidecar.at("ids").get<std::vector<int64_t>>();
  index.checkpoint_hash = sidecar.at("checkpoint_hash").get<std::string>();
  if (index.matrix.rows() != static_cast<Eigen::Index>(index.ids.size()))
    throw UserError("index " + prefix + ": row count does not match id count");
  if (sidecar.at("d_z").get<Eigen::Index>() != index.matrix.cols())
    throw UserError("index " + prefix + ": dimension mismatch with sidecar");
  for (Eigen::Index i = 0; i < index.matrix.rows(); ++i)
    if (std::abs(index.matrix.row(i).norm() - 1.0) > 1e-6)
      throw UserError("index " + prefix + ": row " + std::to_string(i) + " is not unit-norm");
  return index;
}

}  // namespace qbprf
