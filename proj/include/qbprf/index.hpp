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
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qbprf/data.hpp"
#include "qbprf/vae.hpp"

namespace qbprf {

// Dense embedding store with exact top-k cosine search. Rows are
// L2-normalized and aligned with ids; checkpoint_hash records which encoder
// produced them.
struct EmbeddingIndex {
  std::vector<int64_t> ids;
  Eigen::MatrixXd matrix;  // |ids| x d_z
  std::string checkpoint_hash;

  // Row index of a query id, or -1 when absent.
  int row_of(int64_t id) const;
};

struct ScoredId {
  int64_t id = 0;
  double score = 0;
};

// Candidates ordered by descending cosine, ties broken by ascending id;
// query_id itself never appears among the candidates.
struct RankedList {
  int64_t query_id = -1;
  std::vector<ScoredId> candidates;
};

// Encodes every query with the checkpoint's deterministic embedding and
// stacks the rows in input order. Throws InternalError on duplicate ids.
EmbeddingIndex build_index(const std::vector<Query>& queries, const Stage1Checkpoint& ckpt);

// Fails (UserError) when the index was built by a different encoder than ckpt.
void verify_index_checkpoint(const EmbeddingIndex& index, const Stage1Checkpoint& ckpt);

// Exact top-k by cosine over all rows (excluding exclude_id when present in
// the index). Throws UserError when k is outside [1, available rows].
RankedList search(const EmbeddingIndex& index, const Eigen::VectorXd& query_vector, int k,
                  int64_t exclude_id = -1);

// Retrieval quality against gold bags: for each bag anchor present in the
// index, search its own embedding (self excluded) and count true members in
// the top k. mean_bag_recall_count averages that count over anchors;
// candidate_accuracy averages count / k.
struct RetrievalDiagnostics {
  double mean_bag_recall_count = 0;
  double candidate_accuracy = 0;
  int n_anchors = 0;
};
RetrievalDiagnostics retrieval_diagnostics(const EmbeddingIndex& index,
                                           const std::vector<QueryBag>& gold_bags, int k);

// Persistence: <prefix>.bin (magic, format version, matrix) + <prefix>.json
// sidecar {format_version, ids, d_z, checkpoint_hash}. The loader rejects
// foreign format versions, row/id count mismatches, and non-unit rows.
constexpr uint32_t kIndexFormatVersion = 1;
void save_index(const EmbeddingIndex& index, const std::string& prefix);
EmbeddingIndex load_index(const std::string& prefix);

}  // namespace qbprf
