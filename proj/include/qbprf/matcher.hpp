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
#include <utility>
#include <vector>

#include "qbprf/attention.hpp"
#include "qbprf/autograd.hpp"
#include "qbprf/index.hpp"
#include "qbprf/params.hpp"
#include "qbprf/qbf.hpp"
#include "qbprf/rng.hpp"

namespace qbprf {

// Downstream matching head: joins a (possibly fused) query representation
// with a candidate question through a small self-attention encoder and emits
// a match probability. The head never branches on where the query
// representation came from.
struct MatcherConfig {
  int d_model = 768;      // must equal the fusion width
  int heads = 8;
  int layers = 2;
  double dropout = 0.1;
  int vocab_size = 0;     // candidate-side token embedding rows
  int max_positions = 0;  // longest joined sequence the position table supports
  int ffn_dim = 0;        // 0 -> 4 * d_model

  int effective_ffn_dim() const { return ffn_dim > 0 ? ffn_dim : 4 * d_model; }
  // Throws UserError when a field is out of its documented range.
  void validate() const;
};

class MatcherModel {
 public:
  MatcherModel(const MatcherConfig& config, Rng& init_rng);

  // Tape-level match probability, a 1x1 node strictly inside (0,1). The
  // joined sequence is [fused rows | separator | candidate token embeddings]
  // with segment markers for the two sides and learned positions; fused_keep
  // masks padded fused rows, candidate padding is masked from its tokens.
  ag::Var match_score(ag::Graph& g, ag::Var fused_seq, const Eigen::VectorXd& fused_keep,
                      const std::vector<int>& candidate_tokens, bool train, Rng* rng) const;

  // Inference wrapper over match_score.
  double match_score_value(const FusedQuery& fused, const std::vector<int>& candidate_tokens) const;

  // Copies a pretrained token table (one row per vocabulary id) into the
  // leading columns of the embedding; extra columns keep their random
  // initialization, and the table stays trainable. Starting from
  // representations that already organize the corpus keeps the matcher from
  // having to learn token identity out of the matching labels alone — the
  // small-scale counterpart of building on a pretrained language model.
  // Throws InternalError when the row count does not match the vocabulary.
  void seed_token_embedding(const Eigen::MatrixXd& table);

  const MatcherConfig& config() const { return config_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  MatcherConfig config_;
  ParamSet params_;
  Tensor* embedding_;  // vocab_size x d_model
  Tensor* sep_;        // 1 x d_model separator marker
  Tensor* segment_;    // 2 x d_model: row 0 = query side, row 1 = candidate side
  Tensor* position_;   // max_positions x d_model
  std::vector<TransformerLayerParams> stack_;
  Tensor *W_p_, *b_p_;  // pooled projection
  Tensor *w_o_, *b_o_;  // probability head
};

// Mean binary cross entropy -[y log yh + (1-y) log(1-yh)] over the batch;
// y_hat is (n x 1) on the tape and is clamped to [1e-7, 1-1e-7] before the
// logs. labels must be exactly 0 or 1.
ag::Var loss_ce(ag::Graph& g, ag::Var y_hat, const std::vector<double>& labels);

// Sorts (id, score) pairs by descending score, ties by ascending id.
RankedList rank_scored(int64_t query_id, std::vector<ScoredId> scored);

// Scores every candidate against the fused query and ranks them.
RankedList rank_candidates(const MatcherModel& model, int64_t query_id, const FusedQuery& fused,
                           const std::vector<std::pair<int64_t, std::vector<int>>>& candidates);

}  // namespace qbprf
