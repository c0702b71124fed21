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

#include "qbprf/autograd.hpp"
#include "qbprf/data.hpp"
#include "qbprf/params.hpp"
#include "qbprf/rng.hpp"

namespace qbprf {

// Candidate selector: scores each retrieved question against the query with
// a residual BiLSTM over the concatenated encoder-state sequences and a
// two-layer classifier, then keeps the top scorers as the query's bag.
struct QbsConfig {
  int bilstm_hidden = 128;
  double dropout = 0.5;           // on the pooled classifier input, training only
  int bag_size = 5;               // how many candidates survive selection
  double tau = 0.7;               // contrastive temperature
  double tau1 = 1e-4;             // reward-loss numerator floor
  double tau2 = 1e-3;             // reward-loss denominator floor
  bool in_batch_negatives = true; // false restricts the contrast set to the anchor's own bag

  // Throws UserError when a field is out of its documented range.
  void validate() const;
};

// Per-candidate selection verdict. probs[i] is the "select" coordinate of a
// two-way softmax, so it lies strictly inside (0,1); selected marks the
// top-min(bag_size, k) candidates by prob, ties broken by ascending id.
struct SelectorOutput {
  std::vector<int64_t> candidate_ids;
  std::vector<double> probs;
  std::vector<bool> selected;
};

class QbsModel {
 public:
  // state_dim is the width of one encoder state row (the representation
  // model's bidirectional hidden size).
  QbsModel(const QbsConfig& config, int state_dim, Rng& init_rng);

  // Tape-level scoring used during joint training. query_states and each
  // candidate_states[i] are (L x state_dim) sequences already on the tape;
  // the result is a (k x 1) column of selection probabilities in candidate
  // order. Throws InternalError when candidates are empty (retrieval never
  // hands over an empty list).
  ag::Var probs_on_tape(ag::Graph& g, ag::Var query_states,
                        const std::vector<ag::Var>& candidate_states, bool train,
                        Rng* dropout_rng) const;

  // Inference wrapper: evaluation mode, materialized matrices in and plain
  // numbers out. Every call bumps score_calls() (ablation bookkeeping).
  SelectorOutput score_candidates(const ag::Matrix& query_states,
                                  const std::vector<int64_t>& candidate_ids,
                                  const std::vector<ag::Matrix>& candidate_states) const;

  int64_t score_calls() const { return score_calls_; }
  void reset_score_calls() const { score_calls_ = 0; }

  const QbsConfig& config() const { return config_; }
  int state_dim() const { return state_dim_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  struct LstmDir {
    Tensor *Wi, *Ui, *bi, *Wf, *Uf, *bf, *Wg, *Ug, *bg, *Wo, *Uo, *bo;
  };
  LstmDir make_lstm(const std::string& prefix, int in_dim, int hidden, Rng& rng);
  // One batched cell update; x is (k x in_dim), h and c are (k x hidden).
  std::pair<ag::Var, ag::Var> lstm_step(ag::Graph& g, const LstmDir& p, ag::Var x, ag::Var h,
                                        ag::Var c) const;

  QbsConfig config_;
  int state_dim_;
  ParamSet params_;
  LstmDir fwd_, bwd_;
  Tensor *W_res_, *b_res_;   // input projection for the residual connection
  Tensor *W_c1_, *b_c1_;     // classifier hidden layer
  Tensor *W_c2_, *b_c2_;     // classifier output layer (2 logits)
  mutable int64_t score_calls_ = 0;
};

// Marks the top-min(bag_size, k) candidates by probability, ties broken by
// ascending id. Exposed for reuse by select_bag and the trainer.
std::vector<bool> top_selection(const std::vector<int64_t>& ids, const std::vector<double>& probs,
                                int bag_size);

// Materializes the selection as a bag. Members are listed in ascending id
// order; gold flags are left false (the caller owns gold annotation).
QueryBag select_bag(const SelectorOutput& output, int bag_size, int64_t anchor_id);

// Multi-positive contrastive selection loss: mean over pseudo-positives p of
//   -log( exp(q.b_p / tau) / sum_i exp(q.b_i / tau) )
// where i ranges over the anchor's candidates plus any extra in-batch
// negatives. All embeddings are L2-normalized internally, so the scores are
// cosines. query_emb is (1 x d); candidate_embs is (k x d);
// pseudo_positive_mask has one flag per candidate. extra_negatives may be
// null; when present it is (m x d). Throws UserError when the mask is
// all-true or all-false.
ag::Var loss_bag_infonce(ag::Graph& g, ag::Var query_emb, ag::Var candidate_embs,
                         const std::vector<bool>& pseudo_positive_mask, double tau,
                         ag::Var extra_negatives = nullptr);

// Selection reward loss:
//   -log( (sum_i probs_i * sim_i + tau1) / (sum_i probs_i + tau2) )
// with sim_i = (1 + cos(query, candidate_i)) / 2 in [0,1]. probs is (k x 1)
// on the tape (gradients flow into both the probabilities and the
// embeddings).
ag::Var loss_reward(ag::Graph& g, ag::Var query_emb, ag::Var candidate_embs, ag::Var probs,
                    double tau1, double tau2);

// Pseudo-positive labelling rule for loss_bag_infonce: flags candidates
// whose cosine to their anchor exceeds the median cosine of the whole batch
// (one entry per anchor/candidate pair, concatenated in batch order).
// Degenerate masks (an anchor with no positive or no negative) are repaired
// by flagging exactly that anchor's highest-cosine candidate (ties by lowest
// index) as the sole positive; single-candidate anchors stay degenerate and
// must be skipped by the caller.
std::vector<std::vector<bool>> pseudo_positive_masks(
    const std::vector<std::vector<double>>& cosines);

}  // namespace qbprf
