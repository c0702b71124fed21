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

#include <string>
#include <vector>

#include "qbprf/attention.hpp"
#include "qbprf/autograd.hpp"
#include "qbprf/params.hpp"
#include "qbprf/rng.hpp"

namespace qbprf {

// Fusion of the query with its bag: cross-attention of the query over each
// member, aggregation across members, then a self-attention stack over the
// concatenated (query + cross-attended) sequence.
struct QbfConfig {
  int d_model = 768;
  int heads = 8;
  int layers = 2;      // self-attention stack depth
  double dropout = 0.1;
  enum class Aggregation { kMean, kSum };
  Aggregation aggregation = Aggregation::kMean;  // kSum reproduces the additive formula exactly
  int ffn_dim = 0;     // 0 -> 4 * d_model

  int effective_ffn_dim() const { return ffn_dim > 0 ? ffn_dim : 4 * d_model; }
  // Throws UserError when a field is out of its documented range.
  void validate() const;
};

// Where a fused representation came from: the full fusion stack, the
// summation ablation, or no fusion at all (bagless query). Consumers must
// treat all three uniformly.
enum class FusionProvenance { kQbf, kSumAblation, kNone };

// A refined query representation handed to the matcher. The sequence is
// 2L x d_model for kQbf (query half then cross-attended half) and
// L x d_model otherwise; keep flags one entry per row (0 = padding, skip in
// pooling and attention).
struct FusedQuery {
  ag::Matrix sequence;
  Eigen::VectorXd keep;
  FusionProvenance provenance = FusionProvenance::kNone;
};

class QbfModel {
 public:
  // state_dim is the width of the incoming encoder states; they are
  // projected to d_model before any attention.
  QbfModel(const QbfConfig& config, int state_dim, Rng& init_rng);

  // Linear projection of raw encoder states into the fusion width.
  ag::Var project_in(ag::Graph& g, ag::Var states) const;

  // Multi-head attention of the query over each bag member (queries from
  // q_proj, keys/values from the member), aggregated across members by the
  // configured reduction. All sequences must already be projected. keeps
  // holds one 0/1 column per member masking its padding rows (empty vector =
  // keep everything). attn_out, when non-null, collects every head's weight
  // matrix of every member. Throws InternalError on an empty bag: the caller
  // must route bagless queries to FusionProvenance::kNone instead.
  ag::Var cross_attend(ag::Graph& g, ag::Var q_proj, const std::vector<ag::Var>& member_projs,
                       const std::vector<Eigen::VectorXd>& keeps, bool train, Rng* rng,
                       std::vector<ag::Matrix>* attn_out = nullptr) const;

  // Concatenates the query and cross-attended sequences along time (2L
  // rows), adds segment embeddings marking the two halves, and runs the
  // post-norm self-attention stack. q_keep masks the query's padding rows;
  // the same mask applies to the cross-attended half.
  ag::Var self_attend(ag::Graph& g, ag::Var q_proj, ag::Var ca_seq, const Eigen::VectorXd& q_keep,
                      bool train, Rng* rng) const;

  // Inference wrapper over project_in + cross_attend + self_attend.
  FusedQuery fuse(const ag::Matrix& q_states, const Eigen::VectorXd& q_keep,
                  const std::vector<ag::Matrix>& member_states,
                  const std::vector<Eigen::VectorXd>& member_keeps) const;

  // Projection + masked mean over kept rows, the pooled form consumed by the
  // summation ablation.
  ag::Var pool_states(ag::Graph& g, ag::Var states, const Eigen::VectorXd& keep) const;

  const QbfConfig& config() const { return config_; }
  int state_dim() const { return state_dim_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  QbfConfig config_;
  int state_dim_;
  ParamSet params_;
  Tensor *W_in_, *b_in_;
  Tensor* segment_;  // 2 x d_model: row 0 = query half, row 1 = fused half
  MhaParams cross_;
  std::vector<TransformerLayerParams> stack_;
};

// Summation ablation on the tape: every output row equals
// q_vec + sum(bag_vecs), repeated len times (an empty bag returns q_vec
// unchanged). q_vec and each bag vector are 1 x d rows.
ag::Var fuse_sum_rows(ag::Graph& g, ag::Var q_vec, const std::vector<ag::Var>& bag_vecs, int len);

// Materialized variant, provenance kSumAblation, all rows kept.
FusedQuery fuse_sum(const Eigen::RowVectorXd& q_vec, const std::vector<Eigen::RowVectorXd>& bag_vecs,
                    int len);

// Name round-trip for the aggregation mode ("mean"/"sum"), shared by
// checkpoint manifests and configuration files. The parser throws UserError
// on anything else.
const char* aggregation_name(QbfConfig::Aggregation a);
QbfConfig::Aggregation aggregation_from_name(const std::string& name);

}  // namespace qbprf
