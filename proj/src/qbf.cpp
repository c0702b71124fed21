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

#include "qbprf/qbf.hpp"

#include <utility>

#include "qbprf/errors.hpp"

namespace qbprf {

namespace A = ag;

void QbfConfig::validate() const {
  if (d_model < 1) throw UserError("fusion config: d_model must be >= 1");
  if (heads < 1) throw UserError("fusion config: heads must be >= 1");
  if (d_model % heads != 0) throw UserError("fusion config: heads must divide d_model");
  if (layers < 1) throw UserError("fusion config: layers must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw UserError("fusion config: dropout must be in [0,1)");
  if (ffn_dim < 0) throw UserError("fusion config: ffn_dim must be >= 0");
}

QbfModel::QbfModel(const QbfConfig& config, int state_dim, Rng& init_rng)
    : config_(config), state_dim_(state_dim) {
  config_.validate();
  if (state_dim < 1) throw UserError("fusion: state_dim must be >= 1");
  W_in_ = &params_.create("qbf.in.w", init_xavier(state_dim, config_.d_model, init_rng));
  b_in_ = &params_.create("qbf.in.b", init_zeros(1, config_.d_model));
  segment_ = &params_.create("qbf.segment", init_normal(2, config_.d_model, 0.02, init_rng));
  cross_ = make_mha_params(params_, "qbf.cross", config_.d_model, init_rng);
  for (int l = 0; l < config_.layers; ++l) {
    stack_.push_back(make_transformer_layer_params(params_, "qbf.sa" + std::to_string(l),
                                                   config_.d_model, config_.effective_ffn_dim(),
                                                   init_rng));
  }
}

A::Var QbfModel::project_in(A::Graph& g, A::Var states) const {
  if (states->value.cols() != state_dim_) throw InternalError("fusion: state width mismatch");
  return A::add_rowvec(g, A::matmul(g, states, use(g, *W_in_)), use(g, *b_in_));
}

A::Var QbfModel::cross_attend(A::Graph& g, A::Var q_proj, const std::vector<A::Var>& member_projs,
                              const std::vector<Eigen::VectorXd>& keeps, bool train, Rng* rng,
                              std::vector<A::Matrix>* attn_out) const {
  if (member_projs.empty()) {
    throw InternalError("fusion: empty bag (route bagless queries to provenance none)");
  }
  if (!keeps.empty() && keeps.size() != member_projs.size()) {
    throw InternalError("fusion: one keep mask per member required");
  }
  const bool drop = train && config_.dropout > 0.0;
  if (drop && rng == nullptr) throw InternalError("fusion: dropout requested without an rng");

  A::Var sum = nullptr;
  for (size_t i = 0; i < member_projs.size(); ++i) {
    const Eigen::VectorXd* keep = keeps.empty() ? nullptr : &keeps[i];
    A::Var one =
        multi_head_attention(g, cross_, config_.heads, q_proj, member_projs[i], keep, attn_out);
    sum = sum == nullptr ? one : A::add(g, sum, one);
  }
  if (config_.aggregation == QbfConfig::Aggregation::kMean) {
    sum = A::scale(g, sum, 1.0 / static_cast<double>(member_projs.size()));
  }
  if (drop) sum = A::dropout(g, sum, config_.dropout, true, *rng);
  return sum;
}

A::Var QbfModel::self_attend(A::Graph& g, A::Var q_proj, A::Var ca_seq,
                             const Eigen::VectorXd& q_keep, bool train, Rng* rng) const {
  const auto L = q_proj->value.rows();
  if (ca_seq->value.rows() != L || ca_seq->value.cols() != q_proj->value.cols()) {
    throw InternalError("fusion: query and cross-attended shapes differ");
  }
  if (q_keep.size() != L) throw InternalError("fusion: query keep mask length mismatch");

  A::Var seq = A::concat_rows(g, {q_proj, ca_seq});
  // Segment embeddings: rows [0, L) come from the query, rows [L, 2L) from
  // the cross-attended half.
  std::vector<int> seg_idx(static_cast<size_t>(2 * L), 1);
  for (Eigen::Index t = 0; t < L; ++t) seg_idx[static_cast<size_t>(t)] = 0;
  seq = A::add(g, seq, A::rows_gather(g, use(g, *segment_), seg_idx));

  // A cross-attended row is meaningful exactly where its query row is.
  Eigen::VectorXd keep(2 * L);
  keep.head(L) = q_keep;
  keep.tail(L) = q_keep;
  for (const auto& layer : stack_) {
    seq = transformer_layer(g, layer, config_.heads, seq, &keep, config_.dropout, train, rng);
  }
  return seq;
}

FusedQuery QbfModel::fuse(const A::Matrix& q_states, const Eigen::VectorXd& q_keep,
                          const std::vector<A::Matrix>& member_states,
                          const std::vector<Eigen::VectorXd>& member_keeps) const {
  A::Graph g;
  A::Var q_proj = project_in(g, g.constant(q_states));
  std::vector<A::Var> members;
  members.reserve(member_states.size());
  for (const auto& m : member_states) members.push_back(project_in(g, g.constant(m)));
  A::Var ca = cross_attend(g, q_proj, members, member_keeps, false, nullptr);
  A::Var fused = self_attend(g, q_proj, ca, q_keep, false, nullptr);

  FusedQuery out;
  out.sequence = fused->value;
  out.keep.resize(2 * q_keep.size());
  out.keep.head(q_keep.size()) = q_keep;
  out.keep.tail(q_keep.size()) = q_keep;
  out.provenance = FusionProvenance::kQbf;
  return out;
}

A::Var QbfModel::pool_states(A::Graph& g, A::Var states, const Eigen::VectorXd& keep) const {
  if (keep.size() != states->value.rows()) {
    throw InternalError("fusion: keep mask length mismatch");
  }
  std::vector<int> kept;
  for (Eigen::Index t = 0; t < keep.size(); ++t) {
    if (keep(t) > 0.0) kept.push_back(static_cast<int>(t));
  }
  if (kept.empty()) throw InternalError("fusion: cannot pool a fully padded sequence");
  A::Var proj = project_in(g, states);
  return A::mean_rows(g, A::rows_gather(g, proj, kept));
}

A::Var fuse_sum_rows(A::Graph& g, A::Var q_vec, const std::vector<A::Var>& bag_vecs, int len) {
  if (q_vec->value.rows() != 1) throw InternalError("fusion sum: q_vec must be one row");
  if (len < 1) throw InternalError("fusion sum: len must be >= 1");
  A::Var sum = q_vec;
  for (A::Var b : bag_vecs) sum = A::add(g, sum, b);
  std::vector<int> idx(static_cast<size_t>(len), 0);
  return A::rows_gather(g, sum, idx);
}

FusedQuery fuse_sum(const Eigen::RowVectorXd& q_vec, const std::vector<Eigen::RowVectorXd>& bag_vecs,
                    int len) {
  A::Graph g;
  std::vector<A::Var> bags;
  bags.reserve(bag_vecs.size());
  for (const auto& b : bag_vecs) bags.push_back(g.constant(b));
  A::Var seq = fuse_sum_rows(g, g.constant(q_vec), bags, len);

  FusedQuery out;
  out.sequence = seq->value;
  out.keep = Eigen::VectorXd::Ones(len);
  out.provenance = FusionProvenance::kSumAblation;
  return out;
}

const char* aggregation_name(QbfConfig::Aggregation a) {
  return a == QbfConfig::Aggregation::kSum ? "sum" : "mean";
}

QbfConfig::Aggregation aggregation_from_name(const std::string& name) {
  if (name == "mean") return QbfConfig::Aggregation::kMean;
  if (name == "sum") return QbfConfig::Aggregation::kSum;
  throw UserError("unknown fusion aggregation '" + name + "' (expected mean or sum)");
}

}  // namespace qbprf
