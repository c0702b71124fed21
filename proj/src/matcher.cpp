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

#include "qbprf/matcher.hpp"

#include <algorithm>
#include <cmath>

#include "qbprf/errors.hpp"
#include "qbprf/vocab.hpp"

namespace qbprf {

namespace A = ag;

void MatcherConfig::validate() const {
  if (d_model < 1) throw UserError("matcher config: d_model must be >= 1");
  if (heads < 1) throw UserError("matcher config: heads must be >= 1");
  if (d_model % heads != 0) throw UserError("matcher config: heads must divide d_model");
  if (layers < 1) throw UserError("matcher config: layers must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw UserError("matcher config: dropout must be in [0,1)");
  if (vocab_size <= kNumReservedIds) throw UserError("matcher config: vocab_size too small");
  if (max_positions < 3) throw UserError("matcher config: max_positions too small");
  if (ffn_dim < 0) throw UserError("matcher config: ffn_dim must be >= 0");
}

MatcherModel::MatcherModel(const MatcherConfig& config, Rng& init_rng) : config_(config) {
  config_.validate();
  const int d = config_.d_model;
  embedding_ = &params_.create("matcher.embedding",
                               init_normal(config_.vocab_size, d, 0.02, init_rng));
  sep_ = &params_.create("matcher.sep", init_normal(1, d, 0.02, init_rng));
  segment_ = &params_.create("matcher.segment", init_normal(2, d, 0.02, init_rng));
  position_ = &params_.create("matcher.position",
                              init_normal(config_.max_positions, d, 0.02, init_rng));
  for (int l = 0; l < config_.layers; ++l) {
    stack_.push_back(make_transformer_layer_params(params_, "matcher.sa" + std::to_string(l), d,
                                                   config_.effective_ffn_dim(), init_rng));
  }
  W_p_ = &params_.create("matcher.pool.w", init_xavier(d, d, init_rng));
  b_p_ = &params_.create("matcher.pool.b", init_zeros(1, d));
  w_o_ = &params_.create("matcher.out.w", init_xavier(d, 1, init_rng));
  b_o_ = &params_.create("matcher.out.b", init_zeros(1, 1));
}

void MatcherModel::seed_token_embedding(const Eigen::MatrixXd& table) {
  if (table.rows() != embedding_->value.rows()) {
    throw InternalError("matcher: seed table rows != vocab_size");
  }
  const auto cols = std::min(table.cols(), embedding_->value.cols());
  embedding_->value.leftCols(cols) = table.leftCols(cols);
}

A::Var MatcherModel::match_score(A::Graph& g, A::Var fused_seq, const Eigen::VectorXd& fused_keep,
                                 const std::vector<int>& candidate_tokens, bool train,
                                 Rng* rng) const {
  const auto Lf = fused_seq->value.rows();
  const auto Lc = static_cast<Eigen::Index>(candidate_tokens.size());
  if (fused_seq->value.cols() != config_.d_model) {
    throw InternalError("matcher: fused width != d_model");
  }
  if (fused_keep.size() != Lf) throw InternalError("matcher: fused keep length mismatch");
  if (Lc == 0) throw InternalError("matcher: empty candidate");
  const auto n = Lf + 1 + Lc;
  if (n > config_.max_positions) throw InternalError("matcher: joined sequence too long");

  std::vector<int> cand_idx(candidate_tokens.begin(), candidate_tokens.end());
  for (int id : cand_idx) {
    if (id < 0 || id >= config_.vocab_size) throw InternalError("matcher: token id out of range");
  }
  A::Var cand = A::rows_gather(g, use(g, *embedding_), cand_idx);
  A::Var seq = A::concat_rows(g, {fused_seq, use(g, *sep_), cand});

  std::vector<int> seg_idx(static_cast<size_t>(n), 1);
  for (Eigen::Index t = 0; t < Lf; ++t) seg_idx[static_cast<size_t>(t)] = 0;
  seq = A::add(g, seq, A::rows_gather(g, use(g, *segment_), seg_idx));

  std::vector<int> pos_idx(static_cast<size_t>(n));
  for (Eigen::Index t = 0; t < n; ++t) pos_idx[static_cast<size_t>(t)] = static_cast<int>(t);
  seq = A::add(g, seq, A::rows_gather(g, use(g, *position_), pos_idx));

  Eigen::VectorXd keep(n);
  keep.head(Lf) = fused_keep;
  keep(Lf) = 1.0;  // the separator is always attended
  for (Eigen::Index t = 0; t < Lc; ++t) {
    keep(Lf + 1 + t) = candidate_tokens[static_cast<size_t>(t)] == kPadId ? 0.0 : 1.0;
  }

  for (const auto& layer : stack_) {
    seq = transformer_layer(g, layer, config_.heads, seq, &keep, config_.dropout, train, rng);
  }

  std::vector<int> kept;
  for (Eigen::Index t = 0; t < n; ++t) {
    if (keep(t) > 0.0) kept.push_back(static_cast<int>(t));
  }
  A::Var pooled = A::mean_rows(g, A::rows_gather(g, seq, kept));
  A::Var hidden = A::tanh_(g, A::add_rowvec(g, A::matmul(g, pooled, use(g, *W_p_)), use(g, *b_p_)));
  A::Var logit = A::add_rowvec(g, A::matmul(g, hidden, use(g, *w_o_)), use(g, *b_o_));
  return A::sigmoid(g, logit);
}

double MatcherModel::match_score_value(const FusedQuery& fused,
                                       const std::vector<int>& candidate_tokens) const {
  A::Graph g;
  A::Var y = match_score(g, g.constant(fused.sequence), fused.keep, candidate_tokens, false,
                         nullptr);
  return y->value(0, 0);
}

A::Var loss_ce(A::Graph& g, A::Var y_hat, const std::vector<double>& labels) {
  const auto n = y_hat->value.rows();
  if (y_hat->value.cols() != 1) throw InternalError("match loss: y_hat must be a column");
  if (static_cast<Eigen::Index>(labels.size()) != n) {
    throw InternalError("match loss: labels length mismatch");
  }
  Eigen::MatrixXd y(n, 1), iy(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double v = labels[static_cast<size_t>(i)];
    if (v != 0.0 && v != 1.0) throw InternalError("match loss: labels must be 0 or 1");
    y(i, 0) = v;
    iy(i, 0) = 1.0 - v;
  }
  A::Var c = A::clamp(g, y_hat, 1e-7, 1.0 - 1e-7);
  A::Var one_minus = A::add_scalar(g, A::scale(g, c, -1.0), 1.0);
  A::Var term = A::add(g, A::cmul(g, g.constant(y), A::log_(g, c)),
                       A::cmul(g, g.constant(iy), A::log_(g, one_minus)));
  return A::scale(g, A::sum_all(g, term), -1.0 / static_cast<double>(n));
}

RankedList rank_scored(int64_t query_id, std::vector<ScoredId> scored) {
  std::sort(scored.begin(), scored.end(), [](const ScoredId& a, const ScoredId& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  RankedList out;
  out.query_id = query_id;
  out.candidates = std::move(scored);
  return out;
}

RankedList rank_candidates(const MatcherModel& model, int64_t query_id, const FusedQuery& fused,
                           const std::vector<std::pair<int64_t, std::vector<int>>>& candidates) {
  std::vector<ScoredId> scored;
  scored.reserve(candidates.size());
  for (const auto& [id, tokens] : candidates) {
    scored.push_back({id, model.match_score_value(fused, tokens)});
  }
  return rank_scored(query_id, std::move(scored));
}

}  // namespace qbprf
