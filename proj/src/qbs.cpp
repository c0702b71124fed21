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

#include "qbprf/qbs.hpp"

#include <algorithm>
#include <numeric>
#include <utility>

#include "qbprf/errors.hpp"

namespace qbprf {

namespace A = ag;

void QbsConfig::validate() const {
  if (bilstm_hidden < 1) throw UserError("selector config: bilstm_hidden must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw UserError("selector config: dropout must be in [0,1)");
  if (bag_size < 1) throw UserError("selector config: bag_size must be >= 1");
  if (tau <= 0.0) throw UserError("selector config: tau must be > 0");
  if (tau1 < 0.0) throw UserError("selector config: tau1 must be >= 0");
  if (tau2 <= 0.0) throw UserError("selector config: tau2 must be > 0");
}

QbsModel::QbsModel(const QbsConfig& config, int state_dim, Rng& init_rng)
    : config_(config), state_dim_(state_dim) {
  config_.validate();
  if (state_dim < 1) throw UserError("selector: state_dim must be >= 1");
  const int H = config_.bilstm_hidden;
  fwd_ = make_lstm("qbs.lstm_fwd", state_dim, H, init_rng);
  bwd_ = make_lstm("qbs.lstm_bwd", state_dim, H, init_rng);
  W_res_ = &params_.create("qbs.res.w", init_xavier(state_dim, 2 * H, init_rng));
  b_res_ = &params_.create("qbs.res.b", init_zeros(1, 2 * H));
  W_c1_ = &params_.create("qbs.cls.w1", init_xavier(2 * H, H, init_rng));
  b_c1_ = &params_.create("qbs.cls.b1", init_zeros(1, H));
  W_c2_ = &params_.create("qbs.cls.w2", init_xavier(H, 2, init_rng));
  b_c2_ = &params_.create("qbs.cls.b2", init_zeros(1, 2));
}

QbsModel::LstmDir QbsModel::make_lstm(const std::string& prefix, int in_dim, int hidden, Rng& rng) {
  LstmDir d;
  d.Wi = &params_.create(prefix + ".wi", init_xavier(in_dim, hidden, rng));
  d.Ui = &params_.create(prefix + ".ui", init_xavier(hidden, hidden, rng));
  d.bi = &params_.create(prefix + ".bi", init_zeros(1, hidden));
  d.Wf = &params_.create(prefix + ".wf", init_xavier(in_dim, hidden, rng));
  d.Uf = &params_.create(prefix + ".uf", init_xavier(hidden, hidden, rng));
  // Forget gate opens at init so early gradients reach distant steps.
  d.bf = &params_.create(prefix + ".bf", init_ones(1, hidden));
  d.Wg = &params_.create(prefix + ".wg", init_xavier(in_dim, hidden, rng));
  d.Ug = &params_.create(prefix + ".ug", init_xavier(hidden, hidden, rng));
  d.bg = &params_.create(prefix + ".bg", init_zeros(1, hidden));
  d.Wo = &params_.create(prefix + ".wo", init_xavier(in_dim, hidden, rng));
  d.Uo = &params_.create(prefix + ".uo", init_xavier(hidden, hidden, rng));
  d.bo = &params_.create(prefix + ".bo", init_zeros(1, hidden));
  return d;
}

std::pair<A::Var, A::Var> QbsModel::lstm_step(A::Graph& g, const LstmDir& p, A::Var x, A::Var h,
                                              A::Var c) const {
  auto gate = [&](Tensor* W, Tensor* U, Tensor* b) {
    return A::add_rowvec(g, A::add(g, A::matmul(g, x, use(g, *W)), A::matmul(g, h, use(g, *U))),
                         use(g, *b));
  };
  A::Var i = A::sigmoid(g, gate(p.Wi, p.Ui, p.bi));
  A::Var f = A::sigmoid(g, gate(p.Wf, p.Uf, p.bf));
  A::Var n = A::tanh_(g, gate(p.Wg, p.Ug, p.bg));
  A::Var o = A::sigmoid(g, gate(p.Wo, p.Uo, p.bo));
  A::Var c_new = A::add(g, A::cmul(g, f, c), A::cmul(g, i, n));
  A::Var h_new = A::cmul(g, o, A::tanh_(g, c_new));
  return {h_new, c_new};
}

A::Var QbsModel::probs_on_tape(A::Graph& g, A::Var query_states,
                               const std::vector<A::Var>& candidate_states, bool train,
                               Rng* dropout_rng) const {
  const auto k = static_cast<int>(candidate_states.size());
  if (k == 0) throw InternalError("selector: no candidates to score");
  const auto L = query_states->value.rows();
  if (query_states->value.cols() != state_dim_) {
    throw InternalError("selector: query state width mismatch");
  }
  std::vector<A::Var> pairs;
  pairs.reserve(static_cast<size_t>(k));
  for (A::Var cand : candidate_states) {
    if (cand->value.rows() != L || cand->value.cols() != state_dim_) {
      throw InternalError("selector: candidate state shape mismatch");
    }
    pairs.push_back(A::concat_rows(g, {query_states, cand}));
  }
  const auto T = 2 * L;

  // One (k x state_dim) slab per time step, batching all candidates.
  std::vector<A::Var> steps(static_cast<size_t>(T));
  for (Eigen::Index t = 0; t < T; ++t) {
    std::vector<std::pair<A::Var, int>> srcs;
    srcs.reserve(static_cast<size_t>(k));
    for (A::Var pair : pairs) srcs.emplace_back(pair, static_cast<int>(t));
    steps[static_cast<size_t>(t)] = A::pick_rows(g, srcs);
  }

  const int H = config_.bilstm_hidden;
  A::Var zero = g.constant(Eigen::MatrixXd::Zero(k, H));
  std::vector<A::Var> fwd(static_cast<size_t>(T)), bwd(static_cast<size_t>(T));
  A::Var h = zero;
  A::Var c = zero;
  for (Eigen::Index t = 0; t < T; ++t) {
    std::tie(h, c) = lstm_step(g, fwd_, steps[static_cast<size_t>(t)], h, c);
    fwd[static_cast<size_t>(t)] = h;
  }
  h = zero;
  c = zero;
  for (Eigen::Index t = T - 1; t >= 0; --t) {
    std::tie(h, c) = lstm_step(g, bwd_, steps[static_cast<size_t>(t)], h, c);
    bwd[static_cast<size_t>(t)] = h;
  }

  // Position-wise residual: BiLSTM output plus a linear projection of its
  // input, then mean-pooled over the 2L positions.
  A::Var pooled = nullptr;
  for (Eigen::Index t = 0; t < T; ++t) {
    A::Var bi = A::concat_cols(g, {fwd[static_cast<size_t>(t)], bwd[static_cast<size_t>(t)]});
    A::Var res = A::add_rowvec(g, A::matmul(g, steps[static_cast<size_t>(t)], use(g, *W_res_)),
                               use(g, *b_res_));
    A::Var both = A::add(g, bi, res);
    pooled = pooled == nullptr ? both : A::add(g, pooled, both);
  }
  pooled = A::scale(g, pooled, 1.0 / static_cast<double>(T));

  if (train && config_.dropout > 0.0) {
    if (dropout_rng == nullptr) throw InternalError("selector: dropout requested without an rng");
    pooled = A::dropout(g, pooled, config_.dropout, true, *dropout_rng);
  }
  A::Var hidden =
      A::tanh_(g, A::add_rowvec(g, A::matmul(g, pooled, use(g, *W_c1_)), use(g, *b_c1_)));
  A::Var logits = A::add_rowvec(g, A::matmul(g, hidden, use(g, *W_c2_)), use(g, *b_c2_));
  return A::slice_cols(g, A::softmax_rows(g, logits), 1, 1);  // column 1 = "select"
}

SelectorOutput QbsModel::score_candidates(const A::Matrix& query_states,
                                          const std::vector<int64_t>& candidate_ids,
                                          const std::vector<A::Matrix>& candidate_states) const {
  if (candidate_ids.size() != candidate_states.size()) {
    throw InternalError("selector: ids/states length mismatch");
  }
  ++score_calls_;
  A::Graph g;
  std::vector<A::Var> cands;
  cands.reserve(candidate_states.size());
  for (const auto& m : candidate_states) cands.push_back(g.constant(m));
  A::Var probs = probs_on_tape(g, g.constant(query_states), cands, false, nullptr);

  SelectorOutput out;
  out.candidate_ids = candidate_ids;
  out.probs.resize(candidate_ids.size());
  for (size_t i = 0; i < out.probs.size(); ++i) {
    out.probs[i] = probs->value(static_cast<Eigen::Index>(i), 0);
  }
  out.selected = top_selection(out.candidate_ids, out.probs, config_.bag_size);
  return out;
}

std::vector<bool> top_selection(const std::vector<int64_t>& ids, const std::vector<double>& probs,
                                int bag_size) {
  if (ids.size() != probs.size()) throw InternalError("selection: ids/probs length mismatch");
  std::vector<size_t> order(ids.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (probs[a] != probs[b]) return probs[a] > probs[b];
    return ids[a] < ids[b];
  });
  const size_t take = std::min(static_cast<size_t>(bag_size), ids.size());
  std::vector<bool> selected(ids.size(), false);
  for (size_t r = 0; r < take; ++r) selected[order[r]] = true;
  return selected;
}

QueryBag select_bag(const SelectorOutput& output, int bag_size, int64_t anchor_id) {
  std::vector<bool> mask = top_selection(output.candidate_ids, output.probs, bag_size);
  QueryBag bag;
  bag.anchor_id = anchor_id;
  for (size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) bag.member_ids.push_back(output.candidate_ids[i]);
  }
  std::sort(bag.member_ids.begin(), bag.member_ids.end());
  bag.gold.assign(bag.member_ids.size(), false);
  return bag;
}

A::Var loss_bag_infonce(A::Graph& g, A::Var query_emb, A::Var candidate_embs,
                        const std::vector<bool>& pseudo_positive_mask, double tau,
                        A::Var extra_negatives) {
  if (query_emb->value.rows() != 1) throw InternalError("selection loss: query must be one row");
  const auto k = candidate_embs->value.rows();
  if (static_cast<Eigen::Index>(pseudo_positive_mask.size()) != k) {
    throw InternalError("selection loss: mask length mismatch");
  }
  std::vector<int> positives;
  for (size_t i = 0; i < pseudo_positive_mask.size(); ++i) {
    if (pseudo_positive_mask[i]) positives.push_back(static_cast<int>(i));
  }
  if (positives.empty() || positives.size() == pseudo_positive_mask.size()) {
    throw InternalError("selection loss: need at least one positive and one negative");
  }

  A::Var all = extra_negatives == nullptr
                   ? candidate_embs
                   : A::concat_rows(g, {candidate_embs, extra_negatives});
  A::Var qn = A::l2_normalize_rows(g, query_emb);
  A::Var cn = A::l2_normalize_rows(g, all);
  // One cosine score per contrast-set row, as a column.
  A::Var logits = A::scale(g, A::matmul(g, cn, A::transpose(g, qn)), 1.0 / tau);
  A::Var lse = A::logsumexp_rows(g, A::transpose(g, logits));  // 1x1
  A::Var pos = A::rows_gather(g, logits, positives);
  // mean over positives of (logsumexp - positive logit)
  const double np = static_cast<double>(positives.size());
  return A::sub(g, lse, A::scale(g, A::sum_all(g, pos), 1.0 / np));
}

A::Var loss_reward(A::Graph& g, A::Var query_emb, A::Var candidate_embs, A::Var probs, double tau1,
                   double tau2) {
  if (query_emb->value.rows() != 1) throw InternalError("reward loss: query must be one row");
  if (probs->value.rows() != candidate_embs->value.rows() || probs->value.cols() != 1) {
    throw InternalError("reward loss: probs shape mismatch");
  }
  A::Var qn = A::l2_normalize_rows(g, query_emb);
  A::Var cn = A::l2_normalize_rows(g, candidate_embs);
  A::Var cos = A::matmul(g, cn, A::transpose(g, qn));           // k x 1
  A::Var sim = A::add_scalar(g, A::scale(g, cos, 0.5), 0.5);    // (1 + cos) / 2
  A::Var weighted = A::sum_all(g, A::cmul(g, probs, sim));
  A::Var total = A::sum_all(g, probs);
  // -log((weighted + tau1) / (total + tau2))
  return A::sub(g, A::log_(g, A::add_scalar(g, total, tau2)),
                A::log_(g, A::add_scalar(g, weighted, tau1)));
}

std::vector<std::vector<bool>> pseudo_positive_masks(
    const std::vector<std::vector<double>>& cosines) {
  std::vector<double> flat;
  for (const auto& row : cosines) flat.insert(flat.end(), row.begin(), row.end());
  if (flat.empty()) return {};
  std::sort(flat.begin(), flat.end());
  const size_t n = flat.size();
  const double median =
      n % 2 == 1 ? flat[n / 2] : 0.5 * (flat[n / 2 - 1] + flat[n / 2]);

  std::vector<std::vector<bool>> masks;
  masks.reserve(cosines.size());
  for (const auto& row : cosines) {
    std::vector<bool> mask(row.size());
    size_t n_pos = 0;
    for (size_t i = 0; i < row.size(); ++i) {
      mask[i] = row[i] > median;
      n_pos += mask[i] ? 1 : 0;
    }
    if (row.size() >= 2 && (n_pos == 0 || n_pos == row.size())) {
      // Repair a degenerate mask: sole positive = highest cosine, first wins.
      const size_t best = static_cast<size_t>(
          std::max_element(row.begin(), row.end()) - row.begin());
      mask.assign(row.size(), false);
      mask[best] = true;
    }
    masks.push_back(std::move(mask));
  }
  return masks;
}

}  // namespace qbprf
