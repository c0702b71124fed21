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

// End-to-end acceptance harness. Each check prints exactly one
// [PASS]/[FAIL] line with its pinned tolerances and observed values; the
// process exits non-zero when any check fails. Unlike the per-module unit
// suites, these checks exercise the library only through its public headers
// and validate the numerically load-bearing claims:
//
//   1. closed-form loss values
//   2. analytic gradients vs central finite differences
//   3. exact retrieval vs a brute-force full-sort oracle
//   4. ranking metrics vs hand-derived fixtures and a statistical anchor
//   5. end-to-end training on the synthetic paraphrase corpus
//   6. the retrieval diagnostic on duplicate-pair-shaped data (recorded)
//   7. seed determinism and checkpoint round-trips

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "qbprf/autograd.hpp"
#include "qbprf/config.hpp"
#include "qbprf/data.hpp"
#include "qbprf/errors.hpp"
#include "qbprf/index.hpp"
#include "qbprf/matcher.hpp"
#include "qbprf/metrics.hpp"
#include "qbprf/pipeline.hpp"
#include "qbprf/qbf.hpp"
#include "qbprf/qbs.hpp"
#include "qbprf/rng.hpp"
#include "qbprf/vae.hpp"
#include "qbprf/vocab.hpp"
#include "test_util.hpp"

using namespace qbprf;
using namespace qbprf::testutil;
namespace A = qbprf::ag;
namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Harness scaffolding

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(4);
  os << v;
  return os.str();
}

struct Check {
  std::string detail;  // appended to the pass/fail line
  bool ok = true;

  // Requires `cond`; on failure appends `what` so the line says which part
  // of the check gave way.
  void require(bool cond, const std::string& what) {
    if (!cond) {
      ok = false;
      if (!detail.empty()) detail += "; ";
      detail += "FAILED: " + what;
    }
  }
  void note(const std::string& what) {
    if (!detail.empty()) detail += "; ";
    detail += what;
  }
};

// Scratch directory for checkpoint round-trips; wiped on every run.
fs::path scratch_dir() {
  fs::path dir = fs::temp_directory_path() / "qbprf_acceptance";
  std::error_code ec;
  fs::remove_all(dir, ec);
  fs::create_directories(dir);
  return dir;
}

// ---------------------------------------------------------------------------
// 1. Closed-form loss values

Check closed_form_losses() {
  Check c;
  constexpr double kTolInfo = 1e-6;
  constexpr double kTolExact = 1e-9;

  // Identical unit rows make every logit equal, so the contrastive loss is
  // exactly ln N (a uniform softmax) regardless of the temperature.
  double worst_info = 0.0;
  for (int n : {2, 8, 128}) {
    A::Graph g;
    A::Matrix rows = A::Matrix::Zero(n, 3);
    rows.col(0).setOnes();
    A::Var loss = infonce_loss(g, g.constant(rows), g.constant(rows), 0.7);
    worst_info = std::max(worst_info, std::abs(loss->value(0, 0) - std::log(double(n))));
  }
  c.require(worst_info <= kTolInfo, "constant-logit contrastive loss != ln N");
  c.note("infonce err " + fmt(worst_info) + " (tol 1e-6)");

  // KL(Normal(1, 1) || Normal(0, 1)) in one dimension: 0.5*(1 + 1 - 1 - 0).
  double kl_err;
  {
    A::Graph g;
    A::Matrix mu(1, 1), logvar(1, 1);
    mu << 1.0;
    logvar << 0.0;
    A::Var loss = kl_loss(g, g.constant(mu), g.constant(logvar));
    kl_err = std::abs(loss->value(0, 0) - 0.5);
  }
  c.require(kl_err <= kTolExact, "unit-Gaussian KL != 0.5");
  c.note("kl err " + fmt(kl_err) + " (tol 1e-9)");

  // One candidate identical to the query (cosine 1 -> similarity 1) selected
  // with probability 1: -log((1*1 + 1e-4) / (1 + 1e-3)).
  double reward_err;
  {
    A::Graph g;
    A::Matrix q(1, 3), p(1, 1);
    q << 1.0, 0.0, 0.0;
    p << 1.0;
    A::Var loss = loss_reward(g, g.constant(q), g.constant(q), g.constant(p), 1e-4, 1e-3);
    reward_err = std::abs(loss->value(0, 0) - (-std::log(1.0001 / 1.001)));
  }
  c.require(reward_err <= kTolExact, "single-candidate reward loss != -log(1.0001/1.001)");
  c.note("reward err " + fmt(reward_err) + " (tol 1e-9)");

  // A prediction of exactly 0.5 costs ln 2 under either label.
  double ce_err = 0.0;
  for (double label : {1.0, 0.0}) {
    A::Graph g;
    A::Matrix y(1, 1);
    y << 0.5;
    A::Var loss = loss_ce(g, g.constant(y), {label});
    ce_err = std::max(ce_err, std::abs(loss->value(0, 0) - std::log(2.0)));
  }
  c.require(ce_err <= kTolExact, "cross-entropy at 0.5 != ln 2");
  c.note("ce err " + fmt(ce_err) + " (tol 1e-9)");
  return c;
}

// ---------------------------------------------------------------------------
// 2. Gradient oracle: reverse-mode gradients vs central finite differences

Check gradient_oracle() {
  Check c;
  constexpr double kTolLoss = 1e-4;   // individual losses
  constexpr double kTolStack = 1e-3;  // full fusion stack

  double worst = 0.0;

  // Contrastive alignment loss over 4 anchor/positive rows.
  worst = std::max(worst, fd_check({rand_matrix(4, 5, 21), rand_matrix(4, 5, 22)},
                                   [](A::Graph& g, const std::vector<A::Var>& v) {
                                     return infonce_loss(g, v[0], v[1], 0.7);
                                   }));

  // Multi-positive selection loss with extra in-batch negatives.
  worst = std::max(worst, fd_check({rand_matrix(1, 6, 23), rand_matrix(4, 6, 24),
                                    rand_matrix(2, 6, 25)},
                                   [](A::Graph& g, const std::vector<A::Var>& v) {
                                     return loss_bag_infonce(
                                         g, v[0], v[1], {true, false, true, false}, 0.7, v[2]);
                                   }));

  // Reward loss; the sigmoid keeps the selection probabilities positive
  // while letting gradients flow into them.
  worst = std::max(worst, fd_check({rand_matrix(1, 6, 26), rand_matrix(4, 6, 27),
                                    rand_matrix(4, 1, 28)},
                                   [](A::Graph& g, const std::vector<A::Var>& v) {
                                     return loss_reward(g, v[0], v[1], A::sigmoid(g, v[2]),
                                                        1e-4, 1e-3);
                                   }));

  // KL term over a 2x4 batch.
  worst = std::max(worst, fd_check({rand_matrix(2, 4, 29), rand_matrix(2, 4, 30)},
                                   [](A::Graph& g, const std::vector<A::Var>& v) {
                                     return kl_loss(g, v[0], v[1]);
                                   }));

  // Cross entropy; the sigmoid keeps predictions strictly inside (0, 1) and
  // away from the clamp boundary.
  worst = std::max(worst, fd_check({rand_matrix(3, 1, 31)},
                                   [](A::Graph& g, const std::vector<A::Var>& v) {
                                     return loss_ce(g, A::sigmoid(g, v[0]), {1.0, 0.0, 1.0});
                                   }));

  c.require(worst <= kTolLoss, "a loss gradient drifted from finite differences");
  c.note("loss worst rel err " + fmt(worst) + " (tol 1e-4)");

  // Full fusion stack (projection -> cross-attention over a partially masked
  // bag -> gated self-attention) with gradients taken at its inputs.
  QbfConfig qcfg;
  qcfg.d_model = 6;
  qcfg.heads = 2;
  qcfg.layers = 1;
  qcfg.dropout = 0.0;
  qcfg.ffn_dim = 8;
  Rng qrng(616);
  QbfModel model(qcfg, 4, qrng);
  Eigen::VectorXd q_keep = Eigen::VectorXd::Ones(2);
  Eigen::VectorXd m_keep(2);
  m_keep << 1.0, 0.0;
  double stack = fd_check(
      {rand_matrix(2, 4, 32), rand_matrix(2, 4, 33), rand_matrix(2, 4, 34)},
      [&](A::Graph& g, const std::vector<A::Var>& v) {
        A::Var q = model.project_in(g, v[0]);
        std::vector<A::Var> members = {model.project_in(g, v[1]), model.project_in(g, v[2])};
        std::vector<Eigen::VectorXd> keeps = {Eigen::VectorXd::Ones(2), m_keep};
        A::Var ca = model.cross_attend(g, q, members, keeps, false, nullptr);
        return model.self_attend(g, q, ca, q_keep, false, nullptr);
      });
  c.require(stack <= kTolStack, "fusion-stack gradient drifted from finite differences");
  c.note("fusion stack worst rel err " + fmt(stack) + " (tol 1e-3)");
  return c;
}

// ---------------------------------------------------------------------------
// 3. Retrieval oracle: search vs brute-force full sort

Check retrieval_oracle() {
  Check c;
  const int n = 1000, d = 16, k = 10, n_queries = 100;
  Rng rng(303);

  EmbeddingIndex index;
  index.checkpoint_hash = "oracle";
  index.ids.resize(n);
  index.matrix.resize(n, d);
  for (int i = 0; i < n; ++i) {
    index.ids[i] = i;
    for (int j = 0; j < d; ++j) index.matrix(i, j) = rng.uniform(-1.0, 1.0);
    index.matrix.row(i).normalize();
  }

  int exact = 0;
  for (int qi = 0; qi < n_queries; ++qi) {
    Eigen::VectorXd q(d);
    for (int j = 0; j < d; ++j) q(j) = rng.uniform(-1.0, 1.0);
    q.normalize();

    // Oracle: score every row, full sort by descending cosine with ascending
    // ids on ties, take the first k.
    Eigen::VectorXd scores = index.matrix * q;
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (scores(a) != scores(b)) return scores(a) > scores(b);
      return index.ids[a] < index.ids[b];
    });

    RankedList got = search(index, q, k);
    bool same = got.candidates.size() == size_t(k);
    for (int j = 0; same && j < k; ++j) same = got.candidates[j].id == index.ids[order[j]];
    exact += same ? 1 : 0;
  }
  c.require(exact == n_queries, "a ranked list diverged from the full-sort oracle");
  c.note(std::to_string(exact) + "/" + std::to_string(n_queries) +
         " queries exact (n=1000, k=10, ids and order)");
  return c;
}

// ---------------------------------------------------------------------------
// 4. Metric oracle: hand-derived fixtures plus a statistical anchor

// A ranked list whose candidates appear in the given order (scores strictly
// descending, so the order is the ranking).
RankedList ranked(int64_t query_id, const std::vector<int64_t>& ids_in_rank_order) {
  RankedList list;
  list.query_id = query_id;
  double score = 1.0;
  for (int64_t id : ids_in_rank_order) {
    list.candidates.push_back({id, score});
    score -= 0.05;
  }
  return list;
}

Check metric_oracle() {
  Check c;

  // First-relevant ranks 1, 2, and 4: MRR = (1 + 1/2 + 1/4) / 3.
  {
    std::vector<RankedList> lists = {ranked(0, {10, 11, 12, 13}), ranked(1, {10, 11, 12, 13}),
                                     ranked(2, {10, 11, 12, 13})};
    std::vector<std::vector<int64_t>> relevant = {{10}, {11}, {13}};
    double got = mrr(lists, relevant);
    c.require(got == (1.0 + 0.5 + 0.25) / 3.0, "MRR fixture mismatch");
  }

  // Positives at ranks 1, 2, 5, 7 of four 10-candidate groups.
  {
    std::vector<RankedList> lists;
    std::vector<std::vector<int64_t>> relevant;
    for (int g = 0; g < 4; ++g) {
      std::vector<int64_t> ids;
      for (int j = 0; j < 10; ++j) ids.push_back(g * 100 + j);
      lists.push_back(ranked(g, ids));
    }
    relevant = {{0}, {101}, {204}, {306}};  // ranks 1, 2, 5, 7
    c.require(recall_at(lists, relevant, 10, 1) == 0.25, "R10@1 fixture mismatch");
    c.require(recall_at(lists, relevant, 10, 2) == 0.50, "R10@2 fixture mismatch");
    c.require(recall_at(lists, relevant, 10, 5) == 0.75, "R10@5 fixture mismatch");
  }

  // Positive first in 3 of 4 two-candidate groups.
  {
    std::vector<RankedList> lists = {ranked(0, {0, 1}), ranked(1, {10, 11}), ranked(2, {20, 21}),
                                     ranked(3, {30, 31})};
    std::vector<std::vector<int64_t>> relevant = {{0}, {10}, {20}, {31}};
    c.require(recall_at(lists, relevant, 2, 1) == 0.75, "R2@1 fixture mismatch");
  }
  c.note("fixtures exact");

  // A scorer with no signal ranks the one positive of a 10-candidate group
  // first with probability 1/10; over 10k groups the observed rate must sit
  // within +/-0.01 of 0.1.
  {
    Rng rng(404);
    const int groups = 10000;
    std::vector<RankedList> lists;
    std::vector<std::vector<int64_t>> relevant;
    lists.reserve(groups);
    relevant.reserve(groups);
    for (int g = 0; g < groups; ++g) {
      std::vector<std::pair<double, int64_t>> scored;
      for (int j = 0; j < 10; ++j) scored.emplace_back(rng.uniform(0.0, 1.0), int64_t(g) * 10 + j);
      std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
      });
      RankedList list;
      list.query_id = g;
      for (const auto& [s, id] : scored) list.candidates.push_back({id, s});
      lists.push_back(std::move(list));
      relevant.push_back({int64_t(g) * 10 + rng.uniform_int(0, 9)});
    }
    double rate = recall_at(lists, relevant, 10, 1);
    c.require(std::abs(rate - 0.1) <= 0.01, "random-scorer R10@1 outside 0.1 +/- 0.01");
    c.note("random R10@1 " + fmt(rate) + " (anchor 0.1 +/- 0.01)");
  }
  return c;
}

// ---------------------------------------------------------------------------
// 5. End-to-end training on the synthetic paraphrase corpus

Check end_to_end() {
  Check c;
  const auto t0 = std::chrono::steady_clock::now();

  // Fixed-seed corpus: 200 paraphrase clusters of 8 questions each.
  SyntheticCorpus synth = gen_synthetic_corpus(200, 8, 2000, 11);
  std::vector<std::string> texts;
  texts.reserve(synth.queries.size());
  for (const Query& q : synth.queries) texts.push_back(q.text);
  Vocabulary vocab = Vocabulary::build(texts);

  RunConfig preset = desk_preset();
  Stage1Config s1 = preset.stage1;
  s1.rng_seed = 5;
  Stage1Checkpoint stage1 = train_stage1(synth.queries, vocab, s1);
  tokenize_corpus(synth.queries, vocab, s1.max_len);

  // (a) The learned space separates clusters: mean same-cluster cosine must
  // exceed mean cross-cluster cosine by more than 0.1. Pair sums come from
  // the Gram identity sum_{i<j} v_i.v_j = (|sum v|^2 - sum |v|^2) / 2.
  {
    std::vector<std::vector<int>> tokens;
    tokens.reserve(synth.queries.size());
    for (const Query& q : synth.queries) tokens.push_back(q.tokens);
    Eigen::MatrixXd emb = embed_batch(*stage1.model, tokens);
    const int n = int(emb.rows());
    const int per = 8;  // queries are cluster-major, ids dense from 0
    const int clusters = n / per;

    double total_pairs_sum =
        (emb.colwise().sum().squaredNorm() - emb.rowwise().squaredNorm().sum()) / 2.0;
    double intra_sum = 0.0;
    for (int cl = 0; cl < clusters; ++cl) {
      auto block = emb.middleRows(cl * per, per);
      intra_sum += (block.colwise().sum().squaredNorm() - block.rowwise().squaredNorm().sum()) / 2.0;
    }
    double intra_pairs = clusters * (per * (per - 1) / 2.0);
    double inter_pairs = n * (n - 1) / 2.0 - intra_pairs;
    double separation =
        intra_sum / intra_pairs - (total_pairs_sum - intra_sum) / inter_pairs;
    c.require(separation > 0.1, "cluster separation " + fmt(separation) + " <= 0.1");
    c.note("separation " + fmt(separation) + " (floor 0.1)");
  }

  // Joint training setup shared by all four pipeline variants.
  BagSplits splits = split_bags(synth.bags, preset.valid_fraction, preset.test_fraction, 7);
  EmbeddingIndex index = build_index(synth.queries, stage1);
  Stage2Corpus corpus{synth.queries, splits.train, splits.valid, splits.test};
  Stage2Config s2 = preset.stage2;
  s2.rng_seed = 21;

  AblationOutcome full = run_ablation(corpus, stage1, index, s2, Ablation::kNone);
  AblationOutcome no_qbs = run_ablation(corpus, stage1, index, s2, Ablation::kNoQbs);
  AblationOutcome no_qbf = run_ablation(corpus, stage1, index, s2, Ablation::kNoQbf);
  AblationOutcome matcher_only = run_ablation(corpus, stage1, index, s2, Ablation::kMatcherOnly);

  // (b) The selector learns: held-out selection accuracy at the final
  // validation must exceed the untrained baseline (step 0) by >= 0.1.
  {
    double first = full.training.pre_training.selection_accuracy;
    double last = full.training.log.back().selection_accuracy;
    c.require(last - first >= 0.1,
              "selection accuracy gain " + fmt(last - first) + " < 0.1");
    c.note("selection accuracy " + fmt(first) + " -> " + fmt(last) + " (gain floor 0.1)");
  }

  // (c) Removing either stage never helps: the full pipeline's R10@1 bounds
  // the selector-free, fusion-free, and retrieval-free variants.
  {
    double f = full.report.r10_at_1;
    c.require(f >= no_qbs.report.r10_at_1, "full R10@1 below the selector-free variant");
    c.require(f >= no_qbf.report.r10_at_1, "full R10@1 below the fusion-free variant");
    c.require(f >= matcher_only.report.r10_at_1, "full R10@1 below the plain matcher");
    c.note("R10@1 full " + fmt(f) + " >= no_qbs " + fmt(no_qbs.report.r10_at_1) + ", no_qbf " +
           fmt(no_qbf.report.r10_at_1) + ", matcher_only " + fmt(matcher_only.report.r10_at_1));
  }

  // (d) Deeper retrieval helps the trained pipeline: MRR at k=10 >= k=1.
  {
    std::vector<QQPair> test_pairs =
        make_qq_pairs(corpus.queries, corpus.test_bags, Split::kTest, s2.rng_seed);
    auto rows = sweep_topk(full.training.checkpoint, index, corpus.queries, test_pairs, {1, 10});
    double mrr1 = rows[0].second.mrr, mrr10 = rows[1].second.mrr;
    c.require(mrr10 >= mrr1, "MRR at k=10 (" + fmt(mrr10) + ") below k=1 (" + fmt(mrr1) + ")");
    c.note("MRR k=10 " + fmt(mrr10) + " >= k=1 " + fmt(mrr1));
  }

  double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  c.require(elapsed < 900.0, "end-to-end run exceeded the 15-minute budget");
  c.note(fmt(elapsed) + "s (budget 900s)");
  return c;
}

// ---------------------------------------------------------------------------
// 6. Retrieval diagnostic on duplicate-pair-shaped data (value recorded)

Check diagnostic_anchor() {
  Check c;

  // Real duplicate-question data is dominated by 2-question clusters, so
  // even perfect retrieval can fill at most ~1 of 10 candidate slots with a
  // true duplicate. The default stand-in reproduces that cluster-size
  // profile; QBPRF_QUORA_TSV switches to a real label file (qid1, qid2,
  // question1, question2, is_duplicate), subsampled to the first 1500
  // bag-covered queries plus distractors up to 5000.
  std::vector<Query> queries;
  std::vector<QueryBag> bags;
  std::string source;
  const char* env = std::getenv("QBPRF_QUORA_TSV");
  if (env != nullptr && *env != '\0') {
    LoadResult loaded = load_duplicate_pairs(env);
    std::vector<Query> all = collect_queries(loaded.records);
    std::vector<QueryBag> all_bags = build_query_bags(loaded.records);
    std::set<int64_t> keep;
    for (const QueryBag& bag : all_bags) {
      if (keep.size() >= 1500) break;
      keep.insert(bag.anchor_id);
      keep.insert(bag.member_ids.begin(), bag.member_ids.end());
      bags.push_back(bag);
    }
    for (const Query& q : all)
      if (keep.count(q.id) != 0) queries.push_back(q);
    for (const Query& q : all) {
      if (queries.size() >= 5000) break;
      if (keep.count(q.id) == 0) queries.push_back(q);
    }
    source = std::string("file ") + env + " (" + std::to_string(bags.size()) + " bags, " +
             std::to_string(queries.size()) + " queries)";
  } else {
    SyntheticCorpus synth = gen_synthetic_corpus(400, 2, 3000, 13);
    queries = synth.queries;
    bags = synth.bags;
    source = "pair-cluster stand-in (400 clusters x 2)";
  }

  std::vector<std::string> texts;
  texts.reserve(queries.size());
  for (const Query& q : queries) texts.push_back(q.text);
  Vocabulary vocab = Vocabulary::build(texts);
  Stage1Config s1 = desk_preset().stage1;
  s1.max_epochs = 2;
  s1.rng_seed = 5;
  Stage1Checkpoint stage1 = train_stage1(queries, vocab, s1);
  tokenize_corpus(queries, vocab, s1.max_len);
  EmbeddingIndex index = build_index(queries, stage1);

  RetrievalDiagnostics diag = retrieval_diagnostics(index, bags, 10);
  c.require(diag.candidate_accuracy < 0.5,
            "candidate accuracy " + fmt(diag.candidate_accuracy) + " not below 0.5");
  c.note("candidate_accuracy@10 " + fmt(diag.candidate_accuracy) + " (recorded; bound 0.5), " +
         "mean true members in top-10 " + fmt(diag.mean_bag_recall_count) + ", " +
         std::to_string(diag.n_anchors) + " anchors, " + source);
  return c;
}

// ---------------------------------------------------------------------------
// 7. Seed determinism and checkpoint round-trips

Check determinism() {
  Check c;
  fs::path dir = scratch_dir();

  SyntheticCorpus synth = gen_synthetic_corpus(8, 5, 100, 11);
  std::vector<std::string> texts;
  for (const Query& q : synth.queries) texts.push_back(q.text);
  Vocabulary vocab = Vocabulary::build(texts);

  Stage1Config s1;
  s1.max_len = 12;
  s1.emb_dim = 12;
  s1.enc_hidden = 8;
  s1.enc_layers = 1;
  s1.dec_hidden = 8;
  s1.d_z = 8;
  s1.batch_size = 8;
  s1.max_epochs = 1;
  s1.rng_seed = 5;

  // Identical seeds must give bitwise-identical epoch telemetry and weights.
  std::vector<Stage1EpochLog> log_a, log_b;
  Stage1Checkpoint ck_a = train_stage1(synth.queries, vocab, s1, &log_a);
  Stage1Checkpoint ck_b = train_stage1(synth.queries, vocab, s1, &log_b);
  bool s1_logs_equal = log_a.size() == log_b.size();
  for (size_t i = 0; s1_logs_equal && i < log_a.size(); ++i)
    s1_logs_equal = log_a[i].epoch == log_b[i].epoch && log_a[i].recon == log_b[i].recon &&
                    log_a[i].kl == log_b[i].kl && log_a[i].contrastive == log_b[i].contrastive &&
                    log_a[i].total == log_b[i].total;
  c.require(s1_logs_equal, "stage-1 epoch logs differ across identical-seed reruns");
  c.require(ck_a.model->params().content_hash() == ck_b.model->params().content_hash(),
            "stage-1 weights differ across identical-seed reruns");

  tokenize_corpus(synth.queries, vocab, s1.max_len);
  BagSplits splits = split_bags(synth.bags, 0.25, 0.25, 7);
  EmbeddingIndex index = build_index(synth.queries, ck_a);
  Stage2Corpus corpus{synth.queries, splits.train, splits.valid, splits.test};

  Stage2Config s2;
  s2.learning_rate = 1e-3;
  s2.batch_size = 8;
  s2.k = 3;
  s2.bag_size = 2;
  s2.validation_interval = 0.5;
  s2.max_epochs = 2;
  s2.rng_seed = 21;
  s2.qbs.bilstm_hidden = 8;
  s2.qbf.d_model = 16;
  s2.qbf.heads = 2;
  s2.qbf.layers = 1;
  s2.qbf.ffn_dim = 32;
  s2.matcher.d_model = 16;
  s2.matcher.heads = 2;
  s2.matcher.layers = 1;
  s2.matcher.ffn_dim = 32;

  Stage2Result run_a = train_stage2(corpus, ck_a, index, s2, (dir / "a").string());
  Stage2Result run_b = train_stage2(corpus, ck_a, index, s2, (dir / "b").string());
  c.require(training_log_jsonl(run_a.log) == training_log_jsonl(run_b.log),
            "training logs differ across identical-seed reruns");
  c.require(training_log_jsonl({run_a.pre_training}) == training_log_jsonl({run_b.pre_training}),
            "pre-training records differ across identical-seed reruns");
  c.note("identical-seed reruns byte-identical");

  // Save/load must preserve held-out metrics to within 1e-9.
  std::vector<QQPair> test_pairs = make_qq_pairs(synth.queries, splits.test, Split::kTest, 3);
  Stage2Checkpoint loaded = load_stage2(run_a.best_checkpoint_path);
  MetricsReport before = evaluate_stage2(run_a.checkpoint, index, synth.queries, test_pairs);
  MetricsReport after = evaluate_stage2(loaded, index, synth.queries, test_pairs);
  double drift = std::max(
      {std::abs(before.mrr - after.mrr), std::abs(before.r10_at_1 - after.r10_at_1),
       std::abs(before.r10_at_2 - after.r10_at_2), std::abs(before.r10_at_5 - after.r10_at_5),
       std::abs(before.r2_at_1 - after.r2_at_1)});
  c.require(drift <= 1e-9, "round-trip metric drift " + fmt(drift) + " above 1e-9");
  c.note("round-trip metric drift " + fmt(drift) + " (tol 1e-9)");
  return c;
}

}  // namespace

int main() {
  struct Entry {
    const char* name;
    Check (*run)();
  };
  const Entry entries[] = {
      {"closed-form loss values", closed_form_losses},
      {"gradient oracle", gradient_oracle},
      {"retrieval oracle", retrieval_oracle},
      {"metric oracle", metric_oracle},
      {"end-to-end synthetic training", end_to_end},
      {"retrieval diagnostic anchor", diagnostic_anchor},
      {"determinism and round-trips", determinism},
  };

  int failures = 0;
  int number = 0;
  for (const Entry& entry : entries) {
    ++number;
    const auto t0 = std::chrono::steady_clock::now();
    Check check;
    try {
      check = entry.run();
    } catch (const std::exception& e) {
      check.ok = false;
      check.note(std::string("exception: ") + e.what());
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += check.ok ? 0 : 1;
    std::cout << (check.ok ? "[PASS] " : "[FAIL] ") << number << "/7 " << entry.name << " — "
              << check.detail << " [" << fmt(secs) << "s]" << std::endl;
  }
  std::cout << (7 - failures) << "/7 acceptance checks passed" << std::endl;
  return failures == 0 ? 0 : 1;
}
