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

#include "qbprf/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>
#include <unordered_set>

#include "qbprf/errors.hpp"
#include "qbprf/rng.hpp"

namespace qbprf {

namespace {

constexpr int kGroupSize = 10;

// 1-based rank of the first relevant id; 0 when none is present.
int first_relevant_rank(const RankedList& list, const std::vector<int64_t>& relevant) {
  std::unordered_set<int64_t> rel(relevant.begin(), relevant.end());
  for (size_t i = 0; i < list.candidates.size(); ++i) {
    if (rel.count(list.candidates[i].id) != 0) return static_cast<int>(i) + 1;
  }
  return 0;
}

std::string format_row(const char* fmt, const MetricsReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), fmt, r.mrr, r.r10_at_1, r.r10_at_2, r.r10_at_5, r.r2_at_1);
  return buf;
}

}  // namespace

double mrr(const std::vector<RankedList>& lists,
           const std::vector<std::vector<int64_t>>& relevant) {
  if (lists.size() != relevant.size()) throw InternalError("mrr: lists/relevance mismatch");
  if (lists.empty()) throw UserError("mrr: no ranked lists");
  double sum = 0.0;
  for (size_t i = 0; i < lists.size(); ++i) {
    const int rank = first_relevant_rank(lists[i], relevant[i]);
    if (rank == 0) throw UserError("mrr: a ranked list contains no relevant candidate");
    sum += 1.0 / static_cast<double>(rank);
  }
  return sum / static_cast<double>(lists.size());
}

double recall_at(const std::vector<RankedList>& lists,
                 const std::vector<std::vector<int64_t>>& relevant, int n, int k) {
  if (lists.size() != relevant.size()) throw InternalError("recall: lists/relevance mismatch");
  if (lists.empty()) throw UserError("recall: no ranked lists");
  if (k < 1 || k > n) throw UserError("recall: k must lie in [1, n]");
  int hits = 0;
  for (size_t i = 0; i < lists.size(); ++i) {
    if (static_cast<int>(lists[i].candidates.size()) != n) {
      throw UserError("recall: every list must hold exactly n candidates");
    }
    std::unordered_set<int64_t> rel(relevant[i].begin(), relevant[i].end());
    int present = 0;
    for (const auto& c : lists[i].candidates) present += rel.count(c.id) != 0 ? 1 : 0;
    if (present != 1) throw UserError("recall: every list must hold exactly one positive");
    const int rank = first_relevant_rank(lists[i], relevant[i]);
    hits += rank <= k ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(lists.size());
}

double qbs_accuracy(const std::vector<QueryBag>& selected_bags,
                    const std::vector<QueryBag>& gold_bags) {
  if (selected_bags.empty()) throw UserError("selection accuracy: no bags");
  std::map<int64_t, const QueryBag*> gold_by_anchor;
  for (const auto& bag : gold_bags) gold_by_anchor[bag.anchor_id] = &bag;
  double sum = 0.0;
  for (const auto& bag : selected_bags) {
    if (bag.member_ids.empty()) throw UserError("selection accuracy: empty selected bag");
    auto it = gold_by_anchor.find(bag.anchor_id);
    if (it == gold_by_anchor.end()) {
      throw InternalError("selection accuracy: anchor has no gold bag");
    }
    const std::set<int64_t> gold(it->second->member_ids.begin(), it->second->member_ids.end());
    int hits = 0;
    for (int64_t id : bag.member_ids) hits += gold.count(id) != 0 ? 1 : 0;
    sum += static_cast<double>(hits) / static_cast<double>(bag.member_ids.size());
  }
  return sum / static_cast<double>(selected_bags.size());
}

MetricsReport build_report(const std::vector<QQPair>& test_pairs,
                           const std::function<double(const QQPair&)>& scorer, uint64_t rng_seed,
                           const std::string& config_fingerprint) {
  if (test_pairs.empty()) throw UserError("report: no evaluation pairs");
  std::map<int64_t, std::vector<const QQPair*>> groups;
  for (const auto& pair : test_pairs) groups[pair.group_id].push_back(&pair);

  std::vector<RankedList> lists;
  std::vector<std::vector<int64_t>> relevant;
  int r2_hits = 0;
  Rng seed_root(rng_seed);

  for (const auto& [group_id, members] : groups) {
    if (static_cast<int>(members.size()) != kGroupSize) {
      throw UserError("report: every evaluation group must hold exactly 10 pairs");
    }
    const QQPair* positive = nullptr;
    for (const QQPair* p : members) {
      if (p->label == 1) {
        if (positive != nullptr) throw UserError("report: group with more than one positive");
        positive = p;
      }
    }
    if (positive == nullptr) throw UserError("report: group without a positive");

    std::vector<ScoredId> scored;
    std::map<int64_t, double> score_of;
    scored.reserve(members.size());
    for (const QQPair* p : members) {
      const double s = scorer(*p);
      scored.push_back({p->question.id, s});
      score_of[p->question.id] = s;
    }
    std::sort(scored.begin(), scored.end(), [](const ScoredId& a, const ScoredId& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.id < b.id;
    });
    RankedList list;
    list.query_id = positive->query.id;
    list.candidates = std::move(scored);
    lists.push_back(std::move(list));
    relevant.push_back({positive->question.id});

    // Two-candidate reduction: the positive against one seeded-draw negative.
    // Negatives are ordered by question id and the draw is keyed by group id,
    // so the outcome depends only on the group's content and the seed, never
    // on how the input pairs happen to be ordered.
    std::vector<const QQPair*> negatives;
    for (const QQPair* p : members) {
      if (p->label == 0) negatives.push_back(p);
    }
    std::sort(negatives.begin(), negatives.end(),
              [](const QQPair* a, const QQPair* b) { return a->question.id < b->question.id; });
    Rng draw = seed_root.fork(static_cast<uint64_t>(group_id));
    const QQPair* negative =
        negatives[draw.uniform_int(0, static_cast<int64_t>(negatives.size()) - 1)];
    const double sp = score_of[positive->question.id];
    const double sn = score_of[negative->question.id];
    const bool hit = sp > sn || (sp == sn && positive->question.id < negative->question.id);
    r2_hits += hit ? 1 : 0;
  }

  MetricsReport report;
  report.mrr = mrr(lists, relevant);
  report.r10_at_1 = recall_at(lists, relevant, kGroupSize, 1);
  report.r10_at_2 = recall_at(lists, relevant, kGroupSize, 2);
  report.r10_at_5 = recall_at(lists, relevant, kGroupSize, 5);
  report.r2_at_1 = static_cast<double>(r2_hits) / static_cast<double>(groups.size());
  report.n_queries = static_cast<int64_t>(groups.size());
  report.config_fingerprint = config_fingerprint;
  return report;
}

std::string report_tsv(const MetricsReport& report) {
  std::string out = "MRR\tR10@1\tR10@2\tR10@5\tR2@1\n";
  out += format_row("%.6f\t%.6f\t%.6f\t%.6f\t%.6f\n", report);
  return out;
}

std::string report_table(const MetricsReport& report) {
  std::string out = "  MRR     R10@1   R10@2   R10@5   R2@1\n";
  out += format_row("  %-7.4f %-7.4f %-7.4f %-7.4f %-7.4f\n", report);
  return out;
}

std::string sweep_tsv(const std::vector<std::pair<int, MetricsReport>>& rows) {
  std::string out = "k\tMRR\tR10@1\tR10@2\tR10@5\tR2@1\n";
  for (const auto& [k, report] : rows) {
    out += std::to_string(k) + "\t" + format_row("%.6f\t%.6f\t%.6f\t%.6f\t%.6f\n", report);
  }
  return out;
}

std::string sweep_table(const std::vector<std::pair<int, MetricsReport>>& rows) {
  std::string out = "  k    MRR     R10@1   R10@2   R10@5   R2@1\n";
  for (const auto& [k, report] : rows) {
    char head[16];
    std::snprintf(head, sizeof(head), "  %-4d ", k);
    out += head + format_row("%-7.4f %-7.4f %-7.4f %-7.4f %-7.4f\n", report);
  }
  return out;
}

}  // namespace qbprf
