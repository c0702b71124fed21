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
#include <functional>
#include <string>
#include <vector>

#include "qbprf/data.hpp"
#include "qbprf/index.hpp"

namespace qbprf {

// Ranking quality summary over grouped evaluation pairs.
struct MetricsReport {
  double mrr = 0.0;
  double r10_at_1 = 0.0;
  double r10_at_2 = 0.0;
  double r10_at_5 = 0.0;
  double r2_at_1 = 0.0;
  int64_t n_queries = 0;
  std::string config_fingerprint;
};

// Mean over lists of 1/rank (1-based) of the first relevant candidate.
// relevant[i] holds the relevant ids of lists[i]; a list containing none of
// its relevant ids is fatal (every evaluation group is built around one
// positive).
double mrr(const std::vector<RankedList>& lists,
           const std::vector<std::vector<int64_t>>& relevant);

// Fraction of lists whose single relevant candidate sits within the top k.
// Every list must hold exactly n candidates, exactly one of them relevant.
double recall_at(const std::vector<RankedList>& lists,
                 const std::vector<std::vector<int64_t>>& relevant, int n, int k);

// Mean over selected bags of the fraction of members that belong to the
// anchor's gold bag. gold_bags must cover every selected anchor.
double qbs_accuracy(const std::vector<QueryBag>& selected_bags,
                    const std::vector<QueryBag>& gold_bags);

// Scores every pair of every evaluation group (grouped by group_id; exactly
// 10 pairs with exactly 1 positive each, anything else is fatal), ranks by
// descending score with ascending question-id ties, and assembles the
// report. The two-candidate metric draws one negative per group with a
// group-id-keyed fork of rng_seed, so it is independent of group order.
MetricsReport build_report(const std::vector<QQPair>& test_pairs,
                           const std::function<double(const QQPair&)>& scorer, uint64_t rng_seed,
                           const std::string& config_fingerprint);

// Tab-separated emission: header + one value row. Columns exactly
// MRR, R10@1, R10@2, R10@5, R2@1.
std::string report_tsv(const MetricsReport& report);
// Human-readable two-row table with the same columns.
std::string report_table(const MetricsReport& report);

// Sweep emissions: one row per (candidate count, report).
std::string sweep_tsv(const std::vector<std::pair<int, MetricsReport>>& rows);
std::string sweep_table(const std::vector<std::pair<int, MetricsReport>>& rows);

}  // namespace qbprf
