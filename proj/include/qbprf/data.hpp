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
#include <optional>
#include <string>
#include <vector>

#include "qbprf/vocab.hpp"

namespace qbprf {

// A user query / candidate question. tokens is filled by tokenize_corpus and
// is deterministic given (text, vocabulary, max_len).
struct Query {
  int64_t id = 0;
  std::string text;
  std::vector<int> tokens;
};

// A group of questions synonymous with one anchor query. The anchor is never
// listed among the members; gold[i] says whether member_ids[i] is genuinely
// synonymous with the anchor (always true for bags built from labels; mixed
// for bags assembled from retrieval candidates).
struct QueryBag {
  int64_t anchor_id = 0;
  std::vector<int64_t> member_ids;
  std::vector<bool> gold;
};

// One query-question training/evaluation pair. label is 1 iff both sides
// belong to the same gold bag. group_id keys the evaluation grouping: every
// pair generated from the same positive (the positive plus its sampled
// negatives) shares a group.
struct QQPair {
  Query query;
  Query question;
  int label = 0;
  int64_t group_id = 0;
};

// One row of a duplicate-question label file.
struct DupRecord {
  int64_t id1 = 0;
  int64_t id2 = 0;
  std::string text1;
  std::string text2;
  int is_duplicate = 0;
};

struct LoadStats {
  size_t lines = 0;           // physical non-empty lines seen
  size_t parsed = 0;          // records successfully parsed
  size_t malformed = 0;       // lines skipped with a warning
  bool header_skipped = false;
};

struct LoadResult {
  std::vector<DupRecord> records;
  LoadStats stats;
};

// Reads a TSV of duplicate-question labels: qid1 <TAB> qid2 <TAB> question1
// <TAB> question2 <TAB> is_duplicate. The first line is treated as a header
// iff it does not parse as a record; later malformed lines are skipped and
// counted. Throws UserError when the file cannot be opened.
LoadResult load_duplicate_pairs(const std::string& path);

// All distinct questions mentioned in the records, ordered by ascending id.
// When one id appears with different texts, the first occurrence wins.
std::vector<Query> collect_queries(const std::vector<DupRecord>& records);

// Connected components of the is_duplicate=1 graph (transitive closure via
// union-find). Each component of size >= 2 becomes one bag whose anchor is
// the lowest member id; every member is gold. Components of size 1 are
// dropped. Bags are ordered by ascending anchor id.
std::vector<QueryBag> build_query_bags(const std::vector<DupRecord>& records);

enum class Split { kTrain, kValid, kTest };

const char* split_name(Split split);

// Positive pairs (anchor, member) for every bag member, plus negatives drawn
// uniformly without replacement from outside the bag. Ratio is 1 negative per
// positive for train/valid and 9 for test. The train split confines negatives
// to questions covered by the given bags, so held-out questions never reach
// the trainer — not even as label-0 candidates a matcher could memorize as
// non-matches; valid/test groups rank against the whole corpus. Each positive
// and its negatives share a group_id (assigned sequentially from 0).
// Deterministic given rng_seed. Throws UserError when the pool is too small.
std::vector<QQPair> make_qq_pairs(const std::vector<Query>& corpus,
                                  const std::vector<QueryBag>& bags, Split split,
                                  uint64_t rng_seed);

// Synthetic paraphrase clusters for desk-scale verification. Every cluster
// owns a disjoint set of topic words; each paraphrase samples >= 80% of them
// (so any two paraphrases of a cluster share >= 60%) plus a few noise words
// drawn from a pool common to all clusters. Returns the queries (ids dense
// from 0, cluster-major) and one gold bag per cluster. Deterministic given
// rng_seed. Throws UserError when vocab_size cannot fit disjoint topics.
struct SyntheticCorpus {
  std::vector<Query> queries;
  std::vector<QueryBag> bags;
};
SyntheticCorpus gen_synthetic_corpus(int n_clusters, int paraphrases_per_cluster, int vocab_size,
                                     uint64_t rng_seed);

// Fills Query::tokens for the whole corpus.
void tokenize_corpus(std::vector<Query>& queries, const Vocabulary& vocab, int max_len);

// Splits bags (not queries) into train/valid/test by shuffled assignment with
// the given fractions; remainder goes to train. Deterministic given rng_seed.
struct BagSplits {
  std::vector<QueryBag> train;
  std::vector<QueryBag> valid;
  std::vector<QueryBag> test;
};
BagSplits split_bags(const std::vector<QueryBag>& bags, double valid_fraction,
                     double test_fraction, uint64_t rng_seed);

// JSON-lines persistence. Queries: one {"id", "text"} object per line.
// Bags: one {"anchor_id", "member_ids", "gold"} object per line.
void save_corpus_jsonl(const std::string& path, const std::vector<Query>& queries);
std::vector<Query> load_corpus_jsonl(const std::string& path);
void save_bags_jsonl(const std::string& path, const std::vector<QueryBag>& bags);
std::vector<QueryBag> load_bags_jsonl(const std::string& path);

}  // namespace qbprf
