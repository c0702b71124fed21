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

#include "qbprf/data.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "qbprf/errors.hpp"
#include "qbprf/rng.hpp"

namespace qbprf {

namespace {

bool parse_i64(const std::string& s, int64_t* out) {
  if (s.empty()) return false;
  size_t pos = 0;
  try {
    int64_t v = std::stoll(s, &pos);
    if (pos != s.size()) return false;
    *out = v;
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

std::vector<std::string> split_tsv(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, '\t')) fields.push_back(field);
  if (!line.empty() && line.back() == '\t') fields.emplace_back();
  return fields;
}

bool parse_record(const std::string& line, DupRecord* out) {
  auto fields = split_tsv(line);
  if (fields.size() != 5) return false;
  DupRecord rec;
  if (!parse_i64(fields[0], &rec.id1)) return false;
  if (!parse_i64(fields[1], &rec.id2)) return false;
  rec.text1 = fields[2];
  rec.text2 = fields[3];
  int64_t dup = 0;
  if (!parse_i64(fields[4], &dup)) return false;
  if (dup != 0 && dup != 1) return false;
  rec.is_duplicate = static_cast<int>(dup);
  *out = rec;
  return true;
}

// Union-find over arbitrary int64 ids with path compression.
class UnionFind {
 public:
  int64_t find(int64_t x) {
    auto it = parent_.find(x);
    if (it == parent_.end()) {
      parent_.emplace(x, x);
      return x;
    }
    if (it->second == x) return x;
    int64_t root = find(it->second);
    parent_[x] = root;
    return root;
  }

  void unite(int64_t a, int64_t b) {
    int64_t ra = find(a), rb = find(b);
    if (ra == rb) return;
    // Lower root wins so component roots are stable and order-independent.
    if (ra < rb)
      parent_[rb] = ra;
    else
      parent_[ra] = rb;
  }

 private:
  std::unordered_map<int64_t, int64_t> parent_;
};

}  // namespace

LoadResult load_duplicate_pairs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UserError("cannot open duplicate-pair file: " + path);

  LoadResult result;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ++result.stats.lines;
    DupRecord rec;
    bool ok = parse_record(line, &rec);
    if (first) {
      first = false;
      if (!ok) {
        // The first unparsable line is the header, not a malformed record.
        result.stats.header_skipped = true;
        continue;
      }
    }
    if (ok) {
      result.records.push_back(std::move(rec));
      ++result.stats.parsed;
    } else {
      ++result.stats.malformed;
    }
  }
  return result;
}

std::vector<Query> collect_queries(const std::vector<DupRecord>& records) {
  std::map<int64_t, std::string> by_id;  // ordered => output sorted by id
  for (const auto& rec : records) {
    by_id.emplace(rec.id1, rec.text1);
    by_id.emplace(rec.id2, rec.text2);
  }
  std::vector<Query> queries;
  queries.reserve(by_id.size());
  for (auto& [id, text] : by_id) queries.push_back(Query{id, std::move(text), {}});
  return queries;
}

std::vector<QueryBag> build_query_bags(const std::vector<DupRecord>& records) {
  UnionFind uf;
  for (const auto& rec : records)
    if (rec.is_duplicate == 1) uf.unite(rec.id1, rec.id2);

  std::map<int64_t, std::vector<int64_t>> components;  // root -> member ids
  std::unordered_set<int64_t> seen;
  for (const auto& rec : records) {
    if (rec.is_duplicate != 1) continue;
    for (int64_t id : {rec.id1, rec.id2})
      if (seen.insert(id).second) components[uf.find(id)].push_back(id);
  }

  std::vector<QueryBag> bags;
  for (auto& [root, ids] : components) {
    if (ids.size() < 2) continue;
    std::sort(ids.begin(), ids.end());
    QueryBag bag;
    bag.anchor_id = ids.front();
    bag.member_ids.assign(ids.begin() + 1, ids.end());
    bag.gold.assign(bag.member_ids.size(), true);
    bags.push_back(std::move(bag));
  }
  // components is keyed by root = lowest id, so bags are already sorted by anchor.
  return bags;
}

const char* split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  throw InternalError("unknown split");
}

std::vector<QQPair> make_qq_pairs(const std::vector<Query>& corpus,
                                  const std::vector<QueryBag>& bags, Split split,
                                  uint64_t rng_seed) {
  std::unordered_map<int64_t, const Query*> by_id;
  by_id.reserve(corpus.size());
  for (const auto& q : corpus) by_id.emplace(q.id, &q);
  auto lookup = [&](int64_t id) -> const Query& {
    auto it = by_id.find(id);
    if (it == by_id.end())
      throw UserError("bag references query id " + std::to_string(id) + " not in the corpus");
    return *it->second;
  };

  const int negatives_per_positive = split == Split::kTest ? 9 : 1;

  // Training negatives are confined to the questions the given bags cover:
  // sampling them from the whole corpus would expose held-out questions to
  // the trainer as label-0 candidates, and a matcher can exploit that by
  // memorizing them as non-matches — inverting every held-out ranking.
  // Evaluation groups rank against the full corpus instead; distractors in
  // a ranking list feed no labels back into training.
  const bool train_split = split == Split::kTrain;
  std::unordered_set<int64_t> coverage;
  if (train_split) {
    for (const auto& bag : bags) {
      coverage.insert(bag.anchor_id);
      coverage.insert(bag.member_ids.begin(), bag.member_ids.end());
    }
  }

  Rng rng(rng_seed);
  std::vector<QQPair> pairs;
  int64_t group = 0;
  for (const auto& bag : bags) {
    std::unordered_set<int64_t> in_bag(bag.member_ids.begin(), bag.member_ids.end());
    in_bag.insert(bag.anchor_id);
    std::vector<size_t> pool;
    pool.reserve(train_split ? coverage.size() : corpus.size());
    for (size_t i = 0; i < corpus.size(); ++i) {
      if (in_bag.count(corpus[i].id)) continue;
      if (train_split && !coverage.count(corpus[i].id)) continue;
      pool.push_back(i);
    }
    if (pool.size() < static_cast<size_t>(negatives_per_positive))
      throw UserError("not enough out-of-bag queries for negative sampling: need " +
                      std::to_string(negatives_per_positive) + " per positive, pool has " +
                      std::to_string(pool.size()));

    const Query& anchor = lookup(bag.anchor_id);
    for (int64_t member_id : bag.member_ids) {
      pairs.push_back(QQPair{anchor, lookup(member_id), 1, group});
      auto picks = rng.sample_without_replacement(pool.size(), negatives_per_positive);
      for (size_t pick : picks) pairs.push_back(QQPair{anchor, corpus[pool[pick]], 0, group});
      ++group;
    }
  }
  return pairs;
}

SyntheticCorpus gen_synthetic_corpus(int n_clusters, int paraphrases_per_cluster, int vocab_size,
                                     uint64_t rng_seed) {
  if (n_clusters < 2) throw UserError("gen_synthetic_corpus: need at least 2 clusters");
  if (paraphrases_per_cluster < 2)
    throw UserError("gen_synthetic_corpus: need at least 2 paraphrases per cluster");

  constexpr int kTopicWords = 5;       // per cluster, disjoint across clusters
  constexpr int kTopicMin = 4;         // >= 80% of kTopicWords per paraphrase
  constexpr int kNoisePool = 12;       // words shared by all clusters
  const int needed = n_clusters * kTopicWords + kNoisePool;
  if (vocab_size < needed)
    throw UserError("gen_synthetic_corpus: vocab_size " + std::to_string(vocab_size) +
                    " too small for " + std::to_string(n_clusters) +
                    " disjoint topics (need >= " + std::to_string(needed) + ")");

  auto word = [](int k) { return "w" + std::to_string(k); };

  Rng rng(rng_seed);
  SyntheticCorpus corpus;
  corpus.queries.reserve(static_cast<size_t>(n_clusters) * paraphrases_per_cluster);
  for (int c = 0; c < n_clusters; ++c) {
    QueryBag bag;
    for (int p = 0; p < paraphrases_per_cluster; ++p) {
      int64_t id = static_cast<int64_t>(c) * paraphrases_per_cluster + p;
      // Take kTopicMin or all kTopicWords topic words for this paraphrase:
      // any two subsets of size >= 4 out of 5 share >= 3 words (60%).
      int take = kTopicMin + rng.uniform_int(0, kTopicWords - kTopicMin);
      auto topic_picks = rng.sample_without_replacement(kTopicWords, take);
      // Paraphrases of one cluster keep the cluster's canonical word order
      // (sorted topic indices); each noise word lands at a random position.
      // Mirrors natural paraphrase groups, which share phrase structure up
      // to dropped words and fillers — a fully shuffled order would make
      // the clusters unlearnable for any order-sensitive encoder.
      std::sort(topic_picks.begin(), topic_picks.end());
      std::vector<std::string> words;
      for (int64_t t : topic_picks) words.push_back(word(c * kTopicWords + static_cast<int>(t)));
      int noise = 2 + rng.uniform_int(0, 1);
      auto noise_picks = rng.sample_without_replacement(kNoisePool, noise);
      for (int64_t t : noise_picks) {
        auto pos = static_cast<size_t>(rng.uniform_int(0, static_cast<int>(words.size())));
        words.insert(words.begin() + static_cast<long>(pos),
                     word(n_clusters * kTopicWords + static_cast<int>(t)));
      }
      std::string text;
      for (size_t w = 0; w < words.size(); ++w) {
        if (w) text.push_back(' ');
        text += words[w];
      }
      corpus.queries.push_back(Query{id, std::move(text), {}});
      if (p == 0)
        bag.anchor_id = id;
      else
        bag.member_ids.push_back(id);
    }
    bag.gold.assign(bag.member_ids.size(), true);
    corpus.bags.push_back(std::move(bag));
  }
  return corpus;
}

void tokenize_corpus(std::vector<Query>& queries, const Vocabulary& vocab, int max_len) {
  for (auto& q : queries) q.tokens = tokenize(q.text, vocab, max_len);
}

BagSplits split_bags(const std::vector<QueryBag>& bags, double valid_fraction,
                     double test_fraction, uint64_t rng_seed) {
  if (valid_fraction < 0 || test_fraction < 0 || valid_fraction + test_fraction > 1.0)
    throw UserError("split_bags: fractions must be non-negative and sum to <= 1");
  std::vector<size_t> order(bags.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(rng_seed);
  rng.shuffle(order);

  auto n = static_cast<double>(bags.size());
  auto n_test = static_cast<size_t>(test_fraction * n + 0.5);
  auto n_valid = static_cast<size_t>(valid_fraction * n + 0.5);
  BagSplits splits;
  for (size_t i = 0; i < order.size(); ++i) {
    const QueryBag& bag = bags[order[i]];
    if (i < n_test)
      splits.test.push_back(bag);
    else if (i < n_test + n_valid)
      splits.valid.push_back(bag);
    else
      splits.train.push_back(bag);
  }
  auto by_anchor = [](const QueryBag& a, const QueryBag& b) { return a.anchor_id < b.anchor_id; };
  std::sort(splits.train.begin(), splits.train.end(), by_anchor);
  std::sort(splits.valid.begin(), splits.valid.end(), by_anchor);
  std::sort(splits.test.begin(), splits.test.end(), by_anchor);
  return splits;
}

void save_corpus_jsonl(const std::string& path, const std::vector<Query>& queries) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw UserError("cannot open file for writing: " + path);
  for (const auto& q : queries) {
    nlohmann::json j;
    j["id"] = q.id;
    j["text"] = q.text;
    out << j.dump() << "\n";
  }
  if (!out) throw UserError("failed writing corpus: " + path);
}

std::vector<Query> load_corpus_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UserError("cannot open corpus file: " + path);
  std::vector<Query> queries;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      queries.push_back(Query{j.at("id").get<int64_t>(), j.at("text").get<std::string>(), {}});
    } catch (const nlohmann::json::exception& e) {
      throw UserError("corpus " + path + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return queries;
}

void save_bags_jsonl(const std::string& path, const std::vector<QueryBag>& bags) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw UserError("cannot open file for writing: " + path);
  for (const auto& bag : bags) {
    nlohmann::json j;
    j["anchor_id"] = bag.anchor_id;
    j["member_ids"] = bag.member_ids;
    j["gold"] = std::vector<bool>(bag.gold.begin(), bag.gold.end());
    out << j.dump() << "\n";
  }
  if (!out) throw UserError("failed writing bags: " + path);
}

std::vector<QueryBag> load_bags_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UserError("cannot open bag file: " + path);
  std::vector<QueryBag> bags;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto j = nlohmann::json::parse(line);
      QueryBag bag;
      bag.anchor_id = j.at("anchor_id").get<int64_t>();
      bag.member_ids = j.at("member_ids").get<std::vector<int64_t>>();
      bag.gold = j.at("gold").get<std::vector<bool>>();
      if (bag.gold.size() != bag.member_ids.size())
        throw UserError("bag " + std::to_string(bag.anchor_id) + " gold/member size mismatch");
      bags.push_back(std::move(bag));
    } catch (const nlohmann::json::exception& e) {
      throw UserError("bags " + path + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return bags;
}

}  // namespace qbprf
