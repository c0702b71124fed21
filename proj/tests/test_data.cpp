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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include "qbprf/data.hpp"
#include "qbprf/errors.hpp"
#include "qbprf/rng.hpp"
#include "qbprf/serialize.hpp"
#include "qbprf/vocab.hpp"

using namespace qbprf;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::trunc);
  out << content;
}

// Brute-force connected components over the is_duplicate=1 graph; the oracle
// build_query_bags must reproduce (repeated BFS, no union-find).
std::vector<std::vector<int64_t>> brute_force_components(const std::vector<DupRecord>& records) {
  std::unordered_map<int64_t, std::vector<int64_t>> adj;
  std::set<int64_t> nodes;
  for (const auto& r : records) {
    if (r.is_duplicate != 1) continue;
    adj[r.id1].push_back(r.id2);
    adj[r.id2].push_back(r.id1);
    nodes.insert(r.id1);
    nodes.insert(r.id2);
  }
  std::vector<std::vector<int64_t>> components;
  std::unordered_set<int64_t> visited;
  for (int64_t start : nodes) {
    if (visited.count(start)) continue;
    std::vector<int64_t> frontier = {start}, comp;
    visited.insert(start);
    while (!frontier.empty()) {
      int64_t cur = frontier.back();
      frontier.pop_back();
      comp.push_back(cur);
      for (int64_t nb : adj[cur])
        if (visited.insert(nb).second) frontier.push_back(nb);
    }
    std::sort(comp.begin(), comp.end());
    components.push_back(std::move(comp));
  }
  std::sort(components.begin(), components.end());
  return components;
}

double token_jaccard(const std::string& a, const std::string& b) {
  auto wa = split_words(a);
  auto wb = split_words(b);
  std::set<std::string> sa(wa.begin(), wa.end()), sb(wb.begin(), wb.end());
  size_t inter = 0;
  for (const auto& w : sa) inter += sb.count(w);
  size_t uni = sa.size() + sb.size() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace

TEST_CASE("split_words lowercases and strips punctuation") {
  auto words = split_words("How OLD are you, really?  ");
  REQUIRE(words.size() == 5);
  CHECK(words[0] == "how");
  CHECK(words[1] == "old");
  CHECK(words[4] == "really");
  CHECK(split_words("").empty());
  CHECK(split_words("?!...").empty());
}

TEST_CASE("vocabulary ranks by frequency then lexicographically") {
  Vocabulary v = Vocabulary::build({"b b b", "a a", "c a", "d"});
  // a: 3, b: 3, c: 1, d: 1 -> a before b (tie), c before d (tie)
  CHECK(v.id_of("a") == kNumReservedIds + 0);
  CHECK(v.id_of("b") == kNumReservedIds + 1);
  CHECK(v.id_of("c") == kNumReservedIds + 2);
  CHECK(v.id_of("d") == kNumReservedIds + 3);
  CHECK(v.size() == kNumReservedIds + 4);
  CHECK(v.id_of("zebra") == kUnkId);
  CHECK(v.token_of(kPadId) == "<pad>");
}

TEST_CASE("vocabulary max_size caps the table and round-trips") {
  Vocabulary v = Vocabulary::build({"a a a b b c"}, kNumReservedIds + 2);
  CHECK(v.size() == kNumReservedIds + 2);
  CHECK(v.contains("a"));
  CHECK(v.contains("b"));
  CHECK_FALSE(v.contains("c"));

  std::stringstream ss;
  v.write(ss);
  Vocabulary w = Vocabulary::read(ss);
  CHECK(w.size() == v.size());
  CHECK(w.content_hash() == v.content_hash());
  CHECK(w.id_of("b") == v.id_of("b"));
}

TEST_CASE("tokenize pads, truncates, and maps OOV to UNK") {
  Vocabulary v = Vocabulary::build({"how old are you"});
  auto ids = tokenize("How old", v, 5);
  REQUIRE(ids.size() == 5);
  CHECK(ids[0] == v.id_of("how"));
  CHECK(ids[1] == v.id_of("old"));
  CHECK(ids[2] == kPadId);
  CHECK(ids[3] == kPadId);
  CHECK(ids[4] == kPadId);

  // 60-word text truncates to the first max_len tokens.
  std::string long_text;
  for (int i = 0; i < 60; ++i) long_text += "how ";
  auto long_ids = tokenize(long_text, v, 50);
  CHECK(long_ids.size() == 50);
  for (int id : long_ids) CHECK(id == v.id_of("how"));

  CHECK(tokenize("unseenword", v, 2)[0] == kUnkId);
}

TEST_CASE("load_duplicate_pairs parses rows and skips the header") {
  std::string path = temp_path("qbprf_pairs.tsv");

  SUBCASE("single data row, no header") {
    write_text(path, "1\t2\tA?\tB?\t1\n");
    auto result = load_duplicate_pairs(path);
    REQUIRE(result.records.size() == 1);
    CHECK(result.records[0].id1 == 1);
    CHECK(result.records[0].id2 == 2);
    CHECK(result.records[0].text1 == "A?");
    CHECK(result.records[0].is_duplicate == 1);
    CHECK_FALSE(result.stats.header_skipped);
    CHECK(result.stats.malformed == 0);
  }

  SUBCASE("header only gives an empty list") {
    write_text(path, "qid1\tqid2\tquestion1\tquestion2\tis_duplicate\n");
    auto result = load_duplicate_pairs(path);
    CHECK(result.records.empty());
    CHECK(result.stats.header_skipped);
    CHECK(result.stats.malformed == 0);
  }

  SUBCASE("out-of-range duplicate flag is counted as malformed") {
    write_text(path,
               "qid1\tqid2\tquestion1\tquestion2\tis_duplicate\n"
               "1\t2\tA\tB\t2\n"
               "3\t4\tC\tD\t0\n");
    auto result = load_duplicate_pairs(path);
    REQUIRE(result.records.size() == 1);
    CHECK(result.records[0].id1 == 3);
    CHECK(result.stats.malformed == 1);
    CHECK(result.stats.header_skipped);
  }

  SUBCASE("missing file is fatal") {
    CHECK_THROWS_AS(load_duplicate_pairs("/nonexistent/qbprf.tsv"), UserError);
  }

  std::remove(path.c_str());
}

TEST_CASE("build_query_bags closes the duplicate relation transitively") {
  std::vector<DupRecord> records = {
      {10, 20, "a", "b", 1},
      {20, 30, "b", "c", 1},
  };
  auto bags = build_query_bags(records);
  REQUIRE(bags.size() == 1);
  CHECK(bags[0].anchor_id == 10);
  REQUIRE(bags[0].member_ids.size() == 2);
  CHECK(bags[0].member_ids[0] == 20);
  CHECK(bags[0].member_ids[1] == 30);
  CHECK(bags[0].gold == std::vector<bool>{true, true});
}

TEST_CASE("non-duplicates form no bags and disjoint pairs form separate bags") {
  CHECK(build_query_bags({{1, 2, "a", "b", 0}}).empty());
  auto bags = build_query_bags({{1, 2, "a", "b", 1}, {3, 4, "c", "d", 1}});
  REQUIRE(bags.size() == 2);
  CHECK(bags[0].anchor_id == 1);
  CHECK(bags[1].anchor_id == 3);
}

TEST_CASE("bags match a brute-force component enumeration on a random graph") {
  Rng rng(99);
  std::vector<DupRecord> records;
  for (int i = 0; i < 300; ++i) {
    auto a = static_cast<int64_t>(rng.uniform_int(0, 120));
    auto b = static_cast<int64_t>(rng.uniform_int(0, 120));
    if (a == b) continue;
    records.push_back(DupRecord{a, b, "qa", "qb", rng.uniform() < 0.6 ? 1 : 0});
  }
  auto bags = build_query_bags(records);
  auto oracle = brute_force_components(records);
  std::vector<std::vector<int64_t>> oracle_sized;
  for (auto& comp : oracle)
    if (comp.size() >= 2) oracle_sized.push_back(comp);
  REQUIRE(bags.size() == oracle_sized.size());
  std::unordered_set<int64_t> seen_ids;
  for (size_t i = 0; i < bags.size(); ++i) {
    std::vector<int64_t> all = {bags[i].anchor_id};
    all.insert(all.end(), bags[i].member_ids.begin(), bags[i].member_ids.end());
    CHECK(all == oracle_sized[i]);
    // Partition property: no id may appear in two bags.
    for (int64_t id : all) CHECK(seen_ids.insert(id).second);
  }
}

TEST_CASE("make_qq_pairs honors the split ratios") {
  auto corpus_data = gen_synthetic_corpus(8, 3, 100, 5);
  const auto& corpus = corpus_data.queries;
  std::vector<QueryBag> one_bag = {corpus_data.bags[0]};
  REQUIRE(one_bag[0].member_ids.size() == 2);

  auto train = make_qq_pairs(corpus, one_bag, Split::kTrain, 7);
  CHECK(train.size() == 4);  // 2 positives + 2 negatives
  auto test = make_qq_pairs(corpus, one_bag, Split::kTest, 7);
  CHECK(test.size() == 20);  // 2 positives + 18 negatives

  size_t pos = 0, neg = 0;
  for (const auto& p : test) (p.label == 1 ? pos : neg)++;
  CHECK(pos == 2);
  CHECK(neg == 18);

  // Each group holds exactly one positive and negatives_per_positive negatives.
  std::unordered_map<int64_t, std::pair<int, int>> groups;
  for (const auto& p : test) {
    auto& [gpos, gneg] = groups[p.group_id];
    (p.label == 1 ? gpos : gneg)++;
  }
  CHECK(groups.size() == 2);
  for (auto& [gid, counts] : groups) {
    CHECK(counts.first == 1);
    CHECK(counts.second == 9);
  }
}

TEST_CASE("make_qq_pairs negatives never share a bag with the query") {
  auto corpus_data = gen_synthetic_corpus(6, 4, 100, 11);
  auto pairs = make_qq_pairs(corpus_data.queries, corpus_data.bags, Split::kTest, 3);
  std::unordered_map<int64_t, std::unordered_set<int64_t>> bag_of;
  for (const auto& bag : corpus_data.bags) {
    auto& members = bag_of[bag.anchor_id];
    members.insert(bag.anchor_id);
    for (int64_t m : bag.member_ids) members.insert(m);
  }
  for (const auto& p : pairs) {
    bool same_bag = bag_of[p.query.id].count(p.question.id) > 0;
    if (p.label == 1)
      CHECK(same_bag);
    else
      CHECK_FALSE(same_bag);
  }
  // Within a group, sampled negatives are distinct.
  std::unordered_map<int64_t, std::set<int64_t>> group_negs;
  for (const auto& p : pairs)
    if (p.label == 0) CHECK(group_negs[p.group_id].insert(p.question.id).second);
}

TEST_CASE("make_qq_pairs is deterministic and fails on a tiny pool") {
  auto corpus_data = gen_synthetic_corpus(6, 2, 100, 2);
  auto a = make_qq_pairs(corpus_data.queries, corpus_data.bags, Split::kTest, 42);
  auto b = make_qq_pairs(corpus_data.queries, corpus_data.bags, Split::kTest, 42);
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].query.id == b[i].query.id);
    CHECK(a[i].question.id == b[i].question.id);
    CHECK(a[i].label == b[i].label);
    CHECK(a[i].group_id == b[i].group_id);
  }
  // 2 clusters x 2 paraphrases: out-of-bag pool is 2 < 9 negatives needed.
  auto tiny = gen_synthetic_corpus(2, 2, 100, 2);
  CHECK_THROWS_AS(make_qq_pairs(tiny.queries, tiny.bags, Split::kTest, 1), UserError);
}

TEST_CASE("synthetic corpus counts, determinism, and cluster structure") {
  auto c = gen_synthetic_corpus(3, 2, 100, 7);
  CHECK(c.queries.size() == 6);
  REQUIRE(c.bags.size() == 3);
  for (const auto& bag : c.bags) CHECK(bag.member_ids.size() == 1);

  auto c2 = gen_synthetic_corpus(3, 2, 100, 7);
  for (size_t i = 0; i < c.queries.size(); ++i) {
    CHECK(c.queries[i].id == c2.queries[i].id);
    CHECK(c.queries[i].text == c2.queries[i].text);
  }

  CHECK_THROWS_AS(gen_synthetic_corpus(1, 2, 100, 7), UserError);
  CHECK_THROWS_AS(gen_synthetic_corpus(3, 1, 100, 7), UserError);
  CHECK_THROWS_AS(gen_synthetic_corpus(30, 2, 50, 7), UserError);  // topics cannot be disjoint
}

TEST_CASE("synthetic intra-cluster Jaccard exceeds inter-cluster on average") {
  auto c = gen_synthetic_corpus(10, 6, 200, 13);
  int per = 6;
  double intra = 0, inter = 0;
  int n_intra = 0, n_inter = 0;
  for (size_t i = 0; i < c.queries.size(); ++i) {
    for (size_t j = i + 1; j < c.queries.size(); ++j) {
      double jac = token_jaccard(c.queries[i].text, c.queries[j].text);
      if (i / per == j / per) {
        intra += jac;
        ++n_intra;
      } else {
        inter += jac;
        ++n_inter;
      }
    }
  }
  intra /= n_intra;
  inter /= n_inter;
  CHECK(intra > inter);
  CHECK(intra > 0.4);   // >= 60% topic overlap guarantee keeps this high
  CHECK(inter < 0.25);  // disjoint topics leave only noise-word collisions
}

TEST_CASE("split_bags partitions bags deterministically") {
  auto c = gen_synthetic_corpus(20, 3, 200, 3);
  auto s = split_bags(c.bags, 0.2, 0.3, 17);
  CHECK(s.train.size() == 10);
  CHECK(s.valid.size() == 4);
  CHECK(s.test.size() == 6);
  std::set<int64_t> anchors;
  for (const auto* part : {&s.train, &s.valid, &s.test})
    for (const auto& bag : *part) CHECK(anchors.insert(bag.anchor_id).second);
  CHECK(anchors.size() == c.bags.size());

  auto s2 = split_bags(c.bags, 0.2, 0.3, 17);
  for (size_t i = 0; i < s.test.size(); ++i) CHECK(s.test[i].anchor_id == s2.test[i].anchor_id);
  CHECK_THROWS_AS(split_bags(c.bags, 0.8, 0.4, 1), UserError);
}

TEST_CASE("corpus and bag JSONL round-trips preserve content") {
  auto c = gen_synthetic_corpus(4, 3, 100, 21);
  std::string qpath = temp_path("qbprf_corpus.jsonl");
  std::string bpath = temp_path("qbprf_bags.jsonl");
  save_corpus_jsonl(qpath, c.queries);
  save_bags_jsonl(bpath, c.bags);

  auto queries = load_corpus_jsonl(qpath);
  REQUIRE(queries.size() == c.queries.size());
  for (size_t i = 0; i < queries.size(); ++i) {
    CHECK(queries[i].id == c.queries[i].id);
    CHECK(queries[i].text == c.queries[i].text);
  }
  auto bags = load_bags_jsonl(bpath);
  REQUIRE(bags.size() == c.bags.size());
  for (size_t i = 0; i < bags.size(); ++i) {
    CHECK(bags[i].anchor_id == c.bags[i].anchor_id);
    CHECK(bags[i].member_ids == c.bags[i].member_ids);
    CHECK(bags[i].gold == c.bags[i].gold);
  }

  // Field names are part of the format contract.
  std::string first_line = read_file(qpath).substr(0, read_file(qpath).find('\n'));
  CHECK(first_line.find("\"id\"") != std::string::npos);
  CHECK(first_line.find("\"text\"") != std::string::npos);

  std::remove(qpath.c_str());
  std::remove(bpath.c_str());
}

TEST_CASE("collect_queries dedupes ids keeping the first text") {
  std::vector<DupRecord> records = {
      {5, 2, "five", "two", 1},
      {2, 7, "two-again", "seven", 0},
  };
  auto queries = collect_queries(records);
  REQUIRE(queries.size() == 3);
  CHECK(queries[0].id == 2);
  CHECK(queries[0].text == "two");  // first occurrence wins
  CHECK(queries[1].id == 5);
  CHECK(queries[2].id == 7);
}
