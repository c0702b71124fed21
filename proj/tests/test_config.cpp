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

#include <string>

#include "qbprf/config.hpp"
#include "qbprf/errors.hpp"

using namespace qbprf;

TEST_CASE("echo is a parse fixed point") {
  for (RunConfig cfg : {RunConfig(), desk_preset()}) {
    cfg.corpus = "path with spaces/corpus.jsonl";  // forces quoting
    cfg.stage2.learning_rate = 1e-5;
    cfg.sweep_k = {1, 3, 10};
    const std::string echoed = config_echo(cfg);
    RunConfig reparsed = parse_config_text(echoed);
    CHECK(config_echo(reparsed) == echoed);
    CHECK(reparsed.corpus == cfg.corpus);
    CHECK(reparsed.stage2.learning_rate == cfg.stage2.learning_rate);
    CHECK(reparsed.sweep_k == cfg.sweep_k);
  }
}

TEST_CASE("desk preset is a valid runnable configuration") {
  RunConfig cfg = desk_preset();
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.stage2.qbf.d_model == cfg.stage2.matcher.d_model);
  CHECK(cfg.stage2.k >= cfg.stage2.bag_size);
}

TEST_CASE("keys route into the nested configurations") {
  RunConfig cfg;
  apply_config_key(cfg, "stage2.lambda1", "0.25");
  CHECK(cfg.stage2.lambda1 == 0.25);
  apply_config_key(cfg, "qbs.tau", "0.9");
  CHECK(cfg.stage2.qbs.tau == 0.9);
  apply_config_key(cfg, "matcher.layers", "3");
  CHECK(cfg.stage2.matcher.layers == 3);
  apply_config_key(cfg, "qbf.aggregation", "sum");
  CHECK(cfg.stage2.qbf.aggregation == QbfConfig::Aggregation::kSum);
  apply_config_key(cfg, "stage2.ablation", "no_qbs");
  CHECK(cfg.stage2.ablation == Ablation::kNoQbs);
  apply_config_key(cfg, "stage1.beta_warmup", "false");
  CHECK_FALSE(cfg.stage1.beta_warmup);
  apply_config_key(cfg, "ablation_modes", "none,no_qbf");
  REQUIRE(cfg.ablation_modes.size() == 2);
  CHECK(cfg.ablation_modes[1] == Ablation::kNoQbf);
}

TEST_CASE("unknown keys and unparseable values are rejected by name") {
  RunConfig cfg;
  try {
    apply_config_key(cfg, "stage2.lambda3", "0.1");
    FAIL("expected rejection");
  } catch (const UserError& e) {
    CHECK(std::string(e.what()).find("stage2.lambda3") != std::string::npos);
  }
  CHECK_THROWS_AS(apply_config_key(cfg, "stage1.max_len", "abc"), UserError);
  CHECK_THROWS_AS(apply_config_key(cfg, "stage2.lambda1", "fast"), UserError);
  CHECK_THROWS_AS(apply_config_key(cfg, "qbs.in_batch_negatives", "maybe"), UserError);
  CHECK_THROWS_AS(apply_config_key(cfg, "seed", "-1"), UserError);
  CHECK_THROWS_AS(apply_config_key(cfg, "stage1.max_len", "999999999999999"), UserError);
}

TEST_CASE("master seed re-seeds both stages until re-split") {
  RunConfig cfg;
  apply_config_key(cfg, "seed", "99");
  CHECK(cfg.seed == 99);
  CHECK(cfg.stage1.rng_seed == 99);
  CHECK(cfg.stage2.rng_seed == 99);
  apply_config_key(cfg, "stage1.rng_seed", "7");
  CHECK(cfg.stage1.rng_seed == 7);
  CHECK(cfg.stage2.rng_seed == 99);
}

TEST_CASE("file syntax: sections, comments, quoting, later keys win") {
  const std::string text =
      "# a comment\n"
      "seed = 5\n"
      "\n"
      "[stage1]\n"
      "max_len = 9\n"
      "learning_rate = 0.01\n"
      "[stage2]\n"
      "lambda1 = 0.75\n"
      "lambda1 = 0.25\n"
      "[qbf]\n"
      "d_model = 48\n"
      "corpus = \"my data/corpus.jsonl\"\n";
  // A section prefixes everything after it, so bare top-level keys must come
  // before the first header -- 'corpus' above deliberately lands in [qbf].
  CHECK_THROWS_AS(parse_config_text(text), UserError);

  const std::string good =
      "seed = 5\n"
      "corpus = \"my data/corpus.jsonl\"\n"
      "[stage1]\n"
      "max_len = 9\n"
      "[stage2]\n"
      "lambda1 = 0.75\n"
      "lambda1 = 0.25\n";
  RunConfig cfg = parse_config_text(good);
  CHECK(cfg.seed == 5);
  CHECK(cfg.corpus == "my data/corpus.jsonl");
  CHECK(cfg.stage1.max_len == 9);
  CHECK(cfg.stage2.lambda1 == 0.25);
}

TEST_CASE("parse errors carry the line number") {
  try {
    parse_config_text("seed = 1\nthis line has no equals\n");
    FAIL("expected rejection");
  } catch (const UserError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_config_text("[unterminated\n"), UserError);
  CHECK_THROWS_AS(parse_config_text("[]\n"), UserError);
  CHECK_THROWS_AS(parse_config_text("= 5\n"), UserError);
}

TEST_CASE("parsing layers on top of a base configuration") {
  RunConfig base = desk_preset();
  RunConfig cfg = parse_config_text("stage2.lambda1 = 0.3\n", base);
  CHECK(cfg.stage2.lambda1 == 0.3);
  CHECK(cfg.stage2.qbf.d_model == base.stage2.qbf.d_model);  // preset survives
  CHECK(cfg.stage1.max_epochs == base.stage1.max_epochs);
}

TEST_CASE("integer and ablation lists") {
  CHECK(parse_int_list("1,3,10") == std::vector<int>{1, 3, 10});
  CHECK(parse_int_list(" 4 , 5 ") == std::vector<int>{4, 5});
  CHECK_THROWS_AS(parse_int_list(""), UserError);
  CHECK_THROWS_AS(parse_int_list("1,,3"), UserError);
  CHECK_THROWS_AS(parse_int_list("1,x"), UserError);
  CHECK_THROWS_AS(parse_int_list("1,3,"), UserError);

  const auto modes = parse_ablation_list("none,no_qbf");
  REQUIRE(modes.size() == 2);
  CHECK(modes[0] == Ablation::kNone);
  CHECK(modes[1] == Ablation::kNoQbf);
  CHECK_THROWS_AS(parse_ablation_list("nope"), UserError);
}

TEST_CASE("top-level validation catches cross-field mistakes") {
  RunConfig cfg = desk_preset();
  cfg.valid_fraction = 0.6;
  cfg.test_fraction = 0.6;
  CHECK_THROWS_AS(cfg.validate(), UserError);

  cfg = desk_preset();
  cfg.sweep_k = {0};
  CHECK_THROWS_AS(cfg.validate(), UserError);

  cfg = desk_preset();
  cfg.sweep_k.clear();
  CHECK_THROWS_AS(cfg.validate(), UserError);

  cfg = desk_preset();
  cfg.eval_k = -1;
  CHECK_THROWS_AS(cfg.validate(), UserError);

  cfg = desk_preset();
  cfg.synth.paraphrases = 1;
  CHECK_THROWS_AS(cfg.validate(), UserError);
}
