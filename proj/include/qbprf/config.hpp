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
#include <string>
#include <vector>

#include "qbprf/pipeline.hpp"
#include "qbprf/vae.hpp"

namespace qbprf {

// Everything one run needs, merged into a single view: both training stages,
// the selector/fusion/matcher widths nested inside the second stage, data
// and checkpoint paths, and the master seed. Loadable from a key = value
// file ('#' comments, optional [section] headers) with command-line
// overrides applied on top.
struct RunConfig {
  // Master seed. Assigning it (file key or flag) also assigns both stages'
  // rng_seed; a later stage1.rng_seed / stage2.rng_seed key re-splits them.
  uint64_t seed = 0;

  // Paths. Inputs are files or checkpoint prefixes; out is a directory that
  // receives config.echo, checkpoints/, logs/, and reports/.
  std::string out = "qbprf_out";
  std::string corpus;             // corpus JSONL (one {"id","text"} per line)
  std::string bags;               // gold bags JSONL
  std::string pairs;              // duplicate-question TSV (prepare-data input)
  std::string stage1_checkpoint;  // prefix of the representation checkpoint
  std::string index;              // prefix of the embedding index
  std::string stage2_checkpoint;  // prefix of the joint checkpoint

  // Bag split fractions (remainder of the bags trains).
  double valid_fraction = 0.1;
  double test_fraction = 0.2;

  // Evaluation knobs. eval_k = 0 means "use the checkpoint's own k".
  int eval_k = 0;
  std::vector<int> sweep_k = {1, 3, 5, 10};
  std::vector<Ablation> ablation_modes = {Ablation::kNone, Ablation::kNoQbs, Ablation::kNoQbf,
                                          Ablation::kMatcherOnly};

  // Synthetic corpus shape (gen-synthetic).
  struct Synth {
    int clusters = 200;
    int paraphrases = 8;
    int vocab_size = 2000;
  } synth;

  Stage1Config stage1;
  Stage2Config stage2;  // carries the selector, fusion, and matcher configs

  // Throws UserError when any nested configuration is out of range.
  void validate() const;
};

// Small desk-scale preset: every width shrunk so a full two-stage run over a
// synthetic corpus finishes in minutes on one CPU core.
RunConfig desk_preset();

// Applies one dotted key ("stage2.lambda1", "qbs.tau", "seed", ...). Throws
// UserError naming the key when it is unknown or its value does not parse.
void apply_config_key(RunConfig& config, const std::string& key, const std::string& value);

// Parses config text into `base`, top to bottom (later keys win). Lines are
// `key = value`; '#' starts a full-line comment; `[section]` prefixes the
// keys after it. Values may be double-quoted. Throws UserError with the line
// number on malformed lines and unknown keys.
RunConfig parse_config_text(const std::string& text, RunConfig base = RunConfig());

// parse_config_text over a file's contents. Throws UserError when the file
// cannot be read.
RunConfig load_config_file(const std::string& path, RunConfig base = RunConfig());

// Canonical echo: every key once, fixed order, parseable back into an
// identical config (parse_config_text(config_echo(c)) echoes byte-identically).
std::string config_echo(const RunConfig& config);

// Comma-separated lists for flags and config values ("1,3,10"). Throws
// UserError on empty lists or unparseable items.
std::vector<int> parse_int_list(const std::string& text);
std::vector<Ablation> parse_ablation_list(const std::string& text);

}  // namespace qbprf
