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
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "qbprf/data.hpp"
#include "qbprf/index.hpp"
#include "qbprf/matcher.hpp"
#include "qbprf/metrics.hpp"
#include "qbprf/qbf.hpp"
#include "qbprf/qbs.hpp"
#include "qbprf/vae.hpp"

namespace qbprf {

// Joint-training variants. kNone runs the full pipeline. kNoQbs feeds the
// raw top-k candidates to fusion (the selector is never consulted and its
// losses are dropped, leaving the match loss at weight 1). kNoQbf replaces
// attention fusion with the pooled-summation fallback over the selected bag.
// kMatcherOnly drops retrieval entirely and matches against the projected
// query representation alone (the plain query-question baseline).
enum class Ablation { kNone, kNoQbs, kNoQbf, kMatcherOnly };

const char* ablation_name(Ablation a);
Ablation ablation_from_name(const std::string& name);  // throws UserError

// Joint-training (stage 2) configuration. bag_size is authoritative: the
// trainer copies it over the selector sub-config's own bag_size. The matcher
// sub-config's vocab_size and max_positions are derived from the stage-1
// checkpoint (vocabulary size and 3*max_len + 1 joined rows).
struct Stage2Config {
  double lambda1 = 0.5;        // selection-loss weight; reward gets 1 - lambda1
  double lambda2 = 0.1;        // match-loss weight
  double learning_rate = 1e-5;
  int batch_size = 8;          // query-question pairs per optimizer step
  int k = 10;                  // retrieval candidates per anchor
  int bag_size = 5;            // candidates the selector admits into the bag
  double validation_interval = 0.1;  // fraction of an epoch between validations
  int max_epochs = 1;
  Ablation ablation = Ablation::kNone;
  uint64_t rng_seed = 0;
  // Off by default: retrieval runs against the index built from the stage-1
  // encoder for the whole run. When set, the index is rebuilt from the
  // fine-tuned encoder after every validation, and the pseudo-positive
  // labels follow the rebuilt embeddings.
  bool rebuild_index_on_validation = false;

  QbsConfig qbs;
  QbfConfig qbf;
  MatcherConfig matcher;

  // Throws UserError when a field is out of its documented range.
  void validate() const;
};

// Effective component weights after applying the ablation: the full pipeline
// and the summation ablation use (lambda1, 1-lambda1, lambda2); selector-free
// variants drop the first two and renormalize the match weight to 1.
struct LossWeights {
  double bag = 0.0;
  double reward = 0.0;
  double match = 0.0;
};
LossWeights loss_weights(const Stage2Config& config);

// The scalar combination actually optimized and logged:
// weights.bag * loss_bag + weights.reward * loss_reward + weights.match * loss_match.
double stage2_total_loss(double loss_bag, double loss_reward, double loss_match,
                         const Stage2Config& config);

// One validation event. Loss fields are means over the optimizer steps since
// the previous validation; metric fields come from the held-out report built
// at this step. loss_total always recombines from the components and the
// effective weights (zero components for ablations that drop a loss).
struct TrainingRecord {
  int64_t step = 0;
  double loss_bag = 0.0;
  double loss_reward = 0.0;
  double loss_match = 0.0;
  double loss_total = 0.0;
  double val_mrr = 0.0;
  double val_r10_at_1 = 0.0;
  double val_r10_at_2 = 0.0;
  double val_r10_at_5 = 0.0;
  double val_r2_at_1 = 0.0;
  double selection_accuracy = 0.0;
};

// JSON-lines emission, one record per line, fixed key order, no timestamps:
// reruns with one seed must be byte-identical.
std::string training_log_jsonl(const std::vector<TrainingRecord>& records);

// Validation schedule: ceil(max_epochs / validation_interval) events, evenly
// spaced over total_steps with the last event exactly at total_steps (steps
// strictly increasing). Throws UserError when total_steps is smaller than
// the event count (the cadence would be finer than one optimizer step).
std::vector<int64_t> validation_steps(int64_t total_steps, int max_epochs,
                                      double validation_interval);

// Tokenized corpus (the retrieval pool) plus the bag splits. Training pairs
// are built from train_bags at a 1:1 positive:negative ratio; validation and
// test reports use 9 negatives per positive so every group holds 10 pairs.
struct Stage2Corpus {
  std::vector<Query> queries;
  std::vector<QueryBag> train_bags;
  std::vector<QueryBag> valid_bags;
  std::vector<QueryBag> test_bags;
};

// Everything needed to score at inference time. All four components are
// always present; components an ablation never trains keep their seeded
// initialization.
struct Stage2Checkpoint {
  Stage2Config config;
  Stage1Config vae_config;
  Vocabulary vocab;
  std::shared_ptr<VaeModel> vae;
  std::shared_ptr<QbsModel> qbs;
  std::shared_ptr<QbfModel> qbf;
  std::shared_ptr<MatcherModel> matcher;
};

struct Stage2Result {
  Stage2Checkpoint checkpoint;        // weights of the best validation MRR
  std::vector<TrainingRecord> log;    // one record per validation event
  TrainingRecord pre_training;        // step 0 metrics before any update
  int64_t best_step = 0;              // step of the retained record
  std::string best_checkpoint_path;   // "<dir>/stage2_best" when dir given
  std::string last_checkpoint_path;   // "<dir>/stage2_last" when dir given
};

// Joint training of selector, fusion, matcher, and the fine-tuned encoder on
// the weighted loss. Per batch: retrieve top-k per anchor from the (frozen)
// index, score and select the bag, fuse, match every pair, and step on the
// combined loss. Pseudo-positive labels for the selection loss come from the
// index cosines (the batch-median rule). Validation runs on held-out groups
// built from valid_bags; the best weights by validation MRR are retained.
// checkpoint_dir, when non-empty, receives stage2_last (refreshed each
// validation) and stage2_best. A non-finite loss aborts with InternalError
// naming the last saved checkpoint.
Stage2Result train_stage2(const Stage2Corpus& corpus, const Stage1Checkpoint& stage1,
                          const EmbeddingIndex& index, const Stage2Config& config,
                          const std::string& checkpoint_dir = "");

// Inference-time scorer: resolves anchors against the corpus and the frozen
// index, runs the checkpoint's pipeline variant in evaluation mode, and
// caches one fused query per anchor. k = 0 uses the configured candidate
// count. The checkpoint, index, and corpus must outlive the scorer.
class Stage2Scorer {
 public:
  Stage2Scorer(const Stage2Checkpoint& ckpt, const EmbeddingIndex& index,
               const std::vector<Query>& corpus, int k = 0);

  // Match probability of fused(pair.query) against pair.question.
  double score(const QQPair& pair);

  const FusedQuery& fused_for(int64_t anchor_id);

  // The bag consumed for this anchor: the selected members (full pipeline and
  // summation ablation), all top-k candidates (selector-free), or no members
  // (matcher-only). gold flags are left false.
  const QueryBag& bag_for(int64_t anchor_id);

  int k() const { return k_; }

 private:
  struct AnchorState {
    FusedQuery fused;
    QueryBag bag;
  };
  const AnchorState& state_for(int64_t anchor_id);

  const Stage2Checkpoint& ckpt_;
  const EmbeddingIndex& index_;
  std::map<int64_t, const Query*> by_id_;
  std::map<int64_t, AnchorState> cache_;
  int k_;
};

// Scores every test pair with the checkpoint's pipeline and assembles the
// grouped ranking report. k = 0 uses the configured candidate count; the
// two-candidate draw is seeded by the checkpoint's rng_seed.
MetricsReport evaluate_stage2(const Stage2Checkpoint& ckpt, const EmbeddingIndex& index,
                              const std::vector<Query>& corpus,
                              const std::vector<QQPair>& test_pairs, int k = 0);

// Trains under the given ablation and evaluates on test groups built from
// corpus.test_bags.
struct AblationOutcome {
  Stage2Result training;
  MetricsReport report;
};
AblationOutcome run_ablation(const Stage2Corpus& corpus, const Stage1Checkpoint& stage1,
                             const EmbeddingIndex& index, Stage2Config config, Ablation mode,
                             const std::string& checkpoint_dir = "");

// Evaluates one trained checkpoint at several retrieval depths; one report
// row per k, in the order given.
std::vector<std::pair<int, MetricsReport>> sweep_topk(const Stage2Checkpoint& ckpt,
                                                      const EmbeddingIndex& index,
                                                      const std::vector<Query>& corpus,
                                                      const std::vector<QQPair>& test_pairs,
                                                      const std::vector<int>& k_values);

// Stable fingerprint of the training configuration (stage-1 and stage-2
// fields, not the weights), recorded into every metrics report.
std::string stage2_fingerprint(const Stage1Config& vae_config, const Stage2Config& config);

// Checkpoint persistence: <prefix>.bin (magic, format version, vocabulary,
// then the four parameter sections in encoder/selector/fusion/matcher order)
// + <prefix>.json manifest {format_version, component hashes, configs}. The
// loader reconstructs every component from the manifest configs and verifies
// each section's hash.
constexpr uint32_t kStage2FormatVersion = 1;
void save_stage2(const Stage2Checkpoint& ckpt, const std::string& prefix);
Stage2Checkpoint load_stage2(const std::string& prefix);

}  // namespace qbprf
