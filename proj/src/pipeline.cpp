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

#include "qbprf/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "qbprf/errors.hpp"
#include "qbprf/params.hpp"
#include "qbprf/rng.hpp"
#include "qbprf/serialize.hpp"
#include "qbprf/vocab.hpp"

namespace qbprf {

namespace A = ag;

namespace {

constexpr uint32_t kStage2Magic = 0x51425332;  // "QBS2"

Eigen::VectorXd keep_of(const std::vector<int>& tokens) {
  Eigen::VectorXd keep(static_cast<Eigen::Index>(tokens.size()));
  for (size_t i = 0; i < tokens.size(); ++i)
    keep(static_cast<Eigen::Index>(i)) = tokens[i] == kPadId ? 0.0 : 1.0;
  return keep;
}

nlohmann::json qbs_config_json(const QbsConfig& c) {
  return nlohmann::json{{"bilstm_hidden", c.bilstm_hidden}, {"dropout", c.dropout},
                        {"bag_size", c.bag_size},           {"tau", c.tau},
                        {"tau1", c.tau1},                   {"tau2", c.tau2},
                        {"in_batch_negatives", c.in_batch_negatives}};
}

QbsConfig qbs_config_from_json(const nlohmann::json& j) {
  QbsConfig c;
  c.bilstm_hidden = j.at("bilstm_hidden").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.bag_size = j.at("bag_size").get<int>();
  c.tau = j.at("tau").get<double>();
  c.tau1 = j.at("tau1").get<double>();
  c.tau2 = j.at("tau2").get<double>();
  c.in_batch_negatives = j.at("in_batch_negatives").get<bool>();
  return c;
}

nlohmann::json qbf_config_json(const QbfConfig& c) {
  return nlohmann::json{{"d_model", c.d_model}, {"heads", c.heads},
                        {"layers", c.layers},   {"dropout", c.dropout},
                        {"aggregation", aggregation_name(c.aggregation)},
                        {"ffn_dim", c.ffn_dim}};
}

QbfConfig qbf_config_from_json(const nlohmann::json& j) {
  QbfConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.heads = j.at("heads").get<int>();
  c.layers = j.at("layers").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.aggregation = aggregation_from_name(j.at("aggregation").get<std::string>());
  c.ffn_dim = j.at("ffn_dim").get<int>();
  return c;
}

nlohmann::json matcher_config_json(const MatcherConfig& c) {
  return nlohmann::json{{"d_model", c.d_model},       {"heads", c.heads},
                        {"layers", c.layers},         {"dropout", c.dropout},
                        {"vocab_size", c.vocab_size}, {"max_positions", c.max_positions},
                        {"ffn_dim", c.ffn_dim}};
}

MatcherConfig matcher_config_from_json(const nlohmann::json& j) {
  MatcherConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.heads = j.at("heads").get<int>();
  c.layers = j.at("layers").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_positions = j.at("max_positions").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  return c;
}

nlohmann::json stage2_config_json(const Stage2Config& c) {
  return nlohmann::json{{"lambda1", c.lambda1},
                        {"lambda2", c.lambda2},
                        {"learning_rate", c.learning_rate},
                        {"batch_size", c.batch_size},
                        {"k", c.k},
                        {"bag_size", c.bag_size},
                        {"validation_interval", c.validation_interval},
                        {"max_epochs", c.max_epochs},
                        {"ablation", ablation_name(c.ablation)},
                        {"rng_seed", c.rng_seed},
                        {"rebuild_index_on_validation", c.rebuild_index_on_validation},
                        {"qbs", qbs_config_json(c.qbs)},
                        {"qbf", qbf_config_json(c.qbf)},
                        {"matcher", matcher_config_json(c.matcher)}};
}

Stage2Config stage2_config_from_json(const nlohmann::json& j) {
  Stage2Config c;
  c.lambda1 = j.at("lambda1").get<double>();
  c.lambda2 = j.at("lambda2").get<double>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.k = j.at("k").get<int>();
  c.bag_size = j.at("bag_size").get<int>();
  c.validation_interval = j.at("validation_interval").get<double>();
  c.max_epochs = j.at("max_epochs").get<int>();
  c.ablation = ablation_from_name(j.at("ablation").get<std::string>());
  c.rng_seed = j.at("rng_seed").get<uint64_t>();
  c.rebuild_index_on_validation = j.at("rebuild_index_on_validation").get<bool>();
  c.qbs = qbs_config_from_json(j.at("qbs"));
  c.qbf = qbf_config_from_json(j.at("qbf"));
  c.matcher = matcher_config_from_json(j.at("matcher"));
  return c;
}

std::string params_blob(const ParamSet& params) {
  std::ostringstream os;
  params.write_values(os);
  return os.str();
}

void load_params_blob(ParamSet& params, const std::string& blob) {
  std::istringstream is(blob);
  params.read_values(is);
}

// Exact top-k rows of the frozen index for each anchor, computed lazily and
// reused for the whole run (the index never changes unless a rebuild swaps
// it out underneath us).
class RetrievalCache {
 public:
  RetrievalCache(const EmbeddingIndex* index, int k) : index_(index), k_(k) {}

  const RankedList& get(int64_t anchor_id) {
    auto it = cache_.find(anchor_id);
    if (it != cache_.end()) return it->second;
    int row = index_->row_of(anchor_id);
    if (row < 0)
      throw InternalError("stage2: anchor " + std::to_string(anchor_id) +
                          " is missing from the retrieval pool");
    RankedList list = search(*index_, index_->matrix.row(row).transpose(), k_, anchor_id);
    return cache_.emplace(anchor_id, std::move(list)).first->second;
  }

  void reset(const EmbeddingIndex* index) {
    index_ = index;
    cache_.clear();
  }

 private:
  const EmbeddingIndex* index_;
  int k_;
  std::map<int64_t, RankedList> cache_;
};

const Query* resolve_query(const std::map<int64_t, const Query*>& by_id, int64_t id) {
  auto it = by_id.find(id);
  if (it == by_id.end())
    throw InternalError("stage2: query " + std::to_string(id) + " is not in the corpus");
  if (it->second->tokens.empty())
    throw InternalError("stage2: query " + std::to_string(id) +
                        " has no tokens; tokenize the corpus first");
  return it->second;
}

// Members of the bag actually fused for an anchor, in ascending-id order,
// resolved to candidate slots (indices into the retrieved list).
std::vector<int> member_slots(const RankedList& retrieved, const std::vector<bool>& selected) {
  std::vector<int> slots;
  for (size_t i = 0; i < retrieved.candidates.size(); ++i)
    if (selected.empty() || selected[i]) slots.push_back(static_cast<int>(i));
  std::sort(slots.begin(), slots.end(), [&](int a, int b) {
    return retrieved.candidates[static_cast<size_t>(a)].id <
           retrieved.candidates[static_cast<size_t>(b)].id;
  });
  return slots;
}

}  // namespace

const char* ablation_name(Ablation a) {
  switch (a) {
    case Ablation::kNone: return "none";
    case Ablation::kNoQbs: return "no_qbs";
    case Ablation::kNoQbf: return "no_qbf";
    case Ablation::kMatcherOnly: return "matcher_only";
  }
  throw InternalError("ablation_name: unknown value");
}

Ablation ablation_from_name(const std::string& name) {
  if (name == "none") return Ablation::kNone;
  if (name == "no_qbs") return Ablation::kNoQbs;
  if (name == "no_qbf") return Ablation::kNoQbf;
  if (name == "matcher_only") return Ablation::kMatcherOnly;
  throw UserError("unknown ablation '" + name +
                  "' (expected none, no_qbs, no_qbf, or matcher_only)");
}

void Stage2Config::validate() const {
  if (!(lambda1 >= 0.0 && lambda1 <= 1.0))
    throw UserError("stage2 config: lambda1 must lie in [0, 1]");
  if (!(lambda2 >= 0.0)) throw UserError("stage2 config: lambda2 must be >= 0");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw UserError("stage2 config: learning_rate must be positive and finite");
  if (batch_size < 1) throw UserError("stage2 config: batch_size must be >= 1");
  if (k < 1) throw UserError("stage2 config: k must be >= 1");
  if (bag_size < 1) throw UserError("stage2 config: bag_size must be >= 1");
  if (!(validation_interval > 0.0 && validation_interval <= 1.0))
    throw UserError("stage2 config: validation_interval must lie in (0, 1]");
  if (max_epochs < 1) throw UserError("stage2 config: max_epochs must be >= 1");
}

LossWeights loss_weights(const Stage2Config& config) {
  switch (config.ablation) {
    case Ablation::kNone:
    case Ablation::kNoQbf:
      return {config.lambda1, 1.0 - config.lambda1, config.lambda2};
    case Ablation::kNoQbs:
    case Ablation::kMatcherOnly:
      // The selection losses do not exist without a selector; the match loss
      // is renormalized to weight 1 rather than kept at lambda2.
      return {0.0, 0.0, 1.0};
  }
  throw InternalError("loss_weights: unknown ablation");
}

double stage2_total_loss(double loss_bag, double loss_reward, double loss_match,
                         const Stage2Config& config) {
  const LossWeights w = loss_weights(config);
  return w.bag * loss_bag + w.reward * loss_reward + w.match * loss_match;
}

std::string training_log_jsonl(const std::vector<TrainingRecord>& records) {
  std::string out;
  for (const TrainingRecord& r : records) {
    nlohmann::ordered_json line{{"step", r.step},
                                {"loss_bag", r.loss_bag},
                                {"loss_reward", r.loss_reward},
                                {"loss_match", r.loss_match},
                                {"loss_total", r.loss_total},
                                {"val_mrr", r.val_mrr},
                                {"val_r10_at_1", r.val_r10_at_1},
                                {"val_r10_at_2", r.val_r10_at_2},
                                {"val_r10_at_5", r.val_r10_at_5},
                                {"val_r2_at_1", r.val_r2_at_1},
                                {"selection_accuracy", r.selection_accuracy}};
    out += line.dump();
    out += "\n";
  }
  return out;
}

std::vector<int64_t> validation_steps(int64_t total_steps, int max_epochs,
                                      double validation_interval) {
  if (total_steps < 1) throw UserError("validation schedule: no optimizer steps to spread over");
  if (max_epochs < 1 || !(validation_interval > 0.0 && validation_interval <= 1.0))
    throw UserError("validation schedule: bad epoch count or interval");
  // The small slack keeps the count exact when the quotient lands a hair
  // above an integer (0.1 and friends are not representable exactly).
  const auto n_events = static_cast<int64_t>(
      std::ceil(static_cast<double>(max_epochs) / validation_interval - 1e-9));
  if (total_steps < n_events)
    throw UserError("validation schedule: " + std::to_string(n_events) +
                    " events do not fit into " + std::to_string(total_steps) +
                    " optimizer steps; lower the cadence or enlarge the data");
  std::vector<int64_t> steps(static_cast<size_t>(n_events));
  for (int64_t j = 1; j <= n_events; ++j)
    steps[static_cast<size_t>(j - 1)] = (j * total_steps + n_events - 1) / n_events;
  return steps;
}

// ---------------------------------------------------------------------------
// Inference scorer

Stage2Scorer::Stage2Scorer(const Stage2Checkpoint& ckpt, const EmbeddingIndex& index,
                           const std::vector<Query>& corpus, int k)
    : ckpt_(ckpt), index_(index), k_(k > 0 ? k : ckpt.config.k) {
  if (!ckpt.vae || !ckpt.qbs || !ckpt.qbf || !ckpt.matcher)
    throw InternalError("scorer: checkpoint is missing a component");
  if (k_ < 1) throw UserError("scorer: candidate count must be >= 1");
  for (const Query& q : corpus) by_id_[q.id] = &q;
}

const Stage2Scorer::AnchorState& Stage2Scorer::state_for(int64_t anchor_id) {
  auto it = cache_.find(anchor_id);
  if (it != cache_.end()) return it->second;

  const Query* anchor = resolve_query(by_id_, anchor_id);
  const Eigen::VectorXd q_keep = keep_of(anchor->tokens);
  const Ablation mode = ckpt_.config.ablation;
  AnchorState st;
  st.bag.anchor_id = anchor_id;

  if (mode == Ablation::kMatcherOnly) {
    A::Graph g;
    auto enc = ckpt_.vae->encode(g, {anchor->tokens}, /*stochastic=*/false, nullptr);
    A::Var proj = ckpt_.qbf->project_in(g, state_sequence(g, enc, 0));
    st.fused = FusedQuery{proj->value, q_keep, FusionProvenance::kNone};
    return cache_.emplace(anchor_id, std::move(st)).first->second;
  }

  int row = index_.row_of(anchor_id);
  if (row < 0)
    throw InternalError("scorer: anchor " + std::to_string(anchor_id) +
                        " is missing from the retrieval pool");
  RankedList retrieved = search(index_, index_.matrix.row(row).transpose(), k_, anchor_id);

  std::vector<std::vector<int>> token_rows;
  token_rows.push_back(anchor->tokens);
  std::vector<Eigen::VectorXd> cand_keeps;
  for (const ScoredId& c : retrieved.candidates) {
    const Query* q = resolve_query(by_id_, c.id);
    token_rows.push_back(q->tokens);
    cand_keeps.push_back(keep_of(q->tokens));
  }

  A::Graph g;
  auto enc = ckpt_.vae->encode(g, token_rows, /*stochastic=*/false, nullptr);
  const A::Matrix q_states = state_sequence(g, enc, 0)->value;
  std::vector<A::Matrix> cand_states;
  cand_states.reserve(retrieved.candidates.size());
  for (size_t i = 0; i < retrieved.candidates.size(); ++i)
    cand_states.push_back(state_sequence(g, enc, static_cast<int>(i) + 1)->value);

  std::vector<bool> selected;
  if (mode != Ablation::kNoQbs) {
    std::vector<int64_t> ids;
    for (const ScoredId& c : retrieved.candidates) ids.push_back(c.id);
    SelectorOutput out = ckpt_.qbs->score_candidates(q_states, ids, cand_states);
    selected = out.selected;
  }
  const std::vector<int> slots = member_slots(retrieved, selected);
  for (int s : slots) {
    st.bag.member_ids.push_back(retrieved.candidates[static_cast<size_t>(s)].id);
    st.bag.gold.push_back(false);
  }

  if (mode == Ablation::kNoQbf) {
    A::Graph gp;
    A::Var pooled_q = ckpt_.qbf->pool_states(gp, gp.constant(q_states), q_keep);
    std::vector<Eigen::RowVectorXd> member_rows;
    for (int s : slots) {
      A::Var pooled = ckpt_.qbf->pool_states(gp, gp.constant(cand_states[static_cast<size_t>(s)]),
                                             cand_keeps[static_cast<size_t>(s)]);
      member_rows.push_back(pooled->value.row(0));
    }
    st.fused = fuse_sum(pooled_q->value.row(0), member_rows,
                        static_cast<int>(anchor->tokens.size()));
  } else {
    std::vector<A::Matrix> member_states;
    std::vector<Eigen::VectorXd> member_keeps;
    for (int s : slots) {
      member_states.push_back(cand_states[static_cast<size_t>(s)]);
      member_keeps.push_back(cand_keeps[static_cast<size_t>(s)]);
    }
    st.fused = ckpt_.qbf->fuse(q_states, q_keep, member_states, member_keeps);
  }
  return cache_.emplace(anchor_id, std::move(st)).first->second;
}

double Stage2Scorer::score(const QQPair& pair) {
  const AnchorState& st = state_for(pair.query.id);
  if (pair.question.tokens.empty())
    throw InternalError("scorer: question " + std::to_string(pair.question.id) +
                        " has no tokens; tokenize the corpus first");
  return ckpt_.matcher->match_score_value(st.fused, pair.question.tokens);
}

const FusedQuery& Stage2Scorer::fused_for(int64_t anchor_id) { return state_for(anchor_id).fused; }

const QueryBag& Stage2Scorer::bag_for(int64_t anchor_id) { return state_for(anchor_id).bag; }

// ---------------------------------------------------------------------------
// Joint training

namespace {

// Per-anchor bookkeeping inside one batch.
struct AnchorPlan {
  const Query* anchor = nullptr;
  const RankedList* retrieved = nullptr;  // null when retrieval is ablated
  std::vector<const Query*> candidates;
  std::vector<size_t> pair_slots;  // rows of the batch that share this anchor
  int base_row = 0;                // first encode row of this anchor's block
};

// Tape-side artifacts of one anchor, filled in pass A of a batch.
struct AnchorTape {
  A::Var q_states = nullptr;
  Eigen::VectorXd q_keep;
  A::Var cand_mu = nullptr;    // k x d_z slice, null when no candidates
  A::Var anchor_mu = nullptr;  // 1 x d_z slice
  A::Var probs = nullptr;      // k x 1 selection probabilities, null when ablated
  A::Var fused = nullptr;
  Eigen::VectorXd fused_keep;
};

}  // namespace

Stage2Result train_stage2(const Stage2Corpus& corpus, const Stage1Checkpoint& stage1,
                          const EmbeddingIndex& index, const Stage2Config& config,
                          const std::string& checkpoint_dir) {
  config.validate();
  if (!stage1.model) throw InternalError("stage2: stage-1 checkpoint has no model");
  verify_index_checkpoint(index, stage1);
  if (corpus.queries.empty()) throw UserError("stage2: empty corpus");
  if (corpus.train_bags.empty()) throw UserError("stage2: no training bags");
  if (corpus.valid_bags.empty()) throw UserError("stage2: no validation bags");
  const int L = stage1.config.max_len;
  for (const Query& q : corpus.queries) {
    if (static_cast<int>(q.tokens.size()) != L)
      throw UserError("stage2: query " + std::to_string(q.id) +
                      " is not tokenized to the representation length; run tokenization first");
  }
  if (config.ablation != Ablation::kMatcherOnly &&
      config.k + 1 > static_cast<int>(index.ids.size()))
    throw UserError("stage2: k = " + std::to_string(config.k) +
                    " candidates need at least k + 1 indexed queries, have " +
                    std::to_string(index.ids.size()));

  // Effective configuration: the top-level bag size is authoritative, and the
  // matcher's vocabulary/position budget follows the stage-1 checkpoint.
  Stage2Config cfg = config;
  cfg.qbs.bag_size = cfg.bag_size;
  cfg.qbs.validate();
  cfg.qbf.validate();
  cfg.matcher.vocab_size = static_cast<int>(stage1.vocab.size());
  cfg.matcher.max_positions = 3 * L + 1;
  cfg.matcher.validate();
  if (cfg.matcher.d_model != cfg.qbf.d_model)
    throw UserError("stage2: matcher d_model must equal the fusion d_model");

  const int state_dim = 2 * stage1.config.enc_hidden;
  const Ablation mode = cfg.ablation;
  const bool uses_selector = mode == Ablation::kNone || mode == Ablation::kNoQbf;
  const bool uses_retrieval = mode != Ablation::kMatcherOnly;
  const LossWeights weights = loss_weights(cfg);

  Rng master(cfg.rng_seed);
  Rng init_rng = master.fork(0);
  Rng shuffle_rng = master.fork(1);
  Rng dropout_rng = master.fork(2);

  // Fine-tuned copy of the stage-1 encoder; the caller's checkpoint and the
  // index stay frozen.
  auto vae = std::make_shared<VaeModel>(stage1.config, stage1.vocab.size(), init_rng);
  load_params_blob(vae->params(), params_blob(stage1.model->params()));
  auto qbs = std::make_shared<QbsModel>(cfg.qbs, state_dim, init_rng);
  auto qbf = std::make_shared<QbfModel>(cfg.qbf, state_dim, init_rng);
  auto matcher = std::make_shared<MatcherModel>(cfg.matcher, init_rng);
  // Warm-start the matcher's token table from the stage-1 embedding: the
  // matching labels alone only cover the tokens of the training bags, while
  // the stage-1 table was learned over the whole corpus without labels.
  matcher->seed_token_embedding(vae->token_embedding());

  std::map<int64_t, const Query*> by_id;
  for (const Query& q : corpus.queries) by_id[q.id] = &q;

  const auto train_pairs = make_qq_pairs(corpus.queries, corpus.train_bags, Split::kTrain,
                                         cfg.rng_seed);
  // Held-out groups use the 9-negative evaluation ratio so every validation
  // report ranks 10 candidates.
  const auto valid_pairs = make_qq_pairs(corpus.queries, corpus.valid_bags, Split::kTest,
                                         cfg.rng_seed);
  if (train_pairs.empty()) throw UserError("stage2: no training pairs");

  const auto n_pairs = static_cast<int64_t>(train_pairs.size());
  const int64_t steps_per_epoch = (n_pairs + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total_steps = steps_per_epoch * cfg.max_epochs;
  const auto val_steps = validation_steps(total_steps, cfg.max_epochs, cfg.validation_interval);
  const std::string fingerprint = stage2_fingerprint(stage1.config, cfg);

  Adam opt(cfg.learning_rate);
  std::vector<Tensor*> joint = vae->params().all();
  for (Tensor* t : qbs->params().all()) joint.push_back(t);
  for (Tensor* t : qbf->params().all()) joint.push_back(t);
  for (Tensor* t : matcher->params().all()) joint.push_back(t);

  const EmbeddingIndex* live_index = &index;
  EmbeddingIndex rebuilt_index;
  RetrievalCache retrieval(live_index, cfg.k);

  auto live_checkpoint = [&]() {
    return Stage2Checkpoint{cfg, stage1.config, stage1.vocab, vae, qbs, qbf, matcher};
  };

  auto snapshot = [&]() {
    std::array<std::string, 4> s;
    s[0] = params_blob(vae->params());
    s[1] = params_blob(qbs->params());
    s[2] = params_blob(qbf->params());
    s[3] = params_blob(matcher->params());
    return s;
  };
  auto restore = [&](const std::array<std::string, 4>& s) {
    load_params_blob(vae->params(), s[0]);
    load_params_blob(qbs->params(), s[1]);
    load_params_blob(qbf->params(), s[2]);
    load_params_blob(matcher->params(), s[3]);
  };

  std::string last_path;
  std::string best_path;
  auto save_as = [&](const std::string& name) -> std::string {
    if (checkpoint_dir.empty()) return "";
    std::filesystem::create_directories(checkpoint_dir);
    const std::string prefix = checkpoint_dir + "/" + name;
    save_stage2(live_checkpoint(), prefix);
    return prefix;
  };

  auto validate_now = [&](int64_t step, double mean_bag, double mean_reward,
                          double mean_match) {
    Stage2Checkpoint live = live_checkpoint();
    Stage2Scorer scorer(live, *live_index, corpus.queries, cfg.k);
    MetricsReport report = build_report(
        valid_pairs, [&scorer](const QQPair& p) { return scorer.score(p); }, cfg.rng_seed,
        fingerprint);
    double selection_accuracy = 0.0;
    if (uses_retrieval) {
      std::vector<QueryBag> selected;
      selected.reserve(corpus.valid_bags.size());
      for (const QueryBag& gold : corpus.valid_bags) selected.push_back(scorer.bag_for(gold.anchor_id));
      selection_accuracy = qbs_accuracy(selected, corpus.valid_bags);
    }
    TrainingRecord rec;
    rec.step = step;
    rec.loss_bag = mean_bag;
    rec.loss_reward = mean_reward;
    rec.loss_match = mean_match;
    rec.loss_total = stage2_total_loss(mean_bag, mean_reward, mean_match, cfg);
    rec.val_mrr = report.mrr;
    rec.val_r10_at_1 = report.r10_at_1;
    rec.val_r10_at_2 = report.r10_at_2;
    rec.val_r10_at_5 = report.r10_at_5;
    rec.val_r2_at_1 = report.r2_at_1;
    rec.selection_accuracy = selection_accuracy;
    return rec;
  };

  Stage2Result result;
  result.pre_training = validate_now(0, 0.0, 0.0, 0.0);
  last_path = save_as("stage2_last");

  double best_mrr = -1.0;
  std::array<std::string, 4> best_snapshot = snapshot();

  std::vector<size_t> order(train_pairs.size());
  std::iota(order.begin(), order.end(), size_t{0});

  int64_t global_step = 0;
  size_t next_val = 0;
  double sum_bag = 0.0, sum_reward = 0.0, sum_match = 0.0;
  int64_t window = 0;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(cfg.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      std::vector<const QQPair*> batch;
      batch.reserve(end - start);
      for (size_t i = start; i < end; ++i) batch.push_back(&train_pairs[order[i]]);

      // Group the batch by anchor; each anchor is encoded and fused once.
      std::map<int64_t, AnchorPlan> plans;
      for (size_t slot = 0; slot < batch.size(); ++slot) {
        AnchorPlan& plan = plans[batch[slot]->query.id];
        if (plan.anchor == nullptr) {
          plan.anchor = resolve_query(by_id, batch[slot]->query.id);
          if (uses_retrieval) {
            plan.retrieved = &retrieval.get(batch[slot]->query.id);
            for (const ScoredId& c : plan.retrieved->candidates)
              plan.candidates.push_back(resolve_query(by_id, c.id));
          }
        }
        plan.pair_slots.push_back(slot);
      }

      // One batched encoding of every anchor block (anchor row, then its
      // retrieved candidates).
      std::vector<std::vector<int>> token_rows;
      for (auto& [id, plan] : plans) {
        plan.base_row = static_cast<int>(token_rows.size());
        token_rows.push_back(plan.anchor->tokens);
        for (const Query* c : plan.candidates) token_rows.push_back(c->tokens);
      }

      A::Graph g;
      auto enc = vae->encode(g, token_rows, /*stochastic=*/false, nullptr);

      // Pseudo-positive labels come from the frozen retrieval cosines pooled
      // across the whole batch (the median rule).
      std::vector<std::vector<double>> frozen_cosines;
      if (uses_selector) {
        for (const auto& [id, plan] : plans) {
          std::vector<double> row;
          for (const ScoredId& c : plan.retrieved->candidates) row.push_back(c.score);
          frozen_cosines.push_back(std::move(row));
        }
      }
      const auto positive_masks =
          uses_selector ? pseudo_positive_masks(frozen_cosines)
                        : std::vector<std::vector<bool>>{};

      // Pass A: per-anchor representation, selection, and fusion tapes.
      std::vector<AnchorTape> tapes;
      tapes.reserve(plans.size());
      for (const auto& [id, plan] : plans) {
        AnchorTape tape;
        tape.q_states = state_sequence(g, enc, plan.base_row);
        tape.q_keep = keep_of(plan.anchor->tokens);
        tape.anchor_mu = A::slice_rows(g, enc.mu, plan.base_row, 1);

        std::vector<A::Var> cand_states;
        std::vector<Eigen::VectorXd> cand_keeps;
        for (size_t j = 0; j < plan.candidates.size(); ++j) {
          cand_states.push_back(state_sequence(g, enc, plan.base_row + 1 + static_cast<int>(j)));
          cand_keeps.push_back(keep_of(plan.candidates[j]->tokens));
        }
        if (!plan.candidates.empty())
          tape.cand_mu = A::slice_rows(g, enc.mu, plan.base_row + 1,
                                       static_cast<int>(plan.candidates.size()));

        std::vector<bool> selected;  // empty = take every candidate
        if (uses_selector) {
          tape.probs = qbs->probs_on_tape(g, tape.q_states, cand_states, /*train=*/true,
                                          &dropout_rng);
          std::vector<int64_t> ids;
          std::vector<double> probs_v;
          for (size_t j = 0; j < plan.retrieved->candidates.size(); ++j) {
            ids.push_back(plan.retrieved->candidates[j].id);
            probs_v.push_back(tape.probs->value(static_cast<Eigen::Index>(j), 0));
          }
          selected = top_selection(ids, probs_v, cfg.bag_size);
        }

        if (mode == Ablation::kMatcherOnly) {
          tape.fused = qbf->project_in(g, tape.q_states);
          tape.fused_keep = tape.q_keep;
        } else if (mode == Ablation::kNoQbf) {
          const std::vector<int> slots = member_slots(*plan.retrieved, selected);
          A::Var pooled_q = qbf->pool_states(g, tape.q_states, tape.q_keep);
          std::vector<A::Var> pooled_members;
          for (int s : slots)
            pooled_members.push_back(qbf->pool_states(g, cand_states[static_cast<size_t>(s)],
                                                      cand_keeps[static_cast<size_t>(s)]));
          tape.fused = fuse_sum_rows(g, pooled_q, pooled_members, L);
          tape.fused_keep = Eigen::VectorXd::Ones(L);
        } else {
          const std::vector<int> slots = member_slots(*plan.retrieved, selected);
          A::Var q_proj = qbf->project_in(g, tape.q_states);
          std::vector<A::Var> member_projs;
          std::vector<Eigen::VectorXd> member_keeps;
          for (int s : slots) {
            member_projs.push_back(qbf->project_in(g, cand_states[static_cast<size_t>(s)]));
            member_keeps.push_back(cand_keeps[static_cast<size_t>(s)]);
          }
          A::Var ca = qbf->cross_attend(g, q_proj, member_projs, member_keeps, /*train=*/true,
                                        &dropout_rng);
          tape.fused = qbf->self_attend(g, q_proj, ca, tape.q_keep, /*train=*/true, &dropout_rng);
          tape.fused_keep.resize(2 * L);
          tape.fused_keep << tape.q_keep, tape.q_keep;
        }
        tapes.push_back(std::move(tape));
      }

      // Pass B: the three loss components.
      std::vector<A::Var> bag_losses;
      std::vector<A::Var> reward_losses;
      if (uses_selector) {
        for (size_t a = 0; a < tapes.size(); ++a) {
          reward_losses.push_back(loss_reward(g, tapes[a].anchor_mu, tapes[a].cand_mu,
                                              tapes[a].probs, cfg.qbs.tau1, cfg.qbs.tau2));
          const std::vector<bool>& mask = positive_masks[a];
          const bool has_pos = std::find(mask.begin(), mask.end(), true) != mask.end();
          const bool has_neg = std::find(mask.begin(), mask.end(), false) != mask.end();
          if (!has_pos || !has_neg) continue;  // single-candidate anchors stay degenerate
          A::Var extras = nullptr;
          if (cfg.qbs.in_batch_negatives && tapes.size() > 1) {
            std::vector<A::Var> others;
            for (size_t b = 0; b < tapes.size(); ++b)
              if (b != a && tapes[b].cand_mu != nullptr) others.push_back(tapes[b].cand_mu);
            if (!others.empty()) extras = A::concat_rows(g, others);
          }
          bag_losses.push_back(loss_bag_infonce(g, tapes[a].anchor_mu, tapes[a].cand_mu, mask,
                                                cfg.qbs.tau, extras));
        }
      }
      auto mean_of = [&](const std::vector<A::Var>& parts) -> A::Var {
        if (parts.empty()) return g.constant(A::Matrix::Zero(1, 1));
        A::Var acc = parts[0];
        for (size_t i = 1; i < parts.size(); ++i) acc = A::add(g, acc, parts[i]);
        return A::scale(g, acc, 1.0 / static_cast<double>(parts.size()));
      };
      A::Var l_bag = mean_of(bag_losses);
      A::Var l_reward = mean_of(reward_losses);

      std::vector<A::Var> scores(batch.size(), nullptr);
      {
        size_t a = 0;
        for (const auto& [id, plan] : plans) {
          for (size_t slot : plan.pair_slots) {
            scores[slot] = matcher->match_score(g, tapes[a].fused, tapes[a].fused_keep,
                                                batch[slot]->question.tokens, /*train=*/true,
                                                &dropout_rng);
          }
          ++a;
        }
      }
      std::vector<double> labels;
      labels.reserve(batch.size());
      for (const QQPair* p : batch) labels.push_back(static_cast<double>(p->label));
      A::Var l_match = loss_ce(g, A::concat_rows(g, scores), labels);

      A::Var total = A::add(g, A::add(g, A::scale(g, l_bag, weights.bag),
                                      A::scale(g, l_reward, weights.reward)),
                            A::scale(g, l_match, weights.match));

      const double bag_v = l_bag->value(0, 0);
      const double reward_v = l_reward->value(0, 0);
      const double match_v = l_match->value(0, 0);
      const double total_v = total->value(0, 0);
      if (!std::isfinite(bag_v) || !std::isfinite(reward_v) || !std::isfinite(match_v) ||
          !std::isfinite(total_v))
        throw InternalError(
            "stage2: loss diverged (non-finite) at step " + std::to_string(global_step + 1) +
            "; last good checkpoint: " + (last_path.empty() ? "(none saved)" : last_path));

      g.backward(total);
      flush_param_grads(g);
      opt.step(joint);

      sum_bag += bag_v;
      sum_reward += reward_v;
      sum_match += match_v;
      ++window;
      ++global_step;

      if (next_val < val_steps.size() && global_step == val_steps[next_val]) {
        const double denom = static_cast<double>(window);
        TrainingRecord rec =
            validate_now(global_step, sum_bag / denom, sum_reward / denom, sum_match / denom);
        result.log.push_back(rec);
        sum_bag = sum_reward = sum_match = 0.0;
        window = 0;
        last_path = save_as("stage2_last");
        if (rec.val_mrr > best_mrr) {
          best_mrr = rec.val_mrr;
          result.best_step = rec.step;
          best_snapshot = snapshot();
          best_path = save_as("stage2_best");
        }
        if (cfg.rebuild_index_on_validation) {
          rebuilt_index = build_index(corpus.queries,
                                      Stage1Checkpoint{stage1.config, stage1.vocab, vae});
          live_index = &rebuilt_index;
          retrieval.reset(live_index);
        }
        ++next_val;
      }
    }
  }

  restore(best_snapshot);
  result.checkpoint = live_checkpoint();
  result.best_checkpoint_path = best_path;
  result.last_checkpoint_path = last_path;
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation entry points

MetricsReport evaluate_stage2(const Stage2Checkpoint& ckpt, const EmbeddingIndex& index,
                              const std::vector<Query>& corpus,
                              const std::vector<QQPair>& test_pairs, int k) {
  Stage2Scorer scorer(ckpt, index, corpus, k);
  return build_report(
      test_pairs, [&scorer](const QQPair& p) { return scorer.score(p); }, ckpt.config.rng_seed,
      stage2_fingerprint(ckpt.vae_config, ckpt.config));
}

AblationOutcome run_ablation(const Stage2Corpus& corpus, const Stage1Checkpoint& stage1,
                             const EmbeddingIndex& index, Stage2Config config, Ablation mode,
                             const std::string& checkpoint_dir) {
  if (corpus.test_bags.empty()) throw UserError("ablation: no test bags");
  config.ablation = mode;
  AblationOutcome out{train_stage2(corpus, stage1, index, config, checkpoint_dir), {}};
  const auto test_pairs =
      make_qq_pairs(corpus.queries, corpus.test_bags, Split::kTest, config.rng_seed);
  out.report = evaluate_stage2(out.training.checkpoint, index, corpus.queries, test_pairs);
  return out;
}

std::vector<std::pair<int, MetricsReport>> sweep_topk(const Stage2Checkpoint& ckpt,
                                                      const EmbeddingIndex& index,
                                                      const std::vector<Query>& corpus,
                                                      const std::vector<QQPair>& test_pairs,
                                                      const std::vector<int>& k_values) {
  if (k_values.empty()) throw UserError("sweep: no candidate counts given");
  std::vector<std::pair<int, MetricsReport>> rows;
  rows.reserve(k_values.size());
  for (int k : k_values) {
    if (k < 1) throw UserError("sweep: candidate counts must be >= 1");
    rows.emplace_back(k, evaluate_stage2(ckpt, index, corpus, test_pairs, k));
  }
  return rows;
}

std::string stage2_fingerprint(const Stage1Config& vae_config, const Stage2Config& config) {
  Fnv1a64 h;
  h.update_string(stage1_config_json(vae_config));
  h.update_string(stage2_config_json(config).dump());
  return h.hex();
}

// ---------------------------------------------------------------------------
// Persistence

void save_stage2(const Stage2Checkpoint& ckpt, const std::string& prefix) {
  if (!ckpt.vae || !ckpt.qbs || !ckpt.qbf || !ckpt.matcher)
    throw InternalError("save_stage2: checkpoint is missing a component");
  std::ostringstream blob;
  write_u32(blob, kStage2Magic);
  write_u32(blob, kStage2FormatVersion);
  ckpt.vocab.write(blob);
  ckpt.vae->params().write_values(blob);
  ckpt.qbs->params().write_values(blob);
  ckpt.qbf->params().write_values(blob);
  ckpt.matcher->params().write_values(blob);
  write_file(prefix + ".bin", blob.str());

  nlohmann::json manifest{
      {"format_version", kStage2FormatVersion},
      {"vae_hash", ckpt.vae->params().content_hash()},
      {"qbs_hash", ckpt.qbs->params().content_hash()},
      {"qbf_hash", ckpt.qbf->params().content_hash()},
      {"matcher_hash", ckpt.matcher->params().content_hash()},
      {"vocab_hash", ckpt.vocab.content_hash()},
      {"stage1_config", nlohmann::json::parse(stage1_config_json(ckpt.vae_config))},
      {"config", stage2_config_json(ckpt.config)}};
  write_file(prefix + ".json", manifest.dump(2) + "\n");
}

Stage2Checkpoint load_stage2(const std::string& prefix) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(prefix + ".json"));
  } catch (const nlohmann::json::exception& e) {
    throw UserError("stage2 checkpoint manifest " + prefix + ".json: " + e.what());
  }
  uint32_t version = 0;
  Stage1Config vae_config;
  Stage2Config config;
  std::string vae_hash, qbs_hash, qbf_hash, matcher_hash, vocab_hash;
  try {
    version = manifest.at("format_version").get<uint32_t>();
    vae_config = stage1_config_from_json(manifest.at("stage1_config").dump());
    config = stage2_config_from_json(manifest.at("config"));
    vae_hash = manifest.at("vae_hash").get<std::string>();
    qbs_hash = manifest.at("qbs_hash").get<std::string>();
    qbf_hash = manifest.at("qbf_hash").get<std::string>();
    matcher_hash = manifest.at("matcher_hash").get<std::string>();
    vocab_hash = manifest.at("vocab_hash").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw UserError("stage2 checkpoint manifest " + prefix + ".json: " + e.what());
  }
  if (version != kStage2FormatVersion)
    throw UserError("stage2 checkpoint " + prefix + " has unsupported format_version " +
                    std::to_string(version));

  std::istringstream blob(read_file(prefix + ".bin"));
  if (read_u32(blob) != kStage2Magic)
    throw UserError("stage2 checkpoint " + prefix + ".bin: bad magic");
  if (read_u32(blob) != kStage2FormatVersion)
    throw UserError("stage2 checkpoint " + prefix + ".bin: unsupported format_version");
  Vocabulary vocab = Vocabulary::read(blob);
  if (vocab.content_hash() != vocab_hash)
    throw UserError("stage2 checkpoint " + prefix + ": vocabulary hash mismatch");

  Rng init_rng(config.rng_seed);
  const int state_dim = 2 * vae_config.enc_hidden;
  Stage2Checkpoint ckpt;
  ckpt.config = config;
  ckpt.vae_config = vae_config;
  ckpt.vae = std::make_shared<VaeModel>(vae_config, vocab.size(), init_rng);
  ckpt.qbs = std::make_shared<QbsModel>(config.qbs, state_dim, init_rng);
  ckpt.qbf = std::make_shared<QbfModel>(config.qbf, state_dim, init_rng);
  ckpt.matcher = std::make_shared<MatcherModel>(config.matcher, init_rng);
  ckpt.vocab = std::move(vocab);
  ckpt.vae->params().read_values(blob);
  ckpt.qbs->params().read_values(blob);
  ckpt.qbf->params().read_values(blob);
  ckpt.matcher->params().read_values(blob);
  if (ckpt.vae->params().content_hash() != vae_hash)
    throw UserError("stage2 checkpoint " + prefix + ": encoder hash mismatch");
  if (ckpt.qbs->params().content_hash() != qbs_hash)
    throw UserError("stage2 checkpoint " + prefix + ": selector hash mismatch");
  if (ckpt.qbf->params().content_hash() != qbf_hash)
    throw UserError("stage2 checkpoint " + prefix + ": fusion hash mismatch");
  if (ckpt.matcher->params().content_hash() != matcher_hash)
    throw UserError("stage2 checkpoint " + prefix + ": matcher hash mismatch");
  return ckpt;
}

}  // namespace qbprf
