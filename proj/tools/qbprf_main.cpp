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

#include <cstdio>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <json.hpp>

#include "qbprf/config.hpp"
#include "qbprf/data.hpp"
#include "qbprf/errors.hpp"
#include "qbprf/index.hpp"
#include "qbprf/metrics.hpp"
#include "qbprf/pipeline.hpp"
#include "qbprf/serialize.hpp"
#include "qbprf/vae.hpp"

namespace fs = std::filesystem;
using namespace qbprf;

namespace {

// One subcommand plus its deferred configuration overrides. CLI11 collects
// the raw flag strings; resolve() then layers preset -> config file -> flags
// (last one wins) and routes every value through apply_config_key, so flags
// and file keys share one vocabulary and one validator.
class Command {
 public:
  Command(CLI::App& app, const std::string& name, const std::string& description) {
    cmd_ = app.add_subcommand(name, description);
    cmd_->add_option("--config", config_path_, "key = value configuration file");
    cmd_->add_option("--preset", preset_, "configuration preset")
        ->check(CLI::IsMember({"desk"}));
    add("--seed", {"seed"}, "master rng seed (re-seeds both stages)");
    add("--out", {"out"}, "output directory");
  }

  CLI::Option* add(const std::string& flag, std::vector<std::string> keys,
                   const std::string& help) {
    values_.emplace_back();
    CLI::Option* opt = cmd_->add_option(flag, values_.back(), help);
    // Same precedence rule as the configuration file: a repeated flag wins
    // with its last value instead of erroring out.
    opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    overrides_.push_back({std::move(keys), opt, &values_.back()});
    return opt;
  }

  // Boolean toggle; presence applies "true" to every key.
  CLI::Option* add_toggle(const std::string& flag, std::vector<std::string> keys,
                          const std::string& help) {
    values_.emplace_back("true");
    CLI::Option* opt = cmd_->add_flag(flag, help);
    overrides_.push_back({std::move(keys), opt, &values_.back()});
    return opt;
  }

  void on_run(std::function<void(const RunConfig&)> body) {
    cmd_->callback([this, body] { body(resolve()); });
  }

 private:
  RunConfig resolve() const {
    RunConfig cfg = preset_ == "desk" ? desk_preset() : RunConfig();
    if (!config_path_.empty()) cfg = load_config_file(config_path_, std::move(cfg));
    for (const Override& o : overrides_) {
      if (o.option->count() == 0) continue;
      for (const std::string& key : o.keys) apply_config_key(cfg, key, *o.value);
    }
    return cfg;
  }

  struct Override {
    std::vector<std::string> keys;
    CLI::Option* option;
    const std::string* value;
  };

  CLI::App* cmd_ = nullptr;
  std::string config_path_;
  std::string preset_;
  std::deque<std::string> values_;  // stable addresses for CLI11 bindings
  std::vector<Override> overrides_;
};

void require_path(const std::string& value, const std::string& flag, const std::string& what) {
  if (value.empty()) throw UserError("missing " + flag + " (" + what + ")");
}

// Shared output-directory layout: the effective configuration is echoed into
// every run's directory so results stay reproducible from the artifact alone.
void prepare_out(const RunConfig& cfg) {
  fs::create_directories(cfg.out);
  fs::create_directories(cfg.out + "/checkpoints");
  fs::create_directories(cfg.out + "/logs");
  fs::create_directories(cfg.out + "/reports");
  write_file(cfg.out + "/config.echo", config_echo(cfg));
}

std::vector<Query> read_corpus(const RunConfig& cfg) {
  require_path(cfg.corpus, "--corpus", "corpus JSONL path");
  return load_corpus_jsonl(cfg.corpus);
}

std::vector<QueryBag> read_bags(const std::string& path, const std::string& flag) {
  require_path(path, flag, "bags JSONL path");
  return load_bags_jsonl(path);
}

std::string format_report_row(const std::string& head, const MetricsReport& r) {
  char buf[192];
  std::snprintf(buf, sizeof(buf), "%s\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\n", head.c_str(), r.mrr,
                r.r10_at_1, r.r10_at_2, r.r10_at_5, r.r2_at_1);
  return buf;
}

std::string ablation_tsv(const std::vector<std::pair<std::string, MetricsReport>>& rows) {
  std::string out = "mode\tMRR\tR10@1\tR10@2\tR10@5\tR2@1\n";
  for (const auto& [mode, report] : rows) out += format_report_row(mode, report);
  return out;
}

// Loads the trio every stage-2 command starts from and dissolves the bags
// into splits keyed by the master seed.
struct Stage2Inputs {
  Stage1Checkpoint stage1;
  EmbeddingIndex index;
  Stage2Corpus corpus;
};

Stage2Inputs read_stage2_inputs(const RunConfig& cfg) {
  require_path(cfg.stage1_checkpoint, "--stage1-checkpoint", "representation checkpoint prefix");
  require_path(cfg.index, "--index", "embedding index prefix");
  Stage2Inputs in;
  in.stage1 = load_stage1(cfg.stage1_checkpoint);
  in.index = load_index(cfg.index);
  std::vector<Query> queries = read_corpus(cfg);
  tokenize_corpus(queries, in.stage1.vocab, in.stage1.config.max_len);
  const auto bags = read_bags(cfg.bags, "--bags");
  BagSplits splits = split_bags(bags, cfg.valid_fraction, cfg.test_fraction, cfg.seed);
  in.corpus = Stage2Corpus{std::move(queries), std::move(splits.train), std::move(splits.valid),
                           std::move(splits.test)};
  return in;
}

// Loads what the inference commands need: a joint checkpoint, the index, the
// corpus tokenized with the checkpoint's own vocabulary, and test pairs.
struct EvalInputs {
  Stage2Checkpoint checkpoint;
  EmbeddingIndex index;
  std::vector<Query> queries;
  std::vector<QQPair> test_pairs;
};

EvalInputs read_eval_inputs(const RunConfig& cfg) {
  require_path(cfg.stage2_checkpoint, "--checkpoint", "joint checkpoint prefix");
  require_path(cfg.index, "--index", "embedding index prefix");
  EvalInputs in;
  in.checkpoint = load_stage2(cfg.stage2_checkpoint);
  in.index = load_index(cfg.index);
  in.queries = read_corpus(cfg);
  tokenize_corpus(in.queries, in.checkpoint.vocab, in.checkpoint.vae_config.max_len);
  const auto test_bags = read_bags(cfg.bags, "--test");
  in.test_pairs = make_qq_pairs(in.queries, test_bags, Split::kTest, cfg.seed);
  return in;
}

// ---------------------------------------------------------------------------
// Subcommand bodies

void cmd_gen_synthetic(const RunConfig& cfg) {
  cfg.validate();
  prepare_out(cfg);
  SyntheticCorpus s = gen_synthetic_corpus(cfg.synth.clusters, cfg.synth.paraphrases,
                                           cfg.synth.vocab_size, cfg.seed);
  save_corpus_jsonl(cfg.out + "/corpus.jsonl", s.queries);
  save_bags_jsonl(cfg.out + "/bags.jsonl", s.bags);
  std::cout << "wrote " << s.queries.size() << " queries and " << s.bags.size() << " bags to "
            << cfg.out << "\n";
}

void cmd_prepare_data(const RunConfig& cfg) {
  require_path(cfg.pairs, "--pairs", "duplicate-question TSV path");
  prepare_out(cfg);
  LoadResult loaded = load_duplicate_pairs(cfg.pairs);
  const auto queries = collect_queries(loaded.records);
  const auto bags = build_query_bags(loaded.records);
  save_corpus_jsonl(cfg.out + "/corpus.jsonl", queries);
  save_bags_jsonl(cfg.out + "/bags.jsonl", bags);
  std::cout << "parsed " << loaded.stats.parsed << " records (" << loaded.stats.malformed
            << " malformed lines skipped); wrote " << queries.size() << " queries and "
            << bags.size() << " bags to " << cfg.out << "\n";
}

void cmd_train_stage1(const RunConfig& cfg) {
  cfg.stage1.validate();
  const auto queries = read_corpus(cfg);
  prepare_out(cfg);
  std::vector<std::string> texts;
  texts.reserve(queries.size());
  for (const Query& q : queries) texts.push_back(q.text);
  const Vocabulary vocab = Vocabulary::build(texts);

  std::vector<Stage1EpochLog> log;
  Stage1Checkpoint ckpt = train_stage1(queries, vocab, cfg.stage1, &log);
  const std::string prefix = cfg.out + "/checkpoints/stage1";
  save_stage1(ckpt, prefix);

  std::string jsonl;
  for (const Stage1EpochLog& e : log) {
    nlohmann::ordered_json line{{"epoch", e.epoch},
                                {"recon", e.recon},
                                {"kl", e.kl},
                                {"contrastive", e.contrastive},
                                {"total", e.total}};
    jsonl += line.dump() + "\n";
  }
  write_file(cfg.out + "/logs/stage1.jsonl", jsonl);

  if (!log.empty())
    std::cout << "final epoch: recon " << log.back().recon << ", kl " << log.back().kl
              << ", contrastive " << log.back().contrastive << ", total " << log.back().total
              << "\n";
  std::cout << "checkpoint written to " << prefix << "\n";
}

void cmd_build_index(const RunConfig& cfg) {
  require_path(cfg.stage1_checkpoint, "--stage1-checkpoint", "representation checkpoint prefix");
  const Stage1Checkpoint ckpt = load_stage1(cfg.stage1_checkpoint);
  const auto queries = read_corpus(cfg);
  prepare_out(cfg);
  EmbeddingIndex index = build_index(queries, ckpt);
  const std::string prefix = cfg.out + "/checkpoints/index";
  save_index(index, prefix);
  std::cout << "indexed " << index.ids.size() << " queries at " << prefix << "\n";

  // With gold bags on hand, record how much of each bag raw retrieval finds:
  // the gap this pipeline's selection stage exists to close.
  if (!cfg.bags.empty()) {
    const auto bags = read_bags(cfg.bags, "--bags");
    const int k = cfg.eval_k > 0 ? cfg.eval_k : cfg.stage2.k;
    RetrievalDiagnostics diag = retrieval_diagnostics(index, bags, k);
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%d\t%d\t%.6f\t%.6f\n", k, diag.n_anchors,
                  diag.mean_bag_recall_count, diag.candidate_accuracy);
    write_file(cfg.out + "/reports/retrieval_diagnostics.tsv",
               std::string("k\tn_anchors\tmean_bag_recall_count\tcandidate_accuracy\n") + buf);
    std::cout << "retrieval diagnostics at k=" << k << ": candidate_accuracy "
              << diag.candidate_accuracy << " over " << diag.n_anchors << " anchors\n";
  }
}

void cmd_train_stage2(const RunConfig& cfg) {
  cfg.validate();
  Stage2Inputs in = read_stage2_inputs(cfg);
  prepare_out(cfg);
  save_bags_jsonl(cfg.out + "/checkpoints/bags_train.jsonl", in.corpus.train_bags);
  save_bags_jsonl(cfg.out + "/checkpoints/bags_valid.jsonl", in.corpus.valid_bags);
  save_bags_jsonl(cfg.out + "/checkpoints/bags_test.jsonl", in.corpus.test_bags);

  Stage2Result result =
      train_stage2(in.corpus, in.stage1, in.index, cfg.stage2, cfg.out + "/checkpoints");
  write_file(cfg.out + "/logs/metrics.jsonl", training_log_jsonl(result.log));
  write_file(cfg.out + "/logs/pretraining.jsonl", training_log_jsonl({result.pre_training}));

  double best = -1.0;
  for (const TrainingRecord& r : result.log) best = std::max(best, r.val_mrr);
  std::cout << "trained " << result.log.size() << " validation windows; best validation MRR "
            << best << " at step " << result.best_step << "\n";
  std::cout << "checkpoints: " << result.best_checkpoint_path << " (best), "
            << result.last_checkpoint_path << " (last)\n";
}

void cmd_evaluate(const RunConfig& cfg) {
  EvalInputs in = read_eval_inputs(cfg);
  prepare_out(cfg);
  MetricsReport report =
      evaluate_stage2(in.checkpoint, in.index, in.queries, in.test_pairs, cfg.eval_k);
  write_file(cfg.out + "/reports/evaluate.tsv", report_tsv(report));
  std::cout << report_table(report);
}

void cmd_ablate(const RunConfig& cfg) {
  cfg.validate();
  Stage2Inputs in = read_stage2_inputs(cfg);
  prepare_out(cfg);
  std::vector<std::pair<std::string, MetricsReport>> rows;
  for (Ablation mode : cfg.ablation_modes) {
    const std::string name = ablation_name(mode);
    AblationOutcome out = run_ablation(in.corpus, in.stage1, in.index, cfg.stage2, mode,
                                       cfg.out + "/checkpoints/" + name);
    write_file(cfg.out + "/logs/metrics_" + name + ".jsonl", training_log_jsonl(out.training.log));
    rows.emplace_back(name, out.report);
    std::cout << name << ": MRR " << out.report.mrr << ", R10@1 " << out.report.r10_at_1 << "\n";
  }
  write_file(cfg.out + "/reports/ablation.tsv", ablation_tsv(rows));
}

void cmd_sweep_topk(const RunConfig& cfg) {
  EvalInputs in = read_eval_inputs(cfg);
  prepare_out(cfg);
  const auto rows = sweep_topk(in.checkpoint, in.index, in.queries, in.test_pairs, cfg.sweep_k);
  write_file(cfg.out + "/reports/sweep.tsv", sweep_tsv(rows));
  std::cout << sweep_table(rows);
}

int run_cli(int argc, char** argv) {
  CLI::App app{"query-bag retrieval, selection, fusion, and matching pipeline"};
  app.require_subcommand(1);
  std::deque<Command> commands;

  {
    Command& c = commands.emplace_back(app, "gen-synthetic",
                                       "generate a synthetic paraphrase-cluster corpus");
    c.add("--clusters", {"synth.clusters"}, "number of paraphrase clusters");
    c.add("--paraphrases", {"synth.paraphrases"}, "paraphrases per cluster");
    c.add("--vocab-size", {"synth.vocab_size"}, "synthetic vocabulary size");
    c.on_run(cmd_gen_synthetic);
  }
  {
    Command& c = commands.emplace_back(app, "prepare-data",
                                       "build a corpus and gold bags from duplicate labels");
    c.add("--pairs", {"pairs"}, "duplicate-question TSV file");
    c.on_run(cmd_prepare_data);
  }
  {
    Command& c =
        commands.emplace_back(app, "train-stage1", "train the query representation model");
    c.add("--corpus", {"corpus"}, "corpus JSONL file");
    c.add("--max-len", {"stage1.max_len"}, "token sequence length");
    c.add("--emb-dim", {"stage1.emb_dim"}, "token embedding width");
    c.add("--enc-hidden", {"stage1.enc_hidden"}, "encoder hidden units per direction");
    c.add("--enc-layers", {"stage1.enc_layers"}, "encoder layers");
    c.add("--dec-hidden", {"stage1.dec_hidden"}, "decoder hidden units");
    c.add("--d-z", {"stage1.d_z"}, "latent width");
    c.add("--beta", {"stage1.beta"}, "divergence weight");
    c.add("--alpha", {"stage1.alpha"}, "contrastive weight");
    c.add("--tau", {"stage1.tau"}, "contrastive temperature");
    c.add("--batch-size", {"stage1.batch_size"}, "batch size");
    c.add("--mask-ratio", {"stage1.mask_ratio"}, "decoder input masking ratio");
    c.add("--learning-rate", {"stage1.learning_rate"}, "learning rate");
    c.add("--max-epochs", {"stage1.max_epochs"}, "training epochs");
    c.on_run(cmd_train_stage1);
  }
  {
    Command& c = commands.emplace_back(app, "build-index",
                                       "embed the corpus into the retrieval index");
    c.add("--corpus", {"corpus"}, "corpus JSONL file");
    c.add("--stage1-checkpoint", {"stage1_checkpoint"}, "representation checkpoint prefix");
    c.add("--bags", {"bags"}, "gold bags JSONL (optional; enables retrieval diagnostics)");
    c.add("--k", {"eval_k"}, "candidate count for the diagnostics");
    c.on_run(cmd_build_index);
  }
  {
    Command& c = commands.emplace_back(app, "train-stage2",
                                       "jointly train selection, fusion, and matching");
    c.add("--corpus", {"corpus"}, "corpus JSONL file");
    c.add("--bags", {"bags"}, "gold bags JSONL file");
    c.add("--stage1-checkpoint", {"stage1_checkpoint"}, "representation checkpoint prefix");
    c.add("--index", {"index"}, "embedding index prefix");
    c.add("--valid-fraction", {"valid_fraction"}, "fraction of bags held out for validation");
    c.add("--test-fraction", {"test_fraction"}, "fraction of bags held out for testing");
    c.add("--lambda1", {"stage2.lambda1"}, "selection loss mix");
    c.add("--lambda2", {"stage2.lambda2"}, "match loss weight");
    c.add("--learning-rate", {"stage2.learning_rate"}, "learning rate");
    c.add("--batch-size", {"stage2.batch_size"}, "pairs per batch");
    c.add("--k", {"stage2.k"}, "retrieved candidates per query");
    c.add("--bag-size", {"stage2.bag_size"}, "selected bag size");
    c.add("--validation-interval", {"stage2.validation_interval"},
          "validation cadence in epochs");
    c.add("--max-epochs", {"stage2.max_epochs"}, "training epochs");
    c.add("--ablation", {"stage2.ablation"}, "ablation mode (none/no_qbs/no_qbf/matcher_only)");
    c.add_toggle("--rebuild-index", {"stage2.rebuild_index_on_validation"},
                 "re-embed the retrieval pool at every validation");
    c.add("--bilstm-hidden", {"qbs.bilstm_hidden"}, "selector recurrent width");
    c.add("--d-model", {"qbf.d_model", "matcher.d_model"}, "fusion/matcher width");
    c.add("--heads", {"qbf.heads", "matcher.heads"}, "attention heads");
    c.add("--layers", {"qbf.layers", "matcher.layers"}, "attention layers");
    c.add("--ffn-dim", {"qbf.ffn_dim", "matcher.ffn_dim"}, "feed-forward width (0 = 4x width)");
    c.on_run(cmd_train_stage2);
  }
  {
    Command& c = commands.emplace_back(app, "evaluate", "score a test split with a checkpoint");
    c.add("--checkpoint", {"stage2_checkpoint"}, "joint checkpoint prefix");
    c.add("--test", {"bags"}, "test bags JSONL file");
    c.add("--corpus", {"corpus"}, "corpus JSONL file");
    c.add("--index", {"index"}, "embedding index prefix");
    c.add("--k", {"eval_k"}, "retrieved candidates per query (0 = checkpoint default)");
    c.on_run(cmd_evaluate);
  }
  {
    Command& c = commands.emplace_back(app, "ablate", "train and compare ablation modes");
    c.add("--corpus", {"corpus"}, "corpus JSONL file");
    c.add("--bags", {"bags"}, "gold bags JSONL file");
    c.add("--stage1-checkpoint", {"stage1_checkpoint"}, "representation checkpoint prefix");
    c.add("--index", {"index"}, "embedding index prefix");
    c.add("--modes", {"ablation_modes"}, "comma-separated ablation modes");
    c.add("--valid-fraction", {"valid_fraction"}, "fraction of bags held out for validation");
    c.add("--test-fraction", {"test_fraction"}, "fraction of bags held out for testing");
    c.add("--learning-rate", {"stage2.learning_rate"}, "learning rate");
    c.add("--batch-size", {"stage2.batch_size"}, "pairs per batch");
    c.add("--k", {"stage2.k"}, "retrieved candidates per query");
    c.add("--bag-size", {"stage2.bag_size"}, "selected bag size");
    c.add("--validation-interval", {"stage2.validation_interval"},
          "validation cadence in epochs");
    c.add("--max-epochs", {"stage2.max_epochs"}, "training epochs");
    c.add("--bilstm-hidden", {"qbs.bilstm_hidden"}, "selector recurrent width");
    c.add("--d-model", {"qbf.d_model", "matcher.d_model"}, "fusion/matcher width");
    c.add("--heads", {"qbf.heads", "matcher.heads"}, "attention heads");
    c.add("--layers", {"qbf.layers", "matcher.layers"}, "attention layers");
    c.add("--ffn-dim", {"qbf.ffn_dim", "matcher.ffn_dim"}, "feed-forward width (0 = 4x width)");
    c.on_run(cmd_ablate);
  }
  {
    Command& c = commands.emplace_back(app, "sweep-topk",
                                       "evaluate one checkpoint across candidate counts");
    c.add("--checkpoint", {"stage2_checkpoint"}, "joint checkpoint prefix");
    c.add("--test", {"bags"}, "test bags JSONL file");
    c.add("--corpus", {"corpus"}, "corpus JSONL file");
    c.add("--index", {"index"}, "embedding index prefix");
    c.add("--k", {"sweep_k"}, "comma-separated candidate counts");
    c.on_run(cmd_sweep_topk);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;  // help and version exit cleanly; usage errors are user errors
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // Internal parallelism is capped for run-to-run determinism; raise it
  // explicitly when reproducibility across thread counts does not matter.
  int threads = 1;
  if (const char* env = std::getenv("QBPRF_NUM_THREADS")) {
    try {
      threads = std::max(1, std::stoi(env));
    } catch (const std::exception&) {
      std::cerr << "warning: ignoring non-numeric QBPRF_NUM_THREADS '" << env << "'\n";
    }
  }
  Eigen::setNbThreads(threads);

  try {
    return run_cli(argc, argv);
  } catch (const UserError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const InternalError& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
}
