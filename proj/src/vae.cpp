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

#include "qbprf/vae.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "qbprf/errors.hpp"
#include "qbprf/serialize.hpp"

namespace qbprf {

namespace A = ag;

void Stage1Config::validate() const {
  if (max_len <= 0) throw UserError("stage1: max_len must be positive");
  if (emb_dim <= 0 || enc_hidden <= 0 || dec_hidden <= 0 || d_z <= 0 || enc_layers <= 0)
    throw UserError("stage1: model dimensions must be positive");
  if (tau <= 0) throw UserError("stage1: tau must be > 0");
  if (mask_ratio < 0 || mask_ratio > 1) throw UserError("stage1: mask_ratio must be in [0,1]");
  if (batch_size < 2) throw UserError("stage1: batch_size must be >= 2");
  if (beta < 0 || alpha < 0) throw UserError("stage1: beta and alpha must be >= 0");
  if (learning_rate <= 0) throw UserError("stage1: learning_rate must be > 0");
  if (max_epochs < 0) throw UserError("stage1: max_epochs must be >= 0");
}

VaeModel::GruDir VaeModel::make_gru(const std::string& prefix, int in_dim, int hidden, Rng& rng) {
  GruDir p;
  p.Wr = &params_.create(prefix + ".Wr", init_xavier(in_dim, hidden, rng));
  p.Ur = &params_.create(prefix + ".Ur", init_xavier(hidden, hidden, rng));
  p.br = &params_.create(prefix + ".br", init_zeros(1, hidden));
  p.Wz = &params_.create(prefix + ".Wz", init_xavier(in_dim, hidden, rng));
  p.Uz = &params_.create(prefix + ".Uz", init_xavier(hidden, hidden, rng));
  p.bz = &params_.create(prefix + ".bz", init_zeros(1, hidden));
  p.Wn = &params_.create(prefix + ".Wn", init_xavier(in_dim, hidden, rng));
  p.Un = &params_.create(prefix + ".Un", init_xavier(hidden, hidden, rng));
  p.bn = &params_.create(prefix + ".bn", init_zeros(1, hidden));
  return p;
}

VaeModel::VaeModel(const Stage1Config& config, size_t vocab_size, Rng& init_rng)
    : config_(config), vocab_size_(vocab_size) {
  config_.validate();
  if (vocab_size_ < kNumReservedIds) throw InternalError("vae: vocabulary too small");

  embedding_ = &params_.create(
      "emb", init_normal(static_cast<int>(vocab_size_), config_.emb_dim, 0.1, init_rng));

  for (int l = 0; l < config_.enc_layers; ++l) {
    int in_dim = l == 0 ? config_.emb_dim : 2 * config_.enc_hidden;
    enc_fwd_.push_back(make_gru("enc.l" + std::to_string(l) + ".fwd", in_dim, config_.enc_hidden,
                                init_rng));
    enc_bwd_.push_back(make_gru("enc.l" + std::to_string(l) + ".bwd", in_dim, config_.enc_hidden,
                                init_rng));
  }

  int final_dim = 2 * config_.enc_hidden;
  W_mu_ = &params_.create("head.W_mu", init_xavier(final_dim, config_.d_z, init_rng));
  b_mu_ = &params_.create("head.b_mu", init_zeros(1, config_.d_z));
  W_lv_ = &params_.create("head.W_lv", init_xavier(final_dim, config_.d_z, init_rng));
  b_lv_ = &params_.create("head.b_lv", init_zeros(1, config_.d_z));

  dec_ = make_gru("dec", config_.emb_dim + config_.d_z, config_.dec_hidden, init_rng);
  W_h0_ = &params_.create("dec.W_h0", init_xavier(config_.d_z, config_.dec_hidden, init_rng));
  b_h0_ = &params_.create("dec.b_h0", init_zeros(1, config_.dec_hidden));
  W_out_ = &params_.create(
      "dec.W_out", init_xavier(config_.dec_hidden, static_cast<int>(vocab_size_), init_rng));
  b_out_ = &params_.create("dec.b_out", init_zeros(1, static_cast<int>(vocab_size_)));
}

A::Var VaeModel::gru_step(A::Graph& g, const GruDir& p, A::Var x, A::Var h) const {
  A::Var r = A::sigmoid(
      g, A::add_rowvec(g, A::add(g, A::matmul(g, x, use(g, *p.Wr)), A::matmul(g, h, use(g, *p.Ur))),
                       use(g, *p.br)));
  A::Var u = A::sigmoid(
      g, A::add_rowvec(g, A::add(g, A::matmul(g, x, use(g, *p.Wz)), A::matmul(g, h, use(g, *p.Uz))),
                       use(g, *p.bz)));
  A::Var n = A::tanh_(
      g, A::add_rowvec(
             g,
             A::add(g, A::matmul(g, x, use(g, *p.Wn)),
                    A::cmul(g, r, A::matmul(g, h, use(g, *p.Un)))),
             use(g, *p.bn)));
  // h' = (1 - u) * n + u * h
  return A::add(g, A::sub(g, n, A::cmul(g, u, n)), A::cmul(g, u, h));
}

VaeModel::Encoding VaeModel::encode(A::Graph& g, const std::vector<std::vector<int>>& tokens,
                                    bool stochastic, Rng* noise_rng) const {
  const int L = config_.max_len;
  const auto B = static_cast<int>(tokens.size());
  if (B == 0) throw InternalError("vae encode: empty batch");
  for (const auto& row : tokens)
    if (static_cast<int>(row.size()) != L)
      throw InternalError("vae encode: token row length != max_len");

  // Per-position keep masks: 1 for real tokens, 0 for PAD (state frozen).
  std::vector<A::Vector> keep(static_cast<size_t>(L), A::Vector::Zero(B));
  for (int t = 0; t < L; ++t)
    for (int b = 0; b < B; ++b) keep[static_cast<size_t>(t)](b) = tokens[b][t] != kPadId ? 1.0 : 0.0;

  A::Var emb = use(g, *embedding_);
  std::vector<A::Var> inputs(static_cast<size_t>(L));
  for (int t = 0; t < L; ++t) {
    std::vector<int> ids(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) ids[static_cast<size_t>(b)] = tokens[b][t];
    inputs[static_cast<size_t>(t)] = A::rows_gather(g, emb, ids);
  }

  A::Var zero_h = g.constant(A::Matrix::Zero(B, config_.enc_hidden));
  A::Var fwd_final = nullptr;
  A::Var bwd_final = nullptr;
  for (int l = 0; l < config_.enc_layers; ++l) {
    std::vector<A::Var> fwd(static_cast<size_t>(L)), bwd(static_cast<size_t>(L));
    A::Var h = zero_h;
    for (int t = 0; t < L; ++t) {
      A::Var h_new = gru_step(g, enc_fwd_[static_cast<size_t>(l)], inputs[static_cast<size_t>(t)], h);
      h = A::mask_mix(g, h_new, h, keep[static_cast<size_t>(t)]);
      fwd[static_cast<size_t>(t)] = h;
    }
    fwd_final = h;
    h = zero_h;
    for (int t = L - 1; t >= 0; --t) {
      A::Var h_new = gru_step(g, enc_bwd_[static_cast<size_t>(l)], inputs[static_cast<size_t>(t)], h);
      h = A::mask_mix(g, h_new, h, keep[static_cast<size_t>(t)]);
      bwd[static_cast<size_t>(t)] = h;
    }
    bwd_final = h;
    for (int t = 0; t < L; ++t)
      inputs[static_cast<size_t>(t)] =
          A::concat_cols(g, {fwd[static_cast<size_t>(t)], bwd[static_cast<size_t>(t)]});
  }

  Encoding enc;
  enc.states = inputs;  // top-layer bidirectional states per position
  A::Var final_state = A::concat_cols(g, {fwd_final, bwd_final});
  enc.mu = A::add_rowvec(g, A::matmul(g, final_state, use(g, *W_mu_)), use(g, *b_mu_));
  // Bounded log-variance keeps exp() and the KL term finite under bad steps.
  enc.logvar =
      A::clamp(g, A::add_rowvec(g, A::matmul(g, final_state, use(g, *W_lv_)), use(g, *b_lv_)),
               -8.0, 8.0);
  if (stochastic) {
    A::Matrix eps = A::Matrix::Zero(B, config_.d_z);
    if (noise_rng)
      for (int i = 0; i < B; ++i)
        for (int j = 0; j < config_.d_z; ++j) eps(i, j) = noise_rng->normal();
    A::Var sigma = A::exp_(g, A::scale(g, enc.logvar, 0.5));
    enc.z = A::add(g, enc.mu, A::cmul(g, sigma, g.constant(std::move(eps))));
  } else {
    enc.z = enc.mu;
  }
  return enc;
}

A::Var VaeModel::decode(A::Graph& g, A::Var z, const std::vector<std::vector<int>>& tokens,
                        double mask_ratio, Rng* mask_rng,
                        std::vector<std::vector<int>>* used_inputs) const {
  const int L = config_.max_len;
  const auto B = static_cast<int>(tokens.size());
  if (B == 0) throw InternalError("vae decode: empty batch");
  if (z->value.rows() != B) throw InternalError("vae decode: z/batch size mismatch");
  if (used_inputs) used_inputs->assign(static_cast<size_t>(B), {});

  A::Var emb = use(g, *embedding_);
  A::Var h = A::tanh_(g, A::add_rowvec(g, A::matmul(g, z, use(g, *W_h0_)), use(g, *b_h0_)));
  std::vector<A::Var> logit_blocks;
  logit_blocks.reserve(static_cast<size_t>(L));
  for (int t = 0; t < L; ++t) {
    std::vector<int> ids(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
      int id = t == 0 ? kBosId : tokens[b][t - 1];
      if (t > 0 && mask_ratio > 0 &&
          (mask_ratio >= 1.0 || (mask_rng && mask_rng->uniform() < mask_ratio)))
        id = kMaskId;
      ids[static_cast<size_t>(b)] = id;
      if (used_inputs) (*used_inputs)[static_cast<size_t>(b)].push_back(id);
    }
    A::Var x = A::concat_cols(g, {A::rows_gather(g, emb, ids), z});
    h = gru_step(g, dec_, x, h);
    logit_blocks.push_back(
        A::add_rowvec(g, A::matmul(g, h, use(g, *W_out_)), use(g, *b_out_)));
  }
  return A::concat_rows(g, logit_blocks);  // (L*B) x |V|, position-major
}

A::Var VaeModel::reconstruction_loss(A::Graph& g, A::Var logits,
                                     const std::vector<std::vector<int>>& tokens) const {
  const int L = config_.max_len;
  const auto B = static_cast<int>(tokens.size());
  if (logits->value.rows() != static_cast<Eigen::Index>(L) * B)
    throw InternalError("vae reconstruction_loss: logits/batch shape mismatch");
  std::vector<int> targets(static_cast<size_t>(L) * B);
  std::vector<double> weights(static_cast<size_t>(L) * B);
  for (int t = 0; t < L; ++t)
    for (int b = 0; b < B; ++b) {
      size_t row = static_cast<size_t>(t) * B + static_cast<size_t>(b);
      targets[row] = tokens[b][t];
      weights[row] = tokens[b][t] != kPadId ? 1.0 / B : 0.0;
    }
  return A::cross_entropy_logits(g, logits, targets, weights);
}

A::Var kl_loss(A::Graph& g, A::Var mu, A::Var logvar) {
  if (mu->value.rows() != logvar->value.rows() || mu->value.cols() != logvar->value.cols())
    throw InternalError("kl_loss: mu/logvar shape mismatch");
  auto batch = static_cast<double>(mu->value.rows());
  // 0.5 * (mu^2 + exp(logvar) - 1 - logvar), summed over dims, averaged over batch.
  A::Var s = A::add(g, A::square(g, mu), A::exp_(g, logvar));
  s = A::add_scalar(g, s, -1.0);
  s = A::sub(g, s, logvar);
  return A::scale(g, A::sum_all(g, s), 0.5 / batch);
}

A::Var infonce_loss(A::Graph& g, A::Var anchors, A::Var positives, double tau) {
  const auto n = anchors->value.rows();
  if (n != positives->value.rows() || anchors->value.cols() != positives->value.cols())
    throw InternalError("infonce_loss: anchor/positive shape mismatch");
  if (n < 2) throw InternalError("infonce_loss: need at least 2 pairs for in-batch negatives");
  if (tau <= 0) throw InternalError("infonce_loss: tau must be > 0");
  A::Var a = A::l2_normalize_rows(g, anchors);
  A::Var p = A::l2_normalize_rows(g, positives);
  A::Var logits = A::scale(g, A::matmul(g, a, A::transpose(g, p)), 1.0 / tau);
  std::vector<int> targets(static_cast<size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) targets[static_cast<size_t>(i)] = static_cast<int>(i);
  std::vector<double> weights(static_cast<size_t>(n), 1.0 / static_cast<double>(n));
  return A::cross_entropy_logits(g, logits, targets, weights);
}

Stage1Checkpoint train_stage1(const std::vector<Query>& corpus, const Vocabulary& vocab,
                              const Stage1Config& config, std::vector<Stage1EpochLog>* log) {
  config.validate();
  if (corpus.size() < static_cast<size_t>(config.batch_size))
    throw UserError("stage1: corpus has " + std::to_string(corpus.size()) +
                    " queries, need at least batch_size = " + std::to_string(config.batch_size));

  std::vector<std::vector<int>> all_tokens(corpus.size());
  for (size_t i = 0; i < corpus.size(); ++i)
    all_tokens[i] = tokenize(corpus[i].text, vocab, config.max_len);

  Rng seed_rng(config.rng_seed);
  Rng init_rng = seed_rng.fork(0);
  Rng shuffle_rng = seed_rng.fork(1);
  Rng noise_rng = seed_rng.fork(2);
  Rng mask_rng = seed_rng.fork(3);

  auto model = std::make_shared<VaeModel>(config, vocab.size(), init_rng);
  Adam opt(config.learning_rate);

  const size_t n = corpus.size();
  const auto steps_per_epoch =
      static_cast<int64_t>((n + config.batch_size - 1) / static_cast<size_t>(config.batch_size));
  int64_t global_step = 0;

  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    shuffle_rng.shuffle(order);

    Stage1EpochLog epoch_log;
    epoch_log.epoch = epoch;
    int64_t batches = 0;
    for (size_t start = 0; start < n; start += static_cast<size_t>(config.batch_size)) {
      size_t end = std::min(n, start + static_cast<size_t>(config.batch_size));
      if (end - start < 2) break;  // a trailing singleton has no in-batch negatives
      std::vector<std::vector<int>> batch;
      batch.reserve(end - start);
      for (size_t i = start; i < end; ++i) batch.push_back(all_tokens[order[i]]);

      A::Graph g;
      auto enc1 = model->encode(g, batch, /*stochastic=*/true, &noise_rng);
      auto enc2 = model->encode(g, batch, /*stochastic=*/true, &noise_rng);
      A::Var logits = model->decode(g, enc1.z, batch, config.mask_ratio, &mask_rng);
      A::Var recon = model->reconstruction_loss(g, logits, batch);
      A::Var kl = kl_loss(g, enc1.mu, enc1.logvar);
      A::Var contrast = infonce_loss(g, enc1.z, enc2.z, config.tau);

      double beta_t = config.beta;
      if (config.beta_warmup) {
        double progress = static_cast<double>(global_step + 1) / static_cast<double>(steps_per_epoch);
        beta_t *= std::min(1.0, progress);
      }
      A::Var total = A::add(g, A::add(g, recon, A::scale(g, kl, beta_t)),
                            A::scale(g, contrast, config.alpha));
      double total_v = total->value(0, 0);
      if (!std::isfinite(total_v))
        throw InternalError("stage1: loss diverged (non-finite) at epoch " +
                            std::to_string(epoch) + " step " + std::to_string(global_step));

      g.backward(total);
      flush_param_grads(g);
      opt.step(model->params().all());

      epoch_log.recon += recon->value(0, 0);
      epoch_log.kl += kl->value(0, 0);
      epoch_log.contrastive += contrast->value(0, 0);
      epoch_log.total += total_v;
      ++batches;
      ++global_step;
    }
    if (batches > 0) {
      epoch_log.recon /= static_cast<double>(batches);
      epoch_log.kl /= static_cast<double>(batches);
      epoch_log.contrastive /= static_cast<double>(batches);
      epoch_log.total /= static_cast<double>(batches);
    }
    if (log) log->push_back(epoch_log);
  }

  return Stage1Checkpoint{config, vocab, std::move(model)};
}

Eigen::VectorXd embed_query(const VaeModel& model, const std::vector<int>& tokens) {
  return embed_batch(model, {tokens}).row(0);
}

Eigen::MatrixXd embed_batch(const VaeModel& model, const std::vector<std::vector<int>>& tokens) {
  A::Graph g;
  auto enc = model.encode(g, tokens, /*stochastic=*/false, nullptr);
  A::Var out = A::l2_normalize_rows(g, enc.mu);
  return out->value;
}

A::Var state_sequence(A::Graph& g, const VaeModel::Encoding& enc, int row) {
  if (enc.states.empty()) throw InternalError("state_sequence: encoding has no states");
  if (row < 0 || row >= enc.states.front()->value.rows()) {
    throw InternalError("state_sequence: row out of range");
  }
  std::vector<std::pair<A::Var, int>> srcs;
  srcs.reserve(enc.states.size());
  for (A::Var s : enc.states) srcs.emplace_back(s, row);
  return A::pick_rows(g, srcs);
}

namespace {

constexpr uint32_t kStage1Magic = 0x51425331;  // "QBS1"

nlohmann::json config_to_json(const Stage1Config& c) {
  return nlohmann::json{{"max_len", c.max_len},
                        {"emb_dim", c.emb_dim},
                        {"enc_hidden", c.enc_hidden},
                        {"enc_layers", c.enc_layers},
                        {"dec_hidden", c.dec_hidden},
                        {"d_z", c.d_z},
                        {"beta", c.beta},
                        {"beta_warmup", c.beta_warmup},
                        {"alpha", c.alpha},
                        {"tau", c.tau},
                        {"batch_size", c.batch_size},
                        {"mask_ratio", c.mask_ratio},
                        {"learning_rate", c.learning_rate},
                        {"max_epochs", c.max_epochs},
                        {"rng_seed", c.rng_seed}};
}

Stage1Config config_from_json(const nlohmann::json& j) {
  Stage1Config c;
  c.max_len = j.at("max_len").get<int>();
  c.emb_dim = j.at("emb_dim").get<int>();
  c.enc_hidden = j.at("enc_hidden").get<int>();
  c.enc_layers = j.at("enc_layers").get<int>();
  c.dec_hidden = j.at("dec_hidden").get<int>();
  c.d_z = j.at("d_z").get<int>();
  c.beta = j.at("beta").get<double>();
  c.beta_warmup = j.at("beta_warmup").get<bool>();
  c.alpha = j.at("alpha").get<double>();
  c.tau = j.at("tau").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.mask_ratio = j.at("mask_ratio").get<double>();
  c.learning_rate = j.at("learning_rate").get<double>();
  c.max_epochs = j.at("max_epochs").get<int>();
  c.rng_seed = j.at("rng_seed").get<uint64_t>();
  return c;
}

}  // namespace

void save_stage1(const Stage1Checkpoint& ckpt, const std::string& prefix) {
  if (!ckpt.model) throw InternalError("save_stage1: empty checkpoint");
  std::ostringstream blob;
  write_u32(blob, kStage1Magic);
  write_u32(blob, kStage1FormatVersion);
  ckpt.vocab.write(blob);
  ckpt.model->params().write_values(blob);
  write_file(prefix + ".bin", blob.str());

  nlohmann::json manifest{{"format_version", kStage1FormatVersion},
                          {"d_z", ckpt.config.d_z},
                          {"vocab_hash", ckpt.vocab.content_hash()},
                          {"params_hash", ckpt.model->params().content_hash()},
                          {"config", config_to_json(ckpt.config)}};
  write_file(prefix + ".json", manifest.dump(2) + "\n");
}

Stage1Checkpoint load_stage1(const std::string& prefix) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(prefix + ".json"));
  } catch (const nlohmann::json::exception& e) {
    throw UserError("stage1 checkpoint manifest " + prefix + ".json: " + e.what());
  }
  if (manifest.at("format_version").get<uint32_t>() != kStage1FormatVersion)
    throw UserError("stage1 checkpoint " + prefix + " has unsupported format_version " +
                    std::to_string(manifest.at("format_version").get<uint32_t>()));

  Stage1Config config;
  try {
    config = config_from_json(manifest.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw UserError("stage1 checkpoint manifest " + prefix + ".json config: " + e.what());
  }

  std::istringstream blob(read_file(prefix + ".bin"));
  if (read_u32(blob) != kStage1Magic)
    throw UserError("stage1 checkpoint " + prefix + ".bin: bad magic");
  if (read_u32(blob) != kStage1FormatVersion)
    throw UserError("stage1 checkpoint " + prefix + ".bin: unsupported format_version");
  Vocabulary vocab = Vocabulary::read(blob);
  if (vocab.content_hash() != manifest.at("vocab_hash").get<std::string>())
    throw UserError("stage1 checkpoint " + prefix + ": vocabulary hash mismatch");

  Rng init_rng(config.rng_seed);
  auto model = std::make_shared<VaeModel>(config, vocab.size(), init_rng);
  model->params().read_values(blob);
  if (model->params().content_hash() != manifest.at("params_hash").get<std::string>())
    throw UserError("stage1 checkpoint " + prefix + ": parameter hash mismatch");
  return Stage1Checkpoint{config, std::move(vocab), std::move(model)};
}

std::string stage1_config_json(const Stage1Config& config) {
  return config_to_json(config).dump();
}

Stage1Config stage1_config_from_json(const std::string& json_text) {
  try {
    return config_from_json(nlohmann::json::parse(json_text));
  } catch (const nlohmann::json::exception& e) {
    throw UserError(std::string("representation config json: ") + e.what());
  }
}

}  // namespace qbprf
