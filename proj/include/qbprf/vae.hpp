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

#include <memory>
#include <string>
#include <vector>

#include "qbprf/autograd.hpp"
#include "qbprf/data.hpp"
#include "qbprf/params.hpp"
#include "qbprf/rng.hpp"
#include "qbprf/vocab.hpp"

namespace qbprf {

// First-stage representation learner: a bidirectional-GRU variational
// autoencoder whose latent mean doubles as the query embedding, regularized
// by a contrastive loss that pulls two stochastic encodings of the same
// query together against in-batch negatives.
struct Stage1Config {
  int max_len = 50;
  int emb_dim = 256;        // token embedding size (shared encoder/decoder)
  int enc_hidden = 512;     // GRU hidden units per direction
  int enc_layers = 2;       // stacked bidirectional layers
  int dec_hidden = 512;     // decoder GRU hidden units, single layer
  int d_z = 128;            // latent dimension
  double beta = 1.0;        // weight of the KL term
  bool beta_warmup = true;  // ramp beta linearly over the first epoch
  double alpha = 1.0;       // weight of the contrastive term
  double tau = 0.7;         // contrastive temperature
  int batch_size = 128;
  double mask_ratio = 1.0;  // fraction of decoder inputs replaced by MASK
  double learning_rate = 1e-3;
  int max_epochs = 10;
  uint64_t rng_seed = 0;

  // Throws UserError when a field is out of its documented range.
  void validate() const;
};

class VaeModel {
 public:
  VaeModel(const Stage1Config& config, size_t vocab_size, Rng& init_rng);

  // Batched encoding of fixed-length token rows.
  struct Encoding {
    ag::Var mu;      // B x d_z
    ag::Var logvar;  // B x d_z
    ag::Var z;       // B x d_z; sampled when stochastic, = mu otherwise
    // Top-layer bidirectional states, one (B x 2*enc_hidden) node per
    // position; consumed by the selection and fusion modules.
    std::vector<ag::Var> states;
  };

  // stochastic=false gives z = mu (deterministic mode). stochastic=true draws
  // z = mu + exp(0.5*logvar) * eps with eps from noise_rng; a null noise_rng
  // forces eps = 0 (used to test the reparameterization identity).
  Encoding encode(ag::Graph& g, const std::vector<std::vector<int>>& tokens, bool stochastic,
                  Rng* noise_rng) const;

  // Teacher-forced reconstruction conditioned on z at every step: the input
  // at position t is the previous target token (BOS at t=0), replaced by
  // MASK with probability mask_ratio. Returns logits of shape
  // (max_len*B) x |V|, position-major. used_inputs, when non-null, receives
  // the decoder input ids actually consumed (one row per sequence).
  ag::Var decode(ag::Graph& g, ag::Var z, const std::vector<std::vector<int>>& tokens,
                 double mask_ratio, Rng* mask_rng,
                 std::vector<std::vector<int>>* used_inputs = nullptr) const;

  // Mean over the batch of the summed token-level cross entropy against the
  // original tokens (PAD positions excluded). logits must come from decode()
  // for the same token batch.
  ag::Var reconstruction_loss(ag::Graph& g, ag::Var logits,
                              const std::vector<std::vector<int>>& tokens) const;

  const Stage1Config& config() const { return config_; }
  size_t vocab_size() const { return vocab_size_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  // Trained token embedding table (vocab_size x emb_dim). Learned without
  // labels over the whole corpus, so it places every token — handy as a warm
  // start for downstream components that would otherwise see parts of the
  // vocabulary only through sparse supervised signals.
  const Eigen::MatrixXd& token_embedding() const { return embedding_->value; }

 private:
  struct GruDir {
    Tensor *Wr, *Ur, *br, *Wz, *Uz, *bz, *Wn, *Un, *bn;
  };
  GruDir make_gru(const std::string& prefix, int in_dim, int hidden, Rng& rng);
  ag::Var gru_step(ag::Graph& g, const GruDir& p, ag::Var x, ag::Var h) const;

  Stage1Config config_;
  size_t vocab_size_;
  ParamSet params_;
  Tensor* embedding_;                       // |V| x emb_dim
  std::vector<GruDir> enc_fwd_, enc_bwd_;   // one per layer
  Tensor *W_mu_, *b_mu_, *W_lv_, *b_lv_;    // latent heads over final state
  GruDir dec_;
  Tensor *W_h0_, *b_h0_;                    // latent -> decoder initial state
  Tensor *W_out_, *b_out_;                  // decoder state -> vocab logits
};

// Closed-form KL(Normal(mu, sigma^2) || Normal(0, I)) summed over latent
// dimensions, averaged over the batch:
// 0.5 * sum_j (mu_j^2 + sigma_j^2 - 1 - log sigma_j^2).
ag::Var kl_loss(ag::Graph& g, ag::Var mu, ag::Var logvar);

// Contrastive alignment loss: mean over i of
// -log( exp(s_ii/tau) / sum_j exp(s_ij/tau) ) with s the pairwise dot
// products of the L2-normalized rows of anchors vs positives. Rows are
// aligned by index; the other N-1 positives serve as in-batch negatives.
// Throws InternalError when N < 2 (no negatives exist).
ag::Var infonce_loss(ag::Graph& g, ag::Var anchors, ag::Var positives, double tau);

// Per-epoch training telemetry (no wall-clock fields: logs must be
// byte-identical across reruns with one seed).
struct Stage1EpochLog {
  int epoch = 0;
  double recon = 0;
  double kl = 0;
  double contrastive = 0;
  double total = 0;
};

struct Stage1Checkpoint {
  Stage1Config config;
  Vocabulary vocab;
  std::shared_ptr<VaeModel> model;
};

// Minimizes reconstruction + beta*KL + alpha*contrastive with an adaptive-
// moment optimizer. The contrastive positive pair is two stochastic
// encodings of the same query with independent noise. Deterministic given
// config.rng_seed. Throws UserError when the corpus is smaller than one
// batch; throws InternalError when the loss becomes non-finite.
Stage1Checkpoint train_stage1(const std::vector<Query>& corpus, const Vocabulary& vocab,
                              const Stage1Config& config,
                              std::vector<Stage1EpochLog>* log = nullptr);

// Deterministic embedding (z = mu), L2-normalized. Batched variant returns
// one row per input in order.
Eigen::VectorXd embed_query(const VaeModel& model, const std::vector<int>& tokens);
Eigen::MatrixXd embed_batch(const VaeModel& model, const std::vector<std::vector<int>>& tokens);

// Re-slices a batched encoding into sequence `row`'s own state sequence: a
// (max_len x 2*enc_hidden) node whose row t is states[t].row(row).
ag::Var state_sequence(ag::Graph& g, const VaeModel::Encoding& enc, int row);

// Checkpoint persistence: <prefix>.bin (binary blob: magic, format version,
// vocabulary, parameters) + <prefix>.json (manifest with format_version,
// d_z, vocab_hash, params_hash, and the full config). The loader rejects a
// format_version other than kStage1FormatVersion and verifies both hashes.
constexpr uint32_t kStage1FormatVersion = 1;
void save_stage1(const Stage1Checkpoint& ckpt, const std::string& prefix);
Stage1Checkpoint load_stage1(const std::string& prefix);

// JSON round-trip of the config, reused by the joint-training checkpoint
// manifest. The parser throws UserError on missing or ill-typed fields.
std::string stage1_config_json(const Stage1Config& config);
Stage1Config stage1_config_from_json(const std::string& json_text);

}  // namespace qbprf
