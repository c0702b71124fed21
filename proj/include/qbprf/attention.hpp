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

#include <string>
#include <vector>

#include "qbprf/autograd.hpp"
#include "qbprf/params.hpp"
#include "qbprf/rng.hpp"

namespace qbprf {

// Projection weights of one multi-head attention block. The tensors live in
// the owning model's ParamSet; this struct only aggregates the pointers.
struct MhaParams {
  Tensor *wq, *bq;  // d_model x d_model, 1 x d_model
  Tensor *wk, *bk;
  Tensor *wv, *bv;
  Tensor *wo, *bo;
};

MhaParams make_mha_params(ParamSet& params, const std::string& prefix, int d_model, Rng& rng);

// Scaled dot-product attention with `heads` heads. q_seq is Lq x d_model,
// kv_seq is Lkv x d_model; the result is Lq x d_model. key_keep, when
// non-null, holds one 0/1 entry per kv row; rows marked 0 receive no
// attention weight (at least one row must stay kept). attn_out, when
// non-null, receives the post-softmax weight matrix of every head
// (each Lq x Lkv; rows sum to 1).
ag::Var multi_head_attention(ag::Graph& g, const MhaParams& p, int heads, ag::Var q_seq,
                             ag::Var kv_seq, const Eigen::VectorXd* key_keep = nullptr,
                             std::vector<ag::Matrix>* attn_out = nullptr);

// One post-norm transformer encoder layer:
//   x -> norm(x + dropout(MHA(x, x))) -> norm(. + dropout(FFN(.)))
// with a two-layer position-wise feed-forward net (ReLU inside).
struct TransformerLayerParams {
  MhaParams mha;
  Tensor *w1, *b1;  // d_model x ffn_dim
  Tensor *w2, *b2;  // ffn_dim x d_model
  Tensor *ln1_g, *ln1_b;
  Tensor *ln2_g, *ln2_b;
};

TransformerLayerParams make_transformer_layer_params(ParamSet& params, const std::string& prefix,
                                                     int d_model, int ffn_dim, Rng& rng);

// Dropout fires only when train is true and dropout_p > 0; rng may be null
// otherwise. key_keep masks the attention keys exactly as in
// multi_head_attention (queries at masked rows still produce outputs; they
// are expected to be ignored downstream).
ag::Var transformer_layer(ag::Graph& g, const TransformerLayerParams& p, int heads, ag::Var x,
                          const Eigen::VectorXd* key_keep, double dropout_p, bool train, Rng* rng,
                          std::vector<ag::Matrix>* attn_out = nullptr);

}  // namespace qbprf
