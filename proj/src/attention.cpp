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

#include "qbprf/attention.hpp"

#include <cmath>

#include "qbprf/errors.hpp"

namespace qbprf {

namespace {

// Additive pre-softmax bias that zeroes the weight of masked key rows.
constexpr double kMaskedScore = -1e9;

}  // namespace

MhaParams make_mha_params(ParamSet& params, const std::string& prefix, int d_model, Rng& rng) {
  MhaParams p;
  p.wq = &params.create(prefix + ".wq", init_xavier(d_model, d_model, rng));
  p.bq = &params.create(prefix + ".bq", init_zeros(1, d_model));
  p.wk = &params.create(prefix + ".wk", init_xavier(d_model, d_model, rng));
  p.bk = &params.create(prefix + ".bk", init_zeros(1, d_model));
  p.wv = &params.create(prefix + ".wv", init_xavier(d_model, d_model, rng));
  p.bv = &params.create(prefix + ".bv", init_zeros(1, d_model));
  p.wo = &params.create(prefix + ".wo", init_xavier(d_model, d_model, rng));
  p.bo = &params.create(prefix + ".bo", init_zeros(1, d_model));
  return p;
}

ag::Var multi_head_attention(ag::Graph& g, const MhaParams& p, int heads, ag::Var q_seq,
                             ag::Var kv_seq, const Eigen::VectorXd* key_keep,
                             std::vector<ag::Matrix>* attn_out) {
  const int d_model = static_cast<int>(q_seq->value.cols());
  if (d_model != kv_seq->value.cols()) {
    throw InternalError("attention: query and key/value widths differ");
  }
  if (heads < 1 || d_model % heads != 0) {
    throw InternalError("attention: head count must divide the model width");
  }
  const int d_head = d_model / heads;
  const auto n_keys = kv_seq->value.rows();

  ag::Var bias = nullptr;
  if (key_keep != nullptr) {
    if (key_keep->size() != n_keys) {
      throw InternalError("attention: key mask length mismatch");
    }
    if (key_keep->maxCoeff() <= 0.0) {
      throw InternalError("attention: all keys masked out");
    }
    Eigen::MatrixXd row(1, n_keys);
    for (Eigen::Index j = 0; j < n_keys; ++j) {
      row(0, j) = (*key_keep)(j) > 0.0 ? 0.0 : kMaskedScore;
    }
    bias = g.constant(std::move(row));
  }

  ag::Var q = ag::add_rowvec(g, ag::matmul(g, q_seq, use(g, *p.wq)), use(g, *p.bq));
  ag::Var k = ag::add_rowvec(g, ag::matmul(g, kv_seq, use(g, *p.wk)), use(g, *p.bk));
  ag::Var v = ag::add_rowvec(g, ag::matmul(g, kv_seq, use(g, *p.wv)), use(g, *p.bv));

  std::vector<ag::Var> head_outs;
  head_outs.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    ag::Var qh = ag::slice_cols(g, q, h * d_head, d_head);
    ag::Var kh = ag::slice_cols(g, k, h * d_head, d_head);
    ag::Var vh = ag::slice_cols(g, v, h * d_head, d_head);
    ag::Var scores = ag::scale(g, ag::matmul(g, qh, ag::transpose(g, kh)),
                               1.0 / std::sqrt(static_cast<double>(d_head)));
    if (bias != nullptr) {
      scores = ag::add_rowvec(g, scores, bias);
    }
    ag::Var weights = ag::softmax_rows(g, scores);
    if (attn_out != nullptr) {
      attn_out->push_back(weights->value);
    }
    head_outs.push_back(ag::matmul(g, weights, vh));
  }
  ag::Var merged = heads == 1 ? head_outs[0] : ag::concat_cols(g, head_outs);
  return ag::add_rowvec(g, ag::matmul(g, merged, use(g, *p.wo)), use(g, *p.bo));
}

TransformerLayerParams make_transformer_layer_params(ParamSet& params, const std::string& prefix,
                                                     int d_model, int ffn_dim, Rng& rng) {
  TransformerLayerParams p;
  p.mha = make_mha_params(params, prefix + ".mha", d_model, rng);
  p.w1 = &params.create(prefix + ".ffn.w1", init_xavier(d_model, ffn_dim, rng));
  p.b1 = &params.create(prefix + ".ffn.b1", init_zeros(1, ffn_dim));
  p.w2 = &params.create(prefix + ".ffn.w2", init_xavier(ffn_dim, d_model, rng));
  p.b2 = &params.create(prefix + ".ffn.b2", init_zeros(1, d_model));
  p.ln1_g = &params.create(prefix + ".ln1.gain", init_ones(1, d_model));
  p.ln1_b = &params.create(prefix + ".ln1.bias", init_zeros(1, d_model));
  p.ln2_g = &params.create(prefix + ".ln2.gain", init_ones(1, d_model));
  p.ln2_b = &params.create(prefix + ".ln2.bias", init_zeros(1, d_model));
  return p;
}

ag::Var transformer_layer(ag::Graph& g, const TransformerLayerParams& p, int heads, ag::Var x,
                          const Eigen::VectorXd* key_keep, double dropout_p, bool train, Rng* rng,
                          std::vector<ag::Matrix>* attn_out) {
  const bool drop = train && dropout_p > 0.0;
  if (drop && rng == nullptr) {
    throw InternalError("transformer_layer: dropout requested without an rng");
  }
  ag::Var attn = multi_head_attention(g, p.mha, heads, x, x, key_keep, attn_out);
  if (drop) {
    attn = ag::dropout(g, attn, dropout_p, true, *rng);
  }
  ag::Var h = ag::layer_norm_rows(g, ag::add(g, x, attn), use(g, *p.ln1_g), use(g, *p.ln1_b));

  ag::Var f = ag::relu(g, ag::add_rowvec(g, ag::matmul(g, h, use(g, *p.w1)), use(g, *p.b1)));
  f = ag::add_rowvec(g, ag::matmul(g, f, use(g, *p.w2)), use(g, *p.b2));
  if (drop) {
    f = ag::dropout(g, f, dropout_p, true, *rng);
  }
  return ag::layer_norm_rows(g, ag::add(g, h, f), use(g, *p.ln2_g), use(g, *p.ln2_b));
}

}  // namespace qbprf
