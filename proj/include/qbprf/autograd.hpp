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

#include <Eigen/Dense>

#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "qbprf/rng.hpp"

namespace qbprf::ag {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

class Graph;

struct Node {
  Matrix value;
  Matrix grad;
  bool needs_grad = false;
  std::function<void()> backprop;  // pulls this->grad into the parents' grads
};

using Var = Node*;

// Tape of operations built in forward order, swept in reverse on backward().
// Nodes are owned by the graph; every Var stays valid until the graph dies.
class Graph {
 public:
  Var make(Matrix value, bool needs_grad);
  Var constant(Matrix value) { return make(std::move(value), false); }
  Var constant_scalar(double v);
  Var leaf(Matrix value) { return make(std::move(value), true); }

  // loss must be 1x1. Accumulates into the grads of every contributing node.
  void backward(Var loss);

  // Registers an external matrix to receive node->grad when flush_bindings()
  // runs (used to route tape gradients back into model parameters).
  void bind(Var node, Matrix* grad_sink) { bindings_.emplace_back(node, grad_sink); }
  void flush_bindings();

  std::size_t size() const { return order_.size(); }

 private:
  std::deque<Node> nodes_;
  std::vector<Node*> order_;
  std::vector<std::pair<Node*, Matrix*>> bindings_;
};

// ---- elementwise / broadcast ----
Var add(Graph& g, Var a, Var b);
Var sub(Graph& g, Var a, Var b);
Var cmul(Graph& g, Var a, Var b);
Var scale(Graph& g, Var a, double s);
Var add_scalar(Graph& g, Var a, double s);
Var add_rowvec(Graph& g, Var a, Var row);  // row is 1xC, broadcast over rows
Var sigmoid(Graph& g, Var a);
Var tanh_(Graph& g, Var a);
Var relu(Graph& g, Var a);
Var exp_(Graph& g, Var a);
Var log_(Graph& g, Var a);
Var square(Graph& g, Var a);
Var clamp(Graph& g, Var a, double lo, double hi);

// keep[i] * a.row(i) + (1 - keep[i]) * b.row(i); keep is a constant.
Var mask_mix(Graph& g, Var a, Var b, const Vector& keep);
// a.row(i) * s[i]; s is a constant.
Var scale_rows(Graph& g, Var a, const Vector& s);
// Inverted dropout; identity when train is false or p == 0.
Var dropout(Graph& g, Var a, double p, bool train, Rng& rng);

// ---- linear algebra ----
Var matmul(Graph& g, Var a, Var b);
Var transpose(Graph& g, Var a);

// ---- shape ----
Var concat_rows(Graph& g, const std::vector<Var>& parts);
Var concat_cols(Graph& g, const std::vector<Var>& parts);
Var slice_rows(Graph& g, Var a, int r0, int n);
Var slice_cols(Graph& g, Var a, int c0, int n);
// out.row(i) = a.row(idx[i]); duplicate indices accumulate on backward.
Var rows_gather(Graph& g, Var a, const std::vector<int>& idx);
// out.row(i) = srcs[i].first->value.row(srcs[i].second).
Var pick_rows(Graph& g, const std::vector<std::pair<Var, int>>& srcs);

// ---- reductions / normalizations ----
Var sum_all(Graph& g, Var a);    // 1x1
Var mean_all(Graph& g, Var a);   // 1x1
Var mean_rows(Graph& g, Var a);  // 1xC, mean over rows
Var softmax_rows(Graph& g, Var a);
Var logsumexp_rows(Graph& g, Var a);  // Nx1
Var l2_normalize_rows(Graph& g, Var a, double eps = 1e-12);
Var layer_norm_rows(Graph& g, Var a, Var gain, Var bias, double eps = 1e-5);

// sum_i weights[i] * (logsumexp(a.row(i)) - a(i, targets[i]))
Var cross_entropy_logits(Graph& g, Var logits, const std::vector<int>& targets,
                         const std::vector<double>& weights);

}  // namespace qbprf::ag
