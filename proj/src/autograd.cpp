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

#include "qbprf/autograd.hpp"

#include <cmath>
#include <stdexcept>

#include "qbprf/errors.hpp"

namespace qbprf::ag {

namespace {

using RowArray = Eigen::Array<double, 1, Eigen::Dynamic>;

void check(bool cond, const char* msg) {
  if (!cond) throw InternalError(std::string("autograd: ") + msg);
}

}  // namespace

Var Graph::make(Matrix value, bool needs_grad) {
  nodes_.emplace_back();
  Node& n = nodes_.back();
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  if (needs_grad) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  order_.push_back(&n);
  return &n;
}

Var Graph::constant_scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return constant(std::move(m));
}

void Graph::backward(Var loss) {
  check(loss->value.rows() == 1 && loss->value.cols() == 1, "backward: loss must be 1x1");
  check(loss->needs_grad, "backward: loss does not depend on any differentiable node");
  loss->grad(0, 0) += 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Node* n = *it;
    if (n->needs_grad && n->backprop) n->backprop();
  }
}

void Graph::flush_bindings() {
  for (auto& [node, sink] : bindings_) {
    check(sink->rows() == node->grad.rows() && sink->cols() == node->grad.cols(),
          "flush_bindings: shape mismatch");
    *sink += node->grad;
  }
  bindings_.clear();
}

namespace {

bool any_grad(Var a) { return a->needs_grad; }
bool any_grad(Var a, Var b) { return a->needs_grad || b->needs_grad; }

}  // namespace

Var add(Graph& g, Var a, Var b) {
  check(a->value.rows() == b->value.rows() && a->value.cols() == b->value.cols(),
        "add: shape mismatch");
  Var out = g.make(a->value + b->value, any_grad(a, b));
  if (out->needs_grad) {
    out->backprop = [out, a, b] {
      if (a->needs_grad) a->grad += out->grad;
      if (b->needs_grad) b->grad += out->grad;
    };
  }
  return out;
}

Var sub(Graph& g, Var a, Var b) {
  check(a->value.rows() == b->value.rows() && a->value.cols() == b->value.cols(),
        "sub: shape mismatch");
  Var out = g.make(a->value - b->value, any_grad(a, b));
  if (out->needs_grad) {
    out->backprop = [out, a, b] {
      if (a->needs_grad) a->grad += out->grad;
      if (b->needs_grad) b->grad -= out->grad;
    };
  }
  return out;
}

Var cmul(Graph& g, Var a, Var b) {
  check(a->value.rows() == b->value.rows() && a->value.cols() == b->value.cols(),
        "cmul: shape mismatch");
  Var out = g.make(a->value.cwiseProduct(b->value), any_grad(a, b));
  if (out->needs_grad) {
    out->backprop = [out, a, b] {
      if (a->needs_grad) a->grad += out->grad.cwiseProduct(b->value);
      if (b->needs_grad) b->grad += out->grad.cwiseProduct(a->value);
    };
  }
  return out;
}

Var scale(Graph& g, Var a, double s) {
  Var out = g.make(a->value * s, any_grad(a));
  if (out->needs_grad) {
    out->backprop = [out, a, s] { a->grad += out->grad * s; };
  }
  return out;
}

Var add_scalar(Graph& g, Var a, double s) {
  Var out = g.make(a->value.array() + s, any_grad(a));
  if (out->needs_grad) {
    out->backprop = [out, a] { a->grad += out->grad; };
  }
  return out;
}

Var add_rowvec(Graph& g, Var a, Var row) {
  check(row->value.rows() == 1 && row->value.cols() == a->value.cols(),
        "add_rowvec: row must be 1 x cols(a)");
  Var out = g.make(a->value.rowwise() + row->value.row(0), any_grad(a, row));
  if (out->needs_grad) {
    out->backprop = [out, a, row] {
      if (a->needs_grad) a->grad += out->grad;
      if (row->needs_grad) row->grad += out->grad.colwise().sum();
    };
  }
  return out;
}

Var sigmoid(Graph& g, Var a) {
  Matrix y = (1.0 / (1.0 + (-a->value.array()).exp())).matrix();
  Var out = g.make(std::move(y), any_grad(a));
  if (out->needs_grad) {
    out->backprop = [out, a] {
      a->grad.array() += out->grad.array() * out->value.array() * (1.0 - out->value.array());
    };
  }
  return out;
}

Var tanh_(Graph& g, Var a) {
  Var out = g.make(a->value.array().tanh().matrix(), any_grad(a));
  if (out->needs_grad) {
    out->backprop = [out, a] {
      a->grad.array() += out->grad.array() * (1.0 - out->value.array().square());
    };
  }
  return out;
}

Var relu(Graph& g, Var a) {
  Var out = g.make(a->value.cwiseMax(0.0), any_grad(a));
  if (out->needs_grad) {
    out->backprop = [out, a] {
      a->grad.array() += out->grad.array() * (a->value.array() > 0.0).cast<double>();
    };
  }
  return out;
}

Var exp_(Graph& g, Var a) {
  Var out = g.make(a->value.array().exp().matrix(), any_grad(a));
  if (out->needs_grad) {
    out->backprop = [out, a] { a->grad.array() += out->grad.array() * out->value.array(); };
  }
  return out;
}

Var log_(Graph& g, Var a) {
  Var out = g.make(a->value.array().log().matrix(), any_grad(a));
  if (out->needs_grad) {
    out->backprop = [out, a] { a->grad.array() += out->grad.array() / a->value.array(); };
  }
  return out;
}

Var square(Graph& g, Var a) {
  Var out = g.make(a->value.array().square().matrix(), any_grad(a));
  if (out->needs_grad) {
    out->backprop = [out, a] { a->grad.array() += out->grad.array() * 2.0 * a->value.array(); };
  }
  return out;
}

Var clamp(Graph& g, Var a, double lo, double hi) {
  Var out = g.make(a->value.cwiseMax(lo).cwiseMin(hi), any_grad(a));
  if (out->needs_grad) {
    out->backprop = [out, a, lo, hi] {
      a->grad.array() += out->grad.array() *
                         ((a->value.array() >= lo) && (a->value.array() <= hi)).cast<double>();
    };
  }
  return out;
}

Var mask_mix(Graph& g, Var a, Var b, const Vector& keep) {
  check(a->value.rows() == b->value.rows() && a->value.cols() == b->value.cols(),
        "mask_mix: shape mismatch");
  check(keep.size() == a->value.rows(), "mask_mix: keep size mismatch");
  Matrix y = keep.asDiagonal() * a->value + (Vector::Ones(keep.size()) - keep).asDiagonal() * b->value;
  Var out = g.make(std::move(y), any_grad(a, b));
  if (out->needs_grad) {
    out->backprop = [out, a, b, keep] {
      if (a->needs_grad) a->grad += keep.asDiagonal() * out->grad;
      if (b->needs_grad)
        b->grad += (Vector::Ones(keep.size()) - keep).asDiagonal() * out->grad;
    };
  }
  return out;
}

Var scale_rows(Graph& g, Var a, const Vector& s) {
  check(s.size() == a->value.rows(), "scale_rows: size mismatch");
  Var out = g.make(s.asDiagonal() * a->value, any_grad(a));
  if (out->needs_grad) {
    out->backprop = [out, a, s] { a->grad += s.asDiagonal() * out->grad; };
  }
  return out;
}

Var dropout(Graph& g, Var a, double p, bool train, Rng& rng) {
  if (!train || p <= 0.0) return a;
  check(p < 1.0, "dropout: p must be < 1");
  Matrix mask(a->value.rows(), a->value.cols());
  double inv_keep = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < mask.rows(); ++i)
    for (Eigen::Index j = 0; j < mask.cols(); ++j)
      mask(i, j) = rng.uniform() < p ? 0.0 : inv_keep;
  Var out = g.make(a->value.cwiseProduct(mask), any_grad(a));
  if (out->needs_grad) {
    out->backprop = [out, a, mask = std::move(mask)] {
      a->grad += out->grad.cwiseProduct(mask);
    };
  }
  return out;
}

Var matmul(Graph& g, Var a, Var b) {
  check(a->value.cols() == b->value.rows(), "matmul: inner dim mismatch");
  Var out = g.make(a->value * b->value, any_grad(a, b));
  if (out->needs_grad) {
    out->backprop = [out, a, b] {
      if (a->needs_grad) a->grad.noalias() += out->grad * b->value.transpose();
      if (b->needs_grad) b->grad.noalias() += a->value.transpose() * out->grad;
    };
  }
  return out;
}

Var transpose(Graph& g, Var a) {
  Var out = g.make(a->value.transpose(), any_grad(a));
  if (out->needs_grad) {
    out->backprop = [out, a] { a->grad += out->grad.transpose(); };
  }
  return out;
}

Var concat_rows(Graph& g, const std::vector<Var>& parts) {
  check(!parts.empty(), "concat_rows: empty");
  Eigen::Index cols = parts[0]->value.cols();
  Eigen::Index rows = 0;
  bool ng = false;
  for (Var p : parts) {
    check(p->value.cols() == cols, "concat_rows: column mismatch");
    rows += p->value.rows();
    ng = ng || p->needs_grad;
  }
  Matrix y(rows, cols);
  Eigen::Index r = 0;
  for (Var p : parts) {
    y.middleRows(r, p->value.rows()) = p->value;
    r += p->value.rows();
  }
  Var out = g.make(std::move(y), ng);
  if (ng) {
    out->backprop = [out, parts] {
      Eigen::Index r = 0;
      for (Var p : parts) {
        if (p->needs_grad) p->grad += out->grad.middleRows(r, p->value.rows());
        r += p->value.rows();
      }
    };
  }
  return out;
}

Var concat_cols(Graph& g, const std::vector<Var>& parts) {
  check(!parts.empty(), "concat_cols: empty");
  Eigen::Index rows = parts[0]->value.rows();
  Eigen::Index cols = 0;
  bool ng = false;
  for (Var p : parts) {
    check(p->value.rows() == rows, "concat_cols: row mismatch");
    cols += p->value.cols();
    ng = ng || p->needs_grad;
  }
  Matrix y(rows, cols);
  Eigen::Index c = 0;
  for (Var p : parts) {
    y.middleCols(c, p->value.cols()) = p->value;
    c += p->value.cols();
  }
  Var out = g.make(std::move(y), ng);
  if (ng) {
    out->backprop = [out, parts] {
      Eigen::Index c = 0;
      for (Var p : parts) {
        if (p->needs_grad) p->grad += out->grad.middleCols(c, p->value.cols());
        c += p->value.cols();
      }
    };
  }
  return out;
}

Var slice_rows(Graph& g, Var a, int r0, int n) {
  check(r0 >= 0 && n >= 0 && r0 + n <= a->value.rows(), "slice_rows: out of range");
  Var out = g.make(a->value.middleRows(r0, n), any_grad(a));
  if (out->needs_grad) {
    out->backprop = [out, a, r0, n] { a->grad.middleRows(r0, n) += out->grad; };
  }
  return out;
}

Var slice_cols(Graph& g, Var a, int c0, int n) {
  check(c0 >= 0 && n >= 0 && c0 + n <= a->value.cols(), "slice_cols: out of range");
  Var out = g.make(a->value.middleCols(c0, n), any_grad(a));
  if (out->needs_grad) {
    out->backprop = [out, a, c0, n] { a->grad.middleCols(c0, n) += out->grad; };
  }
  return out;
}

Var rows_gather(Graph& g, Var a, const std::vector<int>& idx) {
  Matrix y(static_cast<Eigen::Index>(idx.size()), a->value.cols());
  for (size_t i = 0; i < idx.size(); ++i) {
    check(idx[i] >= 0 && idx[i] < a->value.rows(), "rows_gather: index out of range");
    y.row(static_cast<Eigen::Index>(i)) = a->value.row(idx[i]);
  }
  Var out = g.make(std::move(y), any_grad(a));
  if (out->needs_grad) {
    out->backprop = [out, a, idx] {
      for (size_t i = 0; i < idx.size(); ++i)
        a->grad.row(idx[i]) += out->grad.row(static_cast<Eigen::Index>(i));
    };
  }
  return out;
}

Var pick_rows(Graph& g, const std::vector<std::pair<Var, int>>& srcs) {
  check(!srcs.empty(), "pick_rows: empty");
  Eigen::Index cols = srcs[0].first->value.cols();
  Matrix y(static_cast<Eigen::Index>(srcs.size()), cols);
  bool ng = false;
  for (size_t i = 0; i < srcs.size(); ++i) {
    const auto& [src, r] = srcs[i];
    check(src->value.cols() == cols, "pick_rows: column mismatch");
    check(r >= 0 && r < src->value.rows(), "pick_rows: row out of range");
    y.row(static_cast<Eigen::Index>(i)) = src->value.row(r);
    ng = ng || src->needs_grad;
  }
  Var out = g.make(std::move(y), ng);
  if (ng) {
    out->backprop = [out, srcs] {
      for (size_t i = 0; i < srcs.size(); ++i) {
        const auto& [src, r] = srcs[i];
        if (src->needs_grad) src->grad.row(r) += out->grad.row(static_cast<Eigen::Index>(i));
      }
    };
  }
  return out;
}

Var sum_all(Graph& g, Var a) {
  Matrix y(1, 1);
  y(0, 0) = a->value.sum();
  Var out = g.make(std::move(y), any_grad(a));
  if (out->needs_grad) {
    out->backprop = [out, a] { a->grad.array() += out->grad(0, 0); };
  }
  return out;
}

Var mean_all(Graph& g, Var a) {
  double n = static_cast<double>(a->value.size());
  Matrix y(1, 1);
  y(0, 0) = a->value.sum() / n;
  Var out = g.make(std::move(y), any_grad(a));
  if (out->needs_grad) {
    out->backprop = [out, a, n] { a->grad.array() += out->grad(0, 0) / n; };
  }
  return out;
}

Var mean_rows(Graph& g, Var a) {
  double n = static_cast<double>(a->value.rows());
  Var out = g.make(a->value.colwise().mean(), any_grad(a));
  if (out->needs_grad) {
    out->backprop = [out, a, n] {
      a->grad += (out->grad / n).replicate(a->value.rows(), 1);
    };
  }
  return out;
}

Var softmax_rows(Graph& g, Var a) {
  Matrix y(a->value.rows(), a->value.cols());
  for (Eigen::Index i = 0; i < a->value.rows(); ++i) {
    RowArray row = a->value.row(i).array();
    double m = row.maxCoeff();
    RowArray e = (row - m).exp();
    y.row(i) = (e / e.sum()).matrix();
  }
  Var out = g.make(std::move(y), any_grad(a));
  if (out->needs_grad) {
    out->backprop = [out, a] {
      for (Eigen::Index i = 0; i < a->value.rows(); ++i) {
        RowArray yi = out->value.row(i).array();
        RowArray gi = out->grad.row(i).array();
        double dot = (gi * yi).sum();
        a->grad.row(i).array() += yi * (gi - dot);
      }
    };
  }
  return out;
}

Var logsumexp_rows(Graph& g, Var a) {
  Matrix y(a->value.rows(), 1);
  for (Eigen::Index i = 0; i < a->value.rows(); ++i) {
    RowArray row = a->value.row(i).array();
    double m = row.maxCoeff();
    y(i, 0) = m + std::log((row - m).exp().sum());
  }
  Var out = g.make(std::move(y), any_grad(a));
  if (out->needs_grad) {
    out->backprop = [out, a] {
      for (Eigen::Index i = 0; i < a->value.rows(); ++i) {
        RowArray sm = (a->value.row(i).array() - out->value(i, 0)).exp();
        a->grad.row(i).array() += out->grad(i, 0) * sm;
      }
    };
  }
  return out;
}

Var l2_normalize_rows(Graph& g, Var a, double eps) {
  Matrix y(a->value.rows(), a->value.cols());
  Vector norms(a->value.rows());
  for (Eigen::Index i = 0; i < a->value.rows(); ++i) {
    double n = std::max(a->value.row(i).norm(), eps);
    norms(i) = n;
    y.row(i) = a->value.row(i) / n;
  }
  Var out = g.make(std::move(y), any_grad(a));
  if (out->needs_grad) {
    out->backprop = [out, a, norms = std::move(norms)] {
      for (Eigen::Index i = 0; i < a->value.rows(); ++i) {
        Eigen::RowVectorXd yi = out->value.row(i);
        Eigen::RowVectorXd gi = out->grad.row(i);
        double dot = gi.dot(yi);
        a->grad.row(i) += (gi - dot * yi) / norms(i);
      }
    };
  }
  return out;
}

Var layer_norm_rows(Graph& g, Var a, Var gain, Var bias, double eps) {
  Eigen::Index cols = a->value.cols();
  check(gain->value.rows() == 1 && gain->value.cols() == cols, "layer_norm: gain shape");
  check(bias->value.rows() == 1 && bias->value.cols() == cols, "layer_norm: bias shape");
  Matrix xhat(a->value.rows(), cols);
  Vector inv_std(a->value.rows());
  for (Eigen::Index i = 0; i < a->value.rows(); ++i) {
    double mean = a->value.row(i).mean();
    RowArray centered = a->value.row(i).array() - mean;
    double var = centered.square().mean();
    double s = 1.0 / std::sqrt(var + eps);
    inv_std(i) = s;
    xhat.row(i) = (centered * s).matrix();
  }
  Matrix y = (xhat.array().rowwise() * RowArray(gain->value.row(0).array())).matrix();
  y.rowwise() += bias->value.row(0);
  bool ng = a->needs_grad || gain->needs_grad || bias->needs_grad;
  Var out = g.make(std::move(y), ng);
  if (ng) {
    out->backprop = [out, a, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)] {
      for (Eigen::Index i = 0; i < a->value.rows(); ++i) {
        RowArray go = out->grad.row(i).array();
        RowArray xh = xhat.row(i).array();
        if (gain->needs_grad) gain->grad.row(0).array() += go * xh;
        if (bias->needs_grad) bias->grad.row(0).array() += go;
        if (a->needs_grad) {
          RowArray dxhat = go * gain->value.row(0).array();
          double m1 = dxhat.mean();
          double m2 = (dxhat * xh).mean();
          a->grad.row(i).array() += inv_std(i) * (dxhat - m1 - xh * m2);
        }
      }
    };
  }
  return out;
}

Var cross_entropy_logits(Graph& g, Var logits, const std::vector<int>& targets,
                         const std::vector<double>& weights) {
  check(static_cast<Eigen::Index>(targets.size()) == logits->value.rows(),
        "cross_entropy_logits: target count mismatch");
  check(targets.size() == weights.size(), "cross_entropy_logits: weight count mismatch");
  double total = 0.0;
  for (size_t i = 0; i < targets.size(); ++i) {
    check(targets[i] >= 0 && targets[i] < logits->value.cols(),
          "cross_entropy_logits: target out of range");
    RowArray row = logits->value.row(static_cast<Eigen::Index>(i)).array();
    double m = row.maxCoeff();
    double lse = m + std::log((row - m).exp().sum());
    total += weights[i] * (lse - row(targets[i]));
  }
  Matrix y(1, 1);
  y(0, 0) = total;
  Var out = g.make(std::move(y), any_grad(logits));
  if (out->needs_grad) {
    out->backprop = [out, logits, targets, weights] {
      double go = out->grad(0, 0);
      for (size_t i = 0; i < targets.size(); ++i) {
        if (weights[i] == 0.0) continue;
        RowArray row = logits->value.row(static_cast<Eigen::Index>(i)).array();
        double m = row.maxCoeff();
        RowArray sm = (row - m).exp();
        sm /= sm.sum();
        sm(targets[i]) -= 1.0;
        logits->grad.row(static_cast<Eigen::Index>(i)).array() += go * weights[i] * sm;
      }
    };
  }
  return out;
}

}  // namespace qbprf::ag
