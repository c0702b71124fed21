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

#include "qbprf/params.hpp"

#include <cmath>

#include "qbprf/errors.hpp"
#include "qbprf/serialize.hpp"

namespace qbprf {

Tensor& ParamSet::create(const std::string& name, Eigen::MatrixXd value) {
  if (tensors_.count(name)) throw InternalError("duplicate parameter name: " + name);
  auto t = std::make_unique<Tensor>(name, std::move(value));
  Tensor* raw = t.get();
  tensors_.emplace(name, std::move(t));
  order_.push_back(raw);
  return *raw;
}

Tensor& ParamSet::find(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw InternalError("unknown parameter name: " + name);
  return *it->second;
}

const Tensor& ParamSet::find(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw InternalError("unknown parameter name: " + name);
  return *it->second;
}

bool ParamSet::contains(const std::string& name) const { return tensors_.count(name) > 0; }

std::vector<Tensor*> ParamSet::all() { return order_; }

std::vector<const Tensor*> ParamSet::all() const {
  return std::vector<const Tensor*>(order_.begin(), order_.end());
}

void ParamSet::zero_grads() {
  for (Tensor* t : order_) t->grad.setZero();
}

std::string ParamSet::content_hash() const {
  Fnv1a64 h;
  // std::map iteration is name-sorted, so the hash is layout-independent.
  for (const auto& [name, t] : tensors_) {
    h.update_string(name);
    h.update_matrix(t->value);
  }
  return h.hex();
}

void ParamSet::write_values(std::ostream& os) const {
  write_u32(os, static_cast<uint32_t>(tensors_.size()));
  for (const auto& [name, t] : tensors_) {
    write_string(os, name);
    write_matrix(os, t->value);
  }
}

void ParamSet::read_values(std::istream& is) {
  uint32_t n = read_u32(is);
  if (n != tensors_.size())
    throw InternalError("parameter blob holds " + std::to_string(n) + " tensors, model expects " +
                        std::to_string(tensors_.size()));
  for (uint32_t i = 0; i < n; ++i) {
    std::string name = read_string(is);
    Eigen::MatrixXd value = read_matrix(is);
    Tensor& t = find(name);
    if (t.value.rows() != value.rows() || t.value.cols() != value.cols())
      throw InternalError("parameter shape mismatch for " + name);
    t.value = std::move(value);
  }
}

ag::Var use(ag::Graph& g, Tensor& t) {
  ag::Var node = g.leaf(t.value);
  g.bind(node, &t.grad);
  return node;
}

void flush_param_grads(ag::Graph& g) { g.flush_bindings(); }

void Adam::step(std::vector<Tensor*> params) {
  ++t_;
  if (clip_norm_ > 0.0) {
    double sq = 0.0;
    for (Tensor* p : params) sq += p->grad.squaredNorm();
    double norm = std::sqrt(sq);
    if (norm > clip_norm_) {
      double s = clip_norm_ / norm;
      for (Tensor* p : params) p->grad *= s;
    }
  }
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (Tensor* p : params) {
    p->adam_m = beta1_ * p->adam_m + (1.0 - beta1_) * p->grad;
    p->adam_v = beta2_ * p->adam_v.array().matrix() +
                (1.0 - beta2_) * p->grad.array().square().matrix();
    Eigen::ArrayXXd m_hat = p->adam_m.array() / bc1;
    Eigen::ArrayXXd v_hat = p->adam_v.array() / bc2;
    p->value.array() -= lr_ * m_hat / (v_hat.sqrt() + eps_);
    p->grad.setZero();
  }
}

Eigen::MatrixXd init_xavier(int rows, int cols, Rng& rng) {
  double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Eigen::MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = rng.uniform(-limit, limit);
  return m;
}

Eigen::MatrixXd init_normal(int rows, int cols, double stddev, Rng& rng) {
  Eigen::MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) m(i, j) = stddev * rng.normal();
  return m;
}

Eigen::MatrixXd init_zeros(int rows, int cols) { return Eigen::MatrixXd::Zero(rows, cols); }

Eigen::MatrixXd init_ones(int rows, int cols) { return Eigen::MatrixXd::Ones(rows, cols); }

}  // namespace qbprf
