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

#include <istream>
#include <map>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include "qbprf/autograd.hpp"
#include "qbprf/rng.hpp"

namespace qbprf {

// One named trainable tensor plus its accumulated gradient and Adam state.
struct Tensor {
  std::string name;
  Eigen::MatrixXd value;
  Eigen::MatrixXd grad;
  Eigen::MatrixXd adam_m;
  Eigen::MatrixXd adam_v;

  explicit Tensor(std::string n, Eigen::MatrixXd v)
      : name(std::move(n)),
        value(std::move(v)),
        grad(Eigen::MatrixXd::Zero(value.rows(), value.cols())),
        adam_m(Eigen::MatrixXd::Zero(value.rows(), value.cols())),
        adam_v(Eigen::MatrixXd::Zero(value.rows(), value.cols())) {}
};

// A named collection of trainable tensors owned by a model (or a model stack).
// Names must be unique; lookups by unknown name are internal errors.
class ParamSet {
 public:
  // Creates a tensor; throws InternalError if the name already exists.
  Tensor& create(const std::string& name, Eigen::MatrixXd value);
  Tensor& find(const std::string& name);
  const Tensor& find(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<Tensor*> all();
  std::vector<const Tensor*> all() const;
  size_t size() const { return order_.size(); }

  void zero_grads();

  // Deterministic fingerprint over names + values (not grads / Adam state).
  std::string content_hash() const;

  // Binary round-trip of values only (name -> matrix), sorted by name.
  void write_values(std::ostream& os) const;
  // Loads values into existing tensors; throws InternalError on unknown or
  // missing names or shape mismatches.
  void read_values(std::istream& is);

 private:
  std::map<std::string, std::unique_ptr<Tensor>> tensors_;
  std::vector<Tensor*> order_;  // creation order, for deterministic iteration
};

// Puts a parameter tensor on a graph tape. The returned node shares the
// tensor's value and, after backward(), the tensor's grad accumulates the
// node's gradient (flush_param_grads copies it back).
ag::Var use(ag::Graph& g, Tensor& t);

// Copies gradients accumulated on the tape back into the tensors that were
// placed on it via use(). Must be called once after Graph::backward().
void flush_param_grads(ag::Graph& g);

// Adam optimizer with optional global-norm gradient clipping (clip <= 0 disables).
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
                double clip_norm = 5.0)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), clip_norm_(clip_norm) {}

  // Applies one update to every tensor and zeroes their grads.
  void step(std::vector<Tensor*> params);

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  int64_t t() const { return t_; }

 private:
  double lr_;
  double beta1_;
  double beta2_;
  double eps_;
  double clip_norm_;
  int64_t t_ = 0;
};

// Initialization helpers (deterministic given the Rng).
Eigen::MatrixXd init_xavier(int rows, int cols, Rng& rng);
Eigen::MatrixXd init_normal(int rows, int cols, double stddev, Rng& rng);
Eigen::MatrixXd init_zeros(int rows, int cols);
Eigen::MatrixXd init_ones(int rows, int cols);

}  // namespace qbprf
