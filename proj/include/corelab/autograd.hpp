#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "corelab/kernels.hpp"
#include "corelab/tensor.hpp"

namespace corelab {

// A trainable (or frozen) tensor that outlives any single tape.
// Gradients accumulate until zero_grad().
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Tensor value, bool trainable = true);

  const std::string& name() const { return name_; }
  Tensor value;
  Tensor grad;
  bool trainable = true;

  void zero_grad() { grad.fill(0.0); }

 private:
  std::string name_;
};

class Tape;

// Handle to a node recorded on a tape. A default-constructed Var is
// detached and cannot be differentiated.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

  bool attached() const { return tape_ != nullptr; }
  Tape& tape() const;
  std::size_t index() const { return index_; }
  const Tensor& value() const;
  // Gradient after Tape::backward; empty when the node needs no gradient.
  const Tensor& grad() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

// Records a forward computation in creation order, which is a valid
// topological order for the reverse sweep.
class Tape {
 public:
  struct Node {
    Tensor value;  // empty for parameter leaves, which read param->value
    Tensor grad;
    bool needs_grad = false;
    Parameter* param = nullptr;
    std::function<void(Tape&, std::size_t)> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // One leaf per Parameter per tape; reuse is intentional for tied weights.
  Var param(Parameter& p);

  // Adds a node; throws NumericError if the value has NaN/Inf.
  Var record(Tensor value, bool needs_grad, std::function<void(Tape&, std::size_t)> backward);

  // Seeds d(loss)/d(loss)=1; parameter gradients accumulate (+=).
  void backward(const Var& loss);

  Node& node(std::size_t i) { return *nodes_[i]; }
  const Node& node(std::size_t i) const { return *nodes_[i]; }
  std::size_t size() const { return nodes_.size(); }

  const Tensor& value(std::size_t i) const;
  bool needs_grad(std::size_t i) const { return nodes_[i]->needs_grad; }
  // Gradient buffer of node i, allocated on first use. Parameter leaves
  // hand out Parameter::grad itself, so accumulation is direct.
  Tensor& grad_of(std::size_t i);

 private:
  std::vector<std::unique_ptr<Node>> nodes_;
  std::unordered_map<Parameter*, std::size_t> param_index_;
  bool backward_done_ = false;
};

namespace ag {

Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
// a [m,n] plus a [1,n] (or [n]) row broadcast down the rows.
Var add_row(const Var& a, const Var& row);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var sum(const Var& a);
Var gelu(const Var& a);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
// Row gather with scatter-add backward; serves embedding lookup.
Var gather_rows(const Var& table, std::span<const TokenId> ids);
// Mask is a constant: no gradient reaches dropped positions.
Var masked_softmax(const Var& logits, const AdditiveMask& mask);
// Multi-head scaled dot-product attention with a causal mask.
// q, k, v are [T, d]; heads split the columns evenly.
Var causal_self_attention(const Var& q, const Var& k, const Var& v, std::size_t n_heads);
Var cross_entropy(const Var& logits, std::span<const TokenId> targets);

}  // namespace ag
}  // namespace corelab
