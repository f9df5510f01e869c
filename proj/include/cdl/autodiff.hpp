#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cdl/tensor.hpp"

namespace cdl {

/// A named, optionally trainable array owned by a model. Ids are unique per
/// process and survive copies, so a snapshot shares ids with its source.
struct Parameter {
  Parameter() = default;
  Parameter(std::string name, Tensor value, bool trainable = true);

  std::string name;
  Tensor value;
  bool trainable = true;
  std::uint64_t id = 0;
};

/// Gradient per trainable parameter id. Ordered so reductions are deterministic.
class Gradients {
 public:
  void accumulate(std::uint64_t id, const Tensor& g);
  void scale(double s);
  // Adds every entry of `other` into this (in id order).
  void merge(const Gradients& other);

  bool contains(std::uint64_t id) const { return grads_.count(id) != 0; }
  const Tensor& at(std::uint64_t id) const;
  const Tensor* find(std::uint64_t id) const;
  std::size_t size() const { return grads_.size(); }
  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }

 private:
  std::map<std::uint64_t, Tensor> grads_;
};

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::size_t index = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
  double item() const { return value().item(); }
};

/// Define-by-run reverse-mode tape. One tape per forward pass; not shared
/// between threads.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& out_grad)>;

  Var constant(Tensor value);
  // Trainable parameters become gradient leaves; frozen ones are constants.
  // The tape aliases p.value, so p must not change while the tape is in use.
  Var param(const Parameter& p);

  // Gradients of a scalar loss with respect to every trainable parameter
  // leaf on this tape. Unreachable leaves get zero tensors.
  Gradients grad(Var loss);

  // Used by primitive implementations.
  Var push(Tensor value, std::initializer_list<Var> parents, Backward backward);
  Var push(Tensor value, std::span<const Var> parents, Backward backward);
  const Tensor& value(std::size_t i) const {
    const Node& n = nodes_[i];
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(std::size_t i) const { return nodes_[i].requires_grad; }
  // Lazily zero-initialized gradient buffer of node i.
  Tensor& grad_buffer(std::size_t i);

  std::size_t size() const { return nodes_.size(); }
  void check_owned(const Var& v) const;

 private:
  struct Node {
    Tensor value;
    // Parameter leaves alias the parameter's storage instead of copying it;
    // the parameter must outlive the tape and stay unchanged while it lives.
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    std::uint64_t param_id = 0;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

// ---- primitives --------------------------------------------------------
// All matrix ops use the rank-1 => 1 x n convention of Tensor::rows/cols.

Var matmul(Var a, Var b);       // [m x k] * [k x n]
Var matmul_nt(Var a, Var b);    // [m x k] * [n x k]^T
Var add(Var a, Var b);          // same shape
Var add_row(Var a, Var bias);   // [m x n] + broadcast [n]
Var sub(Var a, Var b);
Var mul(Var a, Var b);          // elementwise
Var scale(Var a, double s);
Var mul_scalar(Var a, Var s);   // s is a one-element Var
Var add_constant(Var a, double c);
Var sum(Var a);
Var mean(Var a);
Var log(Var a);
Var sqrt(Var a);  // gradient taken as 0 where the value is 0
Var sigmoid(Var a);
Var gelu(Var a);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6);
Var softmax(Var x, double tau = 1.0);       // row-wise
Var log_softmax(Var x, double tau = 1.0);   // row-wise
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var x, int begin, int end);
Var slice_cols(Var x, int begin, int end);
Var reshape(Var x, Shape shape);
Var cross_entropy(Var logits, int label);                   // single row
Var kl_divergence(Var teacher_logits, Var student_logits, double tau);  // sum p_T log(p_T/p_S)
Var mse(Var a, Var b);
Var cosine_similarity(Var a, Var b);

inline Var concat_rows(std::initializer_list<Var> parts) {
  return concat_rows(std::span<const Var>(parts.begin(), parts.size()));
}
inline Var concat_cols(std::initializer_list<Var> parts) {
  return concat_cols(std::span<const Var>(parts.begin(), parts.size()));
}

// ---- untaped numerics --------------------------------------------------

std::vector<double> softmax_with_temperature(std::span<const double> logits, double tau);
double cosine_similarity(std::span<const double> a, std::span<const double> b);

}  // namespace cdl
