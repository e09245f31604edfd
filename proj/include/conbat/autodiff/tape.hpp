#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <string_view>
#include <vector>

#include "conbat/autodiff/tensor.hpp"

namespace conbat::ad {

/// Operation kinds recorded on a tape.
///
/// Shape table (x, a, b are inputs; n, m, k are sizes):
///
///   matmul            a[n,k] b[k,m]              -> [n,m]
///   add, sub          a[...] b[...] same shape   -> a.shape
///                     a[n,m] b[m]  (row bcast)   -> [n,m]
///                     a[...] b[1]  (scalar)      -> a.shape
///   mul               a[...] b same shape or b has 1 element
///   scale             x[...] (constant factor)   -> x.shape
///   relu, gelu, abs, hinge_relu   x[...]         -> x.shape
///   softmax_lastdim   x[..., m]                  -> x.shape
///   layernorm         x[n,d] gamma[d] beta[d]    -> [n,d]
///   embed_linear      x[n,i] w[i,o] b[o]         -> [n,o]
///   concat            2-D inputs, axis 0 or 1
///   slice             x[n,m], axis, start, len   -> [len,m] or [n,len]
///   causal_mask_fill  x[n,m]                     -> [n,m], x[i,j] = fill for j > i
///   transpose         x[n,m]                     -> [m,n]
///   mse, l1           a[...] b[...] same shape   -> scalar (mean over elements)
///   mean, sum         x[...]                     -> scalar
enum class OpKind : std::uint8_t {
  leaf,
  matmul,
  add,
  sub,
  mul,
  scale,
  relu,
  gelu,
  abs,
  softmax_lastdim,
  layernorm,
  embed_linear,
  concat,
  slice,
  causal_mask_fill,
  transpose,
  mse,
  l1,
  hinge_relu,
  mean,
  sum,
};

std::string_view op_name(OpKind kind);

/// Handle to a value recorded on a tape.
struct Var {
  std::uint32_t id = 0;
};

/// Fill value for masked attention logits. Finite so the non-finite output
/// check stays meaningful; exp(fill - max) underflows to exactly zero.
inline constexpr double kMaskFill = -1e9;
inline constexpr double kLayerNormEps = 1e-5;

/// Reverse-mode tape. Built fresh for every forward pass; nodes are stored
/// in creation order, which is a topological order by construction.
/// A tape is single-threaded; independent tapes may live on different threads.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  Var leaf(Tensor<T> value, bool requires_grad = true);
  Var constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Generic entry point for parameterless kinds (everything except
  /// scale, concat, slice and leaf, which carry extra arguments).
  Var apply(OpKind kind, std::span<const Var> inputs);
  Var apply(OpKind kind, std::initializer_list<Var> inputs) {
    return apply(kind, std::span<const Var>(inputs.begin(), inputs.size()));
  }

  Var matmul(Var a, Var b);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var x, double factor);
  Var relu(Var x);
  Var gelu(Var x);
  Var abs(Var x);
  Var hinge_relu(Var x);
  Var softmax_lastdim(Var x);
  Var layernorm(Var x, Var gamma, Var beta);
  Var embed_linear(Var x, Var w, Var b);
  Var concat(std::span<const Var> inputs, std::size_t axis);
  Var concat(std::initializer_list<Var> inputs, std::size_t axis) {
    return concat(std::span<const Var>(inputs.begin(), inputs.size()), axis);
  }
  Var slice(Var x, std::size_t axis, std::size_t start, std::size_t length);
  Var causal_mask_fill(Var x);
  Var transpose(Var x);
  Var mse(Var a, Var b);
  Var l1(Var a, Var b);
  Var mean(Var x);
  Var sum(Var x);

  /// Populates gradients of `loss` with respect to every node that requires
  /// them. Loss must hold exactly one element.
  void backward(Var loss);

  const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
  /// Gradient after backward(); zeros for nodes the loss does not reach.
  Tensor<T> grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  OpKind kind(Var v) const { return nodes_.at(v.id).kind; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<std::uint32_t> inputs;
    Tensor<T> value;
    std::vector<Tensor<T>> saved;
    std::size_t arg0 = 0;
    std::size_t arg1 = 0;
    std::size_t arg2 = 0;
    double factor = 0.0;
    bool requires_grad = false;
  };

  Var push(Node node);
  const Node& node(Var v) const;
  void backward_node(const Node& n, const Tensor<T>& g);
  Tensor<T>& grad_slot(std::uint32_t id);

  std::vector<Node> nodes_;
  std::vector<Tensor<T>> grads_;
  std::vector<bool> has_grad_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace conbat::ad
