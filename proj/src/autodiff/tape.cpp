#include "conbat/autodiff/tape.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace conbat::ad {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::relu: return "relu";
    case OpKind::gelu: return "gelu";
    case OpKind::abs: return "abs";
    case OpKind::softmax_lastdim: return "softmax_lastdim";
    case OpKind::layernorm: return "layernorm";
    case OpKind::embed_linear: return "embed_linear";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::causal_mask_fill: return "causal_mask_fill";
    case OpKind::transpose: return "transpose";
    case OpKind::mse: return "mse";
    case OpKind::l1: return "l1";
    case OpKind::hinge_relu: return "hinge_relu";
    case OpKind::mean: return "mean";
    case OpKind::sum: return "sum";
  }
  return "unknown";
}

namespace {

[[noreturn]] void shape_fail(OpKind kind, const Shape& a, const Shape& b, std::string_view why = {}) {
  std::string msg = std::string(op_name(kind)) + ": incompatible shapes " + shape_str(a) + " and " +
                    shape_str(b);
  if (!why.empty()) msg += " (" + std::string(why) + ")";
  throw ShapeError(msg);
}

[[noreturn]] void shape_fail(OpKind kind, const Shape& a, std::string_view why) {
  throw ShapeError(std::string(op_name(kind)) + ": invalid shape " + shape_str(a) + " (" +
                   std::string(why) + ")");
}

template <typename T>
void check_finite(OpKind kind, const Tensor<T>& t) {
  for (const T v : t.data()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(op_name(kind)) + ": non-finite output for shape " +
                         shape_str(t.shape()));
    }
  }
}

enum class Broadcast { same, row, scalar };

Broadcast classify_broadcast(OpKind kind, const Shape& a, const Shape& b) {
  if (a == b) return Broadcast::same;
  if (shape_numel(b) == 1) return Broadcast::scalar;
  if (b.size() == 1 && !a.empty() && a.back() == b[0]) return Broadcast::row;
  shape_fail(kind, a, b);
}

bool is_matrix(const Shape& s) { return s.size() == 2; }

// out[n,m] = a[n,k] * b[k,m], accumulating in double.
template <typename T>
void gemm_nn(const T* a, const T* b, T* out, std::size_t n, std::size_t k, std::size_t m) {
  std::vector<double> acc(m);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = static_cast<double>(arow[p]);
      if (av == 0.0) continue;
      const T* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) acc[j] += av * static_cast<double>(brow[j]);
    }
    T* orow = out + i * m;
    for (std::size_t j = 0; j < m; ++j) orow[j] = static_cast<T>(acc[j]);
  }
}

// ga[n,k] += g[n,m] * b[k,m]^T
// b is transposed once so the inner loop is a contiguous axpy.
template <typename T>
void gemm_nt_accumulate(const T* g, const T* b, T* ga, std::size_t n, std::size_t k, std::size_t m) {
  std::vector<T> bt(m * k);
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < m; ++j) bt[j * k + p] = b[p * m + j];
  }
  std::vector<double> acc(k);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const T* grow = g + i * m;
    for (std::size_t j = 0; j < m; ++j) {
      const double gv = static_cast<double>(grow[j]);
      if (gv == 0.0) continue;
      const T* btrow = bt.data() + j * k;
      for (std::size_t p = 0; p < k; ++p) acc[p] += gv * static_cast<double>(btrow[p]);
    }
    T* garow = ga + i * k;
    for (std::size_t p = 0; p < k; ++p) garow[p] += static_cast<T>(acc[p]);
  }
}

// gb[k,m] += a[n,k]^T * g[n,m]
template <typename T>
void gemm_tn_accumulate(const T* a, const T* g, T* gb, std::size_t n, std::size_t k, std::size_t m) {
  std::vector<double> acc(k * m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const T* arow = a + i * k;
    const T* grow = g + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = static_cast<double>(arow[p]);
      if (av == 0.0) continue;
      double* accrow = acc.data() + p * m;
      for (std::size_t j = 0; j < m; ++j) accrow[j] += av * static_cast<double>(grow[j]);
    }
  }
  for (std::size_t q = 0; q < k * m; ++q) gb[q] += static_cast<T>(acc[q]);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

template <typename T>
const typename Tape<T>::Node& Tape<T>::node(Var v) const {
  if (v.id >= nodes_.size()) throw Error("tape: unknown variable id " + std::to_string(v.id));
  return nodes_[v.id];
}

template <typename T>
Var Tape<T>::push(Node n) {
  if (n.kind != OpKind::leaf) check_finite(n.kind, n.value);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <typename T>
Var Tape<T>::leaf(Tensor<T> value, bool requires_grad) {
  Node n;
  n.kind = OpKind::leaf;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  return push(std::move(n));
}

template <typename T>
Var Tape<T>::apply(OpKind kind, std::span<const Var> in) {
  auto need = [&](std::size_t count) {
    if (in.size() != count) {
      throw UsageError(std::string(op_name(kind)) + ": expected " + std::to_string(count) +
                       " inputs, got " + std::to_string(in.size()));
    }
  };
  switch (kind) {
    case OpKind::matmul: need(2); return matmul(in[0], in[1]);
    case OpKind::add: need(2); return add(in[0], in[1]);
    case OpKind::sub: need(2); return sub(in[0], in[1]);
    case OpKind::mul: need(2); return mul(in[0], in[1]);
    case OpKind::relu: need(1); return relu(in[0]);
    case OpKind::gelu: need(1); return gelu(in[0]);
    case OpKind::abs: need(1); return abs(in[0]);
    case OpKind::hinge_relu: need(1); return hinge_relu(in[0]);
    case OpKind::softmax_lastdim: need(1); return softmax_lastdim(in[0]);
    case OpKind::layernorm: need(3); return layernorm(in[0], in[1], in[2]);
    case OpKind::embed_linear: need(3); return embed_linear(in[0], in[1], in[2]);
    case OpKind::causal_mask_fill: need(1); return causal_mask_fill(in[0]);
    case OpKind::transpose: need(1); return transpose(in[0]);
    case OpKind::mse: need(2); return mse(in[0], in[1]);
    case OpKind::l1: need(2); return l1(in[0], in[1]);
    case OpKind::mean: need(1); return mean(in[0]);
    case OpKind::sum: need(1); return sum(in[0]);
    case OpKind::concat: return concat(in, 0);
    case OpKind::leaf:
    case OpKind::scale:
    case OpKind::slice:
      break;
  }
  throw UsageError(std::string(op_name(kind)) + ": needs explicit arguments, use the named method");
}

template <typename T>
Var Tape<T>::matmul(Var a, Var b) {
  const auto& A = node(a).value;
  const auto& B = node(b).value;
  if (!is_matrix(A.shape()) || !is_matrix(B.shape()) || A.dim(1) != B.dim(0)) {
    shape_fail(OpKind::matmul, A.shape(), B.shape());
  }
  const std::size_t n = A.dim(0), k = A.dim(1), m = B.dim(1);
  Node out;
  out.kind = OpKind::matmul;
  out.inputs = {a.id, b.id};
  out.value = Tensor<T>(Shape{n, m});
  gemm_nn(A.data().data(), B.data().data(), out.value.data().data(), n, k, m);
  out.requires_grad = node(a).requires_grad || node(b).requires_grad;
  return push(std::move(out));
}

template <typename T>
Var Tape<T>::add(Var a, Var b) {
  const auto& A = node(a).value;
  const auto& B = node(b).value;
  const Broadcast mode = classify_broadcast(OpKind::add, A.shape(), B.shape());
  Node out;
  out.kind = OpKind::add;
  out.inputs = {a.id, b.id};
  out.value = A;
  auto& o = out.value.storage();
  const std::size_t cols = B.numel();
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] += mode == Broadcast::same ? B[i] : (mode == Broadcast::scalar ? B[0] : B[i % cols]);
  }
  out.arg0 = static_cast<std::size_t>(mode);
  out.requires_grad = node(a).requires_grad || node(b).requires_grad;
  return push(std::move(out));
}

template <typename T>
Var Tape<T>::sub(Var a, Var b) {
  const auto& A = node(a).value;
  const auto& B = node(b).value;
  const Broadcast mode = classify_broadcast(OpKind::sub, A.shape(), B.shape());
  Node out;
  out.kind = OpKind::sub;
  out.inputs = {a.id, b.id};
  out.value = A;
  auto& o = out.value.storage();
  const std::size_t cols = B.numel();
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] -= mode == Broadcast::same ? B[i] : (mode == Broadcast::scalar ? B[0] : B[i % cols]);
  }
  out.arg0 = static_cast<std::size_t>(mode);
  out.requires_grad = node(a).requires_grad || node(b).requires_grad;
  return push(std::move(out));
}

template <typename T>
Var Tape<T>::mul(Var a, Var b) {
  const auto& A = node(a).value;
  const auto& B = node(b).value;
  const Broadcast mode = classify_broadcast(OpKind::mul, A.shape(), B.shape());
  if (mode == Broadcast::row) shape_fail(OpKind::mul, A.shape(), B.shape(), "row broadcast unsupported");
  Node out;
  out.kind = OpKind::mul;
  out.inputs = {a.id, b.id};
  out.value = A;
  auto& o = out.value.storage();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= mode == Broadcast::same ? B[i] : B[0];
  out.arg0 = static_cast<std::size_t>(mode);
  out.requires_grad = node(a).requires_grad || node(b).requires_grad;
  return push(std::move(out));
}

template <typename T>
Var Tape<T>::scale(Var x, double factor) {
  Node out;
  out.kind = OpKind::scale;
  out.inputs = {x.id};
  out.value = node(x).value;
  for (auto& v : out.value.storage()) v = static_cast<T>(v * factor);
  out.factor = factor;
  out.requires_grad = node(x).requires_grad;
  return push(std::move(out));
}

template <typename T>
Var Tape<T>::relu(Var x) {
  Node out;
  out.kind = OpKind::relu;
  out.inputs = {x.id};
  out.value = node(x).value;
  for (auto& v : out.value.storage()) v = v > T{0} ? v : T{0};
  out.requires_grad = node(x).requires_grad;
  return push(std::move(out));
}

template <typename T>
Var Tape<T>::hinge_relu(Var x) {
  Node out;
  out.kind = OpKind::hinge_relu;
  out.inputs = {x.id};
  out.value = node(x).value;
  for (auto& v : out.value.storage()) v = v > T{0} ? v : T{0};
  out.requires_grad = node(x).requires_grad;
  return push(std::move(out));
}

template <typename T>
Var Tape<T>::abs(Var x) {
  Node out;
  out.kind = OpKind::abs;
  out.inputs = {x.id};
  out.value = node(x).value;
  for (auto& v : out.value.storage()) v = std::abs(v);
  out.requires_grad = node(x).requires_grad;
  return push(std::move(out));
}

template <typename T>
Var Tape<T>::gelu(Var x) {
  Node out;
  out.kind = OpKind::gelu;
  out.inputs = {x.id};
  out.value = node(x).value;
  for (auto& v : out.value.storage()) {
    const double z = v;
    const double u = kGeluC * (z + kGeluA * z * z * z);
    v = static_cast<T>(0.5 * z * (1.0 + std::tanh(u)));
  }
  out.requires_grad = node(x).requires_grad;
  return push(std::move(out));
}

template <typename T>
Var Tape<T>::softmax_lastdim(Var x) {
  const auto& X = node(x).value;
  if (X.rank() == 0) shape_fail(OpKind::softmax_lastdim, X.shape(), "needs rank >= 1");
  Node out;
  out.kind = OpKind::softmax_lastdim;
  out.inputs = {x.id};
  out.value = X;
  const std::size_t cols = X.cols(), rows = X.rows();
  auto& o = out.value.storage();
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = o.data() + r * cols;
    const T mx = *std::max_element(row, row + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double e = std::exp(static_cast<double>(row[c]) - static_cast<double>(mx));
      row[c] = static_cast<T>(e);
      total += e;
    }
    for (std::size_t c = 0; c < cols; ++c) row[c] = static_cast<T>(row[c] / total);
  }
  out.requires_grad = node(x).requires_grad;
  return push(std::move(out));
}

template <typename T>
Var Tape<T>::layernorm(Var x, Var gamma, Var beta) {
  const auto& X = node(x).value;
  const auto& G = node(gamma).value;
  const auto& B = node(beta).value;
  if (X.rank() != 2) shape_fail(OpKind::layernorm, X.shape(), "needs rank 2");
  const std::size_t n = X.dim(0), d = X.dim(1);
  if (G.shape() != Shape{d} || B.shape() != Shape{d}) shape_fail(OpKind::layernorm, X.shape(), G.shape());
  Node out;
  out.kind = OpKind::layernorm;
  out.inputs = {x.id, gamma.id, beta.id};
  out.value = Tensor<T>(Shape{n, d});
  Tensor<T> xhat(Shape{n, d});
  Tensor<T> rstd(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += X.at(i, j);
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = X.at(i, j) - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
    rstd[i] = static_cast<T>(rs);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (X.at(i, j) - mu) * rs;
      xhat.at(i, j) = static_cast<T>(h);
      out.value.at(i, j) = static_cast<T>(h * G[j] + B[j]);
    }
  }
  out.saved = {std::move(xhat), std::move(rstd)};
  out.requires_grad = node(x).requires_grad || node(gamma).requires_grad || node(beta).requires_grad;
  return push(std::move(out));
}

template <typename T>
Var Tape<T>::embed_linear(Var x, Var w, Var b) {
  const auto& X = node(x).value;
  const auto& W = node(w).value;
  const auto& B = node(b).value;
  if (X.rank() != 2 || W.rank() != 2 || X.dim(1) != W.dim(0)) {
    shape_fail(OpKind::embed_linear, X.shape(), W.shape());
  }
  const std::size_t n = X.dim(0), k = X.dim(1), m = W.dim(1);
  if (B.shape() != Shape{m}) shape_fail(OpKind::embed_linear, W.shape(), B.shape(), "bias");
  Node out;
  out.kind = OpKind::embed_linear;
  out.inputs = {x.id, w.id, b.id};
  out.value = Tensor<T>(Shape{n, m});
  gemm_nn(X.data().data(), W.data().data(), out.value.data().data(), n, k, m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) out.value.at(i, j) += B[j];
  }
  out.requires_grad = node(x).requires_grad || node(w).requires_grad || node(b).requires_grad;
  return push(std::move(out));
}

template <typename T>
Var Tape<T>::concat(std::span<const Var> in, std::size_t axis) {
  if (in.empty()) throw ShapeError("concat: no inputs");
  if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
  const auto& first = node(in[0]).value;
  if (first.rank() != 2) shape_fail(OpKind::concat, first.shape(), "needs rank 2");
  std::size_t rows = first.dim(0), cols = first.dim(1);
  std::size_t total = 0;
  for (const Var v : in) {
    const auto& t = node(v).value;
    if (t.rank() != 2) shape_fail(OpKind::concat, t.shape(), "needs rank 2");
    if (axis == 0 && t.dim(1) != cols) shape_fail(OpKind::concat, first.shape(), t.shape());
    if (axis == 1 && t.dim(0) != rows) shape_fail(OpKind::concat, first.shape(), t.shape());
    total += t.dim(axis);
  }
  Node out;
  out.kind = OpKind::concat;
  out.arg0 = axis;
  out.value = axis == 0 ? Tensor<T>(Shape{total, cols}) : Tensor<T>(Shape{rows, total});
  std::size_t offset = 0;
  bool rg = false;
  for (const Var v : in) {
    const auto& t = node(v).value;
    out.inputs.push_back(v.id);
    rg = rg || node(v).requires_grad;
    if (axis == 0) {
      std::copy(t.data().begin(), t.data().end(), out.value.data().begin() + offset * cols);
    } else {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < t.dim(1); ++c) out.value.at(r, offset + c) = t.at(r, c);
      }
    }
    offset += t.dim(axis);
  }
  out.requires_grad = rg;
  return push(std::move(out));
}

template <typename T>
Var Tape<T>::slice(Var x, std::size_t axis, std::size_t start, std::size_t length) {
  const auto& X = node(x).value;
  if (X.rank() != 2 || axis > 1) shape_fail(OpKind::slice, X.shape(), "needs rank 2 and axis 0/1");
  if (length == 0 || start + length > X.dim(axis)) {
    shape_fail(OpKind::slice, X.shape(),
               "range [" + std::to_string(start) + "," + std::to_string(start + length) + ") out of bounds");
  }
  Node out;
  out.kind = OpKind::slice;
  out.inputs = {x.id};
  out.arg0 = axis;
  out.arg1 = start;
  out.arg2 = length;
  if (axis == 0) {
    out.value = Tensor<T>(Shape{length, X.dim(1)});
    std::copy(X.data().begin() + start * X.dim(1), X.data().begin() + (start + length) * X.dim(1),
              out.value.data().begin());
  } else {
    out.value = Tensor<T>(Shape{X.dim(0), length});
    for (std::size_t r = 0; r < X.dim(0); ++r) {
      for (std::size_t c = 0; c < length; ++c) out.value.at(r, c) = X.at(r, start + c);
    }
  }
  out.requires_grad = node(x).requires_grad;
  return push(std::move(out));
}

template <typename T>
Var Tape<T>::causal_mask_fill(Var x) {
  const auto& X = node(x).value;
  if (X.rank() != 2) shape_fail(OpKind::causal_mask_fill, X.shape(), "needs rank 2");
  Node out;
  out.kind = OpKind::causal_mask_fill;
  out.inputs = {x.id};
  out.value = X;
  for (std::size_t i = 0; i < X.dim(0); ++i) {
    for (std::size_t j = i + 1; j < X.dim(1); ++j) out.value.at(i, j) = static_cast<T>(kMaskFill);
  }
  out.requires_grad = node(x).requires_grad;
  return push(std::move(out));
}

template <typename T>
Var Tape<T>::transpose(Var x) {
  const auto& X = node(x).value;
  if (X.rank() != 2) shape_fail(OpKind::transpose, X.shape(), "needs rank 2");
  Node out;
  out.kind = OpKind::transpose;
  out.inputs = {x.id};
  out.value = Tensor<T>(Shape{X.dim(1), X.dim(0)});
  for (std::size_t i = 0; i < X.dim(0); ++i) {
    for (std::size_t j = 0; j < X.dim(1); ++j) out.value.at(j, i) = X.at(i, j);
  }
  out.requires_grad = node(x).requires_grad;
  return push(std::move(out));
}

template <typename T>
Var Tape<T>::mse(Var a, Var b) {
  const auto& A = node(a).value;
  const auto& B = node(b).value;
  if (A.shape() != B.shape()) shape_fail(OpKind::mse, A.shape(), B.shape());
  double acc = 0.0;
  for (std::size_t i = 0; i < A.numel(); ++i) {
    const double d = static_cast<double>(A[i]) - static_cast<double>(B[i]);
    acc += d * d;
  }
  Node out;
  out.kind = OpKind::mse;
  out.inputs = {a.id, b.id};
  out.value = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(A.numel())));
  out.requires_grad = node(a).requires_grad || node(b).requires_grad;
  return push(std::move(out));
}

template <typename T>
Var Tape<T>::l1(Var a, Var b) {
  const auto& A = node(a).value;
  const auto& B = node(b).value;
  if (A.shape() != B.shape()) shape_fail(OpKind::l1, A.shape(), B.shape());
  double acc = 0.0;
  for (std::size_t i = 0; i < A.numel(); ++i) acc += std::abs(static_cast<double>(A[i]) - static_cast<double>(B[i]));
  Node out;
  out.kind = OpKind::l1;
  out.inputs = {a.id, b.id};
  out.value = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(A.numel())));
  out.requires_grad = node(a).requires_grad || node(b).requires_grad;
  return push(std::move(out));
}

template <typename T>
Var Tape<T>::mean(Var x) {
  const auto& X = node(x).value;
  double acc = 0.0;
  for (const T v : X.data()) acc += v;
  Node out;
  out.kind = OpKind::mean;
  out.inputs = {x.id};
  out.value = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(X.numel())));
  out.requires_grad = node(x).requires_grad;
  return push(std::move(out));
}

template <typename T>
Var Tape<T>::sum(Var x) {
  const auto& X = node(x).value;
  double acc = 0.0;
  for (const T v : X.data()) acc += v;
  Node out;
  out.kind = OpKind::sum;
  out.inputs = {x.id};
  out.value = Tensor<T>::scalar(static_cast<T>(acc));
  out.requires_grad = node(x).requires_grad;
  return push(std::move(out));
}

template <typename T>
Tensor<T>& Tape<T>::grad_slot(std::uint32_t id) {
  if (!has_grad_[id]) {
    grads_[id] = Tensor<T>(nodes_[id].value.shape());
    has_grad_[id] = true;
  }
  return grads_[id];
}

template <typename T>
Tensor<T> Tape<T>::grad(Var v) const {
  const auto& n = node(v);
  if (v.id < has_grad_.size() && has_grad_[v.id]) return grads_[v.id];
  return Tensor<T>(n.value.shape());
}

template <typename T>
void Tape<T>::backward(Var loss) {
  const auto& L = node(loss).value;
  if (L.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(L.shape()));
  grads_.assign(nodes_.size(), Tensor<T>());
  has_grad_.assign(nodes_.size(), false);
  grad_slot(loss.id)[0] = T{1};
  for (std::uint32_t id = loss.id + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (!has_grad_[id] || !n.requires_grad || n.kind == OpKind::leaf) continue;
    backward_node(n, grads_[id]);
  }
}

template <typename T>
void Tape<T>::backward_node(const Node& n, const Tensor<T>& g) {
  auto wants = [&](std::size_t slot) { return nodes_[n.inputs[slot]].requires_grad; };
  auto in_value = [&](std::size_t slot) -> const Tensor<T>& { return nodes_[n.inputs[slot]].value; };

  switch (n.kind) {
    case OpKind::leaf:
      return;
    case OpKind::matmul: {
      const auto& A = in_value(0);
      const auto& B = in_value(1);
      const std::size_t rows = A.dim(0), k = A.dim(1), m = B.dim(1);
      if (wants(0)) {
        gemm_nt_accumulate(g.data().data(), B.data().data(), grad_slot(n.inputs[0]).data().data(), rows, k, m);
      }
      if (wants(1)) {
        gemm_tn_accumulate(A.data().data(), g.data().data(), grad_slot(n.inputs[1]).data().data(), rows, k, m);
      }
      return;
    }
    case OpKind::add:
    case OpKind::sub: {
      const double sign_b = n.kind == OpKind::add ? 1.0 : -1.0;
      if (wants(0)) {
        auto& ga = grad_slot(n.inputs[0]);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
      }
      if (wants(1)) {
        auto& gb = grad_slot(n.inputs[1]);
        const auto mode = static_cast<Broadcast>(n.arg0);
        if (mode == Broadcast::same) {
          for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += static_cast<T>(sign_b * g[i]);
        } else if (mode == Broadcast::scalar) {
          double acc = 0.0;
          for (const T v : g.data()) acc += v;
          gb[0] += static_cast<T>(sign_b * acc);
        } else {
          const std::size_t cols = gb.numel();
          std::vector<double> acc(cols, 0.0);
          for (std::size_t i = 0; i < g.numel(); ++i) acc[i % cols] += g[i];
          for (std::size_t c = 0; c < cols; ++c) gb[c] += static_cast<T>(sign_b * acc[c]);
        }
      }
      return;
    }
    case OpKind::mul: {
      const auto& A = in_value(0);
      const auto& B = in_value(1);
      const auto mode = static_cast<Broadcast>(n.arg0);
      if (wants(0)) {
        auto& ga = grad_slot(n.inputs[0]);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * (mode == Broadcast::same ? B[i] : B[0]);
      }
      if (wants(1)) {
        auto& gb = grad_slot(n.inputs[1]);
        if (mode == Broadcast::same) {
          for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * A[i];
        } else {
          double acc = 0.0;
          for (std::size_t i = 0; i < g.numel(); ++i) acc += static_cast<double>(g[i]) * A[i];
          gb[0] += static_cast<T>(acc);
        }
      }
      return;
    }
    case OpKind::scale: {
      auto& gx = grad_slot(n.inputs[0]);
      for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += static_cast<T>(g[i] * n.factor);
      return;
    }
    case OpKind::relu:
    case OpKind::hinge_relu: {
      // Subgradient 0 at exactly 0.
      const auto& X = in_value(0);
      auto& gx = grad_slot(n.inputs[0]);
      for (std::size_t i = 0; i < g.numel(); ++i) {
        if (X[i] > T{0}) gx[i] += g[i];
      }
      return;
    }
    case OpKind::abs: {
      const auto& X = in_value(0);
      auto& gx = grad_slot(n.inputs[0]);
      for (std::size_t i = 0; i < g.numel(); ++i) {
        if (X[i] > T{0}) gx[i] += g[i];
        else if (X[i] < T{0}) gx[i] -= g[i];
      }
      return;
    }
    case OpKind::gelu: {
      const auto& X = in_value(0);
      auto& gx = grad_slot(n.inputs[0]);
      for (std::size_t i = 0; i < g.numel(); ++i) {
        const double z = X[i];
        const double u = kGeluC * (z + kGeluA * z * z * z);
        const double th = std::tanh(u);
        const double du = kGeluC * (1.0 + 3.0 * kGeluA * z * z);
        const double d = 0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * du;
        gx[i] += static_cast<T>(g[i] * d);
      }
      return;
    }
    case OpKind::softmax_lastdim: {
      const auto& Y = n.value;
      auto& gx = grad_slot(n.inputs[0]);
      const std::size_t cols = Y.cols(), rows = Y.rows();
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += static_cast<double>(g[r * cols + c]) * Y[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c) {
          const std::size_t q = r * cols + c;
          gx[q] += static_cast<T>(Y[q] * (g[q] - dot));
        }
      }
      return;
    }
    case OpKind::layernorm: {
      const auto& xhat = n.saved[0];
      const auto& rstd = n.saved[1];
      const auto& G = in_value(1);
      const std::size_t rows = xhat.dim(0), d = xhat.dim(1);
      if (wants(0)) {
        auto& gx = grad_slot(n.inputs[0]);
        for (std::size_t i = 0; i < rows; ++i) {
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = static_cast<double>(g.at(i, j)) * G[j];
            mean_dh += dh;
            mean_dh_h += dh * xhat.at(i, j);
          }
          mean_dh /= static_cast<double>(d);
          mean_dh_h /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = static_cast<double>(g.at(i, j)) * G[j];
            gx.at(i, j) += static_cast<T>(rstd[i] * (dh - mean_dh - xhat.at(i, j) * mean_dh_h));
          }
        }
      }
      if (wants(1) || wants(2)) {
        std::vector<double> dg(d, 0.0), db(d, 0.0);
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < d; ++j) {
            dg[j] += static_cast<double>(g.at(i, j)) * xhat.at(i, j);
            db[j] += g.at(i, j);
          }
        }
        if (wants(1)) {
          auto& gg = grad_slot(n.inputs[1]);
          for (std::size_t j = 0; j < d; ++j) gg[j] += static_cast<T>(dg[j]);
        }
        if (wants(2)) {
          auto& gb = grad_slot(n.inputs[2]);
          for (std::size_t j = 0; j < d; ++j) gb[j] += static_cast<T>(db[j]);
        }
      }
      return;
    }
    case OpKind::embed_linear: {
      const auto& X = in_value(0);
      const auto& W = in_value(1);
      const std::size_t rows = X.dim(0), k = X.dim(1), m = W.dim(1);
      if (wants(0)) {
        gemm_nt_accumulate(g.data().data(), W.data().data(), grad_slot(n.inputs[0]).data().data(), rows, k, m);
      }
      if (wants(1)) {
        gemm_tn_accumulate(X.data().data(), g.data().data(), grad_slot(n.inputs[1]).data().data(), rows, k, m);
      }
      if (wants(2)) {
        auto& gb = grad_slot(n.inputs[2]);
        std::vector<double> acc(m, 0.0);
        for (std::size_t i = 0; i < rows; ++i) {
          for (std::size_t j = 0; j < m; ++j) acc[j] += g.at(i, j);
        }
        for (std::size_t j = 0; j < m; ++j) gb[j] += static_cast<T>(acc[j]);
      }
      return;
    }
    case OpKind::concat: {
      const std::size_t axis = n.arg0;
      std::size_t offset = 0;
      for (std::size_t s = 0; s < n.inputs.size(); ++s) {
        const auto& part = in_value(s);
        if (wants(s)) {
          auto& gp = grad_slot(n.inputs[s]);
          for (std::size_t r = 0; r < part.dim(0); ++r) {
            for (std::size_t c = 0; c < part.dim(1); ++c) {
              gp.at(r, c) += axis == 0 ? g.at(offset + r, c) : g.at(r, offset + c);
            }
          }
        }
        offset += part.dim(axis);
      }
      return;
    }
    case OpKind::slice: {
      auto& gx = grad_slot(n.inputs[0]);
      const std::size_t axis = n.arg0, start = n.arg1;
      for (std::size_t r = 0; r < g.dim(0); ++r) {
        for (std::size_t c = 0; c < g.dim(1); ++c) {
          if (axis == 0) gx.at(start + r, c) += g.at(r, c);
          else gx.at(r, start + c) += g.at(r, c);
        }
      }
      return;
    }
    case OpKind::causal_mask_fill: {
      auto& gx = grad_slot(n.inputs[0]);
      for (std::size_t i = 0; i < g.dim(0); ++i) {
        for (std::size_t j = 0; j <= i && j < g.dim(1); ++j) gx.at(i, j) += g.at(i, j);
      }
      return;
    }
    case OpKind::transpose: {
      auto& gx = grad_slot(n.inputs[0]);
      for (std::size_t i = 0; i < g.dim(0); ++i) {
        for (std::size_t j = 0; j < g.dim(1); ++j) gx.at(j, i) += g.at(i, j);
      }
      return;
    }
    case OpKind::mse: {
      const auto& A = in_value(0);
      const auto& B = in_value(1);
      const double s = 2.0 * g[0] / static_cast<double>(A.numel());
      if (wants(0)) {
        auto& ga = grad_slot(n.inputs[0]);
        for (std::size_t i = 0; i < A.numel(); ++i) ga[i] += static_cast<T>(s * (static_cast<double>(A[i]) - B[i]));
      }
      if (wants(1)) {
        auto& gb = grad_slot(n.inputs[1]);
        for (std::size_t i = 0; i < A.numel(); ++i) gb[i] -= static_cast<T>(s * (static_cast<double>(A[i]) - B[i]));
      }
      return;
    }
    case OpKind::l1: {
      const auto& A = in_value(0);
      const auto& B = in_value(1);
      const double s = g[0] / static_cast<double>(A.numel());
      for (std::size_t i = 0; i < A.numel(); ++i) {
        const double d = static_cast<double>(A[i]) - B[i];
        const double sign = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
        if (wants(0)) grad_slot(n.inputs[0])[i] += static_cast<T>(s * sign);
        if (wants(1)) grad_slot(n.inputs[1])[i] -= static_cast<T>(s * sign);
      }
      return;
    }
    case OpKind::mean:
    case OpKind::sum: {
      auto& gx = grad_slot(n.inputs[0]);
      const double s = n.kind == OpKind::mean ? g[0] / static_cast<double>(gx.numel()) : g[0];
      for (auto& v : gx.storage()) v += static_cast<T>(s);
      return;
    }
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace conbat::ad
