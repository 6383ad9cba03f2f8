#pragma once

// Taped reverse-mode differentiation over vector/matrix-valued nodes.
//
// Every op evaluates eagerly and, when the tape is recording, appends a
// closure that propagates the output gradient to its inputs. Parameters are
// bound by name as leaves that reference caller-owned storage.

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tma/tensor.hpp"

namespace tma {

/// Parameter name -> gradient of the same shape.
template <class T>
using BasicGradientSet = std::map<std::string, BasicTensor<T>>;
using GradientSet = BasicGradientSet<double>;

template <std::floating_point T>
class BasicTape;

template <std::floating_point T>
class BasicVar {
 public:
  BasicVar() = default;
  BasicVar(BasicTape<T>* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  BasicTape<T>& tape() const {
    if (!tape_) throw std::logic_error("var: not bound to a tape");
    return *tape_;
  }
  std::uint32_t id() const { return id_; }
  const BasicTensor<T>& value() const { return tape().value(id_); }

 private:
  BasicTape<T>* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

template <std::floating_point T>
class BasicTape {
 public:
  using TensorT = BasicTensor<T>;
  using VarT = BasicVar<T>;
  using Backward =
      std::function<void(BasicTape&, std::uint32_t self, const TensorT& out_grad)>;

  explicit BasicTape(bool record = true) : record_(record) { nodes_.reserve(256); }
  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  VarT constant(TensorT v) {
    Node n;
    n.value = std::move(v);
    nodes_.push_back(std::move(n));
    return VarT(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  /// Binds a named parameter. `storage` must outlive the tape. Binding the
  /// same name twice returns the same leaf.
  VarT param(const std::string& name, const TensorT& storage) {
    if (auto it = params_.find(name); it != params_.end()) return VarT(this, it->second);
    Node n;
    n.external = &storage;
    n.requires_grad = record_;
    nodes_.push_back(std::move(n));
    const auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
    params_.emplace(name, id);
    return VarT(this, id);
  }

  bool has_param(const std::string& name) const { return params_.count(name) > 0; }

  VarT push(TensorT v, bool requires_grad, Backward back) {
    Node n;
    n.value = std::move(v);
    if (record_ && requires_grad) {
      n.requires_grad = true;
      n.back = std::move(back);
    }
    nodes_.push_back(std::move(n));
    return VarT(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  const TensorT& value(std::uint32_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(VarT v) const { return requires_grad(v.id()); }

  /// Gradient buffer of a node, zero-allocated on first use.
  TensorT& grad_accumulator(std::uint32_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = TensorT::zeros(value(id).shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Gradient of a node after backward(); zeros if it received none.
  TensorT grad(VarT v) const {
    const Node& n = nodes_[v.id()];
    return n.has_grad ? n.grad : TensorT::zeros(value(v.id()).shape());
  }

  /// Reverse sweep from a scalar node. Returns d(loss)/d(param) for every
  /// parameter bound on this tape.
  BasicGradientSet<T> backward(VarT loss) {
    if (!record_) throw std::logic_error("backward: tape is not recording");
    if (value(loss.id()).size() != 1)
      throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                  shape_string(value(loss.id()).shape()));
    for (Node& n : nodes_) n.has_grad = false;
    grad_accumulator(loss.id())[0] = T(1);
    for (std::int64_t id = loss.id(); id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.has_grad || !n.back) continue;
      n.back(*this, static_cast<std::uint32_t>(id), n.grad);
    }
    BasicGradientSet<T> out;
    for (const auto& [name, id] : params_) out.emplace(name, grad(VarT(this, id)));
    return out;
  }

  std::size_t clamped_logs() const { return clamped_logs_; }
  void note_clamped_log() { ++clamped_logs_; }

 private:
  struct Node {
    TensorT value;
    const TensorT* external = nullptr;
    TensorT grad;
    bool has_grad = false;
    bool requires_grad = false;
    Backward back;
  };

  std::vector<Node> nodes_;
  std::map<std::string, std::uint32_t> params_;
  bool record_;
  std::size_t clamped_logs_ = 0;
};

using Tape = BasicTape<double>;
using Var = BasicVar<double>;

namespace detail {

template <class T>
BasicTape<T>& same_tape(BasicVar<T> a, BasicVar<T> b) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument("vars on different tapes");
  return a.tape();
}

template <class T>
void require_rank(const BasicTensor<T>& t, std::size_t rank, const char* what) {
  if (t.rank() != rank)
    throw std::invalid_argument(std::string(what) + ": expected rank " +
                                std::to_string(rank) + ", got shape " +
                                shape_string(t.shape()));
}

}  // namespace detail

// ---- elementwise --------------------------------------------------------

template <class T>
BasicVar<T> add(BasicVar<T> a, BasicVar<T> b) {
  auto& t = detail::same_tape(a, b);
  BasicTensor<T> out = a.value();
  out += b.value();
  const auto ia = a.id(), ib = b.id();
  return t.push(std::move(out), t.requires_grad(ia) || t.requires_grad(ib),
                [ia, ib](BasicTape<T>& tp, std::uint32_t, const BasicTensor<T>& g) {
                  if (tp.requires_grad(ia)) tp.grad_accumulator(ia) += g;
                  if (tp.requires_grad(ib)) tp.grad_accumulator(ib) += g;
                });
}

template <class T>
BasicVar<T> mul(BasicVar<T> a, BasicVar<T> b) {
  auto& t = detail::same_tape(a, b);
  a.value().check_same_shape(b.value());
  BasicTensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return t.push(std::move(out), t.requires_grad(ia) || t.requires_grad(ib),
                [ia, ib](BasicTape<T>& tp, std::uint32_t, const BasicTensor<T>& g) {
                  const auto& va = tp.value(ia);
                  const auto& vb = tp.value(ib);
                  if (tp.requires_grad(ia)) {
                    auto& ga = tp.grad_accumulator(ia);
                    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
                  }
                  if (tp.requires_grad(ib)) {
                    auto& gb = tp.grad_accumulator(ib);
                    for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
                  }
                });
}

/// a * c for a constant tensor c of the same shape (dropout masks).
template <class T>
BasicVar<T> mul_const(BasicVar<T> a, BasicTensor<T> c) {
  auto& t = a.tape();
  a.value().check_same_shape(c);
  BasicTensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  const auto ia = a.id();
  return t.push(std::move(out), t.requires_grad(ia),
                [ia, c = std::move(c)](BasicTape<T>& tp, std::uint32_t,
                                       const BasicTensor<T>& g) {
                  auto& ga = tp.grad_accumulator(ia);
                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c[i];
                });
}

/// a + c for a constant tensor c (additive weight noise).
template <class T>
BasicVar<T> add_const(BasicVar<T> a, const BasicTensor<T>& c) {
  auto& t = a.tape();
  BasicTensor<T> out = a.value();
  out += c;
  const auto ia = a.id();
  return t.push(std::move(out), t.requires_grad(ia),
                [ia](BasicTape<T>& tp, std::uint32_t, const BasicTensor<T>& g) {
                  tp.grad_accumulator(ia) += g;
                });
}

template <class T>
BasicVar<T> scale(BasicVar<T> a, T s) {
  auto& t = a.tape();
  BasicTensor<T> out = a.value();
  out *= s;
  const auto ia = a.id();
  return t.push(std::move(out), t.requires_grad(ia),
                [ia, s](BasicTape<T>& tp, std::uint32_t, const BasicTensor<T>& g) {
                  auto& ga = tp.grad_accumulator(ia);
                  for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
                });
}

template <class T>
BasicVar<T> sigmoid(BasicVar<T> a) {
  auto& t = a.tape();
  BasicTensor<T> out = a.value();
  for (T& v : out.data()) v = sigmoid(v);
  const auto ia = a.id();
  return t.push(std::move(out), t.requires_grad(ia),
                [ia](BasicTape<T>& tp, std::uint32_t self, const BasicTensor<T>& g) {
                  const auto& y = tp.value(self);
                  auto& ga = tp.grad_accumulator(ia);
                  for (std::size_t i = 0; i < g.size(); ++i)
                    ga[i] += g[i] * y[i] * (T(1) - y[i]);
                });
}

template <class T>
BasicVar<T> tanh(BasicVar<T> a) {
  auto& t = a.tape();
  BasicTensor<T> out = a.value();
  for (T& v : out.data()) v = std::tanh(v);
  const auto ia = a.id();
  return t.push(std::move(out), t.requires_grad(ia),
                [ia](BasicTape<T>& tp, std::uint32_t self, const BasicTensor<T>& g) {
                  const auto& y = tp.value(self);
                  auto& ga = tp.grad_accumulator(ia);
                  for (std::size_t i = 0; i < g.size(); ++i)
                    ga[i] += g[i] * (T(1) - y[i] * y[i]);
                });
}

// ---- reductions ---------------------------------------------------------

/// Sum of same-shaped nodes.
template <class T>
BasicVar<T> sum(std::span<const BasicVar<T>> xs) {
  if (xs.empty()) throw std::invalid_argument("sum: no operands");
  auto& t = xs.front().tape();
  BasicTensor<T> out = xs.front().value();
  bool rg = t.requires_grad(xs.front());
  std::vector<std::uint32_t> ids{xs.front().id()};
  for (std::size_t k = 1; k < xs.size(); ++k) {
    out += xs[k].value();
    rg = rg || t.requires_grad(xs[k]);
    ids.push_back(xs[k].id());
  }
  return t.push(std::move(out), rg,
                [ids = std::move(ids)](BasicTape<T>& tp, std::uint32_t,
                                       const BasicTensor<T>& g) {
                  for (auto id : ids)
                    if (tp.requires_grad(id)) tp.grad_accumulator(id) += g;
                });
}

template <class T>
BasicVar<T> sum(const std::vector<BasicVar<T>>& xs) {
  return sum(std::span<const BasicVar<T>>(xs));
}

template <class T>
BasicVar<T> dot(BasicVar<T> a, BasicVar<T> b) {
  auto& t = detail::same_tape(a, b);
  a.value().check_same_shape(b.value());
  T s = 0;
  for (std::size_t i = 0; i < a.value().size(); ++i) s += a.value()[i] * b.value()[i];
  const auto ia = a.id(), ib = b.id();
  return t.push(BasicTensor<T>::scalar(s), t.requires_grad(ia) || t.requires_grad(ib),
                [ia, ib](BasicTape<T>& tp, std::uint32_t, const BasicTensor<T>& g) {
                  const auto& va = tp.value(ia);
                  const auto& vb = tp.value(ib);
                  if (tp.requires_grad(ia)) {
                    auto& ga = tp.grad_accumulator(ia);
                    for (std::size_t i = 0; i < va.size(); ++i) ga[i] += g[0] * vb[i];
                  }
                  if (tp.requires_grad(ib)) {
                    auto& gb = tp.grad_accumulator(ib);
                    for (std::size_t i = 0; i < vb.size(); ++i) gb[i] += g[0] * va[i];
                  }
                });
}

template <class T>
BasicVar<T> sum_squares(BasicVar<T> a) {
  auto& t = a.tape();
  const auto ia = a.id();
  return t.push(BasicTensor<T>::scalar(squared_norm(a.value())), t.requires_grad(ia),
                [ia](BasicTape<T>& tp, std::uint32_t, const BasicTensor<T>& g) {
                  const auto& va = tp.value(ia);
                  auto& ga = tp.grad_accumulator(ia);
                  for (std::size_t i = 0; i < va.size(); ++i) ga[i] += T(2) * g[0] * va[i];
                });
}

/// log(p[index]) with p clamped below at 1e-12; clamping is counted on the
/// tape and blocks the gradient.
template <class T>
BasicVar<T> log_at(BasicVar<T> p, std::size_t index) {
  auto& t = p.tape();
  const auto& pv = p.value();
  if (index >= pv.size())
    throw std::out_of_range("log_at: index " + std::to_string(index) +
                            " outside distribution of size " + std::to_string(pv.size()));
  constexpr T kFloor = T(1e-12);
  const bool clamped = !(pv[index] >= kFloor);
  if (clamped) t.note_clamped_log();
  const T v = std::log(clamped ? kFloor : pv[index]);
  const auto ip = p.id();
  return t.push(BasicTensor<T>::scalar(v), t.requires_grad(ip) && !clamped,
                [ip, index](BasicTape<T>& tp, std::uint32_t, const BasicTensor<T>& g) {
                  tp.grad_accumulator(ip)[index] += g[0] / tp.value(ip)[index];
                });
}

template <class T>
BasicVar<T> softmax(BasicVar<T> a) {
  auto& t = a.tape();
  detail::require_rank(a.value(), 1, "softmax");
  std::vector<T> p = softmax(a.value().data());
  const auto ia = a.id();
  return t.push(BasicTensor<T>::vector(std::move(p)), t.requires_grad(ia),
                [ia](BasicTape<T>& tp, std::uint32_t self, const BasicTensor<T>& g) {
                  const auto& y = tp.value(self);
                  T inner = 0;
                  for (std::size_t i = 0; i < y.size(); ++i) inner += g[i] * y[i];
                  auto& ga = tp.grad_accumulator(ia);
                  for (std::size_t i = 0; i < y.size(); ++i) ga[i] += y[i] * (g[i] - inner);
                });
}

// ---- linear algebra -----------------------------------------------------

template <class T>
struct BasicAffineTerm {
  BasicVar<T> matrix;
  BasicVar<T> input;
};
using AffineTerm = BasicAffineTerm<double>;

/// bias + sum_k M_k x_k. The bias may be an invalid Var (no bias).
template <class T>
BasicVar<T> affine(std::span<const BasicAffineTerm<T>> terms, BasicVar<T> bias) {
  if (terms.empty()) throw std::invalid_argument("affine: no terms");
  auto& t = terms.front().matrix.tape();
  const std::size_t rows = terms.front().matrix.value().rows();
  BasicTensor<T> out = BasicTensor<T>::zeros(Shape{rows});
  bool rg = false;
  for (const auto& term : terms) {
    const auto& m = term.matrix.value();
    const auto& x = term.input.value();
    detail::require_rank(m, 2, "affine matrix");
    detail::require_rank(x, 1, "affine input");
    if (m.rows() != rows || m.cols() != x.size())
      throw std::invalid_argument("affine: matrix " + shape_string(m.shape()) +
                                  " incompatible with input " + shape_string(x.shape()) +
                                  " / output " + std::to_string(rows));
    const std::size_t cols = m.cols();
    const T* mp = m.data().data();
    const T* xp = x.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
      T s = 0;
      const T* mr = mp + r * cols;
      for (std::size_t c = 0; c < cols; ++c) s += mr[c] * xp[c];
      out[r] += s;
    }
    rg = rg || t.requires_grad(term.matrix) || t.requires_grad(term.input);
  }
  if (bias.valid()) {
    if (bias.value().shape() != out.shape())
      throw std::invalid_argument("affine: bias shape " + shape_string(bias.value().shape()) +
                                  " != output " + shape_string(out.shape()));
    out += bias.value();
    rg = rg || t.requires_grad(bias);
  }
  std::vector<std::pair<std::uint32_t, std::uint32_t>> ids;
  ids.reserve(terms.size());
  for (const auto& term : terms) ids.emplace_back(term.matrix.id(), term.input.id());
  const bool has_bias = bias.valid();
  const std::uint32_t ib = has_bias ? bias.id() : 0;
  return t.push(
      std::move(out), rg,
      [ids = std::move(ids), has_bias, ib](BasicTape<T>& tp, std::uint32_t,
                                           const BasicTensor<T>& g) {
        for (const auto& [im, ix] : ids) {
          const auto& m = tp.value(im);
          const auto& x = tp.value(ix);
          const std::size_t rows = m.rows(), cols = m.cols();
          if (tp.requires_grad(im)) {
            T* gm = tp.grad_accumulator(im).data().data();
            for (std::size_t r = 0; r < rows; ++r) {
              const T gr = g[r];
              if (gr == T(0)) continue;
              T* row = gm + r * cols;
              for (std::size_t c = 0; c < cols; ++c) row[c] += gr * x[c];
            }
          }
          if (tp.requires_grad(ix)) {
            T* gx = tp.grad_accumulator(ix).data().data();
            const T* mp = m.data().data();
            for (std::size_t r = 0; r < rows; ++r) {
              const T gr = g[r];
              if (gr == T(0)) continue;
              const T* mr = mp + r * cols;
              for (std::size_t c = 0; c < cols; ++c) gx[c] += mr[c] * gr;
            }
          }
        }
        if (has_bias && tp.requires_grad(ib)) tp.grad_accumulator(ib) += g;
      });
}

template <class T>
BasicVar<T> affine(const std::vector<BasicAffineTerm<T>>& terms, BasicVar<T> bias) {
  return affine(std::span<const BasicAffineTerm<T>>(terms), bias);
}

template <class T>
BasicVar<T> affine(std::initializer_list<BasicAffineTerm<T>> terms, BasicVar<T> bias = {}) {
  return affine(std::span<const BasicAffineTerm<T>>(terms.begin(), terms.size()), bias);
}

template <class T>
BasicVar<T> matvec(BasicVar<T> m, BasicVar<T> x) {
  return affine({BasicAffineTerm<T>{m, x}});
}

/// Concatenation of rank-1 nodes.
template <class T>
BasicVar<T> concat(std::span<const BasicVar<T>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no operands");
  auto& t = parts.front().tape();
  std::vector<T> out;
  std::vector<std::uint32_t> ids;
  bool rg = false;
  for (auto p : parts) {
    detail::require_rank(p.value(), 1, "concat");
    out.insert(out.end(), p.value().data().begin(), p.value().data().end());
    ids.push_back(p.id());
    rg = rg || t.requires_grad(p);
  }
  return t.push(BasicTensor<T>::vector(std::move(out)), rg,
                [ids = std::move(ids)](BasicTape<T>& tp, std::uint32_t,
                                       const BasicTensor<T>& g) {
                  std::size_t off = 0;
                  for (auto id : ids) {
                    const std::size_t n = tp.value(id).size();
                    if (tp.requires_grad(id)) {
                      auto& gi = tp.grad_accumulator(id);
                      for (std::size_t i = 0; i < n; ++i) gi[i] += g[off + i];
                    }
                    off += n;
                  }
                });
}

template <class T>
BasicVar<T> concat(std::initializer_list<BasicVar<T>> parts) {
  return concat(std::span<const BasicVar<T>>(parts.begin(), parts.size()));
}

/// Stacks equal-length rank-1 nodes as the rows of a matrix.
template <class T>
BasicVar<T> stack_rows(std::span<const BasicVar<T>> rows) {
  if (rows.empty()) throw std::invalid_argument("stack_rows: no rows");
  auto& t = rows.front().tape();
  const std::size_t cols = rows.front().value().size();
  std::vector<T> out;
  out.reserve(rows.size() * cols);
  std::vector<std::uint32_t> ids;
  bool rg = false;
  for (auto r : rows) {
    detail::require_rank(r.value(), 1, "stack_rows");
    if (r.value().size() != cols) throw std::invalid_argument("stack_rows: ragged rows");
    out.insert(out.end(), r.value().data().begin(), r.value().data().end());
    ids.push_back(r.id());
    rg = rg || t.requires_grad(r);
  }
  return t.push(BasicTensor<T>::matrix(rows.size(), cols, std::move(out)), rg,
                [ids = std::move(ids), cols](BasicTape<T>& tp, std::uint32_t,
                                             const BasicTensor<T>& g) {
                  for (std::size_t j = 0; j < ids.size(); ++j) {
                    if (!tp.requires_grad(ids[j])) continue;
                    auto& gj = tp.grad_accumulator(ids[j]);
                    for (std::size_t c = 0; c < cols; ++c) gj[c] += g[j * cols + c];
                  }
                });
}

template <class T>
BasicVar<T> stack_rows(const std::vector<BasicVar<T>>& rows) {
  return stack_rows(std::span<const BasicVar<T>>(rows));
}

/// Row `index` of a matrix (embedding lookup).
template <class T>
BasicVar<T> row(BasicVar<T> matrix, std::size_t index) {
  auto& t = matrix.tape();
  const auto& m = matrix.value();
  detail::require_rank(m, 2, "row");
  if (index >= m.rows())
    throw std::out_of_range("row: index " + std::to_string(index) +
                            " outside matrix with " + std::to_string(m.rows()) + " rows");
  auto r = m.row(index);
  const auto im = matrix.id();
  return t.push(BasicTensor<T>::vector(std::vector<T>(r.begin(), r.end())),
                t.requires_grad(im),
                [im, index](BasicTape<T>& tp, std::uint32_t, const BasicTensor<T>& g) {
                  auto gr = tp.grad_accumulator(im).row(index);
                  for (std::size_t c = 0; c < gr.size(); ++c) gr[c] += g[c];
                });
}

/// Mean over the rows of a J x D matrix.
template <class T>
BasicVar<T> mean_rows(BasicVar<T> matrix) {
  auto& t = matrix.tape();
  const auto& m = matrix.value();
  detail::require_rank(m, 2, "mean_rows");
  if (m.rows() == 0) throw std::invalid_argument("mean_rows: empty matrix");
  const std::size_t J = m.rows(), D = m.cols();
  BasicTensor<T> out = BasicTensor<T>::zeros(Shape{D});
  for (std::size_t j = 0; j < J; ++j)
    for (std::size_t d = 0; d < D; ++d) out[d] += m.at(j, d);
  out *= T(1) / static_cast<T>(J);
  const auto im = matrix.id();
  return t.push(std::move(out), t.requires_grad(im),
                [im, J, D](BasicTape<T>& tp, std::uint32_t, const BasicTensor<T>& g) {
                  auto& gm = tp.grad_accumulator(im);
                  const T s = T(1) / static_cast<T>(J);
                  for (std::size_t j = 0; j < J; ++j)
                    for (std::size_t d = 0; d < D; ++d) gm.at(j, d) += s * g[d];
                });
}

/// P = V U^T + b for V (J x D), U (A x D), b (A): per-row projection.
template <class T>
BasicVar<T> project_rows(BasicVar<T> rows, BasicVar<T> weight, BasicVar<T> bias) {
  auto& t = rows.tape();
  const auto& V = rows.value();
  const auto& U = weight.value();
  const auto& b = bias.value();
  detail::require_rank(V, 2, "project_rows input");
  detail::require_rank(U, 2, "project_rows weight");
  if (U.cols() != V.cols() || b.size() != U.rows())
    throw std::invalid_argument("project_rows: weight " + shape_string(U.shape()) +
                                " incompatible with rows " + shape_string(V.shape()));
  const std::size_t J = V.rows(), D = V.cols(), A = U.rows();
  BasicTensor<T> out = BasicTensor<T>::zeros(Shape{J, A});
  for (std::size_t j = 0; j < J; ++j) {
    const T* v = V.data().data() + j * D;
    for (std::size_t a = 0; a < A; ++a) {
      const T* u = U.data().data() + a * D;
      T s = b[a];
      for (std::size_t d = 0; d < D; ++d) s += u[d] * v[d];
      out.at(j, a) = s;
    }
  }
  const auto iv = rows.id(), iu = weight.id(), ib = bias.id();
  const bool rg = t.requires_grad(iv) || t.requires_grad(iu) || t.requires_grad(ib);
  return t.push(std::move(out), rg,
                [iv, iu, ib, J, D, A](BasicTape<T>& tp, std::uint32_t,
                                      const BasicTensor<T>& g) {
                  const auto& V = tp.value(iv);
                  const auto& U = tp.value(iu);
                  if (tp.requires_grad(iu)) {
                    auto& gu = tp.grad_accumulator(iu);
                    for (std::size_t j = 0; j < J; ++j)
                      for (std::size_t a = 0; a < A; ++a) {
                        const T ga = g.at(j, a);
                        for (std::size_t d = 0; d < D; ++d) gu.at(a, d) += ga * V.at(j, d);
                      }
                  }
                  if (tp.requires_grad(iv)) {
                    auto& gv = tp.grad_accumulator(iv);
                    for (std::size_t j = 0; j < J; ++j)
                      for (std::size_t a = 0; a < A; ++a) {
                        const T ga = g.at(j, a);
                        for (std::size_t d = 0; d < D; ++d) gv.at(j, d) += ga * U.at(a, d);
                      }
                  }
                  if (tp.requires_grad(ib)) {
                    auto& gb = tp.grad_accumulator(ib);
                    for (std::size_t j = 0; j < J; ++j)
                      for (std::size_t a = 0; a < A; ++a) gb[a] += g.at(j, a);
                  }
                });
}

/// Additive alignment scores: e_j = w . tanh(query + P_j), with query (A),
/// P (J x A), w (A).
template <class T>
BasicVar<T> additive_scores(BasicVar<T> query, BasicVar<T> projected, BasicVar<T> w) {
  auto& t = query.tape();
  const auto& q = query.value();
  const auto& P = projected.value();
  const auto& wv = w.value();
  detail::require_rank(P, 2, "additive_scores");
  if (q.size() != P.cols() || wv.size() != P.cols())
    throw std::invalid_argument("additive_scores: dimension mismatch");
  const std::size_t J = P.rows(), A = P.cols();
  BasicTensor<T> act = BasicTensor<T>::zeros(Shape{J, A});
  BasicTensor<T> out = BasicTensor<T>::zeros(Shape{J});
  for (std::size_t j = 0; j < J; ++j) {
    T s = 0;
    for (std::size_t a = 0; a < A; ++a) {
      const T h = std::tanh(q[a] + P.at(j, a));
      act.at(j, a) = h;
      s += wv[a] * h;
    }
    out[j] = s;
  }
  const auto iq = query.id(), ip = projected.id(), iw = w.id();
  const bool rg = t.requires_grad(iq) || t.requires_grad(ip) || t.requires_grad(iw);
  return t.push(std::move(out), rg,
                [iq, ip, iw, J, A, act = std::move(act)](BasicTape<T>& tp, std::uint32_t,
                                                          const BasicTensor<T>& g) {
                  const auto& wv = tp.value(iw);
                  auto* gq = tp.requires_grad(iq) ? &tp.grad_accumulator(iq) : nullptr;
                  auto* gp = tp.requires_grad(ip) ? &tp.grad_accumulator(ip) : nullptr;
                  auto* gw = tp.requires_grad(iw) ? &tp.grad_accumulator(iw) : nullptr;
                  for (std::size_t j = 0; j < J; ++j) {
                    for (std::size_t a = 0; a < A; ++a) {
                      const T h = act.at(j, a);
                      if (gw) (*gw)[a] += g[j] * h;
                      const T dpre = g[j] * wv[a] * (T(1) - h * h);
                      if (gq) (*gq)[a] += dpre;
                      if (gp) gp->at(j, a) += dpre;
                    }
                  }
                });
}

/// z = sum_j alpha_j V_j for alpha (J), V (J x D).
template <class T>
BasicVar<T> weighted_sum_rows(BasicVar<T> alpha, BasicVar<T> rows) {
  auto& t = alpha.tape();
  const auto& al = alpha.value();
  const auto& V = rows.value();
  detail::require_rank(V, 2, "weighted_sum_rows");
  if (al.size() != V.rows()) throw std::invalid_argument("weighted_sum_rows: weight count mismatch");
  const std::size_t J = V.rows(), D = V.cols();
  BasicTensor<T> out = BasicTensor<T>::zeros(Shape{D});
  for (std::size_t j = 0; j < J; ++j)
    for (std::size_t d = 0; d < D; ++d) out[d] += al[j] * V.at(j, d);
  const auto ia = alpha.id(), iv = rows.id();
  return t.push(std::move(out), t.requires_grad(ia) || t.requires_grad(iv),
                [ia, iv, J, D](BasicTape<T>& tp, std::uint32_t, const BasicTensor<T>& g) {
                  const auto& al = tp.value(ia);
                  const auto& V = tp.value(iv);
                  if (tp.requires_grad(ia)) {
                    auto& ga = tp.grad_accumulator(ia);
                    for (std::size_t j = 0; j < J; ++j) {
                      T s = 0;
                      for (std::size_t d = 0; d < D; ++d) s += g[d] * V.at(j, d);
                      ga[j] += s;
                    }
                  }
                  if (tp.requires_grad(iv)) {
                    auto& gv = tp.grad_accumulator(iv);
                    for (std::size_t j = 0; j < J; ++j)
                      for (std::size_t d = 0; d < D; ++d) gv.at(j, d) += al[j] * g[d];
                  }
                });
}

}  // namespace tma
