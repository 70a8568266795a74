#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pit/tensor.hpp"

// Reverse-mode differentiation over a linear tape. Every op appends one node;
// node inputs always precede the node, so a reverse sweep is a valid
// topological order.

namespace pit {

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Shape& shape() const;
  std::span<const double> value() const;
  double item() const;
  std::size_t size() const { return value().size(); }
  Tensor to_tensor() const;

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool needs_grad = false;
    Tensor* leaf = nullptr;
    std::function<void(Tape&, std::size_t)> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// When set, heaviside_ste evaluates its identity surrogate in the forward
  /// pass too. Used by finite-difference checks on the surrogate graph.
  bool ste_surrogate = false;

  /// When set, leaves never require grad (inference passes).
  bool no_grad = false;

  /// Registers a tensor as a leaf. If it requires grad, backward()
  /// accumulates into tensor.grad(); the tensor must outlive the tape.
  Var leaf(Tensor& tensor) {
    check_open();
    Node node;
    node.shape = tensor.shape();
    node.value = tensor.values();
    node.needs_grad = tensor.requires_grad() && !no_grad;
    node.leaf = node.needs_grad ? &tensor : nullptr;
    return append(std::move(node));
  }

  Var constant(const Tensor& tensor) {
    check_open();
    Node node;
    node.shape = tensor.shape();
    node.value = tensor.values();
    return append(std::move(node));
  }

  /// Appends an op result. `backward` is kept only if some input needs grad.
  Var push(const char* op, Shape shape, std::vector<double> value,
           std::initializer_list<Var> inputs,
           std::function<void(Tape&, std::size_t)> backward) {
    check_open();
    for (double v : value) {
      if (!std::isfinite(v)) {
        throw NonFiniteError(std::string("non-finite output in ") + op);
      }
    }
    Node node;
    node.shape = std::move(shape);
    node.value = std::move(value);
    for (const Var& in : inputs) {
      if (in.tape_ != this) throw Error(std::string(op) + ": input from another tape");
      node.needs_grad = node.needs_grad || nodes_[in.id_].needs_grad;
    }
    if (node.needs_grad) node.backward = std::move(backward);
    return append(std::move(node));
  }

  Node& node(std::size_t id) { return nodes_[id]; }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  Node& node(const Var& v) { return nodes_[v.id()]; }
  const Node& node(const Var& v) const { return nodes_[v.id()]; }

  bool needs_grad(const Var& v) const { return nodes_[v.id()].needs_grad; }

  /// Gradient buffer of an input, allocated on first use.
  std::vector<double>& grad_of(const Var& v) {
    Node& n = nodes_[v.id()];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  /// Propagates d(loss)/d(node) back to every leaf that requires grad, then
  /// releases the backward closures. Values stay readable.
  void backward(const Var& loss) {
    if (consumed_) throw Error("backward called twice on the same tape");
    if (loss.tape_ != this) throw Error("backward: loss belongs to another tape");
    if (nodes_[loss.id_].value.size() != 1) {
      throw Error("backward: loss must be scalar, got shape " +
                  shape_str(nodes_[loss.id_].shape));
    }
    consumed_ = true;
    if (!nodes_[loss.id_].needs_grad) {
      release();
      return;
    }
    grad_of(loss)[0] = 1.0;
    for (std::size_t id = loss.id_ + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (!n.needs_grad || n.grad.empty()) continue;
      if (n.backward) n.backward(*this, id);
      if (n.leaf != nullptr) {
        auto g = n.leaf->grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
      }
    }
    release();
  }

 private:
  friend class Var;

  Var append(Node node) {
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
  }

  void check_open() const {
    if (consumed_) throw Error("tape already consumed by backward");
  }

  void release() {
    for (Node& n : nodes_) {
      n.backward = nullptr;
      n.grad.clear();
      n.grad.shrink_to_fit();
    }
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

inline const Shape& Var::shape() const { return tape_->node(id_).shape; }
inline std::span<const double> Var::value() const { return tape_->node(id_).value; }

inline double Var::item() const {
  auto v = value();
  if (v.size() != 1) throw Error("item() on non-scalar of shape " + shape_str(shape()));
  return v[0];
}

inline Tensor Var::to_tensor() const {
  return Tensor(shape(), std::vector<double>(value().begin(), value().end()));
}

namespace detail {

inline void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw Error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                " vs " + shape_str(b.shape()));
  }
}

inline std::vector<double> copy(std::span<const double> s) {
  return {s.begin(), s.end()};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

inline Var add(const Var& a, const Var& b) {
  detail::require_same_shape("add", a, b);
  auto av = a.value(), bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return a.tape()->push("add", a.shape(), std::move(out), {a, b},
                        [a, b](Tape& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          for (const Var& in : {a, b}) {
                            if (!t.needs_grad(in)) continue;
                            auto& gi = t.grad_of(in);
                            for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                          }
                        });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same_shape("sub", a, b);
  auto av = a.value(), bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return a.tape()->push("sub", a.shape(), std::move(out), {a, b},
                        [a, b](Tape& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          if (t.needs_grad(a)) {
                            auto& ga = t.grad_of(a);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          }
                          if (t.needs_grad(b)) {
                            auto& gb = t.grad_of(b);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                          }
                        });
}

/// Hadamard product.
inline Var mul(const Var& a, const Var& b) {
  detail::require_same_shape("mul", a, b);
  auto av = a.value(), bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape()->push("mul", a.shape(), std::move(out), {a, b},
                        [a, b](Tape& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          const auto& av = t.node(a).value;
                          const auto& bv = t.node(b).value;
                          if (t.needs_grad(a)) {
                            auto& ga = t.grad_of(a);
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                          }
                          if (t.needs_grad(b)) {
                            auto& gb = t.grad_of(b);
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                          }
                        });
}

inline Var scale(const Var& a, double s) {
  auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  return a.tape()->push("scale", a.shape(), std::move(out), {a},
                        [a, s](Tape& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          auto& ga = t.grad_of(a);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
                        });
}

/// |a| with subgradient 0 at 0.
inline Var abs(const Var& a) {
  auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(av[i]);
  return a.tape()->push("abs", a.shape(), std::move(out), {a},
                        [a](Tape& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          const auto& av = t.node(a).value;
                          auto& ga = t.grad_of(a);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            if (av[i] > 0.0) ga[i] += g[i];
                            else if (av[i] < 0.0) ga[i] -= g[i];
                          }
                        });
}

inline Var relu(const Var& a) {
  auto av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > 0.0 ? av[i] : 0.0;
  return a.tape()->push("relu", a.shape(), std::move(out), {a},
                        [a](Tape& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          const auto& av = t.node(a).value;
                          auto& ga = t.grad_of(a);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            if (av[i] > 0.0) ga[i] += g[i];
                          }
                        });
}

inline Var reshape(const Var& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw Error("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  return a.tape()->push("reshape", std::move(shape), detail::copy(a.value()), {a},
                        [a](Tape& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          auto& ga = t.grad_of(a);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                        });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value()) s += v;
  return a.tape()->push("sum", Shape{}, {s}, {a}, [a](Tape& t, std::size_t self) {
    const double g = t.node(self).grad[0];
    for (double& gi : t.grad_of(a)) gi += g;
  });
}

inline Var mean(const Var& a) {
  if (a.size() == 0) throw Error("mean of empty tensor");
  double s = 0.0;
  for (double v : a.value()) s += v;
  const double n = static_cast<double>(a.size());
  return a.tape()->push("mean", Shape{}, {s / n}, {a}, [a, n](Tape& t, std::size_t self) {
    const double g = t.node(self).grad[0] / n;
    for (double& gi : t.grad_of(a)) gi += g;
  });
}

/// [m x k] . [k x n] -> [m x n]
inline Var matmul(const Var& a, const Var& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
    throw Error("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  auto av = a.value(), bv = b.value();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t r = 0; r < k; ++r) acc += av[i * k + r] * bv[r * n + j];
      out[i * n + j] = acc;
    }
  }
  return a.tape()->push(
      "matmul", Shape{m, n}, std::move(out), {a, b},
      [a, b, m, k, n](Tape& t, std::size_t self) {
        const auto& g = t.node(self).grad;
        const auto& av = t.node(a).value;
        const auto& bv = t.node(b).value;
        if (t.needs_grad(a)) {
          auto& ga = t.grad_of(a);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t r = 0; r < k; ++r) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bv[r * n + j];
              ga[i * k + r] += acc;
            }
        }
        if (t.needs_grad(b)) {
          auto& gb = t.grad_of(b);
          for (std::size_t r = 0; r < k; ++r)
            for (std::size_t j = 0; j < n; ++j) {
              double acc = 0.0;
              for (std::size_t i = 0; i < m; ++i) acc += av[i * k + r] * g[i * n + j];
              gb[r * n + j] += acc;
            }
        }
      });
}

/// Multiplies the entries of each column: [rows x cols] -> [cols].
inline Var column_product(const Var& a) {
  if (a.shape().size() != 2) {
    throw Error("column_product: expected a matrix, got " + shape_str(a.shape()));
  }
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  auto av = a.value();
  std::vector<double> out(cols, 1.0);
  for (std::size_t c = 0; c < cols; ++c)
    for (std::size_t r = 0; r < rows; ++r) out[c] *= av[r * cols + c];
  return a.tape()->push(
      "column_product", Shape{cols}, std::move(out), {a},
      [a, rows, cols](Tape& t, std::size_t self) {
        const auto& g = t.node(self).grad;
        const auto& av = t.node(a).value;
        auto& ga = t.grad_of(a);
        // product of all other rows via prefix/suffix products (zero-safe)
        std::vector<double> prefix(rows + 1), suffix(rows + 1);
        for (std::size_t c = 0; c < cols; ++c) {
          prefix[0] = 1.0;
          for (std::size_t r = 0; r < rows; ++r) prefix[r + 1] = prefix[r] * av[r * cols + c];
          suffix[rows] = 1.0;
          for (std::size_t r = rows; r-- > 0;) suffix[r] = suffix[r + 1] * av[r * cols + c];
          for (std::size_t r = 0; r < rows; ++r) ga[r * cols + c] += g[c] * prefix[r] * suffix[r + 1];
        }
      });
}

// ---------------------------------------------------------------------------
// Sequence ops

namespace detail {

struct SeqDims {
  std::size_t batch, channels, time;
};

inline SeqDims seq_dims(const char* op, const Shape& s) {
  if (s.size() == 2) return {1, s[0], s[1]};
  if (s.size() == 3) return {s[0], s[1], s[2]};
  throw Error(std::string(op) + ": expected [C x T] or [N x C x T], got " + shape_str(s));
}

}  // namespace detail

/// Causal dilated 1-D convolution with (K-1)*d zeros of left padding:
///   y[m,t] = sum_i sum_l x[l, t - d*i] * W[m,l,i] + bias[m]
/// Sums run taps outer, input channels inner; bias is added last.
inline Var conv1d_causal(const Var& x, const Var& w, std::optional<Var> bias, std::size_t d) {
  if (d < 1) throw Error("conv1d_causal: dilation must be >= 1");
  const auto xd = detail::seq_dims("conv1d_causal", x.shape());
  if (w.shape().size() != 3) {
    throw Error("conv1d_causal: weights must be [C_out x C_in x K], got " + shape_str(w.shape()));
  }
  const std::size_t co = w.shape()[0], ci = w.shape()[1], k = w.shape()[2];
  if (k < 1) throw Error("conv1d_causal: kernel size must be >= 1");
  if (ci != xd.channels) {
    throw Error("conv1d_causal: channel mismatch, input " + shape_str(x.shape()) +
                " vs weights " + shape_str(w.shape()));
  }
  if (bias && bias->shape() != Shape{co}) {
    throw Error("conv1d_causal: bias shape " + shape_str(bias->shape()) + " vs " +
                shape_str(Shape{co}));
  }
  const std::size_t nb = xd.batch, tl = xd.time;
  auto xv = x.value(), wv = w.value();
  std::vector<double> out(nb * co * tl);
  for (std::size_t n = 0; n < nb; ++n) {
    const double* xn = xv.data() + n * ci * tl;
    for (std::size_t m = 0; m < co; ++m) {
      const double* wm = wv.data() + m * ci * k;
      const double b = bias ? bias->value()[m] : 0.0;
      double* yr = out.data() + (n * co + m) * tl;
      for (std::size_t t = 0; t < tl; ++t) {
        double acc = 0.0;
        for (std::size_t i = 0; i < k && d * i <= t; ++i) {
          const std::size_t s = t - d * i;
          for (std::size_t l = 0; l < ci; ++l) acc += xn[l * tl + s] * wm[l * k + i];
        }
        yr[t] = acc + b;
      }
    }
  }
  Shape out_shape = x.shape().size() == 2 ? Shape{co, tl} : Shape{nb, co, tl};
  Tape* tape = x.tape();
  auto backward = [x, w, bias, d, nb, ci, co, k, tl](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    const auto& xv = t.node(x).value;
    const auto& wv = t.node(w).value;
    const bool gx_on = t.needs_grad(x), gw_on = t.needs_grad(w);
    const bool gb_on = bias && t.needs_grad(*bias);
    std::vector<double>* gx = gx_on ? &t.grad_of(x) : nullptr;
    std::vector<double>* gw = gw_on ? &t.grad_of(w) : nullptr;
    std::vector<double>* gb = gb_on ? &t.grad_of(*bias) : nullptr;
    for (std::size_t n = 0; n < nb; ++n) {
      for (std::size_t m = 0; m < co; ++m) {
        const double* gr = g.data() + (n * co + m) * tl;
        for (std::size_t t2 = 0; t2 < tl; ++t2) {
          const double gv = gr[t2];
          if (gb) (*gb)[m] += gv;
          for (std::size_t i = 0; i < k && d * i <= t2; ++i) {
            const std::size_t s = t2 - d * i;
            for (std::size_t l = 0; l < ci; ++l) {
              const std::size_t xi = (n * ci + l) * tl + s;
              const std::size_t wi = (m * ci + l) * k + i;
              if (gx) (*gx)[xi] += gv * wv[wi];
              if (gw) (*gw)[wi] += gv * xv[xi];
            }
          }
        }
      }
    }
  };
  if (bias) {
    return tape->push("conv1d_causal", std::move(out_shape), std::move(out), {x, w, *bias},
                      std::move(backward));
  }
  return tape->push("conv1d_causal", std::move(out_shape), std::move(out), {x, w},
                    std::move(backward));
}

/// Scales every time tap of [C_out x C_in x K] weights by mask[K].
inline Var mask_taps(const Var& w, const Var& mask) {
  if (w.shape().size() != 3 || mask.shape() != Shape{w.shape()[2]}) {
    throw Error("mask_taps: weights " + shape_str(w.shape()) + " vs mask " +
                shape_str(mask.shape()));
  }
  const std::size_t k = w.shape()[2];
  const std::size_t rows = w.size() / k;
  auto wv = w.value(), mv = mask.value();
  std::vector<double> out(w.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < k; ++i) out[r * k + i] = wv[r * k + i] * mv[i];
  return w.tape()->push("mask_taps", w.shape(), std::move(out), {w, mask},
                        [w, mask, rows, k](Tape& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          const auto& wv = t.node(w).value;
                          const auto& mv = t.node(mask).value;
                          if (t.needs_grad(w)) {
                            auto& gw = t.grad_of(w);
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t i = 0; i < k; ++i)
                                gw[r * k + i] += g[r * k + i] * mv[i];
                          }
                          if (t.needs_grad(mask)) {
                            auto& gm = t.grad_of(mask);
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t i = 0; i < k; ++i)
                                gm[i] += g[r * k + i] * wv[r * k + i];
                          }
                        });
}

/// Average pooling along time. window == 0 pools globally, [N x C x T] -> [N x C];
/// otherwise non-overlapping windows, trailing samples that do not fill a
/// window are dropped.
inline Var avg_pool_time(const Var& x, std::size_t window) {
  const auto xd = detail::seq_dims("avg_pool_time", x.shape());
  const bool global = window == 0;
  const std::size_t win = global ? xd.time : window;
  if (win > xd.time || win == 0) {
    throw Error("avg_pool_time: window " + std::to_string(window) + " exceeds length " +
                std::to_string(xd.time));
  }
  const std::size_t to = xd.time / win;
  const std::size_t rows = xd.batch * xd.channels;
  auto xv = x.value();
  std::vector<double> out(rows * to);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < to; ++o) {
      double acc = 0.0;
      for (std::size_t j = 0; j < win; ++j) acc += xv[r * xd.time + o * win + j];
      out[r * to + o] = acc / static_cast<double>(win);
    }
  Shape shape;
  if (global) {
    shape = x.shape().size() == 2 ? Shape{xd.channels} : Shape{xd.batch, xd.channels};
  } else {
    shape = x.shape().size() == 2 ? Shape{xd.channels, to} : Shape{xd.batch, xd.channels, to};
  }
  const std::size_t tl = xd.time;
  return x.tape()->push("avg_pool_time", std::move(shape), std::move(out), {x},
                        [x, rows, to, win, tl](Tape& t, std::size_t self) {
                          const auto& g = t.node(self).grad;
                          auto& gx = t.grad_of(x);
                          const double inv = 1.0 / static_cast<double>(win);
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t o = 0; o < to; ++o)
                              for (std::size_t j = 0; j < win; ++j)
                                gx[r * tl + o * win + j] += g[r * to + o] * inv;
                        });
}

/// Fully connected map: x[N x in], W[out x in], bias[out] -> [N x out].
inline Var linear(const Var& x, const Var& w, std::optional<Var> bias) {
  if (x.shape().size() != 2 || w.shape().size() != 2 || x.shape()[1] != w.shape()[1]) {
    throw Error("linear: incompatible shapes " + shape_str(x.shape()) + " and " +
                shape_str(w.shape()));
  }
  const std::size_t nb = x.shape()[0], in = x.shape()[1], out_f = w.shape()[0];
  if (bias && bias->shape() != Shape{out_f}) {
    throw Error("linear: bias shape " + shape_str(bias->shape()) + " vs " +
                shape_str(Shape{out_f}));
  }
  auto xv = x.value(), wv = w.value();
  std::vector<double> out(nb * out_f);
  for (std::size_t n = 0; n < nb; ++n)
    for (std::size_t o = 0; o < out_f; ++o) {
      double acc = 0.0;
      for (std::size_t i = 0; i < in; ++i) acc += xv[n * in + i] * wv[o * in + i];
      out[n * out_f + o] = acc + (bias ? bias->value()[o] : 0.0);
    }
  auto backward = [x, w, bias, nb, in, out_f](Tape& t, std::size_t self) {
    const auto& g = t.node(self).grad;
    const auto& xv = t.node(x).value;
    const auto& wv = t.node(w).value;
    std::vector<double>* gx = t.needs_grad(x) ? &t.grad_of(x) : nullptr;
    std::vector<double>* gw = t.needs_grad(w) ? &t.grad_of(w) : nullptr;
    std::vector<double>* gb = bias && t.needs_grad(*bias) ? &t.grad_of(*bias) : nullptr;
    for (std::size_t n = 0; n < nb; ++n)
      for (std::size_t o = 0; o < out_f; ++o) {
        const double gv = g[n * out_f + o];
        if (gb) (*gb)[o] += gv;
        for (std::size_t i = 0; i < in; ++i) {
          if (gx) (*gx)[n * in + i] += gv * wv[o * in + i];
          if (gw) (*gw)[o * in + i] += gv * xv[n * in + i];
        }
      }
  };
  Tape* tape = x.tape();
  if (bias) {
    return tape->push("linear", Shape{nb, out_f}, std::move(out), {x, w, *bias},
                      std::move(backward));
  }
  return tape->push("linear", Shape{nb, out_f}, std::move(out), {x, w}, std::move(backward));
}

// ---------------------------------------------------------------------------
// Binarization

/// Heaviside step against `delta` in the forward pass; identity gradient in
/// the backward pass (straight-through estimator).
inline Var heaviside_ste(const Var& g_hat, double delta) {
  auto gv = g_hat.value();
  std::vector<double> out(gv.size());
  const bool surrogate = g_hat.tape()->ste_surrogate;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = surrogate ? gv[i] : (gv[i] >= delta ? 1.0 : 0.0);
  }
  return g_hat.tape()->push("heaviside_ste", g_hat.shape(), std::move(out), {g_hat},
                            [g_hat](Tape& t, std::size_t self) {
                              const auto& g = t.node(self).grad;
                              auto& gi = t.grad_of(g_hat);
                              for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
                            });
}

/// Mean binary cross-entropy on logits with targets in {0, 1}.
inline Var bce_with_logits(const Var& logits, const Var& targets) {
  detail::require_same_shape("bce_with_logits", logits, targets);
  auto zv = logits.value(), yv = targets.value();
  const double n = static_cast<double>(zv.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < zv.size(); ++i) {
    const double z = zv[i];
    acc += std::max(z, 0.0) - z * yv[i] + std::log1p(std::exp(-std::fabs(z)));
  }
  return logits.tape()->push(
      "bce_with_logits", Shape{}, {acc / n}, {logits, targets},
      [logits, targets, n](Tape& t, std::size_t self) {
        const double g = t.node(self).grad[0] / n;
        const auto& zv = t.node(logits).value;
        const auto& yv = t.node(targets).value;
        if (t.needs_grad(logits)) {
          auto& gz = t.grad_of(logits);
          for (std::size_t i = 0; i < zv.size(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-zv[i]));
            gz[i] += g * (s - yv[i]);
          }
        }
        if (t.needs_grad(targets)) {
          auto& gy = t.grad_of(targets);
          for (std::size_t i = 0; i < zv.size(); ++i) gy[i] -= g * zv[i];
        }
      });
}

}  // namespace pit
