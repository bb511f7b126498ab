#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "vpr/error.hpp"
#include "vpr/util.hpp"

namespace vpr {

// ---------------------------------------------------------------------------
// Dense row-major tensor. Matrix ops below require ndim == 2.
// ---------------------------------------------------------------------------

template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), T(0));
  }
  Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != data.size())
      throw ShapeError("tensor data length does not match shape");
  }

  static size_t numel_of(const std::vector<int>& s) {
    size_t n = 1;
    for (int e : s) {
      if (e < 0) throw ShapeError("negative extent");
      n *= static_cast<size_t>(e);
    }
    return n;
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, T v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static Tensor scalar(T v) { return Tensor({1, 1}, {v}); }

  size_t numel() const { return data.size(); }
  bool empty() const { return data.empty(); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const { return shape.size() < 2 ? (shape.empty() ? 0 : 1) : shape[1]; }

  T& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
  T at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

  Tensor reshaped(std::vector<int> s) const {
    if (numel_of(s) != data.size()) throw ShapeError("reshape changes element count");
    return Tensor(std::move(s), data);
  }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

template <typename T>
Tensor<T> randn(std::vector<int> shape, std::mt19937_64& rng, T stddev) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : t.data) v = static_cast<T>(dist(rng) * static_cast<double>(stddev));
  return t;
}

// ---------------------------------------------------------------------------
// Matmul kernel. Fixed loop order so results are reproducible run to run.
// C (m x n) = op(A) * op(B) where op(A) is m x k. Double transpose unused.
// ---------------------------------------------------------------------------

template <typename T>
void matmul_kernel(const T* a, const T* b, T* c, int m, int k, int n, bool ta, bool tb,
                   bool accumulate) {
  if (!accumulate) std::fill(c, c + static_cast<size_t>(m) * n, T(0));
  if (!ta && !tb) {
    for (int i = 0; i < m; ++i) {
      const T* arow = a + static_cast<size_t>(i) * k;
      T* crow = c + static_cast<size_t>(i) * n;
      for (int p = 0; p < k; ++p) {
        const T av = arow[p];
        const T* brow = b + static_cast<size_t>(p) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!ta && tb) {
    // B stored n x k; C[i][j] = dot(A_i, B_j)
    for (int i = 0; i < m; ++i) {
      const T* arow = a + static_cast<size_t>(i) * k;
      T* crow = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) {
        const T* brow = b + static_cast<size_t>(j) * k;
        T acc = T(0);
        for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
        crow[j] += acc;
      }
    }
  } else if (ta && !tb) {
    // A stored k x m
    for (int p = 0; p < k; ++p) {
      const T* arow = a + static_cast<size_t>(p) * m;
      const T* brow = b + static_cast<size_t>(p) * n;
      for (int i = 0; i < m; ++i) {
        const T av = arow[i];
        T* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    throw ShapeError("matmul: double transpose is not supported");
  }
}

// ---------------------------------------------------------------------------
// Trainable parameters.
// ---------------------------------------------------------------------------

template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;

  explicit Parameter(Tensor<T> v) : value(std::move(v)) { grad = Tensor<T>(value.shape); }
  Parameter() = default;
};

template <typename T>
class ParamSet {
 public:
  Parameter<T>& add(const std::string& name, Tensor<T> init) {
    auto [it, fresh] = params_.try_emplace(name, Parameter<T>(std::move(init)));
    if (!fresh) throw Error("duplicate parameter: " + name);
    return it->second;
  }
  Parameter<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("unknown parameter: " + name);
    return it->second;
  }
  const Parameter<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("unknown parameter: " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return params_.count(name) != 0; }

  void zero_grad() {
    for (auto& [name, p] : params_)
      std::fill(p.grad.data.begin(), p.grad.data.end(), T(0));
  }

  // std::map iterates in name order; all update loops rely on that for
  // reproducibility.
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  size_t size() const { return params_.size(); }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& [name, p] : params_) out.add(name, p.value.template cast<U>());
    return out;
  }

 private:
  std::map<std::string, Parameter<T>> params_;
};

// ---------------------------------------------------------------------------
// Reverse-mode tape. Nodes are created in topological order, so one reverse
// sweep over creation order propagates all gradients.
// ---------------------------------------------------------------------------

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  const Tensor<T>& value() const;
  int rows() const { return value().rows(); }
  int cols() const { return value().cols(); }
  bool valid() const { return tape != nullptr && id >= 0; }
};

template <typename T>
class Tape {
 public:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // empty until first touched during backward
    std::function<void(Tape&, int)> back;
    Tensor<T>* grad_sink = nullptr;  // leaf gradient destination
  };

  Var<T> constant(Tensor<T> v) {
    nodes_.push_back(Node{std::move(v), Tensor<T>(), nullptr, nullptr});
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  // Trainable leaf; backward accumulates into p.grad.
  Var<T> param(Parameter<T>& p) {
    nodes_.push_back(Node{p.value, Tensor<T>(), nullptr, &p.grad});
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  // Leaf whose gradient lands in an external buffer (same shape as value).
  Var<T> leaf(const Tensor<T>& value, Tensor<T>* sink) {
    nodes_.push_back(Node{value, Tensor<T>(), nullptr, sink});
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  template <typename F>
  Var<T> op(Tensor<T> value, F&& back) {
    nodes_.push_back(Node{std::move(value), Tensor<T>(), std::forward<F>(back), nullptr});
    return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
  }

  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  size_t size() const { return nodes_.size(); }

  Tensor<T>& grad_of(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor<T>(n.value.shape);
    return n.grad;
  }

  void backward(Var<T> loss, T seed = T(1)) {
    if (loss.tape != this) throw Error("backward: variable from another tape");
    if (loss.value().numel() != 1) throw ShapeError("backward: loss must be scalar");
    grad_of(loss.id).data[0] += seed;
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<size_t>(id)];
      if (n.grad.empty()) continue;  // did not influence the loss
      if (n.back) n.back(*this, id);
      if (n.grad_sink) {
        if (n.grad_sink->empty()) *n.grad_sink = Tensor<T>(n.value.shape);
        auto& g = n.grad_sink->data;
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad.data[i];
      }
    }
  }

 private:
  std::vector<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->node(id).value;
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops.
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape != b.shape) throw ShapeError(std::string(op) + ": operand shapes differ");
}
}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::check_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value().data;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv[i];
  return a.tape->op(std::move(out), [ia = a.id, ib = b.id](Tape<T>& t, int self) {
    const auto& g = t.node(self).grad.data;
    auto& ga = t.grad_of(ia).data;
    auto& gb = t.grad_of(ib).data;
    for (size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::check_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value().data;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= bv[i];
  return a.tape->op(std::move(out), [ia = a.id, ib = b.id](Tape<T>& t, int self) {
    const auto& g = t.node(self).grad.data;
    auto& ga = t.grad_of(ia).data;
    auto& gb = t.grad_of(ib).data;
    for (size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::check_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value().data;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv[i];
  return a.tape->op(std::move(out), [ia = a.id, ib = b.id](Tape<T>& t, int self) {
    const auto& g = t.node(self).grad.data;
    const auto& av = t.node(ia).value.data;
    const auto& bv2 = t.node(ib).value.data;
    auto& ga = t.grad_of(ia).data;
    auto& gb = t.grad_of(ib).data;
    for (size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i] * bv2[i];
      gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v *= s;
  return a.tape->op(std::move(out), [ia = a.id, s](Tape<T>& t, int self) {
    const auto& g = t.node(self).grad.data;
    auto& ga = t.grad_of(ia).data;
    for (size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

// matrix (m x n) + row vector (1 x n) broadcast over rows
template <typename T>
Var<T> add_rowvec(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (bv.rows() != 1 || bv.cols() != av.cols())
    throw ShapeError("add_rowvec: bias must be 1 x cols");
  Tensor<T> out = av;
  const int m = av.rows(), n = av.cols();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(i, j) += bv.data[static_cast<size_t>(j)];
  return a.tape->op(std::move(out), [ia = a.id, ib = b.id, m, n](Tape<T>& t, int self) {
    const Tensor<T>& g = t.node(self).grad;
    auto& ga = t.grad_of(ia).data;
    auto& gb = t.grad_of(ib).data;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) {
        const T gv = g.at(i, j);
        ga[static_cast<size_t>(i) * n + j] += gv;
        gb[static_cast<size_t>(j)] += gv;
      }
  });
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool ta = false, bool tb = false) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const int m = ta ? av.cols() : av.rows();
  const int k = ta ? av.rows() : av.cols();
  const int kb = tb ? bv.cols() : bv.rows();
  const int n = tb ? bv.rows() : bv.cols();
  if (k != kb) throw ShapeError("matmul: inner dimensions differ");
  Tensor<T> out({m, n});
  matmul_kernel(av.data.data(), bv.data.data(), out.data.data(), m, k, n, ta, tb, false);
  return a.tape->op(std::move(out), [ia = a.id, ib = b.id, ta, tb, m, k, n](Tape<T>& t, int self) {
    const Tensor<T>& g = t.node(self).grad;
    const Tensor<T>& av2 = t.node(ia).value;
    const Tensor<T>& bv2 = t.node(ib).value;
    Tensor<T>& ga = t.grad_of(ia);
    Tensor<T>& gb = t.grad_of(ib);
    if (!ta && !tb) {
      // dA += g Bt ; dB += At g
      matmul_kernel(g.data.data(), bv2.data.data(), ga.data.data(), m, n, k, false, true, true);
      matmul_kernel(av2.data.data(), g.data.data(), gb.data.data(), k, m, n, true, false, true);
    } else if (!ta && tb) {
      // C = A Bt with B stored n x k: dA += g B ; dB += gt A
      matmul_kernel(g.data.data(), bv2.data.data(), ga.data.data(), m, n, k, false, false, true);
      matmul_kernel(g.data.data(), av2.data.data(), gb.data.data(), n, m, k, true, false, true);
    } else {
      // C = At B with A stored k x m: dA += B gt ; dB += A g
      matmul_kernel(bv2.data.data(), g.data.data(), ga.data.data(), k, n, m, false, true, true);
      matmul_kernel(av2.data.data(), g.data.data(), gb.data.data(), k, m, n, false, false, true);
    }
  });
}

// x (s x in) * w (in x out) + b (1 x out)
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  return add_rowvec(matmul(x, w), b);
}

// Row-wise softmax, numerically stabilized. Optional key_valid marks columns
// to exclude (probability fixed to zero).
template <typename T>
Var<T> softmax_rows(Var<T> a, const std::vector<uint8_t>* key_valid = nullptr) {
  const Tensor<T>& av = a.value();
  const int m = av.rows(), n = av.cols();
  if (key_valid && static_cast<int>(key_valid->size()) != n)
    throw ShapeError("softmax_rows: mask length must equal columns");
  Tensor<T> out({m, n});
  for (int i = 0; i < m; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (int j = 0; j < n; ++j) {
      if (key_valid && !(*key_valid)[j]) continue;
      mx = std::max(mx, av.at(i, j));
    }
    T sum = T(0);
    for (int j = 0; j < n; ++j) {
      T e = T(0);
      if (!key_valid || (*key_valid)[j]) e = std::exp(av.at(i, j) - mx);
      out.at(i, j) = e;
      sum += e;
    }
    if (sum > T(0)) {
      const T inv = T(1) / sum;
      for (int j = 0; j < n; ++j) out.at(i, j) *= inv;
    }
  }
  return a.tape->op(std::move(out), [ia = a.id, m, n](Tape<T>& t, int self) {
    const Tensor<T>& y = t.node(self).value;
    const Tensor<T>& g = t.node(self).grad;
    Tensor<T>& ga = t.grad_of(ia);
    for (int i = 0; i < m; ++i) {
      T dot = T(0);
      for (int j = 0; j < n; ++j) dot += g.at(i, j) * y.at(i, j);
      for (int j = 0; j < n; ++j) ga.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
    }
  });
}

// Per-row layer norm with learned gain/bias (1 x d each).
template <typename T>
Var<T> layernorm_rows(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  const Tensor<T>& xv = x.value();
  const int m = xv.rows(), n = xv.cols();
  if (gain.value().cols() != n || bias.value().cols() != n)
    throw ShapeError("layernorm_rows: gain/bias must be 1 x cols");
  Tensor<T> out({m, n});
  const auto& gv = gain.value().data;
  const auto& bv = bias.value().data;
  for (int i = 0; i < m; ++i) {
    T mean = T(0);
    for (int j = 0; j < n; ++j) mean += xv.at(i, j);
    mean /= static_cast<T>(n);
    T var = T(0);
    for (int j = 0; j < n; ++j) {
      const T d = xv.at(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<T>(n);
    const T inv = T(1) / std::sqrt(var + eps);
    for (int j = 0; j < n; ++j)
      out.at(i, j) = (xv.at(i, j) - mean) * inv * gv[static_cast<size_t>(j)] +
                     bv[static_cast<size_t>(j)];
  }
  return x.tape->op(
      std::move(out), [ix = x.id, ig = gain.id, ib = bias.id, m, n, eps](Tape<T>& t, int self) {
        const Tensor<T>& g = t.node(self).grad;
        const Tensor<T>& xv2 = t.node(ix).value;
        const auto& gv2 = t.node(ig).value.data;
        Tensor<T>& gx = t.grad_of(ix);
        Tensor<T>& gg = t.grad_of(ig);
        Tensor<T>& gb = t.grad_of(ib);
        std::vector<T> xhat(static_cast<size_t>(n));
        for (int i = 0; i < m; ++i) {
          T mean = T(0);
          for (int j = 0; j < n; ++j) mean += xv2.at(i, j);
          mean /= static_cast<T>(n);
          T var = T(0);
          for (int j = 0; j < n; ++j) {
            const T d = xv2.at(i, j) - mean;
            var += d * d;
          }
          var /= static_cast<T>(n);
          const T inv = T(1) / std::sqrt(var + eps);
          T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
          for (int j = 0; j < n; ++j) {
            xhat[static_cast<size_t>(j)] = (xv2.at(i, j) - mean) * inv;
            const T dxh = g.at(i, j) * gv2[static_cast<size_t>(j)];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[static_cast<size_t>(j)];
          }
          mean_dxhat /= static_cast<T>(n);
          mean_dxhat_xhat /= static_cast<T>(n);
          for (int j = 0; j < n; ++j) {
            const T dxh = g.at(i, j) * gv2[static_cast<size_t>(j)];
            gx.at(i, j) += inv * (dxh - mean_dxhat - xhat[static_cast<size_t>(j)] * mean_dxhat_xhat);
            gg.data[static_cast<size_t>(j)] += g.at(i, j) * xhat[static_cast<size_t>(j)];
            gb.data[static_cast<size_t>(j)] += g.at(i, j);
          }
        }
      });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  Tensor<T> out = x.value();
  const T inv_sqrt2 = T(0.7071067811865475244);
  for (auto& v : out.data) v = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  return x.tape->op(std::move(out), [ix = x.id](Tape<T>& t, int self) {
    const auto& g = t.node(self).grad.data;
    const auto& xv = t.node(ix).value.data;
    auto& gx = t.grad_of(ix).data;
    const T inv_sqrt2 = T(0.7071067811865475244);
    const T inv_sqrt2pi = T(0.3989422804014326779);
    for (size_t i = 0; i < g.size(); ++i) {
      const T v = xv[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

template <typename T>
Var<T> relu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data) v = std::max(v, T(0));
  return x.tape->op(std::move(out), [ix = x.id](Tape<T>& t, int self) {
    const auto& g = t.node(self).grad.data;
    const auto& xv = t.node(ix).value.data;
    auto& gx = t.grad_of(ix).data;
    for (size_t i = 0; i < g.size(); ++i)
      if (xv[i] > T(0)) gx[i] += g[i];
  });
}

template <typename T>
Var<T> sum_all(Var<T> x) {
  T s = T(0);
  for (T v : x.value().data) s += v;
  return x.tape->op(Tensor<T>::scalar(s), [ix = x.id](Tape<T>& t, int self) {
    const T g = t.node(self).grad.data[0];
    auto& gx = t.grad_of(ix).data;
    for (auto& v : gx) v += g;
  });
}

// Row-wise sum -> m x 1
template <typename T>
Var<T> row_sum(Var<T> x) {
  const Tensor<T>& xv = x.value();
  const int m = xv.rows(), n = xv.cols();
  Tensor<T> out({m, 1});
  for (int i = 0; i < m; ++i) {
    T s = T(0);
    for (int j = 0; j < n; ++j) s += xv.at(i, j);
    out.data[static_cast<size_t>(i)] = s;
  }
  return x.tape->op(std::move(out), [ix = x.id, m, n](Tape<T>& t, int self) {
    const auto& g = t.node(self).grad.data;
    Tensor<T>& gx = t.grad_of(ix);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) gx.at(i, j) += g[static_cast<size_t>(i)];
  });
}

// Mean over rows -> 1 x n. Optional row validity mask restricts to valid rows.
template <typename T>
Var<T> mean_over_rows(Var<T> x, const std::vector<uint8_t>* row_valid = nullptr) {
  const Tensor<T>& xv = x.value();
  const int m = xv.rows(), n = xv.cols();
  int count = 0;
  for (int i = 0; i < m; ++i)
    if (!row_valid || (*row_valid)[static_cast<size_t>(i)]) ++count;
  if (count == 0) throw ShapeError("mean_over_rows: no valid rows");
  Tensor<T> out({1, n});
  for (int i = 0; i < m; ++i) {
    if (row_valid && !(*row_valid)[static_cast<size_t>(i)]) continue;
    for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(j)] += xv.at(i, j);
  }
  const T inv = T(1) / static_cast<T>(count);
  for (auto& v : out.data) v *= inv;
  std::vector<uint8_t> mask_copy;
  if (row_valid) mask_copy = *row_valid;
  return x.tape->op(std::move(out),
                    [ix = x.id, m, n, inv, mask_copy](Tape<T>& t, int self) {
                      const auto& g = t.node(self).grad.data;
                      Tensor<T>& gx = t.grad_of(ix);
                      for (int i = 0; i < m; ++i) {
                        if (!mask_copy.empty() && !mask_copy[static_cast<size_t>(i)]) continue;
                        for (int j = 0; j < n; ++j)
                          gx.at(i, j) += g[static_cast<size_t>(j)] * inv;
                      }
                    });
}

// (B*s) x n -> B x n, mean over each consecutive block of s rows.
template <typename T>
Var<T> block_mean_rows(Var<T> x, int s) {
  const Tensor<T>& xv = x.value();
  const int m = xv.rows(), n = xv.cols();
  if (s <= 0 || m % s != 0) throw ShapeError("block_mean_rows: rows not divisible by block");
  const int blocks = m / s;
  Tensor<T> out({blocks, n});
  const T inv = T(1) / static_cast<T>(s);
  for (int b = 0; b < blocks; ++b)
    for (int r = 0; r < s; ++r)
      for (int j = 0; j < n; ++j) out.at(b, j) += xv.at(b * s + r, j) * inv;
  return x.tape->op(std::move(out), [ix = x.id, blocks, s, n, inv](Tape<T>& t, int self) {
    const Tensor<T>& g = t.node(self).grad;
    Tensor<T>& gx = t.grad_of(ix);
    for (int b = 0; b < blocks; ++b)
      for (int r = 0; r < s; ++r)
        for (int j = 0; j < n; ++j) gx.at(b * s + r, j) += g.at(b, j) * inv;
  });
}

// L2-normalize each row; zero rows are left as zeros via the epsilon floor.
template <typename T>
Var<T> l2norm_rows(Var<T> x, T eps = T(1e-12)) {
  const Tensor<T>& xv = x.value();
  const int m = xv.rows(), n = xv.cols();
  Tensor<T> out({m, n});
  for (int i = 0; i < m; ++i) {
    T s = T(0);
    for (int j = 0; j < n; ++j) s += xv.at(i, j) * xv.at(i, j);
    const T norm = std::max(std::sqrt(s), eps);
    for (int j = 0; j < n; ++j) out.at(i, j) = xv.at(i, j) / norm;
  }
  return x.tape->op(std::move(out), [ix = x.id, m, n, eps](Tape<T>& t, int self) {
    const Tensor<T>& y = t.node(self).value;
    const Tensor<T>& g = t.node(self).grad;
    const Tensor<T>& xv2 = t.node(ix).value;
    Tensor<T>& gx = t.grad_of(ix);
    for (int i = 0; i < m; ++i) {
      T s = T(0);
      for (int j = 0; j < n; ++j) s += xv2.at(i, j) * xv2.at(i, j);
      const T norm = std::max(std::sqrt(s), eps);
      T dot = T(0);
      for (int j = 0; j < n; ++j) dot += g.at(i, j) * y.at(i, j);
      for (int j = 0; j < n; ++j) gx.at(i, j) += (g.at(i, j) - y.at(i, j) * dot) / norm;
    }
  });
}

template <typename T>
Var<T> slice_rows(Var<T> x, int r0, int r1) {
  const Tensor<T>& xv = x.value();
  const int n = xv.cols();
  if (r0 < 0 || r1 > xv.rows() || r0 >= r1) throw ShapeError("slice_rows: bad range");
  Tensor<T> out({r1 - r0, n});
  std::copy(xv.data.begin() + static_cast<size_t>(r0) * n,
            xv.data.begin() + static_cast<size_t>(r1) * n, out.data.begin());
  return x.tape->op(std::move(out), [ix = x.id, r0, r1, n](Tape<T>& t, int self) {
    const auto& g = t.node(self).grad.data;
    Tensor<T>& gx = t.grad_of(ix);
    for (size_t i = 0; i < g.size(); ++i)
      gx.data[static_cast<size_t>(r0) * n + i] += g[i];
  });
}

template <typename T>
Var<T> slice_cols(Var<T> x, int c0, int c1) {
  const Tensor<T>& xv = x.value();
  const int m = xv.rows(), n = xv.cols();
  if (c0 < 0 || c1 > n || c0 >= c1) throw ShapeError("slice_cols: bad range");
  const int w = c1 - c0;
  Tensor<T> out({m, w});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j) out.at(i, j) = xv.at(i, c0 + j);
  return x.tape->op(std::move(out), [ix = x.id, m, w, c0](Tape<T>& t, int self) {
    const Tensor<T>& g = t.node(self).grad;
    Tensor<T>& gx = t.grad_of(ix);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j) gx.at(i, c0 + j) += g.at(i, j);
  });
}

template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty");
  Tape<T>& tape = *parts[0].tape;
  const int n = parts[0].cols();
  int m = 0;
  for (const auto& p : parts) {
    if (p.cols() != n) throw ShapeError("concat_rows: column mismatch");
    m += p.rows();
  }
  Tensor<T> out({m, n});
  size_t at = 0;
  std::vector<int> ids;
  std::vector<int> row_counts;
  for (const auto& p : parts) {
    const auto& d = p.value().data;
    std::copy(d.begin(), d.end(), out.data.begin() + at);
    at += d.size();
    ids.push_back(p.id);
    row_counts.push_back(p.rows());
  }
  return tape.op(std::move(out), [ids, row_counts, n](Tape<T>& t, int self) {
    const Tensor<T>& g = t.node(self).grad;
    int r = 0;
    for (size_t k = 0; k < ids.size(); ++k) {
      Tensor<T>& gp = t.grad_of(ids[k]);
      for (int i = 0; i < row_counts[k]; ++i)
        for (int j = 0; j < n; ++j) gp.at(i, j) += g.at(r + i, j);
      r += row_counts[k];
    }
  });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: empty");
  Tape<T>& tape = *parts[0].tape;
  const int m = parts[0].rows();
  int n = 0;
  for (const auto& p : parts) {
    if (p.rows() != m) throw ShapeError("concat_cols: row mismatch");
    n += p.cols();
  }
  Tensor<T> out({m, n});
  std::vector<int> ids, widths;
  int c = 0;
  for (const auto& p : parts) {
    const Tensor<T>& pv = p.value();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < pv.cols(); ++j) out.at(i, c + j) = pv.at(i, j);
    c += pv.cols();
    ids.push_back(p.id);
    widths.push_back(pv.cols());
  }
  return tape.op(std::move(out), [ids, widths, m](Tape<T>& t, int self) {
    const Tensor<T>& g = t.node(self).grad;
    int c2 = 0;
    for (size_t k = 0; k < ids.size(); ++k) {
      Tensor<T>& gp = t.grad_of(ids[k]);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < widths[k]; ++j) gp.at(i, j) += g.at(i, c2 + j);
      c2 += widths[k];
    }
  });
}

template <typename T>
Var<T> gather_rows(Var<T> x, std::vector<int> idx) {
  const Tensor<T>& xv = x.value();
  const int n = xv.cols();
  Tensor<T> out({static_cast<int>(idx.size()), n});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= xv.rows()) throw ShapeError("gather_rows: index out of range");
    for (int j = 0; j < n; ++j) out.at(static_cast<int>(i), j) = xv.at(idx[i], j);
  }
  return x.tape->op(std::move(out), [ix = x.id, idx = std::move(idx), n](Tape<T>& t, int self) {
    const Tensor<T>& g = t.node(self).grad;
    Tensor<T>& gx = t.grad_of(ix);
    for (size_t i = 0; i < idx.size(); ++i)
      for (int j = 0; j < n; ++j) gx.at(idx[i], j) += g.at(static_cast<int>(i), j);
  });
}

// Gather scalar entries (r, c) from a matrix into an m x 1 column.
template <typename T>
Var<T> gather_entries(Var<T> x, std::vector<std::pair<int, int>> rc) {
  const Tensor<T>& xv = x.value();
  Tensor<T> out({static_cast<int>(rc.size()), 1});
  for (size_t i = 0; i < rc.size(); ++i) {
    const auto [r, c] = rc[i];
    if (r < 0 || r >= xv.rows() || c < 0 || c >= xv.cols())
      throw ShapeError("gather_entries: index out of range");
    out.data[i] = xv.at(r, c);
  }
  return x.tape->op(std::move(out), [ix = x.id, rc = std::move(rc)](Tape<T>& t, int self) {
    const auto& g = t.node(self).grad.data;
    Tensor<T>& gx = t.grad_of(ix);
    for (size_t i = 0; i < rc.size(); ++i) gx.at(rc[i].first, rc[i].second) += g[i];
  });
}

// Cross-entropy of softmax(logits) against a hard label; logits is 1 x C.
template <typename T>
Var<T> cross_entropy_logits(Var<T> logits, int label) {
  const Tensor<T>& lv = logits.value();
  if (lv.rows() != 1) throw ShapeError("cross_entropy_logits: expected 1 x C logits");
  const int c = lv.cols();
  if (label < 0 || label >= c) throw ShapeError("cross_entropy_logits: label out of range");
  T mx = lv.data[0];
  for (int j = 1; j < c; ++j) mx = std::max(mx, lv.data[static_cast<size_t>(j)]);
  T sum = T(0);
  for (int j = 0; j < c; ++j) sum += std::exp(lv.data[static_cast<size_t>(j)] - mx);
  const T loss = mx + std::log(sum) - lv.data[static_cast<size_t>(label)];
  return logits.tape->op(Tensor<T>::scalar(loss), [il = logits.id, label, c](Tape<T>& t, int self) {
    const T g = t.node(self).grad.data[0];
    const auto& lv2 = t.node(il).value.data;
    auto& gl = t.grad_of(il).data;
    T mx2 = lv2[0];
    for (int j = 1; j < c; ++j) mx2 = std::max(mx2, lv2[static_cast<size_t>(j)]);
    T sum2 = T(0);
    for (int j = 0; j < c; ++j) sum2 += std::exp(lv2[static_cast<size_t>(j)] - mx2);
    for (int j = 0; j < c; ++j) {
      const T p = std::exp(lv2[static_cast<size_t>(j)] - mx2) / sum2;
      gl[static_cast<size_t>(j)] += g * (p - (j == label ? T(1) : T(0)));
    }
  });
}

// ---------------------------------------------------------------------------
// Fused scaled-dot-product attention over independent blocks of rows.
// q, k, v are (blocks*s) x d; attention never crosses block boundaries.
// key_valid (length blocks*s) removes positions from the key side.
// attn_row0_avg, when given, receives the head-averaged attention row of each
// block's first query position (blocks x s), for introspection.
// ---------------------------------------------------------------------------

template <typename T>
Var<T> block_sdpa(Var<T> q, Var<T> k, Var<T> v, int heads, int s,
                  const std::vector<uint8_t>* key_valid = nullptr,
                  Tensor<T>* attn_row0_avg = nullptr) {
  const Tensor<T>& qv = q.value();
  detail::check_same_shape(qv, k.value(), "block_sdpa");
  detail::check_same_shape(qv, v.value(), "block_sdpa");
  const int rows = qv.rows(), d = qv.cols();
  if (s <= 0 || rows % s != 0) throw ShapeError("block_sdpa: rows not divisible by block");
  if (heads <= 0 || d % heads != 0) throw ShapeError("block_sdpa: dim not divisible by heads");
  if (key_valid && static_cast<int>(key_valid->size()) != rows)
    throw ShapeError("block_sdpa: mask length mismatch");
  const int blocks = rows / s;
  const int dh = d / heads;
  const T att_scale = T(1) / std::sqrt(static_cast<T>(dh));

  auto alpha = std::make_shared<std::vector<T>>(
      static_cast<size_t>(blocks) * heads * s * s, T(0));
  const Tensor<T>& kv = k.value();
  const Tensor<T>& vv = v.value();
  Tensor<T> out({rows, d});
  if (attn_row0_avg) *attn_row0_avg = Tensor<T>({blocks, s});

  std::vector<T> logits(static_cast<size_t>(s));
  for (int b = 0; b < blocks; ++b) {
    const int base = b * s;
    for (int h = 0; h < heads; ++h) {
      const int c0 = h * dh;
      T* a = alpha->data() + (static_cast<size_t>(b) * heads + h) * s * s;
      for (int i = 0; i < s; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j < s; ++j) {
          if (key_valid && !(*key_valid)[static_cast<size_t>(base + j)]) {
            logits[static_cast<size_t>(j)] = -std::numeric_limits<T>::infinity();
            continue;
          }
          T acc = T(0);
          for (int p = 0; p < dh; ++p)
            acc += qv.at(base + i, c0 + p) * kv.at(base + j, c0 + p);
          logits[static_cast<size_t>(j)] = acc * att_scale;
          mx = std::max(mx, logits[static_cast<size_t>(j)]);
        }
        T sum = T(0);
        for (int j = 0; j < s; ++j) {
          T e = T(0);
          if (std::isfinite(static_cast<double>(logits[static_cast<size_t>(j)])))
            e = std::exp(logits[static_cast<size_t>(j)] - mx);
          a[static_cast<size_t>(i) * s + j] = e;
          sum += e;
        }
        const T inv = sum > T(0) ? T(1) / sum : T(0);
        for (int j = 0; j < s; ++j) {
          const T w = a[static_cast<size_t>(i) * s + j] * inv;
          a[static_cast<size_t>(i) * s + j] = w;
          if (w != T(0))
            for (int p = 0; p < dh; ++p)
              out.at(base + i, c0 + p) += w * vv.at(base + j, c0 + p);
        }
      }
    }
    if (attn_row0_avg) {
      for (int j = 0; j < s; ++j) {
        T acc = T(0);
        for (int h = 0; h < heads; ++h)
          acc += (*alpha)[(static_cast<size_t>(b) * heads + h) * s * s + j];
        attn_row0_avg->at(b, j) = acc / static_cast<T>(heads);
      }
    }
  }

  return q.tape->op(
      std::move(out),
      [iq = q.id, ik = k.id, iv = v.id, alpha, blocks, heads, s, dh, att_scale](
          Tape<T>& t, int self) {
        const Tensor<T>& g = t.node(self).grad;
        const Tensor<T>& qv2 = t.node(iq).value;
        const Tensor<T>& kv2 = t.node(ik).value;
        const Tensor<T>& vv2 = t.node(iv).value;
        Tensor<T>& gq = t.grad_of(iq);
        Tensor<T>& gk = t.grad_of(ik);
        Tensor<T>& gv = t.grad_of(iv);
        std::vector<T> dalpha(static_cast<size_t>(s) * s);
        for (int b = 0; b < blocks; ++b) {
          const int base = b * s;
          for (int h = 0; h < heads; ++h) {
            const int c0 = h * dh;
            const T* a = alpha->data() + (static_cast<size_t>(b) * heads + h) * s * s;
            // dV and dAlpha
            for (int i = 0; i < s; ++i) {
              for (int j = 0; j < s; ++j) {
                const T w = a[static_cast<size_t>(i) * s + j];
                T dot = T(0);
                for (int p = 0; p < dh; ++p)
                  dot += g.at(base + i, c0 + p) * vv2.at(base + j, c0 + p);
                dalpha[static_cast<size_t>(i) * s + j] = dot;
                if (w != T(0))
                  for (int p = 0; p < dh; ++p)
                    gv.at(base + j, c0 + p) += w * g.at(base + i, c0 + p);
              }
            }
            // dLogits through softmax, then into Q and K
            for (int i = 0; i < s; ++i) {
              T rowdot = T(0);
              for (int j = 0; j < s; ++j)
                rowdot += dalpha[static_cast<size_t>(i) * s + j] * a[static_cast<size_t>(i) * s + j];
              for (int j = 0; j < s; ++j) {
                const T ds = a[static_cast<size_t>(i) * s + j] *
                             (dalpha[static_cast<size_t>(i) * s + j] - rowdot) * att_scale;
                if (ds == T(0)) continue;
                for (int p = 0; p < dh; ++p) {
                  gq.at(base + i, c0 + p) += ds * kv2.at(base + j, c0 + p);
                  gk.at(base + j, c0 + p) += ds * qv2.at(base + i, c0 + p);
                }
              }
            }
          }
        }
      });
}

// Inserts a shared class token before each block of s rows:
// (B*s) x d -> (B*(s+1)) x d with cls at the start of every block.
template <typename T>
Var<T> prepend_cls_blocks(Var<T> tokens, Var<T> cls, int s) {
  const Tensor<T>& tv = tokens.value();
  const int m = tv.rows(), d = tv.cols();
  if (s <= 0 || m % s != 0) throw ShapeError("prepend_cls_blocks: rows not divisible by block");
  if (cls.value().rows() != 1 || cls.value().cols() != d)
    throw ShapeError("prepend_cls_blocks: class token must be 1 x d");
  const int blocks = m / s;
  Tensor<T> out({blocks * (s + 1), d});
  const auto& cv = cls.value().data;
  for (int b = 0; b < blocks; ++b) {
    for (int j = 0; j < d; ++j) out.at(b * (s + 1), j) = cv[static_cast<size_t>(j)];
    for (int r = 0; r < s; ++r)
      for (int j = 0; j < d; ++j) out.at(b * (s + 1) + 1 + r, j) = tv.at(b * s + r, j);
  }
  return tokens.tape->op(std::move(out),
                         [it = tokens.id, ic = cls.id, blocks, s, d](Tape<T>& t, int self) {
                           const Tensor<T>& g = t.node(self).grad;
                           Tensor<T>& gt = t.grad_of(it);
                           Tensor<T>& gc = t.grad_of(ic);
                           for (int b = 0; b < blocks; ++b) {
                             for (int j = 0; j < d; ++j)
                               gc.data[static_cast<size_t>(j)] += g.at(b * (s + 1), j);
                             for (int r = 0; r < s; ++r)
                               for (int j = 0; j < d; ++j)
                                 gt.at(b * s + r, j) += g.at(b * (s + 1) + 1 + r, j);
                           }
                         });
}

// ---------------------------------------------------------------------------
// Transformer building blocks.
// ---------------------------------------------------------------------------

template <typename T>
struct AttnWeights {
  Var<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
struct LayerWeights {
  Var<T> ln1_g, ln1_b;
  AttnWeights<T> attn;
  Var<T> ln2_g, ln2_b;
  Var<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

template <typename T>
struct AttentionOut {
  Var<T> tokens;  // same shape as input
  Var<T> attn;    // head-averaged row-stochastic (s x s)
};

// Standard multi-head self-attention over one sequence. Also returns the
// head-averaged attention matrix as a differentiable value.
template <typename T>
AttentionOut<T> multi_head_attention(Var<T> x, const AttnWeights<T>& w, int heads) {
  const int s = x.rows(), d = x.cols();
  if (s < 1) throw ShapeError("multi_head_attention: empty sequence");
  if (heads <= 0 || d % heads != 0)
    throw ShapeError("multi_head_attention: dim not divisible by heads");
  const int dh = d / heads;
  const T att_scale = T(1) / std::sqrt(static_cast<T>(dh));

  Var<T> qs = linear(x, w.wq, w.bq);
  Var<T> ks = linear(x, w.wk, w.bk);
  Var<T> vs = linear(x, w.wv, w.bv);

  std::vector<Var<T>> head_outs;
  Var<T> attn_sum;
  for (int h = 0; h < heads; ++h) {
    Var<T> qh = slice_cols(qs, h * dh, (h + 1) * dh);
    Var<T> kh = slice_cols(ks, h * dh, (h + 1) * dh);
    Var<T> vh = slice_cols(vs, h * dh, (h + 1) * dh);
    Var<T> logits = scale(matmul(qh, kh, false, true), att_scale);
    Var<T> alpha = softmax_rows(logits);
    head_outs.push_back(matmul(alpha, vh));
    attn_sum = (h == 0) ? alpha : add(attn_sum, alpha);
  }
  Var<T> merged = (heads == 1) ? head_outs[0] : concat_cols(head_outs);
  Var<T> out = linear(merged, w.wo, w.bo);
  Var<T> attn_avg = scale(attn_sum, T(1) / static_cast<T>(heads));
  return {out, attn_avg};
}

template <typename T>
struct LayerOut {
  Var<T> tokens;
  Var<T> attn;  // head-averaged attention of this layer's MHA
};

// Pre-norm transformer layer: x + MHA(LN(x)), then + MLP(LN(.)) with GELU
// and 4x hidden expansion.
template <typename T>
LayerOut<T> transformer_layer(Var<T> x, const LayerWeights<T>& w, int heads) {
  Var<T> h1 = layernorm_rows(x, w.ln1_g, w.ln1_b);
  AttentionOut<T> att = multi_head_attention(h1, w.attn, heads);
  Var<T> x1 = add(x, att.tokens);
  Var<T> h2 = layernorm_rows(x1, w.ln2_g, w.ln2_b);
  Var<T> m = linear(gelu(linear(h2, w.mlp_w1, w.mlp_b1)), w.mlp_w2, w.mlp_b2);
  return {add(x1, m), att.attn};
}

// Same block, but attention runs independently per block of s rows via the
// fused kernel. Used by the reranker where many short sequences share weights.
template <typename T>
Var<T> transformer_layer_blocked(Var<T> x, const LayerWeights<T>& w, int heads, int s,
                                 const std::vector<uint8_t>* key_valid = nullptr,
                                 Tensor<T>* attn_row0_avg = nullptr) {
  Var<T> h1 = layernorm_rows(x, w.ln1_g, w.ln1_b);
  Var<T> qs = linear(h1, w.attn.wq, w.attn.bq);
  Var<T> ks = linear(h1, w.attn.wk, w.attn.bk);
  Var<T> vs = linear(h1, w.attn.wv, w.attn.bv);
  Var<T> sd = block_sdpa(qs, ks, vs, heads, s, key_valid, attn_row0_avg);
  Var<T> x1 = add(x, linear(sd, w.attn.wo, w.attn.bo));
  Var<T> h2 = layernorm_rows(x1, w.ln2_g, w.ln2_b);
  Var<T> m = linear(gelu(linear(h2, w.mlp_w1, w.mlp_b1)), w.mlp_w2, w.mlp_b2);
  return add(x1, m);
}

// ---------------------------------------------------------------------------
// Parameter binding and layer parameter registration.
// ---------------------------------------------------------------------------

// Named gradient buffers, detached from the parameters themselves so many
// graphs can differentiate the same ParamSet concurrently.
template <typename T>
using GradMap = std::map<std::string, Tensor<T>>;

// Binds a ParamSet to one tape. Trainable names become gradient-accumulating
// leaves; everything else enters the graph as a constant.
template <typename T>
class BoundParams {
 public:
  BoundParams(Tape<T>& tape, ParamSet<T>& set,
              std::function<bool(const std::string&)> trainable = nullptr)
      : tape_(&tape), set_(&set), const_set_(nullptr), trainable_(std::move(trainable)) {}

  // Read-only binding: every parameter enters the graph as a constant.
  BoundParams(Tape<T>& tape, const ParamSet<T>& set)
      : tape_(&tape), set_(nullptr), const_set_(&set) {}

  // Read-only parameters with gradients routed into an external map. Only
  // names passing the trainable filter receive gradient buffers.
  BoundParams(Tape<T>& tape, const ParamSet<T>& set, GradMap<T>* sink,
              std::function<bool(const std::string&)> trainable = nullptr)
      : tape_(&tape), set_(nullptr), const_set_(&set), sink_(sink),
        trainable_(std::move(trainable)) {}

  Var<T> operator()(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return Var<T>{tape_, it->second};
    Var<T> v;
    if (set_) {
      Parameter<T>& p = set_->at(name);
      v = (!trainable_ || trainable_(name)) ? tape_->param(p) : tape_->constant(p.value);
    } else if (sink_) {
      const Parameter<T>& p = const_set_->at(name);
      if (!trainable_ || trainable_(name))
        v = tape_->leaf(p.value, &(*sink_)[name]);  // std::map: stable addresses
      else
        v = tape_->constant(p.value);
    } else {
      v = tape_->constant(const_set_->at(name).value);
    }
    cache_.emplace(name, v.id);
    return v;
  }

  AttnWeights<T> attn_weights(const std::string& prefix) {
    return AttnWeights<T>{(*this)(prefix + ".wq"), (*this)(prefix + ".bq"),
                          (*this)(prefix + ".wk"), (*this)(prefix + ".bk"),
                          (*this)(prefix + ".wv"), (*this)(prefix + ".bv"),
                          (*this)(prefix + ".wo"), (*this)(prefix + ".bo")};
  }

  LayerWeights<T> layer_weights(const std::string& prefix) {
    return LayerWeights<T>{(*this)(prefix + ".ln1.g"),  (*this)(prefix + ".ln1.b"),
                           attn_weights(prefix + ".attn"),
                           (*this)(prefix + ".ln2.g"),  (*this)(prefix + ".ln2.b"),
                           (*this)(prefix + ".mlp.w1"), (*this)(prefix + ".mlp.b1"),
                           (*this)(prefix + ".mlp.w2"), (*this)(prefix + ".mlp.b2")};
  }

  Tape<T>& tape() { return *tape_; }

 private:
  Tape<T>* tape_;
  ParamSet<T>* set_;
  const ParamSet<T>* const_set_;
  GradMap<T>* sink_ = nullptr;
  std::function<bool(const std::string&)> trainable_;
  std::map<std::string, int> cache_;
};

// Registers one transformer layer's parameters (ViT-style init).
template <typename T>
void add_layer_params(ParamSet<T>& ps, const std::string& prefix, int d, std::mt19937_64& rng,
                      T init_std = T(0.02)) {
  ps.add(prefix + ".ln1.g", Tensor<T>::full({1, d}, T(1)));
  ps.add(prefix + ".ln1.b", Tensor<T>::zeros({1, d}));
  for (const char* w : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo"})
    ps.add(prefix + w, randn<T>({d, d}, rng, init_std));
  for (const char* b : {".attn.bq", ".attn.bk", ".attn.bv", ".attn.bo"})
    ps.add(prefix + b, Tensor<T>::zeros({1, d}));
  ps.add(prefix + ".ln2.g", Tensor<T>::full({1, d}, T(1)));
  ps.add(prefix + ".ln2.b", Tensor<T>::zeros({1, d}));
  ps.add(prefix + ".mlp.w1", randn<T>({d, 4 * d}, rng, init_std));
  ps.add(prefix + ".mlp.b1", Tensor<T>::zeros({1, 4 * d}));
  ps.add(prefix + ".mlp.w2", randn<T>({4 * d, d}, rng, init_std));
  ps.add(prefix + ".mlp.b2", Tensor<T>::zeros({1, d}));
}

// Fixed sinusoidal position table (positions x dim).
template <typename T>
Tensor<T> sinusoidal_position_table(int positions, int dim) {
  Tensor<T> out({positions, dim});
  for (int pos = 0; pos < positions; ++pos) {
    for (int i = 0; i < dim; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / dim);
      out.at(pos, i) = static_cast<T>(std::sin(pos * freq));
      if (i + 1 < dim) out.at(pos, i + 1) = static_cast<T>(std::cos(pos * freq));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient checking: analytic reverse-mode vs central finite differences on a
// sampled subset of parameter coordinates. Use T = double.
// ---------------------------------------------------------------------------

template <typename T>
T gradient_check(const std::function<Var<T>(BoundParams<T>&)>& loss_fn, ParamSet<T>& params,
                 T eps, uint64_t seed = 0, int coords_per_tensor = 4) {
  auto eval = [&]() -> T {
    Tape<T> tape;
    BoundParams<T> bound(tape, params);
    Var<T> loss = loss_fn(bound);
    const T v = loss.value().data[0];
    if (!std::isfinite(static_cast<double>(v)))
      throw Error("gradient_check aborted: non-finite loss");
    return v;
  };

  params.zero_grad();
  {
    Tape<T> tape;
    BoundParams<T> bound(tape, params);
    Var<T> loss = loss_fn(bound);
    if (!std::isfinite(static_cast<double>(loss.value().data[0])))
      throw Error("gradient_check aborted: non-finite loss");
    tape.backward(loss);
  }

  std::mt19937_64 rng(mix64(seed ^ 0x67ad1eULL));
  T worst = T(0);
  for (auto& [name, p] : params) {
    const size_t n = p.value.numel();
    if (n == 0) continue;
    std::vector<size_t> picks;
    if (static_cast<int>(n) <= coords_per_tensor) {
      for (size_t i = 0; i < n; ++i) picks.push_back(i);
    } else {
      std::uniform_int_distribution<size_t> dist(0, n - 1);
      for (int i = 0; i < coords_per_tensor; ++i) picks.push_back(dist(rng));
    }
    for (size_t ci : picks) {
      const T saved = p.value.data[ci];
      p.value.data[ci] = saved + eps;
      const T fp = eval();
      p.value.data[ci] = saved - eps;
      const T fm = eval();
      p.value.data[ci] = saved;
      const T numeric = (fp - fm) / (T(2) * eps);
      const T analytic = p.grad.data[ci];
      const T rel = std::abs(analytic - numeric) / std::max(T(1), std::abs(numeric));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace vpr
