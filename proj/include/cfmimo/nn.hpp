// Minimal reverse-mode autodiff engine and layer library: dense, 2-D
// convolution, LeakyReLU, softmax, batch normalization, dropout, and an
// Adam optimizer with decoupled weight decay. Double precision throughout.
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "cfmimo/common.hpp"
#include "cfmimo/rng.hpp"

namespace cfmimo::nn {

using EMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

struct Tensor {
  std::vector<int> shape;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    v.assign(static_cast<std::size_t>(numel_of(shape)), 0.0);
  }
  Tensor(std::vector<int> s, std::vector<double> data)
      : shape(std::move(s)), v(std::move(data)) {
    if (static_cast<long>(v.size()) != numel_of(shape))
      throw ConfigError("tensor: value count does not match shape");
  }

  static long numel_of(const std::vector<int>& s) {
    long n = 1;
    for (int d : s) n *= d;
    return n;
  }
  long numel() const { return static_cast<long>(v.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(shape.size()); }
};

class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;  // empty until touched in backward
    std::vector<int> parents;
    std::function<void(Tape&, int)> back;  // pulls grad(id) into parents
    bool needs_grad = false;
  };

  bool check_finite = true;

  int constant(Tensor t) { return push(std::move(t), {}, nullptr, false); }
  int leaf(Tensor t) { return push(std::move(t), {}, nullptr, true); }

  int op(Tensor t, std::vector<int> parents,
         std::function<void(Tape&, int)> back) {
    bool ng = false;
    for (int p : parents) ng = ng || nodes[static_cast<std::size_t>(p)].needs_grad;
    return push(std::move(t), std::move(parents), std::move(back), ng);
  }

  const Tensor& val(int id) const {
    return nodes[static_cast<std::size_t>(id)].value;
  }
  bool needs_grad(int id) const {
    return nodes[static_cast<std::size_t>(id)].needs_grad;
  }
  // gradient accumulator, allocated on first access
  Tensor& grad(int id) {
    Node& n = nodes[static_cast<std::size_t>(id)];
    if (n.grad.v.empty()) n.grad = Tensor(n.value.shape);
    return n.grad;
  }
  bool grad_ready(int id) const {
    return !nodes[static_cast<std::size_t>(id)].grad.v.empty();
  }

  // Reverse pass from a scalar loss node. Nodes are created in forward order,
  // so descending ids are a reverse topological order; each node is visited
  // exactly once.
  void backward(int loss) {
    Node& ln = nodes[static_cast<std::size_t>(loss)];
    if (ln.value.numel() != 1)
      throw NumericError("backward: loss must be scalar");
    grad(loss).v[0] = 1.0;
    for (int id = loss; id >= 0; --id) {
      Node& n = nodes[static_cast<std::size_t>(id)];
      if (!n.needs_grad || n.grad.v.empty() || !n.back) continue;
      n.back(*this, id);
    }
  }

  std::vector<Node> nodes;

 private:
  int push(Tensor t, std::vector<int> parents,
           std::function<void(Tape&, int)> back, bool needs) {
    if (check_finite)
      for (double x : t.v)
        if (!std::isfinite(x))
          throw NumericError("non-finite value in forward pass");
    Node n;
    n.value = std::move(t);
    n.parents = std::move(parents);
    n.back = std::move(back);
    n.needs_grad = needs;
    nodes.push_back(std::move(n));
    return static_cast<int>(nodes.size()) - 1;
  }
};

namespace detail {

inline void accum(Tape& t, int id, const std::vector<double>& delta) {
  if (!t.needs_grad(id)) return;
  auto& g = t.grad(id).v;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and shape ops

inline int add(Tape& t, int a, int b) {
  Tensor y = t.val(a);
  const auto& bv = t.val(b).v;
  if (bv.size() != y.v.size()) throw ConfigError("add: shape mismatch");
  for (std::size_t i = 0; i < y.v.size(); ++i) y.v[i] += bv[i];
  return t.op(std::move(y), {a, b}, [a, b](Tape& t, int id) {
    detail::accum(t, a, t.grad(id).v);
    detail::accum(t, b, t.grad(id).v);
  });
}

// a + alpha * b
inline int add_scaled(Tape& t, int a, int b, double alpha) {
  Tensor y = t.val(a);
  const auto& bv = t.val(b).v;
  if (bv.size() != y.v.size()) throw ConfigError("add_scaled: shape mismatch");
  for (std::size_t i = 0; i < y.v.size(); ++i) y.v[i] += alpha * bv[i];
  return t.op(std::move(y), {a, b}, [a, b, alpha](Tape& t, int id) {
    const auto& g = t.grad(id).v;
    detail::accum(t, a, g);
    if (t.needs_grad(b)) {
      auto& gb = t.grad(b).v;
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += alpha * g[i];
    }
  });
}

inline int mul(Tape& t, int a, int b) {
  Tensor y = t.val(a);
  const auto& bv = t.val(b).v;
  if (bv.size() != y.v.size()) throw ConfigError("mul: shape mismatch");
  for (std::size_t i = 0; i < y.v.size(); ++i) y.v[i] *= bv[i];
  return t.op(std::move(y), {a, b}, [a, b](Tape& t, int id) {
    const auto& g = t.grad(id).v;
    const auto& av = t.val(a).v;
    const auto& bv = t.val(b).v;
    if (t.needs_grad(a)) {
      auto& ga = t.grad(a).v;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.needs_grad(b)) {
      auto& gb = t.grad(b).v;
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline int scale(Tape& t, int a, double c) {
  Tensor y = t.val(a);
  for (double& x : y.v) x *= c;
  return t.op(std::move(y), {a}, [a, c](Tape& t, int id) {
    if (!t.needs_grad(a)) return;
    const auto& g = t.grad(id).v;
    auto& ga = t.grad(a).v;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

inline int add_scalar(Tape& t, int a, double c) {
  Tensor y = t.val(a);
  for (double& x : y.v) x += c;
  return t.op(std::move(y), {a}, [a](Tape& t, int id) {
    detail::accum(t, a, t.grad(id).v);
  });
}

inline int log_op(Tape& t, int a) {
  Tensor y = t.val(a);
  for (double& x : y.v) {
    if (x <= 0.0) throw NumericError("log: non-positive input");
    x = std::log(x);
  }
  return t.op(std::move(y), {a}, [a](Tape& t, int id) {
    if (!t.needs_grad(a)) return;
    const auto& g = t.grad(id).v;
    const auto& av = t.val(a).v;
    auto& ga = t.grad(a).v;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / av[i];
  });
}

inline int rsqrt(Tape& t, int a) {
  Tensor y = t.val(a);
  for (double& x : y.v) {
    if (x <= 0.0) throw NumericError("rsqrt: non-positive input");
    x = 1.0 / std::sqrt(x);
  }
  return t.op(std::move(y), {a}, [a](Tape& t, int id) {
    if (!t.needs_grad(a)) return;
    const auto& g = t.grad(id).v;
    const auto& yv = t.val(id).v;
    auto& ga = t.grad(a).v;
    for (std::size_t i = 0; i < g.size(); ++i)
      ga[i] += -0.5 * yv[i] * yv[i] * yv[i] * g[i];
  });
}

inline int reshape(Tape& t, int a, std::vector<int> shape) {
  if (Tensor::numel_of(shape) != t.val(a).numel())
    throw ConfigError("reshape: element count mismatch");
  Tensor y(std::move(shape), t.val(a).v);
  return t.op(std::move(y), {a}, [a](Tape& t, int id) {
    detail::accum(t, a, t.grad(id).v);
  });
}

inline int leaky_relu(Tape& t, int a, double slope = 0.01) {
  Tensor y = t.val(a);
  for (double& x : y.v)
    if (x < 0.0) x *= slope;
  return t.op(std::move(y), {a}, [a, slope](Tape& t, int id) {
    if (!t.needs_grad(a)) return;
    const auto& g = t.grad(id).v;
    const auto& av = t.val(a).v;
    auto& ga = t.grad(a).v;
    for (std::size_t i = 0; i < g.size(); ++i)
      ga[i] += g[i] * (av[i] >= 0.0 ? 1.0 : slope);
  });
}

// softmax over the last axis of a rank-2 tensor
inline int softmax(Tape& t, int a) {
  const Tensor& x = t.val(a);
  if (x.rank() != 2) throw ConfigError("softmax: rank-2 input required");
  const int rows = x.dim(0), cols = x.dim(1);
  Tensor y = x;
  for (int r = 0; r < rows; ++r) {
    double* p = y.v.data() + static_cast<std::size_t>(r) * cols;
    const double mx = *std::max_element(p, p + cols);
    double sum = 0.0;
    for (int c = 0; c < cols; ++c) {
      p[c] = std::exp(p[c] - mx);
      sum += p[c];
    }
    for (int c = 0; c < cols; ++c) p[c] /= sum;
  }
  return t.op(std::move(y), {a}, [a, rows, cols](Tape& t, int id) {
    if (!t.needs_grad(a)) return;
    const auto& g = t.grad(id).v;
    const auto& yv = t.val(id).v;
    auto& ga = t.grad(a).v;
    for (int r = 0; r < rows; ++r) {
      const std::size_t off = static_cast<std::size_t>(r) * cols;
      double dot = 0.0;
      for (int c = 0; c < cols; ++c) dot += g[off + c] * yv[off + c];
      for (int c = 0; c < cols; ++c)
        ga[off + c] += yv[off + c] * (g[off + c] - dot);
    }
  });
}

// sum over one axis
inline int reduce_sum(Tape& t, int a, int axis) {
  const Tensor& x = t.val(a);
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank()) throw ConfigError("reduce_sum: bad axis");
  long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const long n = x.dim(axis);
  std::vector<int> yshape;
  for (int i = 0; i < x.rank(); ++i)
    if (i != axis) yshape.push_back(x.dim(i));
  if (yshape.empty()) yshape.push_back(1);
  Tensor y(yshape);
  for (long o = 0; o < outer; ++o)
    for (long k = 0; k < n; ++k) {
      const double* src = x.v.data() + (o * n + k) * inner;
      double* dst = y.v.data() + o * inner;
      for (long i = 0; i < inner; ++i) dst[i] += src[i];
    }
  return t.op(std::move(y), {a}, [a, outer, n, inner](Tape& t, int id) {
    if (!t.needs_grad(a)) return;
    const auto& g = t.grad(id).v;
    auto& ga = t.grad(a).v;
    for (long o = 0; o < outer; ++o)
      for (long k = 0; k < n; ++k) {
        double* dst = ga.data() + (o * n + k) * inner;
        const double* src = g.data() + o * inner;
        for (long i = 0; i < inner; ++i) dst[i] += src[i];
      }
  });
}

// sum over all axes but the first: (B, ...) -> (B)
inline int reduce_tail(Tape& t, int a) {
  const Tensor& x = t.val(a);
  const int b = x.dim(0);
  const long inner = x.numel() / b;
  Tensor y({b});
  for (int r = 0; r < b; ++r) {
    const double* src = x.v.data() + r * inner;
    double acc = 0.0;
    for (long i = 0; i < inner; ++i) acc += src[i];
    y.v[static_cast<std::size_t>(r)] = acc;
  }
  return t.op(std::move(y), {a}, [a, b, inner](Tape& t, int id) {
    if (!t.needs_grad(a)) return;
    const auto& g = t.grad(id).v;
    auto& ga = t.grad(a).v;
    for (int r = 0; r < b; ++r) {
      double* dst = ga.data() + r * inner;
      for (long i = 0; i < inner; ++i) dst[i] += g[static_cast<std::size_t>(r)];
    }
  });
}

inline int mean_all(Tape& t, int a) {
  const Tensor& x = t.val(a);
  const double inv = 1.0 / static_cast<double>(x.numel());
  Tensor y({1});
  y.v[0] = std::accumulate(x.v.begin(), x.v.end(), 0.0) * inv;
  return t.op(std::move(y), {a}, [a, inv](Tape& t, int id) {
    if (!t.needs_grad(a)) return;
    const double g = t.grad(id).v[0] * inv;
    auto& ga = t.grad(a).v;
    for (double& x : ga) x += g;
  });
}

// y[r, i] = x[r, idx[i]] on rank-2 input
inline int gather_cols(Tape& t, int a, std::vector<int> idx) {
  const Tensor& x = t.val(a);
  if (x.rank() != 2) throw ConfigError("gather_cols: rank-2 input required");
  const int rows = x.dim(0), cols = x.dim(1);
  for (int i : idx)
    if (i < 0 || i >= cols) throw ConfigError("gather_cols: index out of range");
  const int n = static_cast<int>(idx.size());
  Tensor y({rows, n});
  for (int r = 0; r < rows; ++r)
    for (int i = 0; i < n; ++i)
      y.v[static_cast<std::size_t>(r) * n + i] =
          x.v[static_cast<std::size_t>(r) * cols + idx[static_cast<std::size_t>(i)]];
  return t.op(std::move(y), {a},
              [a, rows, cols, n, idx = std::move(idx)](Tape& t, int id) {
                if (!t.needs_grad(a)) return;
                const auto& g = t.grad(id).v;
                auto& ga = t.grad(a).v;
                for (int r = 0; r < rows; ++r)
                  for (int i = 0; i < n; ++i)
                    ga[static_cast<std::size_t>(r) * cols +
                       idx[static_cast<std::size_t>(i)]] +=
                        g[static_cast<std::size_t>(r) * n + i];
              });
}

// y[b, u] = x[b, u, u] on (B, U, U)
inline int take_diag(Tape& t, int a) {
  const Tensor& x = t.val(a);
  if (x.rank() != 3 || x.dim(1) != x.dim(2))
    throw ConfigError("take_diag: (B,U,U) input required");
  const int b = x.dim(0), u = x.dim(1);
  Tensor y({b, u});
  for (int r = 0; r < b; ++r)
    for (int i = 0; i < u; ++i)
      y.v[static_cast<std::size_t>(r) * u + i] =
          x.v[(static_cast<std::size_t>(r) * u + i) * u + i];
  return t.op(std::move(y), {a}, [a, b, u](Tape& t, int id) {
    if (!t.needs_grad(a)) return;
    const auto& g = t.grad(id).v;
    auto& ga = t.grad(a).v;
    for (int r = 0; r < b; ++r)
      for (int i = 0; i < u; ++i)
        ga[(static_cast<std::size_t>(r) * u + i) * u + i] +=
            g[static_cast<std::size_t>(r) * u + i];
  });
}

// y = x * s[b] broadcast over the batch axis: x (B, ...), s (B)
inline int mul_bcast0(Tape& t, int a, int s) {
  const Tensor& x = t.val(a);
  const Tensor& sv = t.val(s);
  if (sv.numel() != x.dim(0)) throw ConfigError("mul_bcast0: scale length");
  const int b = x.dim(0);
  const long inner = x.numel() / b;
  Tensor y = x;
  for (int r = 0; r < b; ++r) {
    double* p = y.v.data() + r * inner;
    const double c = sv.v[static_cast<std::size_t>(r)];
    for (long i = 0; i < inner; ++i) p[i] *= c;
  }
  return t.op(std::move(y), {a, s}, [a, s, b, inner](Tape& t, int id) {
    const auto& g = t.grad(id).v;
    const auto& xv = t.val(a).v;
    const auto& sv = t.val(s).v;
    if (t.needs_grad(a)) {
      auto& ga = t.grad(a).v;
      for (int r = 0; r < b; ++r) {
        const double c = sv[static_cast<std::size_t>(r)];
        for (long i = 0; i < inner; ++i)
          ga[r * inner + i] += g[r * inner + i] * c;
      }
    }
    if (t.needs_grad(s)) {
      auto& gs = t.grad(s).v;
      for (int r = 0; r < b; ++r) {
        double acc = 0.0;
        for (long i = 0; i < inner; ++i)
          acc += g[r * inner + i] * xv[r * inner + i];
        gs[static_cast<std::size_t>(r)] += acc;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// linear algebra ops

// y = x W, x (B, in), W (in, out)
inline int matmul(Tape& t, int x, int w) {
  const Tensor& xv = t.val(x);
  const Tensor& wv = t.val(w);
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(0))
    throw ConfigError("matmul: shape mismatch");
  const int b = xv.dim(0), in = xv.dim(1), out = wv.dim(1);
  Tensor y({b, out});
  ECMap X(xv.v.data(), b, in);
  ECMap W(wv.v.data(), in, out);
  EMap(y.v.data(), b, out).noalias() = X * W;
  return t.op(std::move(y), {x, w}, [x, w, b, in, out](Tape& t, int id) {
    ECMap G(t.grad(id).v.data(), b, out);
    if (t.needs_grad(x)) {
      ECMap W(t.val(w).v.data(), in, out);
      EMap(t.grad(x).v.data(), b, in).noalias() += G * W.transpose();
    }
    if (t.needs_grad(w)) {
      ECMap X(t.val(x).v.data(), b, in);
      EMap(t.grad(w).v.data(), in, out).noalias() += X.transpose() * G;
    }
  });
}

// y = x + b broadcast over rows: x (R, C), b (C)
inline int add_bias(Tape& t, int x, int b) {
  const Tensor& xv = t.val(x);
  const Tensor& bv = t.val(b);
  if (xv.rank() != 2 || bv.numel() != xv.dim(1))
    throw ConfigError("add_bias: shape mismatch");
  const int rows = xv.dim(0), cols = xv.dim(1);
  Tensor y = xv;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      y.v[static_cast<std::size_t>(r) * cols + c] += bv.v[static_cast<std::size_t>(c)];
  return t.op(std::move(y), {x, b}, [x, b, rows, cols](Tape& t, int id) {
    const auto& g = t.grad(id).v;
    detail::accum(t, x, g);
    if (t.needs_grad(b)) {
      auto& gb = t.grad(b).v;
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
          gb[static_cast<std::size_t>(c)] += g[static_cast<std::size_t>(r) * cols + c];
    }
  });
}

// y(b) = A x(b): A constant (m, k), x (B, k, n)
inline int lmm_const(Tape& t, const Tensor& a, int x) {
  const Tensor& xv = t.val(x);
  if (a.rank() != 2 || xv.rank() != 3 || a.dim(1) != xv.dim(1))
    throw ConfigError("lmm_const: shape mismatch");
  const int bsz = xv.dim(0), m = a.dim(0), k = a.dim(1), n = xv.dim(2);
  Tensor y({bsz, m, n});
  ECMap A(a.v.data(), m, k);
  for (int b = 0; b < bsz; ++b) {
    ECMap X(xv.v.data() + static_cast<std::size_t>(b) * k * n, k, n);
    EMap(y.v.data() + static_cast<std::size_t>(b) * m * n, m, n).noalias() =
        A * X;
  }
  return t.op(std::move(y), {x}, [a, x, bsz, m, k, n](Tape& t, int id) {
    if (!t.needs_grad(x)) return;
    ECMap A(a.v.data(), m, k);
    for (int b = 0; b < bsz; ++b) {
      ECMap G(t.grad(id).v.data() + static_cast<std::size_t>(b) * m * n, m, n);
      EMap(t.grad(x).v.data() + static_cast<std::size_t>(b) * k * n, k, n)
          .noalias() += A.transpose() * G;
    }
  });
}

// y(b) = H(b) x(b): H constant (B, m, k), x (B, k, n)
inline int bmm_const(Tape& t, const Tensor& h, int x) {
  const Tensor& xv = t.val(x);
  if (h.rank() != 3 || xv.rank() != 3 || h.dim(0) != xv.dim(0) ||
      h.dim(2) != xv.dim(1))
    throw ConfigError("bmm_const: shape mismatch");
  const int bsz = xv.dim(0), m = h.dim(1), k = h.dim(2), n = xv.dim(2);
  Tensor y({bsz, m, n});
  for (int b = 0; b < bsz; ++b) {
    ECMap H(h.v.data() + static_cast<std::size_t>(b) * m * k, m, k);
    ECMap X(xv.v.data() + static_cast<std::size_t>(b) * k * n, k, n);
    EMap(y.v.data() + static_cast<std::size_t>(b) * m * n, m, n).noalias() =
        H * X;
  }
  return t.op(std::move(y), {x}, [h, x, bsz, m, k, n](Tape& t, int id) {
    if (!t.needs_grad(x)) return;
    for (int b = 0; b < bsz; ++b) {
      ECMap H(h.v.data() + static_cast<std::size_t>(b) * m * k, m, k);
      ECMap G(t.grad(id).v.data() + static_cast<std::size_t>(b) * m * n, m, n);
      EMap(t.grad(x).v.data() + static_cast<std::size_t>(b) * k * n, k, n)
          .noalias() += H.transpose() * G;
    }
  });
}

// ---------------------------------------------------------------------------
// conv2d, batchnorm, dropout

// "Same"-padded 2-D convolution via im2col. x (B, C, H, W), k (Co, C, kh, kw),
// bias (Co); output (B, Co, ceil(H/stride), ceil(W/stride)).
inline int conv2d(Tape& t, int x, int k, int bias, int stride = 1) {
  const Tensor& xv = t.val(x);
  const Tensor& kv = t.val(k);
  if (xv.rank() != 4 || kv.rank() != 4 || xv.dim(1) != kv.dim(1))
    throw ConfigError("conv2d: shape mismatch");
  const int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const int Co = kv.dim(0), kh = kv.dim(2), kw = kv.dim(3);
  if (t.val(bias).numel() != Co) throw ConfigError("conv2d: bias size");
  const int Ho = (H + stride - 1) / stride, Wo = (W + stride - 1) / stride;
  const int pad_h = std::max((Ho - 1) * stride + kh - H, 0);
  const int pad_w = std::max((Wo - 1) * stride + kw - W, 0);
  const int pt = pad_h / 2, pl = pad_w / 2;
  const long rows = static_cast<long>(B) * Ho * Wo;
  const int cols = C * kh * kw;

  auto make_col = [=](const std::vector<double>& src) {
    std::vector<double> col(static_cast<std::size_t>(rows) * cols, 0.0);
    for (int b = 0; b < B; ++b)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          double* dst =
              col.data() +
              ((static_cast<long>(b) * Ho + oy) * Wo + ox) * cols;
          for (int c = 0; c < C; ++c)
            for (int dy = 0; dy < kh; ++dy) {
              const int iy = oy * stride + dy - pt;
              if (iy < 0 || iy >= H) continue;
              for (int dx = 0; dx < kw; ++dx) {
                const int ix = ox * stride + dx - pl;
                if (ix < 0 || ix >= W) continue;
                dst[(c * kh + dy) * kw + dx] =
                    src[((static_cast<long>(b) * C + c) * H + iy) * W + ix];
              }
            }
        }
    return col;
  };

  std::vector<double> col = make_col(xv.v);
  Tensor y({B, Co, Ho, Wo});
  {
    ECMap Cm(col.data(), rows, cols);
    ECMap Km(kv.v.data(), Co, cols);
    // y laid out (B, Co, Ho, Wo) but the product is (rows=B*Ho*Wo, Co);
    // scatter rows into channel-major layout
    EMat prod = Cm * Km.transpose();
    const auto& bv = t.val(bias).v;
    for (int b = 0; b < B; ++b)
      for (int oy = 0; oy < Ho; ++oy)
        for (int ox = 0; ox < Wo; ++ox) {
          const long r = (static_cast<long>(b) * Ho + oy) * Wo + ox;
          for (int co = 0; co < Co; ++co)
            y.v[((static_cast<long>(b) * Co + co) * Ho + oy) * Wo + ox] =
                prod(r, co) + bv[static_cast<std::size_t>(co)];
        }
  }
  return t.op(
      std::move(y), {x, k, bias},
      [=, col = std::move(col)](Tape& t, int id) {
        const auto& g = t.grad(id).v;
        // gather output grads into (rows, Co)
        EMat G(rows, Co);
        for (int b = 0; b < B; ++b)
          for (int oy = 0; oy < Ho; ++oy)
            for (int ox = 0; ox < Wo; ++ox) {
              const long r = (static_cast<long>(b) * Ho + oy) * Wo + ox;
              for (int co = 0; co < Co; ++co)
                G(r, co) =
                    g[((static_cast<long>(b) * Co + co) * Ho + oy) * Wo + ox];
            }
        if (t.needs_grad(bias)) {
          auto& gb = t.grad(bias).v;
          for (int co = 0; co < Co; ++co)
            gb[static_cast<std::size_t>(co)] += G.col(co).sum();
        }
        if (t.needs_grad(k)) {
          ECMap Cm(col.data(), rows, cols);
          EMap(t.grad(k).v.data(), Co, cols).noalias() += G.transpose() * Cm;
        }
        if (t.needs_grad(x)) {
          ECMap Km(t.val(k).v.data(), Co, cols);
          EMat dcol = G * Km;  // (rows, cols)
          auto& gx = t.grad(x).v;
          for (int b = 0; b < B; ++b)
            for (int oy = 0; oy < Ho; ++oy)
              for (int ox = 0; ox < Wo; ++ox) {
                const long r = (static_cast<long>(b) * Ho + oy) * Wo + ox;
                for (int c = 0; c < C; ++c)
                  for (int dy = 0; dy < kh; ++dy) {
                    const int iy = oy * stride + dy - pt;
                    if (iy < 0 || iy >= H) continue;
                    for (int dx = 0; dx < kw; ++dx) {
                      const int ix = ox * stride + dx - pl;
                      if (ix < 0 || ix >= W) continue;
                      gx[((static_cast<long>(b) * C + c) * H + iy) * W + ix] +=
                          dcol(r, (c * kh + dy) * kw + dx);
                    }
                  }
              }
        }
      });
}

enum class Mode { train, eval };

// Batch normalization. Rank-2 input (B, F): statistics per feature over the
// batch. Rank-4 input (B, C, H, W): per channel over batch and spatial positions.
// Running statistics are external state, updated only in train mode.
inline int batchnorm(Tape& t, int x, int gamma, int beta, Tensor& run_mean,
                     Tensor& run_var, Mode mode, double momentum = 0.1,
                     double eps = 1e-5) {
  const Tensor& xv = t.val(x);
  int feats, reps;
  if (xv.rank() == 2) {
    feats = xv.dim(1);
    reps = xv.dim(0);
  } else if (xv.rank() == 4) {
    feats = xv.dim(1);
    reps = xv.dim(0) * xv.dim(2) * xv.dim(3);
  } else {
    throw ConfigError("batchnorm: rank-2 or rank-4 input required");
  }
  if (t.val(gamma).numel() != feats || t.val(beta).numel() != feats ||
      run_mean.numel() != feats || run_var.numel() != feats)
    throw ConfigError("batchnorm: parameter size mismatch");

  // iteration helper: per feature f, visit flat indices
  const int B = xv.dim(0);
  const long spatial = xv.rank() == 4 ? static_cast<long>(xv.dim(2)) * xv.dim(3) : 1;
  auto for_feature = [=](int f, auto&& fn) {
    if (spatial == 1) {
      for (int b = 0; b < B; ++b) fn(static_cast<long>(b) * feats + f);
    } else {
      for (int b = 0; b < B; ++b) {
        const long base = (static_cast<long>(b) * feats + f) * spatial;
        for (long s = 0; s < spatial; ++s) fn(base + s);
      }
    }
  };

  std::vector<double> mean(static_cast<std::size_t>(feats)),
      var(static_cast<std::size_t>(feats));
  if (mode == Mode::train) {
    if (reps < 2) throw ConfigError("batchnorm: batch too small for training");
    for (int f = 0; f < feats; ++f) {
      double s = 0.0, s2 = 0.0;
      for_feature(f, [&](long i) {
        s += xv.v[static_cast<std::size_t>(i)];
        s2 += xv.v[static_cast<std::size_t>(i)] * xv.v[static_cast<std::size_t>(i)];
      });
      const double mu = s / reps;
      mean[static_cast<std::size_t>(f)] = mu;
      var[static_cast<std::size_t>(f)] = std::max(s2 / reps - mu * mu, 0.0);
    }
    for (int f = 0; f < feats; ++f) {
      run_mean.v[static_cast<std::size_t>(f)] =
          (1.0 - momentum) * run_mean.v[static_cast<std::size_t>(f)] +
          momentum * mean[static_cast<std::size_t>(f)];
      run_var.v[static_cast<std::size_t>(f)] =
          (1.0 - momentum) * run_var.v[static_cast<std::size_t>(f)] +
          momentum * var[static_cast<std::size_t>(f)] * reps / (reps - 1);
    }
  } else {
    for (int f = 0; f < feats; ++f) {
      mean[static_cast<std::size_t>(f)] = run_mean.v[static_cast<std::size_t>(f)];
      var[static_cast<std::size_t>(f)] = run_var.v[static_cast<std::size_t>(f)];
    }
  }

  Tensor y = xv;
  const auto& gv = t.val(gamma).v;
  const auto& bv = t.val(beta).v;
  for (int f = 0; f < feats; ++f) {
    const double inv = 1.0 / std::sqrt(var[static_cast<std::size_t>(f)] + eps);
    const double ga = gv[static_cast<std::size_t>(f)];
    const double be = bv[static_cast<std::size_t>(f)];
    const double mu = mean[static_cast<std::size_t>(f)];
    for_feature(f, [&](long i) {
      y.v[static_cast<std::size_t>(i)] =
          ga * (xv.v[static_cast<std::size_t>(i)] - mu) * inv + be;
    });
  }
  const bool train_stats = mode == Mode::train;
  return t.op(
      std::move(y), {x, gamma, beta},
      [=, mean = std::move(mean), var = std::move(var)](Tape& t, int id) {
        const auto& g = t.grad(id).v;
        const auto& xvv = t.val(x).v;
        const auto& gv = t.val(gamma).v;
        for (int f = 0; f < feats; ++f) {
          const double mu = mean[static_cast<std::size_t>(f)];
          const double inv = 1.0 / std::sqrt(var[static_cast<std::size_t>(f)] + eps);
          double s1 = 0.0, s2 = 0.0;
          for_feature(f, [&](long i) {
            const double xh = (xvv[static_cast<std::size_t>(i)] - mu) * inv;
            s1 += g[static_cast<std::size_t>(i)];
            s2 += g[static_cast<std::size_t>(i)] * xh;
          });
          if (t.needs_grad(beta)) t.grad(beta).v[static_cast<std::size_t>(f)] += s1;
          if (t.needs_grad(gamma)) t.grad(gamma).v[static_cast<std::size_t>(f)] += s2;
          if (t.needs_grad(x)) {
            auto& gx = t.grad(x).v;
            const double ga = gv[static_cast<std::size_t>(f)];
            if (train_stats) {
              for_feature(f, [&](long i) {
                const double xh = (xvv[static_cast<std::size_t>(i)] - mu) * inv;
                gx[static_cast<std::size_t>(i)] +=
                    ga * inv *
                    (g[static_cast<std::size_t>(i)] - s1 / reps - xh * s2 / reps);
              });
            } else {
              for_feature(f, [&](long i) {
                gx[static_cast<std::size_t>(i)] += ga * inv * g[static_cast<std::size_t>(i)];
              });
            }
          }
        }
      });
}

// Inverted dropout: train mode zeroes Bernoulli(rate) entries and rescales
// survivors by 1/(1-rate); eval mode is the identity.
inline int dropout(Tape& t, int x, double rate, Mode mode, RngStream& rng) {
  if (mode == Mode::eval || rate <= 0.0) return x;
  if (rate >= 1.0) throw ConfigError("dropout: rate must be < 1");
  const Tensor& xv = t.val(x);
  std::vector<double> mask(xv.v.size());
  const double keep = 1.0 - rate;
  for (auto& m : mask)
    m = rng.uniform(0.0, 1.0) < rate ? 0.0 : 1.0 / keep;
  Tensor y = xv;
  for (std::size_t i = 0; i < y.v.size(); ++i) y.v[i] *= mask[i];
  return t.op(std::move(y), {x}, [x, mask = std::move(mask)](Tape& t, int id) {
    if (!t.needs_grad(x)) return;
    const auto& g = t.grad(id).v;
    auto& gx = t.grad(x).v;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
}

// ---------------------------------------------------------------------------
// parameter store and Adam

struct ParamStore {
  struct Entry {
    Tensor value;
    Tensor m, v;  // Adam moments, sized on first step
    bool trainable = true;
  };
  std::map<std::string, Entry> items;
  long step = 0;

  bool has(const std::string& name) const { return items.count(name) > 0; }
  Entry& at(const std::string& name) {
    auto it = items.find(name);
    if (it == items.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  const Entry& at(const std::string& name) const {
    auto it = items.find(name);
    if (it == items.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  void add(const std::string& name, Tensor t, bool trainable = true) {
    if (has(name)) throw ConfigError("duplicate parameter: " + name);
    Entry e;
    e.value = std::move(t);
    e.trainable = trainable;
    items.emplace(name, std::move(e));
  }
};

// parameter name -> leaf node id on the current tape
using LeafMap = std::map<std::string, int>;

inline int param_leaf(Tape& t, ParamStore& store, LeafMap& leaves,
                      const std::string& name) {
  auto it = leaves.find(name);
  if (it != leaves.end()) return it->second;
  const int id = t.leaf(store.at(name).value);
  leaves.emplace(name, id);
  return id;
}

struct AdamConfig {
  double lr = 1e-3;
  double weight_decay = 1e-6;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One AdamW step over every trainable parameter present in the leaf map.
// Parameters without an accumulated gradient are left untouched.
inline void adam_step(ParamStore& store, Tape& tape, const LeafMap& leaves,
                      const AdamConfig& cfg) {
  store.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(store.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(store.step));
  for (const auto& [name, id] : leaves) {
    auto& e = store.at(name);
    if (!e.trainable || !tape.grad_ready(id)) continue;
    const auto& g = tape.grad(id).v;
    if (e.m.v.empty()) {
      e.m = Tensor(e.value.shape);
      e.v = Tensor(e.value.shape);
    }
    for (std::size_t i = 0; i < e.value.v.size(); ++i) {
      e.m.v[i] = cfg.beta1 * e.m.v[i] + (1.0 - cfg.beta1) * g[i];
      e.v.v[i] = cfg.beta2 * e.v.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mh = e.m.v[i] / bc1;
      const double vh = e.v.v[i] / bc2;
      e.value.v[i] -=
          cfg.lr * (mh / (std::sqrt(vh) + cfg.eps) + cfg.weight_decay * e.value.v[i]);
    }
  }
}

// ---------------------------------------------------------------------------
// declarative layer/model specs

struct LayerSpec {
  enum class Kind { dense, conv, bn, leaky, softmax, dropout, flatten };
  Kind kind = Kind::dense;
  int in = 0, out = 0;                      // dense
  int cin = 0, cout = 0, kh = 3, kw = 3, stride = 1;  // conv
  double rate = 0.0;                        // dropout
  double slope = 0.01;                      // leaky

  static LayerSpec Dense(int in, int out) {
    LayerSpec l;
    l.kind = Kind::dense;
    l.in = in;
    l.out = out;
    return l;
  }
  static LayerSpec Conv(int cin, int cout, int k = 3, int stride = 1) {
    LayerSpec l;
    l.kind = Kind::conv;
    l.cin = cin;
    l.cout = cout;
    l.kh = k;
    l.kw = k;
    l.stride = stride;
    return l;
  }
  static LayerSpec Bn() {
    LayerSpec l;
    l.kind = Kind::bn;
    return l;
  }
  static LayerSpec Leaky(double slope = 0.01) {
    LayerSpec l;
    l.kind = Kind::leaky;
    l.slope = slope;
    return l;
  }
  static LayerSpec Softmax() {
    LayerSpec l;
    l.kind = Kind::softmax;
    return l;
  }
  static LayerSpec Dropout(double rate) {
    LayerSpec l;
    l.kind = Kind::dropout;
    l.rate = rate;
    return l;
  }
  static LayerSpec Flatten() {
    LayerSpec l;
    l.kind = Kind::flatten;
    return l;
  }
};

using ModelSpec = std::vector<LayerSpec>;

struct NetworkSpec {
  std::vector<int> in_shape;  // (C, H, W) for conv backbones, (F) for dense
  ModelSpec backbone;
  std::vector<std::pair<std::string, ModelSpec>> heads;
};

inline std::vector<int> layer_out_shape(const LayerSpec& l,
                                        const std::vector<int>& in) {
  using K = LayerSpec::Kind;
  switch (l.kind) {
    case K::dense:
      if (in.size() != 1 || in[0] != l.in)
        throw ConfigError("layer shapes incompatible at dense layer");
      return {l.out};
    case K::conv: {
      if (in.size() != 3 || in[0] != l.cin)
        throw ConfigError("layer shapes incompatible at conv layer");
      const int ho = (in[1] + l.stride - 1) / l.stride;
      const int wo = (in[2] + l.stride - 1) / l.stride;
      return {l.cout, ho, wo};
    }
    case K::flatten: {
      int n = 1;
      for (int d : in) n *= d;
      return {n};
    }
    default:
      return in;
  }
}

inline std::vector<int> chain_out_shape(const ModelSpec& spec,
                                        std::vector<int> shape) {
  for (const auto& l : spec) shape = layer_out_shape(l, shape);
  return shape;
}

// He-style initialization; batchnorm gets unit gain, zero shift, and
// non-trainable running statistics.
inline void build_chain_params(ParamStore& store, const std::string& prefix,
                               const ModelSpec& spec, std::vector<int> shape,
                               RngStream& rng) {
  using K = LayerSpec::Kind;
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const LayerSpec& l = spec[i];
    const std::string base = prefix + ".L" + std::to_string(i);
    if (l.kind == K::dense) {
      Tensor w({l.in, l.out});
      const double std = std::sqrt(2.0 / l.in);
      for (auto& x : w.v) x = rng.normal(0.0, std);
      store.add(base + ".w", std::move(w));
      store.add(base + ".b", Tensor({l.out}));
    } else if (l.kind == K::conv) {
      Tensor w({l.cout, l.cin, l.kh, l.kw});
      const double std = std::sqrt(2.0 / (l.cin * l.kh * l.kw));
      for (auto& x : w.v) x = rng.normal(0.0, std);
      store.add(base + ".w", std::move(w));
      store.add(base + ".b", Tensor({l.cout}));
    } else if (l.kind == K::bn) {
      const int feats = shape[0];
      Tensor gamma({feats});
      for (auto& x : gamma.v) x = 1.0;
      store.add(base + ".gamma", std::move(gamma));
      store.add(base + ".beta", Tensor({feats}));
      Tensor rv({feats});
      for (auto& x : rv.v) x = 1.0;
      store.add(base + ".rm", Tensor({feats}), false);
      store.add(base + ".rv", std::move(rv), false);
    }
    shape = layer_out_shape(l, shape);
  }
}

inline void build_network_params(ParamStore& store, const std::string& prefix,
                                 const NetworkSpec& net, RngStream& rng) {
  build_chain_params(store, prefix, net.backbone, net.in_shape, rng);
  const auto mid = chain_out_shape(net.backbone, net.in_shape);
  for (const auto& [name, spec] : net.heads)
    build_chain_params(store, prefix + "." + name, spec, mid, rng);
}

inline int forward_chain(Tape& t, ParamStore& store, LeafMap& leaves,
                         const std::string& prefix, const ModelSpec& spec,
                         int x, Mode mode, RngStream& drop_rng) {
  using K = LayerSpec::Kind;
  for (std::size_t i = 0; i < spec.size(); ++i) {
    const LayerSpec& l = spec[i];
    const std::string base = prefix + ".L" + std::to_string(i);
    switch (l.kind) {
      case K::dense: {
        const int w = param_leaf(t, store, leaves, base + ".w");
        const int b = param_leaf(t, store, leaves, base + ".b");
        x = add_bias(t, matmul(t, x, w), b);
        break;
      }
      case K::conv: {
        const int w = param_leaf(t, store, leaves, base + ".w");
        const int b = param_leaf(t, store, leaves, base + ".b");
        x = conv2d(t, x, w, b, l.stride);
        break;
      }
      case K::bn: {
        const int g = param_leaf(t, store, leaves, base + ".gamma");
        const int b = param_leaf(t, store, leaves, base + ".beta");
        x = batchnorm(t, x, g, b, store.at(base + ".rm").value,
                      store.at(base + ".rv").value, mode);
        break;
      }
      case K::leaky:
        x = leaky_relu(t, x, l.slope);
        break;
      case K::softmax:
        x = softmax(t, x);
        break;
      case K::dropout:
        x = dropout(t, x, l.rate, mode, drop_rng);
        break;
      case K::flatten: {
        const Tensor& xv = t.val(x);
        x = reshape(t, x, {xv.dim(0), static_cast<int>(xv.numel() / xv.dim(0))});
        break;
      }
    }
  }
  return x;
}

struct ForwardResult {
  int backbone_end = -1;
  std::map<std::string, int> heads;
};

inline ForwardResult forward_network(Tape& t, ParamStore& store,
                                     LeafMap& leaves, const std::string& prefix,
                                     const NetworkSpec& net, int input,
                                     Mode mode, RngStream& drop_rng) {
  ForwardResult r;
  r.backbone_end = forward_chain(t, store, leaves, prefix, net.backbone, input,
                                 mode, drop_rng);
  for (const auto& [name, spec] : net.heads)
    r.heads[name] = forward_chain(t, store, leaves, prefix + "." + name, spec,
                                  r.backbone_end, mode, drop_rng);
  return r;
}

}  // namespace cfmimo::nn
