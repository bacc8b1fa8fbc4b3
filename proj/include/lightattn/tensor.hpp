#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "lightattn/errors.hpp"
#include "lightattn/rng.hpp"

namespace lightattn {

namespace detail {

inline std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw DimensionError("tensor dimensions must be positive");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

struct Node {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // sized lazily, accumulated into
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }

  std::vector<double>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline int& nograd_depth() {
  thread_local int depth = 0;
  return depth;
}

inline bool grad_enabled() { return nograd_depth() == 0; }

}  // namespace detail

// RAII switch that disables tape recording on the current thread.
struct NoGradGuard {
  NoGradGuard() { ++detail::nograd_depth(); }
  ~NoGradGuard() { --detail::nograd_depth(); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Value-semantic handle to a dense row-major float64 tensor participating in
// reverse-mode differentiation. Immutable after construction except for the
// leaf-parameter data mutated by the optimizer between steps.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(std::vector<int> shape, std::vector<double> values,
                     bool requires_grad = false) {
    auto n = detail::shape_numel(shape);
    if (static_cast<std::int64_t>(values.size()) != n) {
      throw DimensionError("value count " + std::to_string(values.size()) +
                           " does not match shape " + detail::shape_str(shape));
    }
    for (double v : values) {
      if (!std::isfinite(v)) throw DomainError("non-finite value in tensor literal");
    }
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(values);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    auto n = detail::shape_numel(shape);
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = std::move(shape);
    t.node_->data.assign(static_cast<std::size_t>(n), 0.0);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(std::vector<int> shape, double v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), v);
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t numel() const { return node_->numel(); }
  int rows() const { return node_->shape.at(0); }
  int cols() const { return node_->shape.at(1); }

  std::vector<double>& data() { return node_->data; }
  const std::vector<double>& data() const { return node_->data; }

  const std::vector<double>& grad() const { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) {
    if (rg && !node_->parents.empty()) {
      throw ContractError("requires_grad can only be toggled on leaf tensors");
    }
    node_->requires_grad = rg;
  }

  double item() const {
    if (numel() != 1) throw ContractError("item() on non-scalar tensor");
    return node_->data[0];
  }

  double& at(int i) { return node_->data[static_cast<std::size_t>(i)]; }
  double at(int i) const { return node_->data[static_cast<std::size_t>(i)]; }
  double& at(int i, int j) {
    return node_->data[static_cast<std::size_t>(i) * cols() + j];
  }
  double at(int i, int j) const {
    return node_->data[static_cast<std::size_t>(i) * cols() + j];
  }

  std::shared_ptr<detail::Node> node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_op(std::vector<int> shape, const char* op,
                        std::vector<Tensor> parents,
                        std::function<void(detail::Node&)> backward);
};

// Creates the output node of an operation; wires parents and the backward
// rule only while recording is enabled and some input needs gradients.
inline Tensor make_op(std::vector<int> shape, const char* op,
                      std::vector<Tensor> parents,
                      std::function<void(detail::Node&)> backward) {
  Tensor t = Tensor::zeros(std::move(shape));
  t.node_->op = op;
  bool track = detail::grad_enabled();
  if (track) {
    bool any = false;
    for (const auto& p : parents) any = any || p.node()->requires_grad;
    track = any;
  }
  if (track) {
    t.node_->requires_grad = true;
    t.node_->parents.reserve(parents.size());
    for (auto& p : parents) t.node_->parents.push_back(p.node());
    t.node_->backward = std::move(backward);
  }
  return t;
}

// The reverse pass schedule: operation nodes reachable from a loss, in
// topological order (every node's inputs precede it).
class Tape {
 public:
  static Tape record_from(const Tensor& loss) {
    Tape tape;
    std::unordered_set<detail::Node*> seen;
    // Iterative post-order DFS.
    struct Frame {
      detail::Node* node;
      std::size_t next_parent;
    };
    std::vector<Frame> stack;
    auto push = [&](detail::Node* n) {
      if (n->requires_grad && seen.insert(n).second) stack.push_back({n, 0});
    };
    push(loss.node().get());
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next_parent < f.node->parents.size()) {
        detail::Node* p = f.node->parents[f.next_parent++].get();
        push(p);
      } else {
        tape.order_.push_back(f.node);
        stack.pop_back();
      }
    }
    return tape;
  }

  const std::vector<detail::Node*>& nodes() const { return order_; }

  // Runs every recorded backward rule exactly once, outputs before inputs.
  void run() const {
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      detail::Node* n = *it;
      if (n->backward) n->backward(*n);
    }
  }

 private:
  std::vector<detail::Node*> order_;
};

// Accumulates d(loss)/d(leaf) into every requires_grad leaf reachable from
// loss. Gradients add up across calls; callers zero them between steps.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ContractError("backward requires a scalar loss");
  if (!loss.requires_grad()) return;  // nothing on the tape
  Tape tape = Tape::record_from(loss);
  loss.node()->grad_buffer()[0] += 1.0;
  tape.run();
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------

namespace detail {
inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}
}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  Tensor out = make_op(a.shape(), "add", {a, b}, [](detail::Node& n) {
    for (int k = 0; k < 2; ++k) {
      auto& p = *n.parents[k];
      if (!p.requires_grad) continue;
      auto& g = p.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  Tensor out = make_op(a.shape(), "sub", {a, b}, [](detail::Node& n) {
    if (n.parents[0]->requires_grad) {
      auto& ga = n.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i];
    }
    if (n.parents[1]->requires_grad) {
      auto& gb = n.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= n.grad[i];
    }
  });
  for (std::size_t i = 0; i < out.data().size(); ++i)
    out.data()[i] = a.data()[i] - b.data()[i];
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  Tensor out = make_op(a.shape(), "mul", {a, b}, [](detail::Node& n) {
    const auto& av = n.parents[0]->data;
    const auto& bv = n.parents[1]->data;
    if (n.parents[0]->requires_grad) {
      auto& ga = n.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i] * bv[i];
    }
    if (n.parents[1]->requires_grad) {
      auto& gb = n.parents[1]->grad_buffer();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += n.grad[i] * av[i];
    }
  });
  for (std::size_t i = 0; i < out.data().size(); ++i)
    out.data()[i] = a.data()[i] * b.data()[i];
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out = make_op(a.shape(), "scale", {a}, [c](detail::Node& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * n.grad[i];
  });
  for (std::size_t i = 0; i < out.data().size(); ++i) out.data()[i] = c * a.data()[i];
  return out;
}

inline Tensor relu(const Tensor& a) {
  Tensor out = make_op(a.shape(), "relu", {a}, [](detail::Node& n) {
    const auto& x = n.parents[0]->data;
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) g[i] += n.grad[i];
  });
  for (std::size_t i = 0; i < out.data().size(); ++i)
    out.data()[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  return out;
}

inline Tensor sum(const Tensor& a) {
  Tensor out = make_op({1}, "sum", {a}, [](detail::Node& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (auto& v : g) v += n.grad[0];
  });
  out.data()[0] = std::accumulate(a.data().begin(), a.data().end(), 0.0);
  return out;
}

// Same buffer, new shape; row-major order is preserved.
inline Tensor reshape(const Tensor& a, std::vector<int> shape) {
  if (detail::shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: element count mismatch");
  }
  Tensor out = make_op(std::move(shape), "reshape", {a}, [](detail::Node& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
  out.data() = a.data();
  return out;
}

// Mean over the time axis: [d x L] -> [d].
inline Tensor mean_cols(const Tensor& a) {
  if (a.ndim() != 2) throw DimensionError("mean_cols expects a 2-d tensor");
  const int d = a.rows(), L = a.cols();
  Tensor out = make_op({d}, "mean_cols", {a}, [d, L](detail::Node& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (int r = 0; r < d; ++r) {
      double gr = n.grad[r] / L;
      for (int l = 0; l < L; ++l) g[static_cast<std::size_t>(r) * L + l] += gr;
    }
  });
  for (int r = 0; r < d; ++r) {
    double s = 0.0;
    for (int l = 0; l < L; ++l) s += a.at(r, l);
    out.at(r) = s / L;
  }
  return out;
}

// Stacks two [d1 x L] and [d2 x L] tensors into [(d1+d2) x L].
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols()) {
    throw DimensionError("concat_rows: column counts must agree");
  }
  const int d1 = a.rows(), d2 = b.rows(), L = a.cols();
  Tensor out = make_op({d1 + d2, L}, "concat_rows", {a, b}, [d1, d2, L](detail::Node& n) {
    if (n.parents[0]->requires_grad) {
      auto& ga = n.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i];
    }
    if (n.parents[1]->requires_grad) {
      auto& gb = n.parents[1]->grad_buffer();
      std::size_t off = static_cast<std::size_t>(d1) * L;
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += n.grad[off + i];
    }
  });
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(),
            out.data().begin() + static_cast<std::size_t>(d1) * L);
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

namespace detail {
// C[m x n] += A[m x k] * B[k x n]; ikj order for cache locality.
inline void gemm_acc(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    double* crow = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[k x m]^T * B[k x n]
inline void gemm_at_b_acc(const double* a, const double* b, double* c, int k, int m, int n) {
  for (int p = 0; p < k; ++p) {
    const double* arow = a + static_cast<std::size_t>(p) * m;
    const double* brow = b + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x k] += A[m x n] * B[k x n]^T
inline void gemm_a_bt_acc(const double* a, const double* b, double* c, int m, int n, int k) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * n;
    double* crow = c + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < k; ++j) {
      const double* brow = b + static_cast<std::size_t>(j) * n;
      double s = 0.0;
      for (int p = 0; p < n; ++p) s += arow[p] * brow[p];
      crow[j] += s;
    }
  }
}
}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree, " +
                         detail::shape_str(a.shape()) + " * " +
                         detail::shape_str(b.shape()));
  }
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = make_op({m, n}, "matmul", {a, b}, [m, k, n](detail::Node& node) {
    const auto& av = node.parents[0]->data;
    const auto& bv = node.parents[1]->data;
    // dA = dC * B^T ; dB = A^T * dC
    if (node.parents[0]->requires_grad) {
      detail::gemm_a_bt_acc(node.grad.data(), bv.data(),
                            node.parents[0]->grad_buffer().data(), m, n, k);
    }
    if (node.parents[1]->requires_grad) {
      detail::gemm_at_b_acc(av.data(), node.grad.data(),
                            node.parents[1]->grad_buffer().data(), m, k, n);
    }
  });
  detail::gemm_acc(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw DimensionError("transpose expects a 2-d tensor");
  const int m = a.rows(), n = a.cols();
  Tensor out = make_op({n, m}, "transpose", {a}, [m, n](detail::Node& node) {
    auto& g = node.parents[0]->grad_buffer();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        g[static_cast<std::size_t>(i) * n + j] +=
            node.grad[static_cast<std::size_t>(j) * m + i];
  });
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

// y[d x L] = W[d x k] * x[k x L] + b[d] broadcast over columns.
inline Tensor affine_cols(const Tensor& w, const Tensor& x, const Tensor& b) {
  Tensor y = matmul(w, x);
  if (!b.defined()) return y;
  if (b.numel() != y.rows()) throw DimensionError("affine_cols: bias length mismatch");
  const int d = y.rows(), L = y.cols();
  Tensor out = make_op({d, L}, "bias_cols", {y, b}, [d, L](detail::Node& n) {
    if (n.parents[0]->requires_grad) {
      auto& gy = n.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < gy.size(); ++i) gy[i] += n.grad[i];
    }
    if (n.parents[1]->requires_grad) {
      auto& gb = n.parents[1]->grad_buffer();
      for (int r = 0; r < d; ++r) {
        double s = 0.0;
        for (int l = 0; l < L; ++l) s += n.grad[static_cast<std::size_t>(r) * L + l];
        gb[r] += s;
      }
    }
  });
  for (int r = 0; r < d; ++r)
    for (int l = 0; l < L; ++l) out.at(r, l) = y.at(r, l) + b.at(r);
  return out;
}

// ---------------------------------------------------------------------------
// Masked softmax
// ---------------------------------------------------------------------------

// Row-structured boolean mask; keep == 1 means the entry participates.
struct Mask {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> keep;

  static Mask all(int rows, int cols) {
    Mask m{rows, cols, {}};
    m.keep.assign(static_cast<std::size_t>(rows) * cols, 1);
    return m;
  }
  std::uint8_t operator()(int i, int j) const {
    return keep[static_cast<std::size_t>(i) * cols + j];
  }
  void set(int i, int j, bool v) {
    keep[static_cast<std::size_t>(i) * cols + j] = v ? 1 : 0;
  }
};

// Row-wise softmax over unmasked entries; masked entries come out exactly 0.
// Stabilized by max subtraction.
inline Tensor softmax_masked(const Tensor& logits, const Mask& mask) {
  if (logits.ndim() != 2) throw DimensionError("softmax_masked expects 2-d logits");
  const int R = logits.rows(), C = logits.cols();
  if (mask.rows != R || mask.cols != C) {
    throw DimensionError("softmax_masked: mask shape mismatch");
  }
  Tensor out = make_op({R, C}, "softmax_masked", {logits}, [R, C, mask](detail::Node& n) {
    auto& gx = n.parents[0]->grad_buffer();
    for (int i = 0; i < R; ++i) {
      const double* y = n.data.data() + static_cast<std::size_t>(i) * C;
      const double* gy = n.grad.data() + static_cast<std::size_t>(i) * C;
      double dot = 0.0;
      for (int j = 0; j < C; ++j) dot += gy[j] * y[j];
      double* g = gx.data() + static_cast<std::size_t>(i) * C;
      for (int j = 0; j < C; ++j) {
        if (!mask(i, j)) continue;
        g[j] += y[j] * (gy[j] - dot);
      }
    }
  });
  for (int i = 0; i < R; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < C; ++j)
      if (mask(i, j)) mx = std::max(mx, logits.at(i, j));
    if (!std::isfinite(mx)) {
      throw DegenerateRowError("softmax_masked: fully masked row " + std::to_string(i));
    }
    double denom = 0.0;
    for (int j = 0; j < C; ++j)
      if (mask(i, j)) denom += std::exp(logits.at(i, j) - mx);
    for (int j = 0; j < C; ++j)
      out.at(i, j) = mask(i, j) ? std::exp(logits.at(i, j) - mx) / denom : 0.0;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layer normalization (per column / position)
// ---------------------------------------------------------------------------

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-6) {
  if (x.ndim() != 2) throw DimensionError("layer_norm expects a 2-d tensor");
  const int d = x.rows(), L = x.cols();
  if (d < 2) throw DimensionError("layer_norm needs at least 2 feature rows");
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: gamma/beta length mismatch");
  }
  // Cache per-column inverse stddev and normalized values for the backward.
  auto inv_std = std::make_shared<std::vector<double>>(L);
  auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(d) * L);
  Tensor out = make_op(
      {d, L}, "layer_norm", {x, gamma, beta},
      [d, L, inv_std, xhat](detail::Node& n) {
        const auto& gm = n.parents[1]->data;
        bool need_x = n.parents[0]->requires_grad;
        bool need_gb = n.parents[1]->requires_grad || n.parents[2]->requires_grad;
        for (int l = 0; l < L; ++l) {
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (int r = 0; r < d; ++r) {
            std::size_t idx = static_cast<std::size_t>(r) * L + l;
            double dy = n.grad[idx];
            double xh = (*xhat)[idx];
            if (need_gb) {
              if (n.parents[1]->requires_grad) n.parents[1]->grad_buffer()[r] += dy * xh;
              if (n.parents[2]->requires_grad) n.parents[2]->grad_buffer()[r] += dy;
            }
            double dxh = dy * gm[r];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh;
          }
          if (!need_x) continue;
          mean_dxhat /= d;
          mean_dxhat_xhat /= d;
          double is = (*inv_std)[l];
          auto& gx = n.parents[0]->grad_buffer();
          for (int r = 0; r < d; ++r) {
            std::size_t idx = static_cast<std::size_t>(r) * L + l;
            double dxh = n.grad[idx] * gm[r];
            gx[idx] += is * (dxh - mean_dxhat - (*xhat)[idx] * mean_dxhat_xhat);
          }
        }
      });
  for (int l = 0; l < L; ++l) {
    double mean = 0.0;
    for (int r = 0; r < d; ++r) mean += x.at(r, l);
    mean /= d;
    double var = 0.0;
    for (int r = 0; r < d; ++r) {
      double c = x.at(r, l) - mean;
      var += c * c;
    }
    var /= d;
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[l] = is;
    for (int r = 0; r < d; ++r) {
      std::size_t idx = static_cast<std::size_t>(r) * L + l;
      double xh = (x.at(r, l) - mean) * is;
      (*xhat)[idx] = xh;
      out.at(r, l) = gamma.at(r) * xh + beta.at(r);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// 2-d convolution, SAME padding, per-axis stride
// ---------------------------------------------------------------------------

// input [C_in x F x L], kernel [C_out x C_in x kF x kT], bias [C_out] or empty.
// Output spatial sizes are ceil(F / s_f) x ceil(L / s_t).
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                     int stride_f, int stride_t) {
  if (stride_f < 1 || stride_t < 1) throw ParameterError("conv2d: stride must be >= 1");
  if (input.ndim() != 3) throw DimensionError("conv2d input must be [C x F x L]");
  if (kernel.ndim() != 4) throw DimensionError("conv2d kernel must be [Co x Ci x kF x kT]");
  const int ci = input.shape()[0], F = input.shape()[1], L = input.shape()[2];
  const int co = kernel.shape()[0], kci = kernel.shape()[1];
  const int kf = kernel.shape()[2], kt = kernel.shape()[3];
  if (kci != ci) throw DimensionError("conv2d: channel count mismatch");
  if (bias.defined() && bias.numel() != co) {
    throw DimensionError("conv2d: bias length mismatch");
  }
  const int Fo = (F + stride_f - 1) / stride_f;
  const int Lo = (L + stride_t - 1) / stride_t;
  // SAME padding split, leading side gets the smaller half.
  const int pad_f = std::max(0, (Fo - 1) * stride_f + kf - F) / 2;
  const int pad_t = std::max(0, (Lo - 1) * stride_t + kt - L) / 2;

  auto idx_in = [F, L](int c, int f, int l) {
    return (static_cast<std::size_t>(c) * F + f) * L + l;
  };
  auto idx_k = [kci, kf, kt](int o, int c, int a, int b) {
    return ((static_cast<std::size_t>(o) * kci + c) * kf + a) * kt + b;
  };
  auto idx_out = [Fo, Lo](int o, int f, int l) {
    return (static_cast<std::size_t>(o) * Fo + f) * Lo + l;
  };

  std::vector<Tensor> parents = {input, kernel};
  if (bias.defined()) parents.push_back(bias);
  Tensor out = make_op(
      {co, Fo, Lo}, "conv2d", parents,
      [=](detail::Node& n) {
        const auto& xv = n.parents[0]->data;
        const auto& kv = n.parents[1]->data;
        bool need_x = n.parents[0]->requires_grad;
        bool need_k = n.parents[1]->requires_grad;
        double* gx = need_x ? n.parents[0]->grad_buffer().data() : nullptr;
        double* gk = need_k ? n.parents[1]->grad_buffer().data() : nullptr;
        for (int o = 0; o < co; ++o) {
          for (int fo = 0; fo < Fo; ++fo) {
            for (int lo = 0; lo < Lo; ++lo) {
              double go = n.grad[idx_out(o, fo, lo)];
              if (go == 0.0) continue;
              for (int c = 0; c < ci; ++c) {
                for (int a = 0; a < kf; ++a) {
                  int fi = fo * stride_f + a - pad_f;
                  if (fi < 0 || fi >= F) continue;
                  for (int b = 0; b < kt; ++b) {
                    int li = lo * stride_t + b - pad_t;
                    if (li < 0 || li >= L) continue;
                    if (need_x) gx[idx_in(c, fi, li)] += go * kv[idx_k(o, c, a, b)];
                    if (need_k) gk[idx_k(o, c, a, b)] += go * xv[idx_in(c, fi, li)];
                  }
                }
              }
            }
          }
        }
        if (n.parents.size() > 2 && n.parents[2]->requires_grad) {
          auto& gb = n.parents[2]->grad_buffer();
          for (int o = 0; o < co; ++o) {
            double s = 0.0;
            for (int fo = 0; fo < Fo; ++fo)
              for (int lo = 0; lo < Lo; ++lo) s += n.grad[idx_out(o, fo, lo)];
            gb[o] += s;
          }
        }
      });
  for (int o = 0; o < co; ++o) {
    double b0 = bias.defined() ? bias.at(o) : 0.0;
    for (int fo = 0; fo < Fo; ++fo) {
      for (int lo = 0; lo < Lo; ++lo) {
        double acc = b0;
        for (int c = 0; c < ci; ++c) {
          for (int a = 0; a < kf; ++a) {
            int fi = fo * stride_f + a - pad_f;
            if (fi < 0 || fi >= F) continue;
            for (int b = 0; b < kt; ++b) {
              int li = lo * stride_t + b - pad_t;
              if (li < 0 || li >= L) continue;
              acc += input.data()[idx_in(c, fi, li)] * kernel.data()[idx_k(o, c, a, b)];
            }
          }
        }
        out.data()[idx_out(o, fo, lo)] = acc;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

// Training mode zeroes each element with probability `rate` and scales the
// survivors by 1/(1-rate); eval mode is the identity.
inline Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ParameterError("dropout rate must be in [0, 1)");
  if (!training || rate == 0.0) {
    Tensor out = make_op(x.shape(), "dropout_eval", {x}, [](detail::Node& n) {
      auto& g = n.parents[0]->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
    out.data() = x.data();
    return out;
  }
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  double keep_scale = 1.0 / (1.0 - rate);
  for (auto& m : *mask) m = rng.uniform() < rate ? 0.0 : keep_scale;
  Tensor out = make_op(x.shape(), "dropout", {x}, [mask](detail::Node& n) {
    auto& g = n.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * (*mask)[i];
  });
  for (std::size_t i = 0; i < out.data().size(); ++i)
    out.data()[i] = x.data()[i] * (*mask)[i];
  return out;
}

// ---------------------------------------------------------------------------
// Banded (windowed) attention primitives
// ---------------------------------------------------------------------------

// S[i, c] = sum_d Q[d, i] * K[d, i + c - radius]; out-of-range cells stay 0
// and must be excluded through banded_mask(). Stores L x (2*radius+1)
// elements instead of L x L.
inline Tensor banded_scores(const Tensor& q, const Tensor& k, int radius) {
  if (q.ndim() != 2 || k.ndim() != 2 || q.rows() != k.rows() || q.cols() != k.cols()) {
    throw DimensionError("banded_scores: Q and K must be [d x L] with equal shapes");
  }
  if (radius < 0) throw ParameterError("banded_scores: radius must be >= 0");
  const int d = q.rows(), L = q.cols(), W = 2 * radius + 1;
  Tensor out = make_op({L, W}, "banded_scores", {q, k}, [d, L, W, radius](detail::Node& n) {
    const auto& qv = n.parents[0]->data;
    const auto& kv = n.parents[1]->data;
    bool need_q = n.parents[0]->requires_grad;
    bool need_k = n.parents[1]->requires_grad;
    double* gq = need_q ? n.parents[0]->grad_buffer().data() : nullptr;
    double* gk = need_k ? n.parents[1]->grad_buffer().data() : nullptr;
    for (int i = 0; i < L; ++i) {
      for (int c = 0; c < W; ++c) {
        int j = i + c - radius;
        if (j < 0 || j >= L) continue;
        double gs = n.grad[static_cast<std::size_t>(i) * W + c];
        if (gs == 0.0) continue;
        for (int r = 0; r < d; ++r) {
          if (need_q)
            gq[static_cast<std::size_t>(r) * L + i] += gs * kv[static_cast<std::size_t>(r) * L + j];
          if (need_k)
            gk[static_cast<std::size_t>(r) * L + j] += gs * qv[static_cast<std::size_t>(r) * L + i];
        }
      }
    }
  });
  for (int i = 0; i < L; ++i) {
    for (int c = 0; c < W; ++c) {
      int j = i + c - radius;
      if (j < 0 || j >= L) continue;
      double s = 0.0;
      for (int r = 0; r < d; ++r) s += q.at(r, i) * k.at(r, j);
      out.at(i, c) = s;
    }
  }
  return out;
}

// Validity mask for the banded layout: cell (i, c) maps to key i + c - radius.
inline Mask banded_mask(int length, int radius) {
  const int W = 2 * radius + 1;
  Mask m{length, W, {}};
  m.keep.assign(static_cast<std::size_t>(length) * W, 0);
  for (int i = 0; i < length; ++i) {
    for (int c = 0; c < W; ++c) {
      int j = i + c - radius;
      if (j >= 0 && j < length) m.set(i, c, true);
    }
  }
  return m;
}

// out[:, i] = sum_c W[i, c] * V[:, i + c - radius]
inline Tensor banded_attend(const Tensor& v, const Tensor& weights, int radius) {
  const int d = v.rows(), L = v.cols(), W = 2 * radius + 1;
  if (weights.rows() != L || weights.cols() != W) {
    throw DimensionError("banded_attend: weight band shape mismatch");
  }
  Tensor out = make_op({d, L}, "banded_attend", {v, weights}, [d, L, W, radius](detail::Node& n) {
    const auto& vv = n.parents[0]->data;
    const auto& wv = n.parents[1]->data;
    bool need_v = n.parents[0]->requires_grad;
    bool need_w = n.parents[1]->requires_grad;
    double* gv = need_v ? n.parents[0]->grad_buffer().data() : nullptr;
    double* gw = need_w ? n.parents[1]->grad_buffer().data() : nullptr;
    for (int i = 0; i < L; ++i) {
      for (int c = 0; c < W; ++c) {
        int j = i + c - radius;
        if (j < 0 || j >= L) continue;
        double w = wv[static_cast<std::size_t>(i) * W + c];
        double gwc = 0.0;
        for (int r = 0; r < d; ++r) {
          double go = n.grad[static_cast<std::size_t>(r) * L + i];
          if (need_v) gv[static_cast<std::size_t>(r) * L + j] += go * w;
          gwc += go * vv[static_cast<std::size_t>(r) * L + j];
        }
        if (need_w) gw[static_cast<std::size_t>(i) * W + c] += gwc;
      }
    }
  });
  for (int i = 0; i < L; ++i) {
    for (int c = 0; c < W; ++c) {
      int j = i + c - radius;
      if (j < 0 || j >= L) continue;
      double w = weights.at(i, c);
      if (w == 0.0) continue;
      for (int r = 0; r < d; ++r) out.at(r, i) += w * v.at(r, j);
    }
  }
  return out;
}

// S[i, j] += b[(i - j) + L - 1] on a full [L x L] score matrix. The bias
// vector indexes offsets -(L-1)..(L-1).
inline Tensor add_diag_bias(const Tensor& scores, const Tensor& bias) {
  const int L = scores.rows();
  if (scores.ndim() != 2 || scores.cols() != L) {
    throw DimensionError("add_diag_bias expects square scores");
  }
  if (bias.numel() != 2 * L - 1) {
    throw DimensionError("add_diag_bias: bias must cover offsets -(L-1)..(L-1)");
  }
  Tensor out = make_op({L, L}, "add_diag_bias", {scores, bias}, [L](detail::Node& n) {
    bool need_s = n.parents[0]->requires_grad;
    bool need_b = n.parents[1]->requires_grad;
    double* gs = need_s ? n.parents[0]->grad_buffer().data() : nullptr;
    double* gb = need_b ? n.parents[1]->grad_buffer().data() : nullptr;
    for (int i = 0; i < L; ++i) {
      for (int j = 0; j < L; ++j) {
        double g = n.grad[static_cast<std::size_t>(i) * L + j];
        if (need_s) gs[static_cast<std::size_t>(i) * L + j] += g;
        if (need_b) gb[(i - j) + L - 1] += g;
      }
    }
  });
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < L; ++j)
      out.at(i, j) = scores.at(i, j) + bias.at((i - j) + L - 1);
  return out;
}

// S[r, c] += b[c] for every row; used to broadcast a relative bias over the
// banded layout, where column c is the fixed offset c - radius.
inline Tensor add_row_broadcast(const Tensor& scores, const Tensor& bias) {
  const int R = scores.rows(), C = scores.cols();
  if (bias.numel() != C) throw DimensionError("add_row_broadcast: bias length mismatch");
  Tensor out = make_op({R, C}, "add_row_broadcast", {scores, bias}, [R, C](detail::Node& n) {
    bool need_s = n.parents[0]->requires_grad;
    bool need_b = n.parents[1]->requires_grad;
    double* gs = need_s ? n.parents[0]->grad_buffer().data() : nullptr;
    double* gb = need_b ? n.parents[1]->grad_buffer().data() : nullptr;
    for (int r = 0; r < R; ++r) {
      for (int c = 0; c < C; ++c) {
        double g = n.grad[static_cast<std::size_t>(r) * C + c];
        if (need_s) gs[static_cast<std::size_t>(r) * C + c] += g;
        if (need_b) gb[c] += g;
      }
    }
  });
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out.at(r, c) = scores.at(r, c) + bias.at(c);
  return out;
}

// ---------------------------------------------------------------------------
// Classification loss
// ---------------------------------------------------------------------------

// -log softmax(logits)[label]; logits may be [n] or [n x 1].
inline Tensor cross_entropy(const Tensor& logits, int label) {
  const int n = static_cast<int>(logits.numel());
  if (label < 0 || label >= n) {
    throw DataError("cross_entropy: label " + std::to_string(label) +
                    " out of range for " + std::to_string(n) + " classes");
  }
  Tensor out = make_op({1}, "cross_entropy", {logits}, [n, label](detail::Node& node) {
    const auto& z = node.parents[0]->data;
    auto& g = node.parents[0]->grad_buffer();
    double mx = *std::max_element(z.begin(), z.end());
    double denom = 0.0;
    for (int i = 0; i < n; ++i) denom += std::exp(z[i] - mx);
    double go = node.grad[0];
    for (int i = 0; i < n; ++i) {
      double p = std::exp(z[i] - mx) / denom;
      g[i] += go * (p - (i == label ? 1.0 : 0.0));
    }
  });
  const auto& z = logits.data();
  double mx = *std::max_element(z.begin(), z.end());
  double denom = 0.0;
  for (int i = 0; i < n; ++i) denom += std::exp(z[i] - mx);
  out.data()[0] = -(z[label] - mx - std::log(denom));
  return out;
}

}  // namespace lightattn
