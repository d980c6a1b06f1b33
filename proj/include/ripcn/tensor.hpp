#pragma once

#include <algorithm>
#include <atomic>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "ripcn/errors.hpp"

namespace ripcn {

using Shape = std::vector<std::size_t>;

namespace detail {

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated on first use
  bool requires_grad = false;
  std::uint64_t seq = 0;  // creation order; a valid topological order
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
};

inline std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

inline void ensure_grad(Node& n) {
  if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0);
}

inline void check_finite(const Node& n) {
#ifndef NDEBUG
  for (double v : n.data) assert(std::isfinite(v) && "non-finite value in forward pass");
#else
  (void)n;
#endif
}

}  // namespace detail

// Dense row-major f64 tensor with reverse-mode gradient recording. Values are
// immutable after construction; only grad buffers mutate. Handles share the
// underlying node, so copies are cheap.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    return from(std::move(shape), {});
  }

  static Tensor full(Shape shape, double value) {
    auto n = std::make_shared<detail::Node>();
    n->data.assign(detail::numel(shape), value);
    n->shape = std::move(shape);
    n->seq = detail::next_seq();
    return Tensor(std::move(n));
  }

  static Tensor from(Shape shape, std::vector<double> data) {
    auto n = std::make_shared<detail::Node>();
    const std::size_t want = detail::numel(shape);
    if (data.empty()) data.assign(want, 0.0);
    if (data.size() != want) {
      throw dimension_error("tensor data length " + std::to_string(data.size()) +
                            " does not match shape " + detail::shape_str(shape));
    }
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->seq = detail::next_seq();
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  // Trainable leaf: participates in gradient recording.
  static Tensor param(Shape shape, std::vector<double> data) {
    Tensor t = from(std::move(shape), std::move(data));
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->data.size(); }
  std::size_t rank() const { return node_->shape.size(); }
  const std::vector<double>& data() const { return node_->data; }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  const std::vector<double>& grad() const {
    detail::ensure_grad(*node_);
    return node_->grad;
  }

  void zero_grad() {
    if (node_) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  double value() const {
    if (size() != 1) {
      throw dimension_error("scalar access on tensor of shape " +
                            detail::shape_str(shape()));
    }
    return node_->data[0];
  }

  double at(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) {
      throw dimension_error("index rank mismatch for shape " + detail::shape_str(shape()));
    }
    std::size_t flat = 0;
    auto it = idx.begin();
    for (std::size_t d = 0; d < rank(); ++d, ++it) flat = flat * shape()[d] + *it;
    return node_->data[flat];
  }

  // Same values, no gradient history.
  Tensor detach() const { return from(shape(), data()); }

  std::shared_ptr<detail::Node> node() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

// Builds an op result node. `backward_fn` reads the result grad and
// accumulates into parents; it is only attached when some parent needs it.
inline Tensor op_result(Shape shape, std::vector<double> data,
                        std::vector<Tensor> parents,
                        std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->seq = next_seq();
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  if (rg) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (auto& p : parents) n->parents.push_back(p.node());
    n->backward_fn = std::move(backward_fn);
  }
  check_finite(*n);
  return Tensor(std::move(n));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw dimension_error(std::string(op) + ": shape mismatch " +
                          shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto an = a.node(), bn = b.node();
  return detail::op_result(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& n) {
    if (an->requires_grad) {
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
    }
    if (bn->requires_grad) {
      detail::ensure_grad(*bn);
      for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] += n.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto an = a.node(), bn = b.node();
  return detail::op_result(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& n) {
    if (an->requires_grad) {
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
    }
    if (bn->requires_grad) {
      detail::ensure_grad(*bn);
      for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] -= n.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto an = a.node(), bn = b.node();
  return detail::op_result(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& n) {
    if (an->requires_grad) {
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * bn->data[i];
    }
    if (bn->requires_grad) {
      detail::ensure_grad(*bn);
      for (std::size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] += n.grad[i] * an->data[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  auto an = a.node();
  return detail::op_result(a.shape(), std::move(out), {a}, [an, c](detail::Node& n) {
    if (!an->requires_grad) return;
    detail::ensure_grad(*an);
    for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += c * n.grad[i];
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  auto an = a.node();
  return detail::op_result(a.shape(), std::move(out), {a}, [an](detail::Node& n) {
    if (!an->requires_grad) return;
    detail::ensure_grad(*an);
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      if (an->data[i] > 0.0) an->grad[i] += n.grad[i];
    }
  });
}

inline Tensor square(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * a.data()[i];
  auto an = a.node();
  return detail::op_result(a.shape(), std::move(out), {a}, [an](detail::Node& n) {
    if (!an->requires_grad) return;
    detail::ensure_grad(*an);
    for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += 2.0 * an->data[i] * n.grad[i];
  });
}

// Elementwise square root; inputs must be positive for a finite gradient.
inline Tensor sqrt_(const Tensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(a.data()[i]);
  auto an = a.node();
  Tensor r = detail::op_result(a.shape(), std::move(out), {a}, [an](detail::Node& n) {
    if (!an->requires_grad) return;
    detail::ensure_grad(*an);
    for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += 0.5 / n.data[i] * n.grad[i];
  });
  return r;
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto an = a.node();
  return detail::op_result({1}, {s}, {a}, [an](detail::Node& n) {
    if (!an->requires_grad) return;
    detail::ensure_grad(*an);
    const double g = n.grad[0];
    for (double& gi : an->grad) gi += g;
  });
}

inline Tensor mean_all(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.size());
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto an = a.node();
  return detail::op_result({1}, {s * inv}, {a}, [an, inv](detail::Node& n) {
    if (!an->requires_grad) return;
    detail::ensure_grad(*an);
    const double g = n.grad[0] * inv;
    for (double& gi : an->grad) gi += g;
  });
}

// Sum of elementwise products; both arguments must have identical shape.
inline Tensor frobenius_inner(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "frobenius_inner");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a.data()[i] * b.data()[i];
  auto an = a.node(), bn = b.node();
  return detail::op_result({1}, {s}, {a, b}, [an, bn](detail::Node& n) {
    const double g = n.grad[0];
    if (an->requires_grad) {
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g * bn->data[i];
    }
    if (bn->requires_grad) {
      detail::ensure_grad(*bn);
      for (std::size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += g * an->data[i];
    }
  });
}

// Tensor times scalar tensor (s has shape [1]).
inline Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw dimension_error("mul_scalar: scale must be a scalar tensor");
  const double sv = s.data()[0];
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * sv;
  auto an = a.node(), sn = s.node();
  return detail::op_result(a.shape(), std::move(out), {a, s}, [an, sn](detail::Node& n) {
    const double sv2 = sn->data[0];
    if (an->requires_grad) {
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += sv2 * n.grad[i];
    }
    if (sn->requires_grad) {
      detail::ensure_grad(*sn);
      double acc = 0.0;
      for (std::size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * an->data[i];
      sn->grad[0] += acc;
    }
  });
}

inline Tensor div_scalar(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw dimension_error("div_scalar: divisor must be a scalar tensor");
  const double sv = s.data()[0];
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / sv;
  auto an = a.node(), sn = s.node();
  return detail::op_result(a.shape(), std::move(out), {a, s}, [an, sn](detail::Node& n) {
    const double sv2 = sn->data[0];
    if (an->requires_grad) {
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] / sv2;
    }
    if (sn->requires_grad) {
      detail::ensure_grad(*sn);
      double acc = 0.0;
      for (std::size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * an->data[i];
      sn->grad[0] -= acc / (sv2 * sv2);
    }
  });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw dimension_error("matmul: incompatible shapes " + detail::shape_str(a.shape()) +
                          " vs " + detail::shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.data()[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * b.data()[p * n + j];
    }
  }
  auto an = a.node(), bn = b.node();
  return detail::op_result({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](detail::Node& nd) {
    if (an->requires_grad) {
      detail::ensure_grad(*an);
      // dA = G * B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += nd.grad[i * n + j] * bn->data[p * n + j];
          an->grad[i * k + p] += acc;
        }
    }
    if (bn->requires_grad) {
      detail::ensure_grad(*bn);
      // dB = A^T * G
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::size_t i = 0; i < m; ++i) acc += an->data[i * k + p] * nd.grad[i * n + j];
          bn->grad[p * n + j] += acc;
        }
    }
  });
}

// Batched matmul: a[B,M,K] x b[B,K,N] -> [B,M,N].
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] ||
      a.shape()[2] != b.shape()[1]) {
    throw dimension_error("bmm: incompatible shapes " + detail::shape_str(a.shape()) +
                          " vs " + detail::shape_str(b.shape()));
  }
  const std::size_t B = a.shape()[0], m = a.shape()[1], k = a.shape()[2], n = b.shape()[2];
  std::vector<double> out(B * m * n, 0.0);
  for (std::size_t bb = 0; bb < B; ++bb) {
    const double* ap = a.data().data() + bb * m * k;
    const double* bp = b.data().data() + bb * k * n;
    double* op = out.data() + bb * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ap[i * k + p];
        for (std::size_t j = 0; j < n; ++j) op[i * n + j] += av * bp[p * n + j];
      }
  }
  auto an = a.node(), bn = b.node();
  return detail::op_result({B, m, n}, std::move(out), {a, b},
                           [an, bn, B, m, k, n](detail::Node& nd) {
    for (std::size_t bb = 0; bb < B; ++bb) {
      const double* gp = nd.grad.data() + bb * m * n;
      const double* ap = an->data.data() + bb * m * k;
      const double* bp = bn->data.data() + bb * k * n;
      if (an->requires_grad) {
        detail::ensure_grad(*an);
        double* gap = an->grad.data() + bb * m * k;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += gp[i * n + j] * bp[p * n + j];
            gap[i * k + p] += acc;
          }
      }
      if (bn->requires_grad) {
        detail::ensure_grad(*bn);
        double* gbp = bn->grad.data() + bb * k * n;
        for (std::size_t p = 0; p < k; ++p)
          for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t i = 0; i < m; ++i) acc += ap[i * k + p] * gp[i * n + j];
            gbp[p * n + j] += acc;
          }
      }
    }
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (detail::numel(shape) != a.size()) {
    throw dimension_error("reshape: cannot view " + detail::shape_str(a.shape()) + " as " +
                          detail::shape_str(shape));
  }
  auto an = a.node();
  return detail::op_result(std::move(shape), a.data(), {a}, [an](detail::Node& n) {
    if (!an->requires_grad) return;
    detail::ensure_grad(*an);
    for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
  });
}

// Axis permutation; perm maps output axis -> input axis.
inline Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
  if (perm.size() != a.rank()) throw dimension_error("permute: rank mismatch");
  const std::size_t r = a.rank();
  Shape out_shape(r);
  for (std::size_t d = 0; d < r; ++d) out_shape[d] = a.shape()[perm[d]];
  std::vector<std::size_t> in_strides(r, 1), out_strides(r, 1);
  for (std::size_t d = r; d-- > 1;) in_strides[d - 1] = in_strides[d] * a.shape()[d];
  for (std::size_t d = r; d-- > 1;) out_strides[d - 1] = out_strides[d] * out_shape[d];
  std::vector<std::size_t> map(a.size());  // output flat -> input flat
  std::vector<std::size_t> coord(r, 0);
  for (std::size_t o = 0; o < a.size(); ++o) {
    std::size_t rem = o, in_idx = 0;
    for (std::size_t d = 0; d < r; ++d) {
      coord[d] = rem / out_strides[d];
      rem %= out_strides[d];
      in_idx += coord[d] * in_strides[perm[d]];
    }
    map[o] = in_idx;
  }
  std::vector<double> out(a.size());
  for (std::size_t o = 0; o < a.size(); ++o) out[o] = a.data()[map[o]];
  auto an = a.node();
  return detail::op_result(std::move(out_shape), std::move(out), {a},
                           [an, map = std::move(map)](detail::Node& n) {
    if (!an->requires_grad) return;
    detail::ensure_grad(*an);
    for (std::size_t o = 0; o < n.grad.size(); ++o) an->grad[map[o]] += n.grad[o];
  });
}

// Repeat a tensor R times along a new leading axis.
inline Tensor tile0(const Tensor& a, std::size_t reps) {
  if (reps == 0) throw parameter_error("tile0: reps must be positive");
  Shape out_shape;
  out_shape.push_back(reps);
  out_shape.insert(out_shape.end(), a.shape().begin(), a.shape().end());
  std::vector<double> out(reps * a.size());
  for (std::size_t r = 0; r < reps; ++r)
    std::copy(a.data().begin(), a.data().end(), out.begin() + r * a.size());
  auto an = a.node();
  const std::size_t sz = a.size();
  return detail::op_result(std::move(out_shape), std::move(out), {a},
                           [an, reps, sz](detail::Node& n) {
    if (!an->requires_grad) return;
    detail::ensure_grad(*an);
    for (std::size_t r = 0; r < reps; ++r)
      for (std::size_t i = 0; i < sz; ++i) an->grad[i] += n.grad[r * sz + i];
  });
}

// Rows [lo, hi) along axis 0.
inline Tensor slice0(const Tensor& a, std::size_t lo, std::size_t hi) {
  if (a.rank() < 1 || hi > a.shape()[0] || lo >= hi) {
    throw dimension_error("slice0: range [" + std::to_string(lo) + "," + std::to_string(hi) +
                          ") invalid for shape " + detail::shape_str(a.shape()));
  }
  const std::size_t row = a.size() / a.shape()[0];
  Shape out_shape = a.shape();
  out_shape[0] = hi - lo;
  std::vector<double> out(a.data().begin() + lo * row, a.data().begin() + hi * row);
  auto an = a.node();
  return detail::op_result(std::move(out_shape), std::move(out), {a},
                           [an, lo, row](detail::Node& n) {
    if (!an->requires_grad) return;
    detail::ensure_grad(*an);
    for (std::size_t i = 0; i < n.grad.size(); ++i) an->grad[lo * row + i] += n.grad[i];
  });
}

inline Tensor concat0(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() ||
      !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    throw dimension_error("concat0: trailing dims differ: " + detail::shape_str(a.shape()) +
                          " vs " + detail::shape_str(b.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[0] += b.shape()[0];
  std::vector<double> out;
  out.reserve(a.size() + b.size());
  out.insert(out.end(), a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  auto an = a.node(), bn = b.node();
  const std::size_t asz = a.size();
  return detail::op_result(std::move(out_shape), std::move(out), {a, b},
                           [an, bn, asz](detail::Node& n) {
    if (an->requires_grad) {
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < asz; ++i) an->grad[i] += n.grad[i];
    }
    if (bn->requires_grad) {
      detail::ensure_grad(*bn);
      for (std::size_t i = asz; i < n.grad.size(); ++i) bn->grad[i - asz] += n.grad[i];
    }
  });
}

inline Tensor concat_last(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || a.rank() < 1 ||
      !std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin())) {
    throw dimension_error("concat_last: leading dims differ: " + detail::shape_str(a.shape()) +
                          " vs " + detail::shape_str(b.shape()));
  }
  const std::size_t fa = a.shape().back(), fb = b.shape().back();
  const std::size_t rows = a.size() / fa;
  Shape out_shape = a.shape();
  out_shape.back() = fa + fb;
  std::vector<double> out(rows * (fa + fb));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(a.data().begin() + r * fa, a.data().begin() + (r + 1) * fa,
              out.begin() + r * (fa + fb));
    std::copy(b.data().begin() + r * fb, b.data().begin() + (r + 1) * fb,
              out.begin() + r * (fa + fb) + fa);
  }
  auto an = a.node(), bn = b.node();
  return detail::op_result(std::move(out_shape), std::move(out), {a, b},
                           [an, bn, rows, fa, fb](detail::Node& n) {
    for (std::size_t r = 0; r < rows; ++r) {
      if (an->requires_grad) {
        detail::ensure_grad(*an);
        for (std::size_t f = 0; f < fa; ++f) an->grad[r * fa + f] += n.grad[r * (fa + fb) + f];
      }
      if (bn->requires_grad) {
        detail::ensure_grad(*bn);
        for (std::size_t f = 0; f < fb; ++f)
          bn->grad[r * fb + f] += n.grad[r * (fa + fb) + fa + f];
      }
    }
  });
}

// Adds b[F] across the last axis of x[..., F].
inline Tensor add_bias_last(const Tensor& x, const Tensor& b) {
  if (b.rank() != 1 || x.rank() < 1 || x.shape().back() != b.shape()[0]) {
    throw dimension_error("add_bias_last: bias " + detail::shape_str(b.shape()) +
                          " does not match " + detail::shape_str(x.shape()));
  }
  const std::size_t f = b.size();
  const std::size_t rows = x.size() / f;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < f; ++j) out[r * f + j] = x.data()[r * f + j] + b.data()[j];
  auto xn = x.node(), bn = b.node();
  return detail::op_result(x.shape(), std::move(out), {x, b},
                           [xn, bn, rows, f](detail::Node& n) {
    if (xn->requires_grad) {
      detail::ensure_grad(*xn);
      for (std::size_t i = 0; i < n.grad.size(); ++i) xn->grad[i] += n.grad[i];
    }
    if (bn->requires_grad) {
      detail::ensure_grad(*bn);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < f; ++j) bn->grad[j] += n.grad[r * f + j];
    }
  });
}

// Softmax over the last axis, with max subtraction. Every row of the output
// is non-negative and sums to one.
inline Tensor softmax_rows(const Tensor& x) {
  if (x.rank() < 1) throw dimension_error("softmax_rows: rank must be >= 1");
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.size() / c;
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xp = x.data().data() + r * c;
    double m = xp[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, xp[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(xp[j] - m);
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = std::exp(xp[j] - m) / z;
  }
  auto xn = x.node();
  return detail::op_result(x.shape(), std::move(out), {x}, [xn, rows, c](detail::Node& n) {
    if (!xn->requires_grad) return;
    detail::ensure_grad(*xn);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = n.data.data() + r * c;
      const double* g = n.grad.data() + r * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < c; ++j) xn->grad[r * c + j] += y[j] * (g[j] - dot);
    }
  });
}

// Causal 1-D convolution over the time axis of x[T,N,F] with kernel
// [k,F,F']. The input is left-padded with k-1 zero frames, so the output has
// the same length and position t never sees inputs after t.
inline Tensor causal_conv1d(const Tensor& x, const Tensor& kernel) {
  if (x.rank() != 3 || kernel.rank() != 3) {
    throw dimension_error("causal_conv1d: expected x[T,N,F], kernel[k,F,F'], got " +
                          detail::shape_str(x.shape()) + " and " +
                          detail::shape_str(kernel.shape()));
  }
  const std::size_t T = x.shape()[0], N = x.shape()[1], F = x.shape()[2];
  const std::size_t kw = kernel.shape()[0], Fo = kernel.shape()[2];
  if (kw < 1) throw parameter_error("causal_conv1d: kernel size must be positive");
  if (kernel.shape()[1] != F) {
    throw dimension_error("causal_conv1d: kernel input features " +
                          std::to_string(kernel.shape()[1]) + " do not match x features " +
                          std::to_string(F));
  }
  std::vector<double> out(T * N * Fo, 0.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t d = 0; d < kw; ++d) {
      const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + d + 1) -
                               static_cast<std::ptrdiff_t>(kw);
      if (s < 0) continue;
      for (std::size_t nn = 0; nn < N; ++nn) {
        const double* xp = x.data().data() + (static_cast<std::size_t>(s) * N + nn) * F;
        double* op = out.data() + (t * N + nn) * Fo;
        for (std::size_t f = 0; f < F; ++f) {
          const double xv = xp[f];
          const double* kp = kernel.data().data() + (d * F + f) * Fo;
          for (std::size_t o = 0; o < Fo; ++o) op[o] += xv * kp[o];
        }
      }
    }
  auto xn = x.node(), kn = kernel.node();
  return detail::op_result({T, N, Fo}, std::move(out), {x, kernel},
                           [xn, kn, T, N, F, kw, Fo](detail::Node& n) {
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t d = 0; d < kw; ++d) {
        const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + d + 1) -
                                 static_cast<std::ptrdiff_t>(kw);
        if (s < 0) continue;
        for (std::size_t nn = 0; nn < N; ++nn) {
          const double* gp = n.grad.data() + (t * N + nn) * Fo;
          if (xn->requires_grad) {
            detail::ensure_grad(*xn);
            double* gx = xn->grad.data() + (static_cast<std::size_t>(s) * N + nn) * F;
            for (std::size_t f = 0; f < F; ++f) {
              const double* kp = kn->data.data() + (d * F + f) * Fo;
              double acc = 0.0;
              for (std::size_t o = 0; o < Fo; ++o) acc += gp[o] * kp[o];
              gx[f] += acc;
            }
          }
          if (kn->requires_grad) {
            detail::ensure_grad(*kn);
            const double* xp = xn->data.data() + (static_cast<std::size_t>(s) * N + nn) * F;
            for (std::size_t f = 0; f < F; ++f) {
              double* gk = kn->grad.data() + (d * F + f) * Fo;
              const double xv = xp[f];
              for (std::size_t o = 0; o < Fo; ++o) gk[o] += xv * gp[o];
            }
          }
        }
      }
  });
}

// x[..., A] contracted with W[A, B] over the last axis.
inline Tensor linear(const Tensor& x, const Tensor& w) {
  if (w.rank() != 2 || x.rank() < 1 || x.shape().back() != w.shape()[0]) {
    throw dimension_error("linear: cannot contract " + detail::shape_str(x.shape()) +
                          " with " + detail::shape_str(w.shape()));
  }
  const std::size_t a = w.shape()[0];
  Shape flat{x.size() / a, a};
  Shape out_shape = x.shape();
  out_shape.back() = w.shape()[1];
  return reshape(matmul(reshape(x, flat), w), out_shape);
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_bias_last(linear(x, w), b);
}

// Reverse-mode sweep. Replays recorded operations in inverse creation order,
// accumulating into leaf grad buffers. Interior grads are cleared first, so
// repeated calls accumulate for leaves only.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw dimension_error("backward: loss must be scalar, got shape " +
                          detail::shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;  // nothing recorded
  std::vector<detail::Node*> order;
  std::vector<std::shared_ptr<detail::Node>> keep;  // hold refs during sweep
  {
    std::vector<std::shared_ptr<detail::Node>> stack{loss.node()};
    std::unordered_set<const detail::Node*> seen;
    while (!stack.empty()) {
      auto cur = stack.back();
      stack.pop_back();
      if (!seen.insert(cur.get()).second) continue;
      keep.push_back(cur);
      order.push_back(cur.get());
      for (auto& p : cur->parents)
        if (p->requires_grad) stack.push_back(p);
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });
  for (detail::Node* nd : order) {
    if (nd->backward_fn) std::fill(nd->grad.begin(), nd->grad.end(), 0.0);
  }
  detail::ensure_grad(*loss.node());
  loss.node()->grad[0] += 1.0;
  for (detail::Node* nd : order) {
    if (nd->backward_fn) nd->backward_fn(*nd);
  }
}

}  // namespace ripcn
