#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "cellsearch/rng.hpp"

namespace cellsearch {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

[[noreturn]] inline void tensor_error(const std::string& msg) { throw std::runtime_error(msg); }

// One node of the dynamic compute graph. Nodes are created in forward order;
// ids are monotonically increasing, so sorting reachable nodes by id gives a
// topological order and the backward pass walks them in strictly reverse
// insertion order. parents/backward_fn never reference the owning node's
// shared_ptr, so graphs free themselves once the downstream tensors die.
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily; same length as data when present
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(const TensorImpl&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return from_data(std::move(shape), {}, requires_grad, 0.0);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    return from_data(std::move(shape), {}, requires_grad, value);
  }

  static Tensor from_vector(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size())
      tensor_error("tensor data length " + std::to_string(values.size()) +
                   " does not match shape " + shape_str(shape));
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(values);
    t.impl_->requires_grad = requires_grad;
    t.impl_->id = next_node_id();
    return t;
  }

  static Tensor randn(Shape shape, RngStream& rng, double stddev = 1.0, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.normal(0.0, stddev);
    return from_vector(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from_vector({1}, {value}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int dim(int axis) const { return impl_->shape[static_cast<std::size_t>(axis)]; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  std::size_t size() const { return impl_->data.size(); }

  double* data() { return impl_->data.data(); }
  const double* data() const { return impl_->data.data(); }
  std::vector<double>& values() { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }
  double item() const {
    if (size() != 1) tensor_error("item() on non-scalar tensor " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool r) {
    impl_->requires_grad = r;
    if (!r) impl_->grad.clear();
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  const std::vector<double>& grad() const {
    if (impl_->grad.empty()) tensor_error("tensor has no gradient");
    return impl_->grad;
  }
  std::vector<double>& grad_ref() {
    impl_->ensure_grad();
    return impl_->grad;
  }
  void zero_grad() {
    if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
  }

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& handle() const { return impl_; }

  static Tensor wrap(std::shared_ptr<TensorImpl> impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
  }

 private:
  static Tensor from_data(Shape shape, std::vector<double>, bool requires_grad, double fill) {
    std::vector<double> v(shape_numel(shape), fill);
    return from_vector(std::move(shape), std::move(v), requires_grad);
  }

  std::shared_ptr<TensorImpl> impl_;
};

// Builds an op result node. The backward closure reads the node's grad and
// accumulates (+=) into the parents' grads; it must skip parents that do not
// require grad.
inline Tensor make_node(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                        std::function<void(const TensorImpl&)> backward) {
  Tensor out = Tensor::from_vector(std::move(shape), std::move(data));
  bool track = false;
  for (const Tensor& in : inputs)
    if (in.defined() && in.requires_grad()) track = true;
  if (track) {
    out.impl()->requires_grad = true;
    for (const Tensor& in : inputs)
      if (in.defined()) out.impl()->parents.push_back(in.handle());
    out.impl()->backward_fn = std::move(backward);
  }
  return out;
}

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    tensor_error(std::string(op) + ": shape mismatch: " + shape_str(a.shape()) + " vs " +
                 shape_str(b.shape()));
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  std::vector<double> out(a.size());
  const double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
  auto ia = a.handle();
  auto ib = b.handle();
  return make_node(a.shape(), std::move(out), {a, b}, [ia, ib](const TensorImpl& self) {
    if (ia->requires_grad) {
      ia->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) ia->grad[i] += self.grad[i];
    }
    if (ib->requires_grad) {
      ib->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) ib->grad[i] += self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  std::vector<double> out(a.size());
  const double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
  auto ia = a.handle();
  auto ib = b.handle();
  return make_node(a.shape(), std::move(out), {a, b}, [ia, ib](const TensorImpl& self) {
    if (ia->requires_grad) {
      ia->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) ia->grad[i] += self.grad[i] * ib->data[i];
    }
    if (ib->requires_grad) {
      ib->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) ib->grad[i] += self.grad[i] * ia->data[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.size());
  const double* pa = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * s;
  auto ia = a.handle();
  return make_node(a.shape(), std::move(out), {a}, [ia, s](const TensorImpl& self) {
    if (!ia->requires_grad) return;
    ia->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ia->grad[i] += self.grad[i] * s;
  });
}

// Multiply a tensor by a learnable one-element tensor. Gradient of the scalar
// is the inner product of upstream grad and the input.
inline Tensor scale_tensor(const Tensor& a, const Tensor& s) {
  if (s.size() != 1)
    tensor_error("scale_tensor: scale must have one element, got shape " + shape_str(s.shape()));
  const double sv = s.data()[0];
  std::vector<double> out(a.size());
  const double* pa = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * sv;
  auto ia = a.handle();
  auto is = s.handle();
  return make_node(a.shape(), std::move(out), {a, s}, [ia, is, sv](const TensorImpl& self) {
    if (ia->requires_grad) {
      ia->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) ia->grad[i] += self.grad[i] * sv;
    }
    if (is->requires_grad) {
      is->ensure_grad();
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * ia->data[i];
      is->grad[0] += acc;
    }
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.size());
  const double* pa = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = pa[i] > 0.0 ? pa[i] : 0.0;
  auto ia = a.handle();
  return make_node(a.shape(), std::move(out), {a}, [ia](const TensorImpl& self) {
    if (!ia->requires_grad) return;
    ia->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (ia->data[i] > 0.0) ia->grad[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  const double* pa = a.data();
  for (std::size_t i = 0; i < a.size(); ++i) acc += pa[i];
  auto ia = a.handle();
  return make_node({1}, {acc}, {a}, [ia](const TensorImpl& self) {
    if (!ia->requires_grad) return;
    ia->ensure_grad();
    for (double& g : ia->grad) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.size());
  double acc = 0.0;
  const double* pa = a.data();
  for (std::size_t i = 0; i < a.size(); ++i) acc += pa[i];
  auto ia = a.handle();
  return make_node({1}, {acc * inv}, {a}, [ia, inv](const TensorImpl& self) {
    if (!ia->requires_grad) return;
    ia->ensure_grad();
    for (double& g : ia->grad) g += self.grad[0] * inv;
  });
}

inline Tensor reshape(const Tensor& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.size())
    tensor_error("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
  std::vector<double> out(a.data(), a.data() + a.size());
  auto ia = a.handle();
  return make_node(std::move(new_shape), std::move(out), {a}, [ia](const TensorImpl& self) {
    if (!ia->requires_grad) return;
    ia->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) ia->grad[i] += self.grad[i];
  });
}

// Contiguous slice along one axis; gradient scatters back into the slice.
inline Tensor narrow(const Tensor& a, int axis, int start, int len) {
  const Shape& s = a.shape();
  if (axis < 0 || axis >= a.rank()) tensor_error("narrow: axis out of range");
  if (start < 0 || len <= 0 || start + len > s[static_cast<std::size_t>(axis)])
    tensor_error("narrow: slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                 ") out of bounds for axis extent " + std::to_string(s[static_cast<std::size_t>(axis)]));
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(s[static_cast<std::size_t>(i)]);
  for (int i = axis + 1; i < a.rank(); ++i) inner *= static_cast<std::size_t>(s[static_cast<std::size_t>(i)]);
  const std::size_t axis_len = static_cast<std::size_t>(s[static_cast<std::size_t>(axis)]);

  Shape out_shape = s;
  out_shape[static_cast<std::size_t>(axis)] = len;
  std::vector<double> out(outer * static_cast<std::size_t>(len) * inner);
  const double* pa = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    const double* src = pa + (o * axis_len + static_cast<std::size_t>(start)) * inner;
    double* dst = out.data() + o * static_cast<std::size_t>(len) * inner;
    std::copy(src, src + static_cast<std::size_t>(len) * inner, dst);
  }
  auto ia = a.handle();
  const std::size_t ustart = static_cast<std::size_t>(start), ulen = static_cast<std::size_t>(len);
  return make_node(std::move(out_shape), std::move(out), {a},
                   [ia, outer, inner, axis_len, ustart, ulen](const TensorImpl& self) {
                     if (!ia->requires_grad) return;
                     ia->ensure_grad();
                     for (std::size_t o = 0; o < outer; ++o) {
                       double* dst = ia->grad.data() + (o * axis_len + ustart) * inner;
                       const double* src = self.grad.data() + o * ulen * inner;
                       for (std::size_t i = 0; i < ulen * inner; ++i) dst[i] += src[i];
                     }
                   });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) tensor_error("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const int rank = parts[0].rank();
  if (axis < 0 || axis >= rank) tensor_error("concat: axis out of range");
  int total_axis = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != rank) tensor_error("concat: rank mismatch");
    for (int i = 0; i < rank; ++i)
      if (i != axis && p.shape()[static_cast<std::size_t>(i)] != s0[static_cast<std::size_t>(i)])
        tensor_error("concat: shape mismatch: " + shape_str(s0) + " vs " + shape_str(p.shape()));
    total_axis += p.shape()[static_cast<std::size_t>(axis)];
  }
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(s0[static_cast<std::size_t>(i)]);
  for (int i = axis + 1; i < rank; ++i) inner *= static_cast<std::size_t>(s0[static_cast<std::size_t>(i)]);

  Shape out_shape = s0;
  out_shape[static_cast<std::size_t>(axis)] = total_axis;
  std::vector<double> out(outer * static_cast<std::size_t>(total_axis) * inner);
  std::size_t axis_off = 0;
  for (const Tensor& p : parts) {
    const std::size_t plen = static_cast<std::size_t>(p.shape()[static_cast<std::size_t>(axis)]);
    const double* src = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      double* dst = out.data() + (o * static_cast<std::size_t>(total_axis) + axis_off) * inner;
      std::copy(src + o * plen * inner, src + (o + 1) * plen * inner, dst);
    }
    axis_off += plen;
  }

  std::vector<std::shared_ptr<TensorImpl>> impls;
  std::vector<std::size_t> lens;
  for (const Tensor& p : parts) {
    impls.push_back(p.handle());
    lens.push_back(static_cast<std::size_t>(p.shape()[static_cast<std::size_t>(axis)]));
  }
  const std::size_t utotal = static_cast<std::size_t>(total_axis);
  return make_node(std::move(out_shape), std::move(out), parts,
                   [impls, lens, outer, inner, utotal](const TensorImpl& self) {
                     std::size_t axis_off = 0;
                     for (std::size_t k = 0; k < impls.size(); ++k) {
                       const std::size_t plen = lens[k];
                       if (impls[k]->requires_grad) {
                         impls[k]->ensure_grad();
                         for (std::size_t o = 0; o < outer; ++o) {
                           const double* src = self.grad.data() + (o * utotal + axis_off) * inner;
                           double* dst = impls[k]->grad.data() + o * plen * inner;
                           for (std::size_t i = 0; i < plen * inner; ++i) dst[i] += src[i];
                         }
                       }
                       axis_off += plen;
                     }
                   });
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& a, int axis) {
  if (axis < 0 || axis >= a.rank()) tensor_error("softmax: axis out of range");
  const Shape& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(s[static_cast<std::size_t>(i)]);
  for (int i = axis + 1; i < a.rank(); ++i) inner *= static_cast<std::size_t>(s[static_cast<std::size_t>(i)]);
  const std::size_t n = static_cast<std::size_t>(s[static_cast<std::size_t>(axis)]);

  std::vector<double> out(a.size());
  const double* pa = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = pa[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, pa[base + j * inner]);
      double denom = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        double e = std::exp(pa[base + j * inner] - mx);
        out[base + j * inner] = e;
        denom += e;
      }
      const double inv = 1.0 / denom;
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] *= inv;
    }
  }
  auto ia = a.handle();
  return make_node(a.shape(), std::move(out), {a}, [ia, outer, inner, n](const TensorImpl& self) {
    if (!ia->requires_grad) return;
    ia->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += self.grad[base + j * inner] * self.data[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t k = base + j * inner;
          ia->grad[k] += self.data[k] * (self.grad[k] - dot);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    double* ci = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
inline void gemm_nt(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < n; ++j) {
      const double* bj = b + static_cast<std::size_t>(j) * k;
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[static_cast<std::size_t>(i) * n + j] += s;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
inline void gemm_tn(const double* a, const double* b, double* c, int m, int k, int n) {
  for (int p = 0; p < k; ++p) {
    const double* ap = a + static_cast<std::size_t>(p) * m;
    const double* bp = b + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const double av = ap[i];
      double* ci = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    tensor_error("matmul: expected rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                 shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    tensor_error("matmul: shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  detail::gemm_nn(a.data(), b.data(), out.data(), m, k, n);
  auto ia = a.handle();
  auto ib = b.handle();
  return make_node({m, n}, std::move(out), {a, b}, [ia, ib, m, k, n](const TensorImpl& self) {
    if (ia->requires_grad) {
      ia->ensure_grad();
      detail::gemm_nt(self.grad.data(), ib->data.data(), ia->grad.data(), m, n, k);
    }
    if (ib->requires_grad) {
      ib->ensure_grad();
      detail::gemm_tn(ia->data.data(), self.grad.data(), ib->grad.data(), k, m, n);
    }
  });
}

// ---------------------------------------------------------------------------
// Loss and metrics
// ---------------------------------------------------------------------------

// Mean cross-entropy over the batch from raw logits [B,K]; fused log-softmax
// keeps the backward to (softmax - onehot)/B.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) tensor_error("cross_entropy: logits must be [batch, classes]");
  const int b = logits.dim(0), k = logits.dim(1);
  if (static_cast<std::size_t>(b) != labels.size())
    tensor_error("cross_entropy: batch " + std::to_string(b) + " vs " +
                 std::to_string(labels.size()) + " labels");
  std::vector<double> probs(logits.size());
  const double* pl = logits.data();
  double loss = 0.0;
  for (int i = 0; i < b; ++i) {
    if (labels[static_cast<std::size_t>(i)] < 0 || labels[static_cast<std::size_t>(i)] >= k)
      tensor_error("cross_entropy: label out of range");
    const double* row = pl + static_cast<std::size_t>(i) * k;
    double* prow = probs.data() + static_cast<std::size_t>(i) * k;
    double mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < k; ++j) {
      prow[j] = std::exp(row[j] - mx);
      denom += prow[j];
    }
    for (int j = 0; j < k; ++j) prow[j] /= denom;
    loss -= std::log(std::max(prow[labels[static_cast<std::size_t>(i)]], 1e-300));
  }
  loss /= b;
  auto il = logits.handle();
  auto shared_probs = std::make_shared<std::vector<double>>(std::move(probs));
  auto shared_labels = std::make_shared<std::vector<int>>(labels);
  return make_node({1}, {loss}, {logits},
                   [il, shared_probs, shared_labels, b, k](const TensorImpl& self) {
                     if (!il->requires_grad) return;
                     il->ensure_grad();
                     const double g = self.grad[0] / b;
                     for (int i = 0; i < b; ++i) {
                       const double* prow = shared_probs->data() + static_cast<std::size_t>(i) * k;
                       double* grow = il->grad.data() + static_cast<std::size_t>(i) * k;
                       for (int j = 0; j < k; ++j) grow[j] += g * prow[j];
                       grow[(*shared_labels)[static_cast<std::size_t>(i)]] -= g;
                     }
                   });
}

inline double accuracy_top1(const Tensor& logits, const std::vector<int>& labels) {
  const int b = logits.dim(0), k = logits.dim(1);
  int hits = 0;
  for (int i = 0; i < b; ++i) {
    const double* row = logits.data() + static_cast<std::size_t>(i) * k;
    int arg = 0;
    for (int j = 1; j < k; ++j)
      if (row[j] > row[arg]) arg = j;
    if (arg == labels[static_cast<std::size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / b;
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

inline void backward(const Tensor& loss) {
  if (!loss.defined()) tensor_error("backward: undefined tensor");
  if (loss.size() != 1)
    tensor_error("backward: loss must be scalar, got shape " + shape_str(loss.shape()));

  // Reachable subgraph, then reverse insertion order.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<TensorImpl*> stack{loss.impl()};
  seen.insert(loss.impl());
  while (!stack.empty()) {
    TensorImpl* node = stack.back();
    stack.pop_back();
    order.push_back(node);
    for (const auto& p : node->parents)
      if (seen.insert(p.get()).second) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(),
            [](const TensorImpl* x, const TensorImpl* y) { return x->id > y->id; });

  loss.impl()->ensure_grad();
  loss.impl()->grad[0] += 1.0;
  for (TensorImpl* node : order)
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
}

inline bool all_finite(const Tensor& t) {
  for (double v : t.values())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace cellsearch
