#pragma once

// Tensor operations: elementwise arithmetic with numpy-style broadcasting,
// matrix products, reductions, masking, normalization, and the loss heads.
// Every op installs a backward closure via make_op_result.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "quase/error.hpp"
#include "quase/tensor.hpp"

namespace quase {

// Boolean mask companion to Tensor; broadcastable, never differentiable.
struct BoolTensor {
  std::vector<int> shape;
  std::vector<std::uint8_t> v;

  static BoolTensor full(std::vector<int> shape, bool value) {
    BoolTensor m;
    const std::size_t n = shape_numel(shape);
    m.shape = std::move(shape);
    m.v.assign(n, value ? 1 : 0);
    return m;
  }
};

namespace detail {

inline bool wants_grad(const TensorImpl& t) { return t.requires_grad || t.node != nullptr; }

inline std::vector<float>& ensure_grad(TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0f);
  return t.grad;
}

inline std::vector<std::size_t> contiguous_strides(const std::vector<int>& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    s[i] = s[i + 1] * static_cast<std::size_t>(shape[i + 1]);
  }
  return s;
}

inline std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  std::vector<int> out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const int da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const int db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast " + shape_to_string(a) + " with " + shape_to_string(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `shape` viewed through `out` (0 where the dim is broadcast).
inline std::vector<std::size_t> broadcast_strides(const std::vector<int>& shape,
                                                  const std::vector<int>& out) {
  const auto own = contiguous_strides(shape);
  std::vector<std::size_t> s(out.size(), 0);
  const std::size_t offset = out.size() - shape.size();
  for (std::size_t i = 0; i < shape.size(); ++i) {
    s[offset + i] = shape[i] == 1 && out[offset + i] != 1 ? 0 : own[i];
  }
  return s;
}

// Precomputed flat-index mapping for one broadcast operand.
struct BcastIndex {
  std::vector<std::size_t> out_strides;
  std::vector<std::size_t> in_strides;

  BcastIndex() = default;
  BcastIndex(const std::vector<int>& in_shape, const std::vector<int>& out_shape)
      : out_strides(contiguous_strides(out_shape)),
        in_strides(broadcast_strides(in_shape, out_shape)) {}

  std::size_t map(std::size_t flat) const {
    std::size_t idx = 0;
    for (std::size_t d = 0; d < out_strides.size(); ++d) {
      idx += (flat / out_strides[d]) * in_strides[d];
      flat %= out_strides[d];
    }
    return idx;
  }

  bool identity() const { return in_strides == out_strides; }
};

inline void check_mask_broadcastable(const std::vector<int>& mask_shape,
                                     const std::vector<int>& x_shape) {
  if (mask_shape.size() > x_shape.size()) {
    throw ShapeError("mask shape " + shape_to_string(mask_shape) +
                     " has higher rank than tensor " + shape_to_string(x_shape));
  }
  const std::size_t off = x_shape.size() - mask_shape.size();
  for (std::size_t i = 0; i < mask_shape.size(); ++i) {
    if (mask_shape[i] != 1 && mask_shape[i] != x_shape[off + i]) {
      throw ShapeError("mask shape " + shape_to_string(mask_shape) +
                       " not broadcastable to " + shape_to_string(x_shape));
    }
  }
}

// c[M,N] += a[M,K] b[K,N]
inline void mm_nn(const float* a, const float* b, float* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<std::size_t>(i) * k;
    float* crow = c + static_cast<std::size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const float av = arow[kk];
      const float* brow = b + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[M,N] += a[M,K] b[N,K]^T
inline void mm_nt(const float* a, const float* b, float* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<std::size_t>(i) * k;
    float* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const float* brow = b + static_cast<std::size_t>(j) * k;
      float acc = 0.0f;
      for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      crow[j] += acc;
    }
  }
}

// c[M,N] += a[K,M]^T b[K,N]
inline void mm_tn(const float* a, const float* b, float* c, int m, int k, int n) {
  for (int kk = 0; kk < k; ++kk) {
    const float* arow = a + static_cast<std::size_t>(kk) * m;
    const float* brow = b + static_cast<std::size_t>(kk) * n;
    for (int i = 0; i < m; ++i) {
      const float av = arow[i];
      float* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic

inline Tensor add(const Tensor& a, const Tensor& b) {
  const auto out_shape = detail::broadcast_shape(a.shape(), b.shape());
  const std::size_t n = shape_numel(out_shape);
  detail::BcastIndex ia(a.shape(), out_shape), ib(b.shape(), out_shape);
  std::vector<float> out(n);
  const auto& av = a.data();
  const auto& bv = b.data();
  if (ia.identity() && ib.identity()) {
    for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i];
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = av[ia.map(i)] + bv[ib.map(i)];
  }
  auto pa = a.impl();
  auto pb = b.impl();
  return make_op_result(out_shape, std::move(out), {a, b}, [pa, pb, ia, ib, n](TensorImpl& self) {
    if (detail::wants_grad(*pa)) {
      auto& g = detail::ensure_grad(*pa);
      for (std::size_t i = 0; i < n; ++i) g[ia.map(i)] += self.grad[i];
    }
    if (detail::wants_grad(*pb)) {
      auto& g = detail::ensure_grad(*pb);
      for (std::size_t i = 0; i < n; ++i) g[ib.map(i)] += self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  const auto out_shape = detail::broadcast_shape(a.shape(), b.shape());
  const std::size_t n = shape_numel(out_shape);
  detail::BcastIndex ia(a.shape(), out_shape), ib(b.shape(), out_shape);
  std::vector<float> out(n);
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[ia.map(i)] * bv[ib.map(i)];
  auto pa = a.impl();
  auto pb = b.impl();
  return make_op_result(out_shape, std::move(out), {a, b}, [pa, pb, ia, ib, n](TensorImpl& self) {
    if (detail::wants_grad(*pa)) {
      auto& g = detail::ensure_grad(*pa);
      for (std::size_t i = 0; i < n; ++i) g[ia.map(i)] += self.grad[i] * pb->data[ib.map(i)];
    }
    if (detail::wants_grad(*pb)) {
      auto& g = detail::ensure_grad(*pb);
      for (std::size_t i = 0; i < n; ++i) g[ib.map(i)] += self.grad[i] * pa->data[ia.map(i)];
    }
  });
}

inline Tensor scale(const Tensor& a, float c) {
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  auto pa = a.impl();
  return make_op_result(a.shape(), std::move(out), {a}, [pa, c](TensorImpl& self) {
    if (!detail::wants_grad(*pa)) return;
    auto& g = detail::ensure_grad(*pa);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0f)); }

// ---------------------------------------------------------------------------
// Matrix product, plain and batched (leading dims must match; a rank-2 right
// operand is shared across batches).

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul requires rank >= 2 operands, got " + shape_to_string(a.shape()) +
                     " and " + shape_to_string(b.shape()));
  }
  const int m = a.dim(a.rank() - 2);
  const int k = a.dim(a.rank() - 1);
  const int kb = b.dim(b.rank() - 2);
  const int nb = b.dim(b.rank() - 1);
  const bool shared_b = b.rank() == 2 && a.rank() > 2;
  if (k != kb) {
    throw ShapeError("matmul inner dimensions disagree: " + shape_to_string(a.shape()) + " x " +
                     shape_to_string(b.shape()));
  }
  std::vector<int> lead(a.shape().begin(), a.shape().end() - 2);
  if (!shared_b) {
    std::vector<int> lead_b(b.shape().begin(), b.shape().end() - 2);
    if (lead != lead_b) {
      throw ShapeError("matmul batch dimensions disagree: " + shape_to_string(a.shape()) + " x " +
                       shape_to_string(b.shape()));
    }
  }
  const std::size_t batches = shape_numel(lead);
  std::vector<int> out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(nb);
  std::vector<float> out(shape_numel(out_shape), 0.0f);
  const std::size_t a_step = static_cast<std::size_t>(m) * k;
  const std::size_t b_step = shared_b ? 0 : static_cast<std::size_t>(k) * nb;
  const std::size_t c_step = static_cast<std::size_t>(m) * nb;
  for (std::size_t t = 0; t < batches; ++t) {
    detail::mm_nn(a.data().data() + t * a_step, b.data().data() + t * b_step,
                  out.data() + t * c_step, m, k, nb);
  }
  auto pa = a.impl();
  auto pb = b.impl();
  return make_op_result(
      std::move(out_shape), std::move(out), {a, b},
      [pa, pb, m, k, nb, batches, a_step, b_step, c_step](TensorImpl& self) {
        if (detail::wants_grad(*pa)) {
          auto& ga = detail::ensure_grad(*pa);
          for (std::size_t t = 0; t < batches; ++t) {
            detail::mm_nt(self.grad.data() + t * c_step, pb->data.data() + t * b_step,
                          ga.data() + t * a_step, m, nb, k);
          }
        }
        if (detail::wants_grad(*pb)) {
          auto& gb = detail::ensure_grad(*pb);
          for (std::size_t t = 0; t < batches; ++t) {
            detail::mm_tn(pa->data.data() + t * a_step, self.grad.data() + t * c_step,
                          gb.data() + t * b_step, k, m, nb);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Layout ops

inline Tensor reshape(const Tensor& a, std::vector<int> shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape from " + shape_to_string(a.shape()) + " to " +
                     shape_to_string(shape) + " changes element count");
  }
  auto pa = a.impl();
  return make_op_result(std::move(shape), a.data(), {a}, [pa](TensorImpl& self) {
    if (!detail::wants_grad(*pa)) return;
    auto& g = detail::ensure_grad(*pa);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

inline Tensor transpose(const Tensor& a, int axis0, int axis1) {
  const int r = a.rank();
  if (axis0 < 0) axis0 += r;
  if (axis1 < 0) axis1 += r;
  if (axis0 < 0 || axis0 >= r || axis1 < 0 || axis1 >= r) {
    throw ShapeError("transpose axes out of range for " + shape_to_string(a.shape()));
  }
  std::vector<int> out_shape = a.shape();
  std::swap(out_shape[axis0], out_shape[axis1]);
  const auto in_strides = detail::contiguous_strides(a.shape());
  const auto out_strides = detail::contiguous_strides(out_shape);
  std::vector<std::size_t> map_strides(out_shape.size());
  for (std::size_t d = 0; d < out_shape.size(); ++d) map_strides[d] = in_strides[d];
  std::swap(map_strides[axis0], map_strides[axis1]);
  const std::size_t n = a.numel();
  std::vector<float> out(n);
  for (std::size_t o = 0; o < n; ++o) {
    std::size_t rem = o, idx = 0;
    for (std::size_t d = 0; d < out_strides.size(); ++d) {
      idx += (rem / out_strides[d]) * map_strides[d];
      rem %= out_strides[d];
    }
    out[o] = a.data()[idx];
  }
  auto pa = a.impl();
  return make_op_result(std::move(out_shape), std::move(out), {a},
                        [pa, out_strides, map_strides, n](TensorImpl& self) {
                          if (!detail::wants_grad(*pa)) return;
                          auto& g = detail::ensure_grad(*pa);
                          for (std::size_t o = 0; o < n; ++o) {
                            std::size_t rem = o, idx = 0;
                            for (std::size_t d = 0; d < out_strides.size(); ++d) {
                              idx += (rem / out_strides[d]) * map_strides[d];
                              rem %= out_strides[d];
                            }
                            g[idx] += self.grad[o];
                          }
                        });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const int r = parts[0].rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("concat axis out of range");
  std::vector<int> out_shape = parts[0].shape();
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != r) throw ShapeError("concat rank mismatch");
    for (int d = 0; d < r; ++d) {
      if (d != axis && p.dim(d) != out_shape[d]) {
        throw ShapeError("concat shape mismatch: " + shape_to_string(p.shape()) + " vs " +
                         shape_to_string(parts[0].shape()));
      }
    }
    total += p.dim(axis);
  }
  out_shape[axis] = total;

  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(out_shape[d]);
  for (int d = axis + 1; d < r; ++d) inner *= static_cast<std::size_t>(out_shape[d]);

  std::vector<float> out(shape_numel(out_shape));
  std::vector<std::size_t> part_extents;
  for (const Tensor& p : parts) part_extents.push_back(static_cast<std::size_t>(p.dim(axis)));
  const std::size_t out_row = static_cast<std::size_t>(total) * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t offset = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      const std::size_t chunk = part_extents[pi] * inner;
      const float* src = parts[pi].data().data() + o * chunk;
      std::copy(src, src + chunk, out.data() + o * out_row + offset);
      offset += chunk;
    }
  }
  std::vector<std::shared_ptr<TensorImpl>> impls;
  for (const Tensor& p : parts) impls.push_back(p.impl());
  return make_op_result(std::move(out_shape), std::move(out), parts,
                        [impls, part_extents, outer, inner, out_row](TensorImpl& self) {
                          for (std::size_t o = 0; o < outer; ++o) {
                            std::size_t offset = 0;
                            for (std::size_t pi = 0; pi < impls.size(); ++pi) {
                              const std::size_t chunk = part_extents[pi] * inner;
                              if (detail::wants_grad(*impls[pi])) {
                                auto& g = detail::ensure_grad(*impls[pi]);
                                const float* src = self.grad.data() + o * out_row + offset;
                                float* dst = g.data() + o * chunk;
                                for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
                              }
                              offset += chunk;
                            }
                          }
                        });
}

// Half-open [start, end) along one axis.
inline Tensor slice(const Tensor& a, int axis, int start, int end) {
  const int r = a.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("slice axis out of range");
  const int len = a.dim(axis);
  if (start < 0 || end > len || start >= end) {
    throw IndexError("slice range [" + std::to_string(start) + "," + std::to_string(end) +
                     ") invalid for extent " + std::to_string(len));
  }
  std::vector<int> out_shape = a.shape();
  out_shape[axis] = end - start;
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(a.dim(d));
  for (int d = axis + 1; d < r; ++d) inner *= static_cast<std::size_t>(a.dim(d));
  const std::size_t in_row = static_cast<std::size_t>(len) * inner;
  const std::size_t out_chunk = static_cast<std::size_t>(end - start) * inner;
  std::vector<float> out(shape_numel(out_shape));
  for (std::size_t o = 0; o < outer; ++o) {
    const float* src = a.data().data() + o * in_row + static_cast<std::size_t>(start) * inner;
    std::copy(src, src + out_chunk, out.data() + o * out_chunk);
  }
  auto pa = a.impl();
  return make_op_result(std::move(out_shape), std::move(out), {a},
                        [pa, outer, inner, in_row, out_chunk, start](TensorImpl& self) {
                          if (!detail::wants_grad(*pa)) return;
                          auto& g = detail::ensure_grad(*pa);
                          for (std::size_t o = 0; o < outer; ++o) {
                            float* dst = g.data() + o * in_row + static_cast<std::size_t>(start) * inner;
                            const float* src = self.grad.data() + o * out_chunk;
                            for (std::size_t i = 0; i < out_chunk; ++i) dst[i] += src[i];
                          }
                        });
}

// Row gather: out[i,:] = table[ids[i],:]. Gradient scatter-adds into the table.
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw ShapeError("embedding table must be rank 2");
  const int vocab = table.dim(0);
  const int d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || id >= vocab) {
      throw IndexError("embedding id " + std::to_string(id) + " out of range [0," +
                       std::to_string(vocab) + ")");
    }
  }
  std::vector<float> out(ids.size() * static_cast<std::size_t>(d));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const float* src = table.data().data() + static_cast<std::size_t>(ids[i]) * d;
    std::copy(src, src + d, out.data() + i * d);
  }
  auto pt = table.impl();
  auto ids_copy = ids;
  return make_op_result({static_cast<int>(ids.size()), d}, std::move(out), {table},
                        [pt, ids_copy, d](TensorImpl& self) {
                          if (!detail::wants_grad(*pt)) return;
                          auto& g = detail::ensure_grad(*pt);
                          for (std::size_t i = 0; i < ids_copy.size(); ++i) {
                            float* dst = g.data() + static_cast<std::size_t>(ids_copy[i]) * d;
                            const float* src = self.grad.data() + i * d;
                            for (int j = 0; j < d; ++j) dst[j] += src[j];
                          }
                        });
}

// ---------------------------------------------------------------------------
// Activations

namespace detail {

template <typename Fwd, typename Drv>
Tensor unary_op(const Tensor& a, Fwd fwd, Drv drv) {
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a.data()[i]);
  auto pa = a.impl();
  return make_op_result(a.shape(), std::move(out), {a}, [pa, drv](TensorImpl& self) {
    if (!detail::wants_grad(*pa)) return;
    auto& g = detail::ensure_grad(*pa);
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i] * drv(pa->data[i], self.data[i]);
    }
  });
}

}  // namespace detail

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(
      a, [](float x) { return x > 0.0f ? x : 0.0f; },
      [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; });
}

// Exact erf form.
inline Tensor gelu(const Tensor& a) {
  constexpr float kInvSqrt2 = 0.7071067811865476f;
  constexpr float kInvSqrt2Pi = 0.3989422804014327f;
  return detail::unary_op(
      a,
      [](float x) { return 0.5f * x * (1.0f + std::erf(x * kInvSqrt2)); },
      [](float x, float) {
        const float cdf = 0.5f * (1.0f + std::erf(x * kInvSqrt2));
        const float pdf = kInvSqrt2Pi * std::exp(-0.5f * x * x);
        return cdf + x * pdf;
      });
}

inline Tensor tanh_op(const Tensor& a) {
  return detail::unary_op(
      a, [](float x) { return std::tanh(x); },
      [](float, float y) { return 1.0f - y * y; });
}

inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(
      a, [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
      [](float, float y) { return y * (1.0f - y); });
}

// Inverted dropout: survivors scaled by 1/(1-p) at training time so inference
// is the identity map, bit-exact (the input handle is returned unchanged).
inline Tensor dropout(const Tensor& a, float p, bool training, Rng* rng) {
  if (p < 0.0f || p >= 1.0f) {
    throw ContractError("dropout probability must satisfy 0 <= p < 1, got " + std::to_string(p));
  }
  if (!training || p == 0.0f) return a;
  if (rng == nullptr) throw ContractError("training-mode dropout requires an rng");
  const float keep_scale = 1.0f / (1.0f - p);
  std::vector<float> gate(a.numel());
  std::vector<float> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    gate[i] = rng->next_unit() < p ? 0.0f : keep_scale;
    out[i] = a.data()[i] * gate[i];
  }
  auto pa = a.impl();
  return make_op_result(a.shape(), std::move(out), {a}, [pa, gate](TensorImpl& self) {
    if (!detail::wants_grad(*pa)) return;
    auto& g = detail::ensure_grad(*pa);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * gate[i];
  });
}

// ---------------------------------------------------------------------------
// Masked softmax / max along an axis

namespace detail {

struct AxisIter {
  std::size_t outer = 1, len = 1, inner = 1;

  AxisIter(const std::vector<int>& shape, int axis) {
    len = static_cast<std::size_t>(shape[axis]);
    for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(shape[d]);
    for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= static_cast<std::size_t>(shape[d]);
  }

  std::size_t at(std::size_t o, std::size_t t, std::size_t i) const {
    return (o * len + t) * inner + i;
  }
};

}  // namespace detail

// Softmax over `axis` restricted to unmasked entries; masked outputs are
// exactly zero. Stabilized by max subtraction over the unmasked set.
inline Tensor masked_softmax(const Tensor& x, const BoolTensor& mask, int axis) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("softmax axis out of range");
  detail::check_mask_broadcastable(mask.shape, x.shape());
  detail::BcastIndex mi(mask.shape, x.shape());
  detail::AxisIter it(x.shape(), axis);
  std::vector<float> out(x.numel(), 0.0f);
  for (std::size_t o = 0; o < it.outer; ++o) {
    for (std::size_t i = 0; i < it.inner; ++i) {
      float mx = 0.0f;
      bool any = false;
      for (std::size_t t = 0; t < it.len; ++t) {
        const std::size_t idx = it.at(o, t, i);
        if (!mask.v[mi.map(idx)]) continue;
        const float v = x.data()[idx];
        if (!any || v > mx) mx = v;
        any = true;
      }
      if (!any) throw DegenerateSliceError("masked_softmax over a fully masked slice");
      float sum = 0.0f;
      for (std::size_t t = 0; t < it.len; ++t) {
        const std::size_t idx = it.at(o, t, i);
        if (!mask.v[mi.map(idx)]) continue;
        const float e = std::exp(x.data()[idx] - mx);
        out[idx] = e;
        sum += e;
      }
      const float inv = 1.0f / sum;
      for (std::size_t t = 0; t < it.len; ++t) {
        const std::size_t idx = it.at(o, t, i);
        if (mask.v[mi.map(idx)]) out[idx] *= inv;
      }
    }
  }
  auto px = x.impl();
  auto mask_copy = mask;
  return make_op_result(x.shape(), std::move(out), {x}, [px, mask_copy, mi, it](TensorImpl& self) {
    if (!detail::wants_grad(*px)) return;
    auto& g = detail::ensure_grad(*px);
    for (std::size_t o = 0; o < it.outer; ++o) {
      for (std::size_t i = 0; i < it.inner; ++i) {
        float dot = 0.0f;
        for (std::size_t t = 0; t < it.len; ++t) {
          const std::size_t idx = it.at(o, t, i);
          if (mask_copy.v[mi.map(idx)]) dot += self.grad[idx] * self.data[idx];
        }
        for (std::size_t t = 0; t < it.len; ++t) {
          const std::size_t idx = it.at(o, t, i);
          if (mask_copy.v[mi.map(idx)]) {
            g[idx] += self.data[idx] * (self.grad[idx] - dot);
          }
        }
      }
    }
  });
}

// Max over `axis` restricted to unmasked entries; the axis is squeezed out.
// Gradient routes to the first position attaining the max.
inline Tensor masked_max(const Tensor& x, const BoolTensor& mask, int axis) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("max axis out of range");
  detail::check_mask_broadcastable(mask.shape, x.shape());
  detail::BcastIndex mi(mask.shape, x.shape());
  detail::AxisIter it(x.shape(), axis);
  std::vector<int> out_shape;
  for (int d = 0; d < r; ++d) {
    if (d != axis) out_shape.push_back(x.dim(d));
  }
  std::vector<float> out(it.outer * it.inner);
  std::vector<std::size_t> argmax(it.outer * it.inner);
  for (std::size_t o = 0; o < it.outer; ++o) {
    for (std::size_t i = 0; i < it.inner; ++i) {
      bool any = false;
      float mx = 0.0f;
      std::size_t arg = 0;
      for (std::size_t t = 0; t < it.len; ++t) {
        const std::size_t idx = it.at(o, t, i);
        if (!mask.v[mi.map(idx)]) continue;
        const float v = x.data()[idx];
        if (!any || v > mx) {
          mx = v;
          arg = idx;
        }
        any = true;
      }
      if (!any) throw DegenerateSliceError("masked_max over a fully masked slice");
      out[o * it.inner + i] = mx;
      argmax[o * it.inner + i] = arg;
    }
  }
  auto px = x.impl();
  return make_op_result(std::move(out_shape), std::move(out), {x},
                        [px, argmax](TensorImpl& self) {
                          if (!detail::wants_grad(*px)) return;
                          auto& g = detail::ensure_grad(*px);
                          for (std::size_t i = 0; i < argmax.size(); ++i) {
                            g[argmax[i]] += self.grad[i];
                          }
                        });
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis, with affine gain/bias.

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm requires rank >= 1");
  if (eps <= 0.0f) throw ContractError("layer_norm eps must be positive");
  const int d = x.dim(x.rank() - 1);
  if (gain.shape() != std::vector<int>{d} || bias.shape() != std::vector<int>{d}) {
    throw ShapeError("layer_norm gain/bias must have shape [" + std::to_string(d) + "]");
  }
  const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
  std::vector<float> out(x.numel());
  std::vector<float> means(rows), rstds(rows);
  for (std::size_t rix = 0; rix < rows; ++rix) {
    const float* row = x.data().data() + rix * d;
    float mean = 0.0f;
    for (int j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<float>(d);
    float var = 0.0f;
    for (int j = 0; j < d; ++j) {
      const float c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<float>(d);
    const float rstd = 1.0f / std::sqrt(var + eps);
    means[rix] = mean;
    rstds[rix] = rstd;
    float* orow = out.data() + rix * d;
    for (int j = 0; j < d; ++j) {
      orow[j] = (row[j] - mean) * rstd * gain.data()[j] + bias.data()[j];
    }
  }
  auto px = x.impl();
  auto pg = gain.impl();
  auto pb = bias.impl();
  return make_op_result(
      x.shape(), std::move(out), {x, gain, bias},
      [px, pg, pb, means, rstds, d, rows](TensorImpl& self) {
        const bool want_x = detail::wants_grad(*px);
        const bool want_g = detail::wants_grad(*pg);
        const bool want_b = detail::wants_grad(*pb);
        if (want_g) detail::ensure_grad(*pg);
        if (want_b) detail::ensure_grad(*pb);
        if (want_x) detail::ensure_grad(*px);
        for (std::size_t rix = 0; rix < rows; ++rix) {
          const float* row = px->data.data() + rix * d;
          const float* gy = self.grad.data() + rix * d;
          const float mean = means[rix];
          const float rstd = rstds[rix];
          float m1 = 0.0f, m2 = 0.0f;
          for (int j = 0; j < d; ++j) {
            const float xhat = (row[j] - mean) * rstd;
            const float dxhat = gy[j] * pg->data[j];
            m1 += dxhat;
            m2 += dxhat * xhat;
            if (want_g) pg->grad[j] += gy[j] * xhat;
            if (want_b) pb->grad[j] += gy[j];
          }
          if (!want_x) continue;
          m1 /= static_cast<float>(d);
          m2 /= static_cast<float>(d);
          float* gx = px->grad.data() + rix * d;
          for (int j = 0; j < d; ++j) {
            const float xhat = (row[j] - mean) * rstd;
            const float dxhat = gy[j] * pg->data[j];
            gx[j] += rstd * (dxhat - m1 - xhat * m2);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Pooling over the time axis (the second-to-last), ignoring masked positions.

namespace detail {

inline void check_pool_shapes(const Tensor& x, const BoolTensor& mask, std::size_t& batch,
                              std::size_t& steps, std::size_t& width) {
  if (x.rank() != 2 && x.rank() != 3) {
    throw ShapeError("pooling expects [T,d] or [B,T,d], got " + shape_to_string(x.shape()));
  }
  const bool batched = x.rank() == 3;
  batch = batched ? static_cast<std::size_t>(x.dim(0)) : 1;
  steps = static_cast<std::size_t>(x.dim(batched ? 1 : 0));
  width = static_cast<std::size_t>(x.dim(batched ? 2 : 1));
  std::vector<int> want = batched ? std::vector<int>{x.dim(0), x.dim(1)} : std::vector<int>{x.dim(0)};
  if (mask.shape != want) {
    throw ShapeError("pooling mask shape " + shape_to_string(mask.shape) + " must be " +
                     shape_to_string(want));
  }
}

}  // namespace detail

inline Tensor mean_pool_over_time(const Tensor& x, const BoolTensor& mask) {
  std::size_t batch, steps, width;
  detail::check_pool_shapes(x, mask, batch, steps, width);
  std::vector<int> out_shape = x.rank() == 3
                                   ? std::vector<int>{x.dim(0), x.dim(2)}
                                   : std::vector<int>{x.dim(1)};
  std::vector<float> out(batch * width, 0.0f);
  std::vector<float> inv_counts(batch, 0.0f);
  for (std::size_t b = 0; b < batch; ++b) {
    std::size_t count = 0;
    for (std::size_t t = 0; t < steps; ++t) {
      if (!mask.v[b * steps + t]) continue;
      ++count;
      const float* row = x.data().data() + (b * steps + t) * width;
      for (std::size_t j = 0; j < width; ++j) out[b * width + j] += row[j];
    }
    if (count == 0) throw DegenerateSliceError("mean_pool_over_time with no unmasked positions");
    inv_counts[b] = 1.0f / static_cast<float>(count);
    for (std::size_t j = 0; j < width; ++j) out[b * width + j] *= inv_counts[b];
  }
  auto px = x.impl();
  auto mask_copy = mask;
  return make_op_result(std::move(out_shape), std::move(out), {x},
                        [px, mask_copy, inv_counts, batch, steps, width](TensorImpl& self) {
                          if (!detail::wants_grad(*px)) return;
                          auto& g = detail::ensure_grad(*px);
                          for (std::size_t b = 0; b < batch; ++b) {
                            for (std::size_t t = 0; t < steps; ++t) {
                              if (!mask_copy.v[b * steps + t]) continue;
                              float* dst = g.data() + (b * steps + t) * width;
                              const float* src = self.grad.data() + b * width;
                              for (std::size_t j = 0; j < width; ++j) {
                                dst[j] += src[j] * inv_counts[b];
                              }
                            }
                          }
                        });
}

inline Tensor max_pool_over_time(const Tensor& x, const BoolTensor& mask) {
  std::size_t batch, steps, width;
  detail::check_pool_shapes(x, mask, batch, steps, width);
  std::vector<int> out_shape = x.rank() == 3
                                   ? std::vector<int>{x.dim(0), x.dim(2)}
                                   : std::vector<int>{x.dim(1)};
  std::vector<float> out(batch * width);
  std::vector<std::size_t> argmax(batch * width);
  for (std::size_t b = 0; b < batch; ++b) {
    bool any = false;
    for (std::size_t t = 0; t < steps; ++t) {
      if (!mask.v[b * steps + t]) continue;
      const float* row = x.data().data() + (b * steps + t) * width;
      for (std::size_t j = 0; j < width; ++j) {
        if (!any || row[j] > out[b * width + j]) {
          out[b * width + j] = row[j];
          argmax[b * width + j] = (b * steps + t) * width + j;
        }
      }
      any = true;
    }
    if (!any) throw DegenerateSliceError("max_pool_over_time with no unmasked positions");
  }
  auto px = x.impl();
  return make_op_result(std::move(out_shape), std::move(out), {x},
                        [px, argmax](TensorImpl& self) {
                          if (!detail::wants_grad(*px)) return;
                          auto& g = detail::ensure_grad(*px);
                          for (std::size_t i = 0; i < argmax.size(); ++i) {
                            g[argmax[i]] += self.grad[i];
                          }
                        });
}

// ---------------------------------------------------------------------------
// Reductions and losses

inline Tensor sum(const Tensor& a) {
  float s = 0.0f;
  for (float v : a.data()) s += v;
  auto pa = a.impl();
  return make_op_result({}, {s}, {a}, [pa](TensorImpl& self) {
    if (!detail::wants_grad(*pa)) return;
    auto& g = detail::ensure_grad(*pa);
    for (float& v : g) v += self.grad[0];
  });
}

inline Tensor mean_all(const Tensor& a) {
  if (a.numel() == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(a), 1.0f / static_cast<float>(a.numel()));
}

// -log softmax(logits)[target] restricted to unmasked classes.
inline Tensor masked_cross_entropy(const Tensor& logits, const BoolTensor& mask, int target) {
  if (logits.rank() != 1) {
    throw ShapeError("cross_entropy expects rank-1 logits, got " + shape_to_string(logits.shape()));
  }
  const int n = logits.dim(0);
  if (target < 0 || target >= n) {
    throw IndexError("cross_entropy target " + std::to_string(target) + " out of range [0," +
                     std::to_string(n) + ")");
  }
  if (mask.shape != std::vector<int>{n}) {
    throw ShapeError("cross_entropy mask must match logits shape");
  }
  if (!mask.v[static_cast<std::size_t>(target)]) {
    throw ContractError("cross_entropy target sits at a masked position");
  }
  float mx = 0.0f;
  bool any = false;
  for (int i = 0; i < n; ++i) {
    if (!mask.v[i]) continue;
    if (!any || logits.data()[i] > mx) mx = logits.data()[i];
    any = true;
  }
  if (!any) throw DegenerateSliceError("cross_entropy over fully masked logits");
  float sum_exp = 0.0f;
  for (int i = 0; i < n; ++i) {
    if (mask.v[i]) sum_exp += std::exp(logits.data()[i] - mx);
  }
  const float loss = std::log(sum_exp) - (logits.data()[target] - mx);
  auto pl = logits.impl();
  auto mask_copy = mask;
  return make_op_result({}, {loss}, {logits}, [pl, mask_copy, target, mx, sum_exp, n](TensorImpl& self) {
    if (!detail::wants_grad(*pl)) return;
    auto& g = detail::ensure_grad(*pl);
    const float gy = self.grad[0];
    for (int i = 0; i < n; ++i) {
      if (!mask_copy.v[i]) continue;
      const float p = std::exp(pl->data[i] - mx) / sum_exp;
      g[i] += gy * (p - (i == target ? 1.0f : 0.0f));
    }
  });
}

inline Tensor cross_entropy(const Tensor& logits, int target) {
  if (logits.rank() != 1) {
    throw ShapeError("cross_entropy expects rank-1 logits, got " + shape_to_string(logits.shape()));
  }
  return masked_cross_entropy(logits, BoolTensor::full({logits.dim(0)}, true), target);
}

// ---------------------------------------------------------------------------
// Affine helper: y = x W + b over the last axis.

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2) throw ShapeError("linear weight must be rank 2");
  const int in = w.dim(0);
  const int out = w.dim(1);
  if (x.dim(x.rank() - 1) != in) {
    throw ShapeError("linear input width " + std::to_string(x.dim(x.rank() - 1)) +
                     " does not match weight " + shape_to_string(w.shape()));
  }
  Tensor y;
  if (x.rank() == 2) {
    y = matmul(x, w);
  } else {
    std::vector<int> flat{static_cast<int>(x.numel() / static_cast<std::size_t>(in)), in};
    std::vector<int> back = x.shape();
    back.back() = out;
    y = reshape(matmul(reshape(x, flat), w), back);
  }
  if (b.defined()) {
    if (b.shape() != std::vector<int>{out}) throw ShapeError("linear bias must have shape [out]");
    y = add(y, b);
  }
  return y;
}

}  // namespace quase
